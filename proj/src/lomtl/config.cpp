#include "evalkit/lomtl/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "evalkit/errors.hpp"
#include "evalkit/text.hpp"

namespace evalkit::lomtl {

namespace {

int to_int(const std::string& key, const std::string& v) {
  int out = 0;
  const auto* end = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) {
    throw ConfigError(fmt::format("{}: expected an integer, got '{}'", key, v));
  }
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError(fmt::format("{}: expected a number, got '{}'", key, v));
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  const std::string l = to_lower(v);
  if (l == "true" || l == "1" || l == "yes" || l == "enabled" || l == "on") return true;
  if (l == "false" || l == "0" || l == "no" || l == "disabled" || l == "off") return false;
  throw ConfigError(fmt::format("{}: expected a boolean, got '{}'", key, v));
}

std::string fmt_double(double v) { return fmt::format("{}", v); }

std::vector<std::string> to_list(const std::string& v) {
  std::vector<std::string> out;
  for (const auto& part : split(v, ',')) {
    auto t = trim(part);
    if (!t.empty()) out.emplace_back(t);
  }
  return out;
}

struct Field {
  std::string key;
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
  bool hashed;
};

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    const auto int_field = [&f](std::string key, int TrainConfig::*m, bool hashed = true) {
      f.push_back({key,
                   [key, m](TrainConfig& c, const std::string& v) { c.*m = to_int(key, v); },
                   [m](const TrainConfig& c) { return std::to_string(c.*m); }, hashed});
    };
    const auto dbl_field = [&f](std::string key, double TrainConfig::*m, bool hashed = true) {
      f.push_back({key,
                   [key, m](TrainConfig& c, const std::string& v) { c.*m = to_double(key, v); },
                   [m](const TrainConfig& c) { return fmt_double(c.*m); }, hashed});
    };
    const auto bool_field = [&f](std::string key, bool TrainConfig::*m, bool hashed = true) {
      f.push_back({key,
                   [key, m](TrainConfig& c, const std::string& v) { c.*m = to_bool(key, v); },
                   [m](const TrainConfig& c) { return std::string(c.*m ? "true" : "false"); },
                   hashed});
    };
    const auto str_field = [&f](std::string key, std::string TrainConfig::*m, bool hashed) {
      f.push_back({key, [m](TrainConfig& c, const std::string& v) { c.*m = v; },
                   [m](const TrainConfig& c) { return c.*m; }, hashed});
    };

    str_field("MODEL_NAME", &TrainConfig::base_model_id, true);
    f.push_back({"DIMENSIONS",
                 [](TrainConfig& c, const std::string& v) {
                   c.dimensions.clear();
                   for (const auto& name : to_list(v)) {
                     const auto d = parse_dimension(name);
                     if (!d) throw ConfigError(fmt::format("DIMENSIONS: unknown '{}'", name));
                     if (std::find(c.dimensions.begin(), c.dimensions.end(), *d) !=
                         c.dimensions.end()) {
                       throw ConfigError(fmt::format("DIMENSIONS: '{}' listed twice", name));
                     }
                     c.dimensions.push_back(*d);
                   }
                 },
                 [](const TrainConfig& c) {
                   std::vector<std::string> names;
                   for (auto d : c.dimensions) names.emplace_back(dimension_config_name(d));
                   return join(names, ",");
                 },
                 true});
    int_field("MAX_LENGTH", &TrainConfig::max_length);
    bool_field("include_label_definitions", &TrainConfig::include_label_definitions);
    bool_field("INCLUDE_GROUND_TRUTH", &TrainConfig::include_ground_truth);
    int_field("BATCH_SIZE", &TrainConfig::batch_size);
    int_field("GRAD_ACCUM", &TrainConfig::grad_accum);
    int_field("EPOCHS", &TrainConfig::epochs);
    dbl_field("LEARNING_RATE", &TrainConfig::learning_rate);
    dbl_field("WEIGHT_DECAY", &TrainConfig::weight_decay);
    int_field("LOGGING_STEPS", &TrainConfig::logging_steps);
    int_field("SAVE_STEPS", &TrainConfig::save_steps);
    int_field("EVAL_STEPS", &TrainConfig::eval_steps);
    f.push_back({"OVERSAMPLE_METHOD",
                 [](TrainConfig& c, const std::string& v) {
                   const std::string l = to_lower(v);
                   if (l == "random") {
                     c.oversample_method = OversampleMethod::random;
                   } else if (l == "none") {
                     c.oversample_method = OversampleMethod::none;
                   } else {
                     throw ConfigError(fmt::format("OVERSAMPLE_METHOD: unknown '{}'", v));
                   }
                 },
                 [](const TrainConfig& c) {
                   return std::string(c.oversample_method == OversampleMethod::random ? "random"
                                                                                      : "none");
                 },
                 true});
    str_field("METRIC_FOR_BEST", &TrainConfig::metric_for_best, true);
    int_field("LORA_R", &TrainConfig::lora_r);
    int_field("LORA_ALPHA", &TrainConfig::lora_alpha);
    dbl_field("LORA_DROPOUT", &TrainConfig::lora_dropout);
    int_field("EARLY_PATIENCE", &TrainConfig::early_patience);
    dbl_field("EARLY_THRESHOLD", &TrainConfig::early_threshold);
    f.push_back({"SEED",
                 [](TrainConfig& c, const std::string& v) {
                   std::uint64_t out = 0;
                   const auto* end = v.data() + v.size();
                   auto [ptr, ec] = std::from_chars(v.data(), end, out);
                   if (ec != std::errc() || ptr != end) {
                     throw ConfigError(fmt::format("SEED: expected an integer, got '{}'", v));
                   }
                   c.seed = out;
                 },
                 [](const TrainConfig& c) { return std::to_string(c.seed); }, true});
    f.push_back({"LORA_TARGETS",
                 [](TrainConfig& c, const std::string& v) { c.lora_targets = to_list(v); },
                 [](const TrainConfig& c) { return join(c.lora_targets, ","); }, true});
    f.push_back({"LR_SCHEDULER",
                 [](TrainConfig& c, const std::string& v) {
                   const std::string l = to_lower(v);
                   if (l == "linear") {
                     c.lr_schedule = LrSchedule::linear;
                   } else if (l == "constant") {
                     c.lr_schedule = LrSchedule::constant;
                   } else {
                     throw ConfigError(fmt::format("LR_SCHEDULER: unknown '{}'", v));
                   }
                 },
                 [](const TrainConfig& c) {
                   return std::string(c.lr_schedule == LrSchedule::linear ? "linear" : "constant");
                 },
                 true});
    dbl_field("MAX_GRAD_NORM", &TrainConfig::max_grad_norm);
    dbl_field("TRAIN_RATIO", &TrainConfig::train_ratio);
    dbl_field("TEMPERATURE", &TrainConfig::temperature, false);
    bool_field("DO_SAMPLE", &TrainConfig::do_sample, false);
    int_field("MAX_NEW_TOKENS", &TrainConfig::max_new_tokens, false);
    str_field("TRAIN_FILE", &TrainConfig::train_file, false);
    str_field("VAL_FILE", &TrainConfig::val_file, false);
    str_field("OUTPUT_DIR", &TrainConfig::output_dir, false);
    str_field("PROMPT_TEMPLATE", &TrainConfig::prompt_template, false);
    return f;
  }();
  return table;
}

const Field* find_field(const std::string& key) {
  for (const auto& f : fields()) {
    if (f.key == key) return &f;
  }
  // Keys are matched case-insensitively as a convenience.
  for (const auto& f : fields()) {
    if (to_lower(f.key) == to_lower(key)) return &f;
  }
  return nullptr;
}

}  // namespace

void TrainConfig::validate() const {
  const auto positive = [](const char* key, long v) {
    if (v <= 0) throw ConfigError(fmt::format("{} must be positive, got {}", key, v));
  };
  if (trim(base_model_id).empty()) throw ConfigError("MODEL_NAME must not be empty");
  if (dimensions.empty()) throw ConfigError("DIMENSIONS must name at least one dimension");
  positive("MAX_LENGTH", max_length);
  if (max_length <= kAnswerReserve) {
    throw ConfigError(fmt::format("MAX_LENGTH must exceed {}", kAnswerReserve));
  }
  positive("BATCH_SIZE", batch_size);
  positive("GRAD_ACCUM", grad_accum);
  positive("EPOCHS", epochs);
  positive("LOGGING_STEPS", logging_steps);
  positive("SAVE_STEPS", save_steps);
  positive("EVAL_STEPS", eval_steps);
  positive("LORA_R", lora_r);
  positive("LORA_ALPHA", lora_alpha);
  positive("EARLY_PATIENCE", early_patience);
  positive("MAX_NEW_TOKENS", max_new_tokens);
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("LEARNING_RATE must be a finite non-negative number");
  }
  if (!(weight_decay >= 0.0)) throw ConfigError("WEIGHT_DECAY must be non-negative");
  if (!(lora_dropout >= 0.0 && lora_dropout < 1.0)) {
    throw ConfigError("LORA_DROPOUT must lie in [0, 1)");
  }
  if (!(early_threshold >= 0.0)) throw ConfigError("EARLY_THRESHOLD must be non-negative");
  if (metric_for_best != "eval_loss") {
    throw ConfigError(fmt::format("METRIC_FOR_BEST: only 'eval_loss' is supported, got '{}'",
                                  metric_for_best));
  }
  if (!(train_ratio > 0.0 && train_ratio < 1.0)) {
    throw ConfigError("TRAIN_RATIO must lie in (0, 1)");
  }
  if (!(temperature >= 0.0)) throw ConfigError("TEMPERATURE must be non-negative");
  if (!(max_grad_norm >= 0.0)) throw ConfigError("MAX_GRAD_NORM must be non-negative");
  static const std::set<std::string> known = {"q", "k", "v", "o", "up", "down", "head"};
  if (lora_targets.empty()) throw ConfigError("LORA_TARGETS must not be empty");
  for (const auto& t : lora_targets) {
    if (!known.count(t)) {
      throw ConfigError(fmt::format("LORA_TARGETS: unknown target '{}' (expected q, k, v, o, "
                                    "up, down, head)",
                                    t));
    }
  }
}

std::string TrainConfig::to_text() const {
  std::vector<std::string> lines;
  for (const auto& f : fields()) lines.push_back(f.key + "=" + f.get(*this));
  std::sort(lines.begin(), lines.end());
  return join(lines, "\n") + "\n";
}

std::string TrainConfig::hash() const {
  std::vector<std::string> lines;
  for (const auto& f : fields()) {
    if (f.hashed) lines.push_back(f.key + "=" + f.get(*this));
  }
  std::sort(lines.begin(), lines.end());
  return sha256_hex(join(lines, "\n"));
}

void TrainConfig::set(const std::string& key, const std::string& value) {
  const Field* f = find_field(key);
  if (!f) throw ConfigError(fmt::format("unknown config key '{}'", key));
  std::string v(trim(value));
  if (v.size() >= 2 && ((v.front() == '"' && v.back() == '"') ||
                        (v.front() == '\'' && v.back() == '\''))) {
    v = v.substr(1, v.size() - 2);
  }
  f->set(*this, v);
}

TrainConfig TrainConfig::parse(const std::string& text) {
  TrainConfig cfg;
  int line_no = 0;
  for (const auto& raw : split(text, '\n')) {
    ++line_no;
    const auto line = trim(raw);
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError(fmt::format("line {}: expected KEY=VALUE", line_no));
    }
    const std::string key(trim(line.substr(0, eq)));
    try {
      cfg.set(key, std::string(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(fmt::format("line {}: {}", line_no, e.what()));
    }
  }
  return cfg;
}

TrainConfig TrainConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(fmt::format("cannot open config file '{}'", path.string()));
  std::stringstream buf;
  buf << in.rdbuf();
  return parse(buf.str());
}

const std::vector<std::string>& TrainConfig::keys() {
  static const std::vector<std::string> k = [] {
    std::vector<std::string> out;
    for (const auto& f : fields()) out.push_back(f.key);
    return out;
  }();
  return k;
}

}  // namespace evalkit::lomtl
