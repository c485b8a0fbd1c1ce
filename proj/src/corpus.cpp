#include "evalkit/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_set>

#include <fmt/format.h>

#include "evalkit/errors.hpp"
#include "evalkit/rng.hpp"
#include "evalkit/text.hpp"

namespace evalkit {

using nlohmann::ordered_json;

std::string_view speaker_name(Speaker s) noexcept {
  return s == Speaker::tutor ? "tutor" : "student";
}

std::string_view split_name(SplitName s) noexcept {
  switch (s) {
    case SplitName::dev: return "dev";
    case SplitName::test: return "test";
    case SplitName::train: return "train";
    case SplitName::val: return "val";
    case SplitName::demo: return "demo";
  }
  return "dev";
}

std::optional<SplitName> parse_split_name(std::string_view s) {
  const std::string key = to_lower(trim(s));
  for (SplitName n : {SplitName::dev, SplitName::test, SplitName::train,
                      SplitName::val, SplitName::demo}) {
    if (key == split_name(n)) return n;
  }
  return std::nullopt;
}

const ResponseRecord* Dialogue::find_response(std::string_view tutor_id) const {
  auto it = std::find_if(responses.begin(), responses.end(),
                         [&](const auto& r) { return r.tutor_id == tutor_id; });
  return it == responses.end() ? nullptr : &*it;
}

const ResponseRecord& Dialogue::response(std::string_view tutor_id) const {
  if (const auto* r = find_response(tutor_id)) return *r;
  throw LookupError(
      fmt::format("dialogue '{}' has no response from tutor '{}'", id, tutor_id));
}

std::size_t DatasetSplit::response_count() const {
  std::size_t n = 0;
  for (const auto& d : dialogues) n += d.responses.size();
  return n;
}

const Dialogue* DatasetSplit::find(std::string_view id) const {
  auto it = std::find_if(dialogues.begin(), dialogues.end(),
                         [&](const auto& d) { return d.id == id; });
  return it == dialogues.end() ? nullptr : &*it;
}

const Dialogue& DatasetSplit::at(std::string_view id) const {
  if (const auto* d = find(id)) return *d;
  throw NotFoundError(fmt::format("unknown dialogue '{}'", id));
}

std::vector<std::string> DatasetSplit::tutors() const {
  std::vector<std::string> out;
  std::unordered_set<std::string> seen;
  for (const auto& d : dialogues) {
    for (const auto& r : d.responses) {
      if (seen.insert(r.tutor_id).second) out.push_back(r.tutor_id);
    }
  }
  return out;
}

std::vector<std::string> DatasetSplit::topics() const {
  std::vector<std::string> out;
  std::unordered_set<std::string> seen;
  for (const auto& d : dialogues) {
    if (seen.insert(d.topic).second) out.push_back(d.topic);
  }
  return out;
}

void validate(const Dialogue& d) {
  const auto fail = [&](const std::string& what) {
    throw ValidationError(fmt::format("dialogue '{}': {}", d.id, what));
  };
  if (trim(d.id).empty()) fail("empty id");
  if (d.history.empty()) fail("history is empty");
  for (std::size_t i = 0; i < d.history.size(); ++i) {
    if (trim(d.history[i].text).empty()) {
      fail(fmt::format("history turn {} has empty text", i));
    }
  }
  if (d.history.back().speaker != Speaker::student) {
    fail("last history turn must be a student turn");
  }
  if (d.responses.empty()) fail("no tutor responses");
  std::set<std::string> tutors;
  for (const auto& r : d.responses) {
    if (trim(r.tutor_id).empty()) fail("response with empty tutor id");
    if (!tutors.insert(r.tutor_id).second) {
      fail(fmt::format("duplicate response from tutor '{}'", r.tutor_id));
    }
    if (trim(r.text).empty()) {
      fail(fmt::format("response from tutor '{}' is empty", r.tutor_id));
    }
  }
}

void validate(const DatasetSplit& split) {
  std::unordered_set<std::string> ids;
  for (const auto& d : split.dialogues) {
    validate(d);
    if (!ids.insert(d.id).second) {
      throw ValidationError(fmt::format("dialogue '{}': duplicate id", d.id));
    }
  }
}

namespace {

std::string describe_record(std::size_t index, const ordered_json& rec) {
  if (rec.is_object() && rec.contains("id") && rec["id"].is_string()) {
    return fmt::format("dialogues[{}] (id '{}')", index,
                       rec["id"].get<std::string>());
  }
  return fmt::format("dialogues[{}]", index);
}

const ordered_json& require_field(const ordered_json& obj, const char* key,
                                  const std::string& where) {
  if (!obj.is_object() || !obj.contains(key)) {
    throw SchemaError(fmt::format("{}: missing field '{}'", where, key));
  }
  return obj[key];
}

std::string require_string(const ordered_json& obj, const char* key,
                           const std::string& where) {
  const auto& v = require_field(obj, key, where);
  if (!v.is_string()) {
    throw SchemaError(fmt::format("{}: field '{}' must be a string", where, key));
  }
  return v.get<std::string>();
}

Dialogue dialogue_from_json(const ordered_json& rec, const std::string& where) {
  if (!rec.is_object()) throw SchemaError(where + ": record must be an object");
  Dialogue d;
  d.id = require_string(rec, "id", where);
  d.topic = rec.contains("topic") ? require_string(rec, "topic", where) : "";
  if (rec.contains("ground_truth") && !rec["ground_truth"].is_null()) {
    d.ground_truth = require_string(rec, "ground_truth", where);
  }

  const auto& history = require_field(rec, "history", where);
  if (!history.is_array()) throw SchemaError(where + ": 'history' must be an array");
  for (std::size_t i = 0; i < history.size(); ++i) {
    const std::string turn_where = fmt::format("{}.history[{}]", where, i);
    const std::string speaker = to_lower(require_string(history[i], "speaker", turn_where));
    Turn t;
    if (speaker == "tutor") {
      t.speaker = Speaker::tutor;
    } else if (speaker == "student") {
      t.speaker = Speaker::student;
    } else {
      throw SchemaError(fmt::format("{}: unknown speaker '{}'", turn_where, speaker));
    }
    t.text = require_string(history[i], "text", turn_where);
    d.history.push_back(std::move(t));
  }

  const auto& responses = require_field(rec, "responses", where);
  if (!responses.is_object()) {
    throw SchemaError(where + ": 'responses' must be an object keyed by tutor id");
  }
  for (const auto& [tutor, body] : responses.items()) {
    const std::string resp_where = fmt::format("{}.responses['{}']", where, tutor);
    ResponseRecord r;
    r.tutor_id = tutor;
    r.text = require_string(body, "text", resp_where);
    if (body.contains("annotations") && !body["annotations"].is_null()) {
      const auto& ann = body["annotations"];
      if (!ann.is_object()) {
        throw SchemaError(resp_where + ": 'annotations' must be an object");
      }
      for (const auto& [dim_name, label_json] : ann.items()) {
        const auto dim = parse_dimension(dim_name);
        if (!dim) {
          throw SchemaError(fmt::format("{}: unknown dimension '{}'", resp_where, dim_name));
        }
        if (!label_json.is_string()) {
          throw SchemaError(fmt::format("{}: label for '{}' must be a string",
                                        resp_where, dim_name));
        }
        const auto label = parse_label(label_json.get<std::string>());
        if (!label) {
          throw SchemaError(fmt::format("{}: label '{}' for '{}' is not one of "
                                        "Yes / To some extent / No",
                                        resp_where, label_json.get<std::string>(),
                                        dim_name));
        }
        r.gold[*dim] = *label;
      }
    }
    d.responses.push_back(std::move(r));
  }
  return d;
}

}  // namespace

DatasetSplit split_from_json(const ordered_json& doc,
                             std::optional<SplitName> expected) {
  if (!doc.is_object()) throw SchemaError("split document must be a JSON object");
  if (!doc.contains("format_version") || !doc["format_version"].is_number_integer()) {
    throw SchemaError("missing integer field 'format_version'");
  }
  if (doc["format_version"].get<int>() != kDatasetFormatVersion) {
    throw SchemaError(fmt::format("unsupported format_version {}",
                                  doc["format_version"].dump()));
  }
  DatasetSplit split;
  if (expected) split.name = *expected;
  if (doc.contains("split")) {
    if (!doc["split"].is_string()) throw SchemaError("'split' must be a string");
    const auto name = parse_split_name(doc["split"].get<std::string>());
    if (!name) {
      throw SchemaError(fmt::format("unknown split name '{}'",
                                    doc["split"].get<std::string>()));
    }
    if (expected && *name != *expected) {
      throw SchemaError(fmt::format("file holds split '{}', expected '{}'",
                                    split_name(*name), split_name(*expected)));
    }
    split.name = *name;
  }
  if (!doc.contains("dialogues") || !doc["dialogues"].is_array()) {
    throw SchemaError("missing array field 'dialogues'");
  }
  const auto& records = doc["dialogues"];
  split.dialogues.reserve(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    split.dialogues.push_back(
        dialogue_from_json(records[i], describe_record(i, records[i])));
  }
  validate(split);
  return split;
}

ordered_json dialogue_to_json(const Dialogue& d) {
  ordered_json rec;
  rec["id"] = d.id;
  rec["topic"] = d.topic;
  rec["history"] = ordered_json::array();
  for (const auto& t : d.history) {
    rec["history"].push_back({{"speaker", speaker_name(t.speaker)}, {"text", t.text}});
  }
  rec["ground_truth"] = d.ground_truth;
  rec["responses"] = ordered_json::object();
  for (const auto& r : d.responses) {
    ordered_json body;
    body["text"] = r.text;
    if (!r.gold.empty()) {
      ordered_json ann = ordered_json::object();
      for (const auto& [dim, label] : r.gold) {
        ann[std::string(dimension_config_name(dim))] = label_name(label);
      }
      body["annotations"] = std::move(ann);
    }
    rec["responses"][r.tutor_id] = std::move(body);
  }
  return rec;
}

ordered_json split_to_json(const DatasetSplit& split) {
  ordered_json doc;
  doc["format_version"] = kDatasetFormatVersion;
  doc["split"] = split_name(split.name);
  doc["dialogues"] = ordered_json::array();
  for (const auto& d : split.dialogues) doc["dialogues"].push_back(dialogue_to_json(d));
  return doc;
}

DatasetSplit load_dataset(const std::filesystem::path& path, std::optional<SplitName> name) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw EnvironmentError(fmt::format("cannot open dataset file '{}'", path.string()));
  }
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string content = buf.str();
  if (trim(content).empty()) {
    throw SchemaError(fmt::format("dataset file '{}' is empty", path.string()));
  }
  ordered_json doc;
  try {
    doc = ordered_json::parse(content);
  } catch (const nlohmann::json::parse_error& e) {
    throw SchemaError(fmt::format("'{}' is not valid JSON: {}", path.string(), e.what()));
  }
  return split_from_json(doc, name);
}

void save_dataset(const DatasetSplit& split, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw StorageError(fmt::format("cannot write dataset file '{}'", path.string()));
  }
  out << split_to_json(split).dump(2) << '\n';
  if (!out) throw StorageError(fmt::format("write to '{}' failed", path.string()));
}

TrainValSplit split_train_val(const DatasetSplit& dev, double ratio,
                              std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) {
    throw ArgumentError(fmt::format("train ratio must be in (0, 1), got {}", ratio));
  }
  if (dev.dialogues.empty()) throw ArgumentError("cannot split an empty dev set");

  const std::size_t n = dev.dialogues.size();
  const auto n_train = static_cast<std::size_t>(
      std::llround(ratio * static_cast<double>(n)));

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);

  std::vector<bool> in_train(n, false);
  for (std::size_t i = 0; i < n_train; ++i) in_train[order[i]] = true;

  TrainValSplit out;
  out.train.name = SplitName::train;
  out.val.name = SplitName::val;
  for (std::size_t i = 0; i < n; ++i) {
    (in_train[i] ? out.train : out.val).dialogues.push_back(dev.dialogues[i]);
  }
  return out;
}

DatasetSplit select_demo_subset(const DatasetSplit& test, std::size_t n,
                                std::uint64_t seed) {
  if (n > test.dialogues.size()) {
    throw ArgumentError(fmt::format("demo size {} exceeds test split size {}", n,
                                    test.dialogues.size()));
  }
  std::vector<std::size_t> order(test.dialogues.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  // Partial Fisher-Yates: the first n slots are a uniform sample.
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.below(order.size() - i));
    std::swap(order[i], order[j]);
  }
  DatasetSplit demo;
  demo.name = SplitName::demo;
  for (std::size_t i = 0; i < n; ++i) demo.dialogues.push_back(test.dialogues[order[i]]);
  return demo;
}

void require_gold(const DatasetSplit& split, const std::vector<DimensionKey>& dims) {
  std::vector<std::string> missing;
  for (const auto& d : split.dialogues) {
    for (const auto& r : d.responses) {
      for (DimensionKey k : dims) {
        if (!r.gold_for(k)) {
          missing.push_back(fmt::format("{}/{}/{}", d.id, r.tutor_id, dimension_code(k)));
        }
      }
    }
  }
  if (!missing.empty()) {
    const std::size_t shown = std::min<std::size_t>(missing.size(), 5);
    std::vector<std::string> head(missing.begin(), missing.begin() + static_cast<long>(shown));
    throw UnlabeledDataError(fmt::format("{} responses lack gold labels (e.g. {})",
                                         missing.size(), join(head, ", ")));
  }
}

}  // namespace evalkit
