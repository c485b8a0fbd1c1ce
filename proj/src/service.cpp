#include "evalkit/service.hpp"

#include <algorithm>
#include <atomic>
#include <fstream>
#include <semaphore>
#include <set>
#include <thread>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "evalkit/errors.hpp"
#include "evalkit/feedback.hpp"
#include "evalkit/metrics.hpp"
#include "evalkit/text.hpp"

// Last: <resolv.h>, pulled in by httplib, defines a _res macro.
#include <httplib.h>

namespace evalkit {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Configuration

namespace {

std::string resolve(const std::string& path, const fs::path& base) {
  if (path.empty() || base.empty() || fs::path(path).is_absolute()) return path;
  return (base / path).lexically_normal().string();
}

}  // namespace

void ServiceConfig::validate() const {
  if (port < 0 || port > 65535) throw ConfigError(fmt::format("port {} is out of range", port));
  if (trim(host).empty()) throw ConfigError("host must not be empty");
  if (demo_split.empty()) throw ConfigError("demo_split is required");
  if (cache_dir.empty()) throw ConfigError("cache_dir is required");
  if (feedback_log.empty()) throw ConfigError("feedback_log is required");
  if (parallelism < 1 || parallelism > 64) throw ConfigError("parallelism must be in [1, 64]");
  if (lomtl && lomtl->id.empty()) throw ConfigError("lomtl.id must not be empty");
  for (const auto& j : judges) j.validate();
}

ServiceConfig ServiceConfig::from_json(const nlohmann::json& j, const fs::path& base_dir) {
  ServiceConfig c;
  try {
    if (!j.is_object()) throw ConfigError("service config must be a JSON object");
    c.host = j.value("host", c.host);
    c.port = j.value("port", c.port);
    c.static_mode = j.value("static_mode", c.static_mode);
    c.demo_split = resolve(j.value("demo_split", std::string()), base_dir);
    c.dev_split = resolve(j.value("dev_split", std::string()), base_dir);
    c.cache_dir = resolve(j.value("cache_dir", std::string()), base_dir);
    c.feedback_log = resolve(j.value("feedback_log", std::string()), base_dir);
    c.evaluators = j.value("evaluators", c.evaluators);
    c.parallelism = j.value("parallelism", c.parallelism);
    c.cors_origin = j.value("cors_origin", c.cors_origin);
    if (const auto it = j.find("lomtl"); it != j.end() && !it->is_null()) {
      LomtlEntry e;
      e.id = it->value("id", e.id);
      e.checkpoint = resolve(it->at("checkpoint").get<std::string>(), base_dir);
      e.config = resolve(it->at("config").get<std::string>(), base_dir);
      e.model_id = it->value("model_id", e.model_id);
      c.lomtl = e;
    }
    if (const auto it = j.find("judges"); it != j.end()) {
      for (const auto& spec : *it) {
        auto s = JudgeSpec::from_json(spec);
        if (!s.prompt_template.empty()) s.prompt_template = resolve(s.prompt_template, base_dir);
        if (s.kind == JudgeKind::local && s.command.empty()) s.model_id = resolve(s.model_id, base_dir);
        c.judges.push_back(std::move(s));
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(fmt::format("malformed service config: {}", e.what()));
  }
  c.validate();
  return c;
}

ServiceConfig ServiceConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(fmt::format("cannot read service config '{}'", path.string()));
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(fmt::format("'{}' is not valid JSON: {}", path.string(), e.what()));
  }
  return from_json(j, fs::absolute(path).parent_path());
}

Json ServiceConfig::to_json() const {
  Json j;
  j["host"] = host;
  j["port"] = port;
  j["static_mode"] = static_mode;
  j["demo_split"] = demo_split;
  j["dev_split"] = dev_split;
  j["cache_dir"] = cache_dir;
  j["feedback_log"] = feedback_log;
  j["evaluators"] = evaluators;
  j["parallelism"] = parallelism;
  j["cors_origin"] = cors_origin;
  if (lomtl) {
    j["lomtl"] = {{"id", lomtl->id},
                  {"checkpoint", lomtl->checkpoint},
                  {"config", lomtl->config},
                  {"model_id", lomtl->model_id}};
  }
  j["judges"] = Json::array();
  for (const auto& s : judges) j["judges"].push_back(s.to_json());
  return j;
}

// ---------------------------------------------------------------------------
// Registry

void EvaluatorRegistry::add(EvaluatorInfo info, Factory factory) {
  std::lock_guard lock(*mutex_);
  if (info.id.empty()) throw ConfigError("evaluator id must not be empty");
  if (entries_.count(info.id)) throw ConfigError(fmt::format("evaluator '{}' is defined twice", info.id));
  order_.push_back(info.id);
  const std::string id = info.id;
  entries_.emplace(id, Entry{std::move(info), std::move(factory), nullptr});
}

void EvaluatorRegistry::add(std::shared_ptr<Evaluator> evaluator) {
  auto info = evaluator->info();
  add(std::move(info), [evaluator] { return evaluator; });
}

bool EvaluatorRegistry::contains(const std::string& id) const {
  std::lock_guard lock(*mutex_);
  return entries_.count(id) > 0;
}

std::vector<EvaluatorInfo> EvaluatorRegistry::list() const {
  std::lock_guard lock(*mutex_);
  std::vector<EvaluatorInfo> out;
  for (const auto& id : order_) out.push_back(entries_.at(id).info);
  return out;
}

const EvaluatorInfo& EvaluatorRegistry::info(const std::string& id) const {
  std::lock_guard lock(*mutex_);
  const auto it = entries_.find(id);
  if (it == entries_.end()) throw NotFoundError(fmt::format("unknown evaluator '{}'", id));
  return it->second.info;
}

std::shared_ptr<Evaluator> EvaluatorRegistry::get(const std::string& id) {
  std::lock_guard lock(*mutex_);
  const auto it = entries_.find(id);
  if (it == entries_.end()) throw NotFoundError(fmt::format("unknown evaluator '{}'", id));
  if (!it->second.instance) it->second.instance = it->second.factory();
  return it->second.instance;
}

EvaluatorRegistry EvaluatorRegistry::from_config(const ServiceConfig& config) {
  const std::set<std::string> enabled(config.evaluators.begin(), config.evaluators.end());
  const auto wanted = [&](const std::string& id) { return enabled.empty() || enabled.count(id); };
  std::set<std::string> defined;
  EvaluatorRegistry registry;
  if (config.lomtl) {
    const LomtlEntry e = *config.lomtl;
    defined.insert(e.id);
    if (wanted(e.id)) {
      registry.add({e.id, "lomtl", e.model_id},
                   [e] { return make_lomtl_evaluator(e.checkpoint, e.config, e.id); });
    }
  }
  for (const auto& spec : config.judges) {
    defined.insert(spec.judge_id);
    if (!wanted(spec.judge_id)) continue;
    registry.add({spec.judge_id, spec.kind == JudgeKind::remote ? "remote" : "local", spec.model_id},
                 [spec] { return make_judge(spec); });
  }
  for (const auto& id : enabled) {
    if (!defined.count(id)) throw ConfigError(fmt::format("enabled evaluator '{}' is not defined", id));
  }
  return registry;
}

std::vector<PrecomputeSummary> precompute_cache(const DatasetSplit& split, EvaluatorRegistry& registry,
                                                VerdictCache& cache, const std::vector<std::string>& ids,
                                                int parallelism) {
  std::vector<std::string> wanted = ids;
  if (wanted.empty()) {
    for (const auto& info : registry.list()) wanted.push_back(info.id);
  }
  std::vector<PrecomputeSummary> out;
  for (const auto& id : wanted) {
    PrecomputeSummary s;
    s.evaluator_id = registry.info(id).id;
    std::vector<JudgeItem> todo;
    for (const auto& d : split.dialogues) {
      for (const auto& r : d.responses) {
        for (auto dim : kAllDimensions) {
          ++s.items;
          if (cache.get(VerdictCache::key(id, d.id, r.tutor_id, dim, r.text))) {
            ++s.cached;
          } else {
            todo.push_back({&d, r.tutor_id, dim});
          }
        }
      }
    }
    if (!todo.empty()) {
      const auto evaluator = registry.get(id);
      for (const auto& v : judge_batch(*evaluator, todo, &cache, parallelism)) {
        ++(v.error ? s.failed : s.computed);
      }
    }
    spdlog::info("precompute {}: {} items, {} cached, {} computed, {} failed", s.evaluator_id, s.items, s.cached,
                 s.computed, s.failed);
    out.push_back(s);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Service

namespace {

int http_status(const Error& e) {
  const auto& k = e.kind();
  if (k == "not_found" || k == "lookup_error") return 404;
  if (k == "reference_error") return 422;
  if (k == "remote_error") return 502;
  if (e.error_class() == ErrorClass::environment) return 503;
  return 400;
}

void reply(httplib::Response& res, int status, const Json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void reply_error(httplib::Response& res, int status, std::string_view kind, const std::string& message) {
  reply(res, status, Json{{"error", {{"kind", kind}, {"message", message}}}});
}

nlohmann::json parse_body(const httplib::Request& req) {
  try {
    auto j = nlohmann::json::parse(req.body);
    if (!j.is_object()) throw SchemaError("request body must be a JSON object");
    return j;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(fmt::format("request body is not valid JSON: {}", e.what()));
  }
}

std::string body_string(const nlohmann::json& j, const char* key) {
  const auto it = j.find(key);
  if (it == j.end() || !it->is_string() || it->get<std::string>().empty()) {
    throw SchemaError(fmt::format("field '{}' must be a non-empty string", key));
  }
  return it->get<std::string>();
}

std::vector<DimensionKey> parse_dimension_list(const std::vector<std::string>& names) {
  if (names.empty()) throw ArgumentError("dimension selection is empty");
  std::vector<DimensionKey> out;
  for (const auto& n : names) {
    const auto d = parse_dimension(n);
    if (!d) throw ArgumentError(fmt::format("unknown dimension '{}'", n));
    if (std::find(out.begin(), out.end(), *d) == out.end()) out.push_back(*d);
  }
  return out;
}

std::vector<DimensionKey> body_dimensions(const nlohmann::json& j) {
  const auto it = j.find("dimensions");
  if (it == j.end() || it->is_null()) return {kAllDimensions.begin(), kAllDimensions.end()};
  if (!it->is_array()) throw SchemaError("field 'dimensions' must be an array of strings");
  std::vector<std::string> names;
  for (const auto& x : *it) {
    if (!x.is_string()) throw SchemaError("field 'dimensions' must be an array of strings");
    names.push_back(x.get<std::string>());
  }
  return parse_dimension_list(names);
}

/// nullopt when the parameter is absent; an explicitly empty value is an
/// empty list.
std::optional<std::vector<std::string>> query_list(const httplib::Request& req, const char* key) {
  if (!req.has_param(key)) return std::nullopt;
  std::vector<std::string> out;
  for (const auto& part : split(req.get_param_value(key), ',')) {
    const auto t = trim(part);
    if (!t.empty()) out.emplace_back(t);
  }
  return out;
}

std::optional<std::string> query_value(const httplib::Request& req, const char* key) {
  if (!req.has_param(key)) return std::nullopt;
  return req.get_param_value(key);
}

Json verdicts_json(const std::vector<EvalVerdict>& vs) {
  Json a = Json::array();
  for (const auto& v : vs) a.push_back(to_json(v));
  return a;
}

std::map<DimensionKey, Prediction> labels_of(const std::vector<EvalVerdict>& vs) {
  std::map<DimensionKey, Prediction> m;
  for (const auto& v : vs) m[v.dimension] = v.label;
  return m;
}

Json codes(const std::vector<DimensionKey>& dims) {
  Json a = Json::array();
  for (auto d : dims) a.push_back(dimension_code(d));
  return a;
}

}  // namespace

struct EvalService::Impl {
  ServiceConfig config;
  EvaluatorRegistry registry;
  DatasetSplit demo;
  std::optional<DatasetSplit> dev;
  std::unique_ptr<VerdictCache> cache;
  std::unique_ptr<FeedbackStore> feedback;
  std::counting_semaphore<64> slots{1};
  httplib::Server server;
  std::thread thread;
  std::atomic<bool> bound{false};

  Impl(ServiceConfig c, EvaluatorRegistry r)
      : config(std::move(c)), registry(std::move(r)), slots(config.parallelism) {}

  const DatasetSplit& visual_source() const { return dev ? *dev : demo; }

  std::vector<EvalVerdict> evaluate(const Dialogue& d, const std::string& tutor_id,
                                    const std::vector<DimensionKey>& dims, const std::string& evaluator_id) {
    const EvaluatorInfo& info = registry.info(evaluator_id);
    const ResponseRecord& response = d.response(tutor_id);
    std::vector<EvalVerdict> out(dims.size());
    std::vector<std::size_t> missing;
    for (std::size_t i = 0; i < dims.size(); ++i) {
      const auto key = VerdictCache::key(info.id, d.id, tutor_id, dims[i], response.text);
      if (auto hit = cache->get(key)) {
        out[i] = std::move(*hit);
      } else {
        missing.push_back(i);
      }
    }
    if (missing.empty()) return out;
    if (config.static_mode) {
      throw UnavailableError(fmt::format(
          "static mode: evaluator '{}' has no precomputed verdict for {}/{}/{}", info.id, d.id, tutor_id,
          dimension_code(dims[missing.front()])));
    }
    std::shared_ptr<Evaluator> evaluator;
    try {
      evaluator = registry.get(evaluator_id);
    } catch (const Error& e) {
      throw UnavailableError(fmt::format("evaluator '{}' is unavailable: {}", evaluator_id, e.what()));
    }
    std::vector<JudgeItem> items;
    for (auto i : missing) items.push_back({&d, tutor_id, dims[i]});
    slots.acquire();
    std::vector<EvalVerdict> fresh;
    try {
      fresh = judge_batch(*evaluator, items, cache.get(), 1);
    } catch (...) {
      slots.release();
      throw;
    }
    slots.release();
    for (std::size_t k = 0; k < missing.size(); ++k) out[missing[k]] = std::move(fresh[k]);
    return out;
  }

  // -- handlers ------------------------------------------------------------

  Json list_dialogues(const httplib::Request& req) const {
    const auto topic = query_value(req, "topic");
    Json items = Json::array();
    for (const auto& d : demo.dialogues) {
      if (topic && d.topic != *topic) continue;
      Json tutors = Json::array();
      for (const auto& r : d.responses) tutors.push_back(r.tutor_id);
      items.push_back({{"id", d.id}, {"topic", d.topic}, {"turns", d.history.size()}, {"tutors", tutors}});
    }
    Json topics = Json::array();
    for (const auto& t : demo.topics()) topics.push_back(t);
    return {{"split", split_name(demo.name)}, {"count", items.size()}, {"topics", topics}, {"dialogues", items}};
  }

  Json get_dialogue(const std::string& id, const httplib::Request& req) const {
    const Dialogue& d = demo.at(id);
    Json history = Json::array();
    for (const auto& t : d.history) history.push_back({{"speaker", speaker_name(t.speaker)}, {"text", t.text}});
    Json responses = Json::array();
    for (const auto& r : d.responses) responses.push_back({{"tutor_id", r.tutor_id}, {"text", r.text}});
    Json j{{"id", d.id}, {"topic", d.topic}, {"history", history}, {"responses", responses},
           {"has_ground_truth", !d.ground_truth.empty()}};
    // The reference solution is only sent on request so the UI can gate it.
    if (query_value(req, "include_ground_truth").value_or("false") == "true") {
      j["ground_truth"] = d.ground_truth;
    }
    return j;
  }

  Json list_evaluators() const {
    Json items = Json::array();
    for (const auto& info : registry.list()) {
      items.push_back({{"id", info.id}, {"kind", info.kind}, {"model_id", info.model_id}});
    }
    return {{"static_mode", config.static_mode}, {"evaluators", items}};
  }

  Json overview() const {
    const DatasetSplit& src = visual_source();
    Json tutors = Json::array();
    for (const auto& t : src.tutors()) {
      std::size_t n = 0;
      for (const auto& d : src.dialogues) n += d.find_response(t) != nullptr;
      tutors.push_back({{"tutor_id", t}, {"responses", n}});
    }
    Json dist = Json::object();
    for (auto dim : kAllDimensions) {
      std::array<std::size_t, 3> c{};
      for (const auto& d : src.dialogues) {
        for (const auto& r : d.responses) {
          if (auto l = r.gold_for(dim)) ++c[static_cast<std::size_t>(*l)];
        }
      }
      dist[std::string(dimension_code(dim))] = {{"Yes", c[0]}, {"To some extent", c[1]}, {"No", c[2]}};
    }
    Json dims = Json::array();
    for (auto dim : kAllDimensions) {
      dims.push_back({{"key", dimension_code(dim)}, {"name", dimension_display_name(dim)},
                      {"definition", dimension(dim).definition}});
    }
    return {{"split", split_name(src.name)},
            {"dialogues", src.dialogues.size()},
            {"responses", src.response_count()},
            {"topics", src.topics().size()},
            {"tutors", tutors},
            {"dimensions", dims},
            {"label_distribution", dist}};
  }

  Json evaluate_handler(const nlohmann::json& body) {
    const Dialogue& d = demo.at(body_string(body, "dialogue_id"));
    const auto tutor = body_string(body, "tutor_id");
    const auto evaluator = body_string(body, "evaluator_id");
    const auto dims = body_dimensions(body);
    return {{"dialogue_id", d.id},
            {"tutor_id", tutor},
            {"evaluator_id", evaluator},
            {"verdicts", verdicts_json(evaluate(d, tutor, dims, evaluator))}};
  }

  Json compare_handler(const nlohmann::json& body) {
    const Dialogue& d = demo.at(body_string(body, "dialogue_id"));
    const auto a = body_string(body, "tutor_a");
    const auto b = body_string(body, "tutor_b");
    if (a == b) throw ArgumentError("tutor_a and tutor_b must differ");
    const auto evaluator = body_string(body, "evaluator_id");
    const auto dims = body_dimensions(body);
    const auto va = evaluate(d, a, dims, evaluator);
    const auto vb = evaluate(d, b, dims, evaluator);
    return {{"dialogue_id", d.id},
            {"evaluator_id", evaluator},
            {"tutor_a", a},
            {"tutor_b", b},
            {"comparison", to_json(compare_pair(labels_of(va), labels_of(vb)))},
            {"verdicts_a", verdicts_json(va)},
            {"verdicts_b", verdicts_json(vb)}};
  }

  Json judge_compare_handler(const nlohmann::json& body) {
    const Dialogue& d = demo.at(body_string(body, "dialogue_id"));
    const auto tutor = body_string(body, "tutor_id");
    const auto ja = body_string(body, "judge_a");
    const auto jb = body_string(body, "judge_b");
    const auto dims = body_dimensions(body);
    const auto va = evaluate(d, tutor, dims, ja);
    const auto vb = evaluate(d, tutor, dims, jb);
    const auto cmp = compare_pair(labels_of(va), labels_of(vb));
    Json agreement = Json::object();
    for (std::size_t i = 0; i < dims.size(); ++i) {
      agreement[std::string(dimension_code(dims[i]))] = va[i].label == vb[i].label;
    }
    return {{"dialogue_id", d.id},
            {"tutor_id", tutor},
            {"judge_a", ja},
            {"judge_b", jb},
            {"comparison", to_json(cmp)},
            {"agreement", agreement},
            {"verdicts_a", verdicts_json(va)},
            {"verdicts_b", verdicts_json(vb)}};
  }

  std::pair<std::vector<TutorSummary>, std::vector<DimensionKey>> selection(const httplib::Request& req) const {
    const DatasetSplit& src = visual_source();
    const auto dims = parse_dimension_list(
        query_list(req, "dimensions").value_or(std::vector<std::string>{"MI", "ML", "PG", "AC"}));
    auto summaries = tutor_summary(src);
    if (const auto tutors = query_list(req, "tutors")) {
      if (tutors->empty()) throw ArgumentError("tutor selection is empty");
      std::vector<TutorSummary> picked;
      for (const auto& t : *tutors) {
        const auto it = std::find_if(summaries.begin(), summaries.end(),
                                     [&](const TutorSummary& s) { return s.tutor_id == t; });
        if (it == summaries.end()) throw NotFoundError(fmt::format("unknown tutor '{}'", t));
        picked.push_back(*it);
      }
      summaries = std::move(picked);
    }
    for (auto& s : summaries) {
      for (auto dim : kAllDimensions) {
        if (std::find(dims.begin(), dims.end(), dim) != dims.end()) continue;
        s.mean.erase(dim);
        s.n.erase(dim);
        s.distribution.erase(dim);
      }
    }
    return {std::move(summaries), dims};
  }

  Json visualizer(const httplib::Request& req) const {
    auto [summaries, dims] = selection(req);
    Json tutors = Json::array();
    std::map<DimensionKey, std::array<std::size_t, 3>> totals;
    for (const auto& s : summaries) {
      tutors.push_back(to_json(s));
      for (const auto& [dim, c] : s.distribution) {
        for (std::size_t k = 0; k < 3; ++k) totals[dim][k] += c[k];
      }
    }
    Json label_totals = Json::object();
    for (auto dim : dims) {
      const auto& c = totals[dim];
      const double n = static_cast<double>(c[0] + c[1] + c[2]);
      Json entry = Json::object();
      for (auto l : kAllLabels) {
        const auto k = static_cast<std::size_t>(l);
        entry[std::string(label_name(l))] = {{"count", c[k]}, {"share", n > 0 ? static_cast<double>(c[k]) / n : 0.0}};
      }
      label_totals[std::string(dimension_code(dim))] = entry;
    }
    return {{"split", split_name(visual_source().name)},
            {"dimensions", codes(dims)},
            {"tutors", tutors},
            {"label_totals", label_totals}};
  }

  Json best(const httplib::Request& req) const {
    auto [summaries, dims] = selection(req);
    if (summaries.empty()) throw ArgumentError("no annotated tutors to rank");
    Json winners = Json::object();
    for (const auto& [dim, ids] : best_by_dimension(summaries)) {
      winners[std::string(dimension_code(dim))] = ids;
    }
    return {{"split", split_name(visual_source().name)}, {"dimensions", codes(dims)}, {"best", winners}};
  }

  Json feedback_post(const nlohmann::json& body) {
    const auto item = feedback_item_from_json(body);
    std::string request_id;
    if (const auto it = body.find("request_id"); it != body.end() && !it->is_null()) {
      if (!it->is_string()) throw SchemaError("field 'request_id' must be a string");
      request_id = it->get<std::string>();
    }
    const auto receipt = feedback->record(item, request_id);
    return {{"receipt", receipt}};
  }

  Json feedback_export(const httplib::Request& req) const {
    FeedbackFilter f;
    f.dialogue_id = query_value(req, "dialogue_id");
    f.tutor_id = query_value(req, "tutor_id");
    f.rater_id = query_value(req, "rater_id");
    if (const auto k = query_value(req, "kind")) {
      f.kind = parse_feedback_kind(*k);
      if (!f.kind) throw ArgumentError(fmt::format("unknown feedback kind '{}'", *k));
    }
    Json a = Json::array();
    for (const auto& r : feedback->export_records(f)) a.push_back(to_json(r));
    return a;
  }

  Json feedback_summary() const {
    const auto records = feedback->export_records();
    Json h = Json::array();
    for (const auto& s : helpfulness_summary(records)) h.push_back(to_json(s));
    Json w = Json::array();
    for (const auto& s : win_rates(records)) w.push_back(to_json(s));
    return {{"records", records.size()}, {"helpfulness", h}, {"win_rates", w}};
  }

  // -- routing -------------------------------------------------------------

  template <typename F>
  httplib::Server::Handler guard(F fn, int ok_status = 200) {
    return [fn, ok_status](const httplib::Request& req, httplib::Response& res) {
      try {
        reply(res, ok_status, fn(req));
      } catch (const Error& e) {
        const int status = http_status(e);
        if (status >= 500) spdlog::warn("{} {}: {}", req.method, req.path, e.what());
        reply_error(res, status, e.kind(), e.what());
      } catch (const nlohmann::json::exception& e) {
        reply_error(res, 400, "schema_error", e.what());
      } catch (const std::exception& e) {
        spdlog::error("{} {}: {}", req.method, req.path, e.what());
        reply_error(res, 500, "internal_error", e.what());
      }
    };
  }

  void routes() {
    server.Get("/v1/health", guard([this](const httplib::Request&) {
      return Json{{"status", "ok"}, {"static_mode", config.static_mode}};
    }));
    server.Get("/v1/schema", [](const httplib::Request&, httplib::Response& res) {
      res.set_content(api_schema_text(), "application/schema+json");
    });
    server.Get("/v1/dialogues", guard([this](const httplib::Request& req) { return list_dialogues(req); }));
    server.Get(R"(/v1/dialogues/([^/]+))", guard([this](const httplib::Request& req) {
      return get_dialogue(req.matches[1].str(), req);
    }));
    server.Get("/v1/evaluators", guard([this](const httplib::Request&) { return list_evaluators(); }));
    server.Get("/v1/overview", guard([this](const httplib::Request&) { return overview(); }));
    server.Post("/v1/evaluate", guard([this](const httplib::Request& req) {
      return evaluate_handler(parse_body(req));
    }));
    server.Post("/v1/compare", guard([this](const httplib::Request& req) {
      return compare_handler(parse_body(req));
    }));
    server.Post("/v1/judge_compare", guard([this](const httplib::Request& req) {
      return judge_compare_handler(parse_body(req));
    }));
    server.Get("/v1/visualizer", guard([this](const httplib::Request& req) { return visualizer(req); }));
    server.Get("/v1/best_by_dimension", guard([this](const httplib::Request& req) { return best(req); }));
    server.Post("/v1/feedback", guard([this](const httplib::Request& req) {
      return feedback_post(parse_body(req));
    }, 201));
    server.Get("/v1/feedback/export", guard([this](const httplib::Request& req) { return feedback_export(req); }));
    server.Get("/v1/feedback/summary", guard([this](const httplib::Request&) { return feedback_summary(); }));

    server.set_error_handler([](const httplib::Request& req, httplib::Response& res) {
      if (!res.body.empty()) return;
      if (res.status == 404) {
        reply_error(res, 404, "not_found", fmt::format("no route for {} {}", req.method, req.path));
      }
    });
    server.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
      std::string what = "unknown error";
      try {
        std::rethrow_exception(ep);
      } catch (const std::exception& e) {
        what = e.what();
      } catch (...) {
      }
      reply_error(res, 500, "internal_error", what);
    });
    if (!config.cors_origin.empty()) {
      const std::string origin = config.cors_origin;
      server.set_post_routing_handler([origin](const httplib::Request&, httplib::Response& res) {
        res.set_header("Access-Control-Allow-Origin", origin);
      });
      server.Options(R"(/v1/.*)", [origin](const httplib::Request&, httplib::Response& res) {
        res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
        res.set_header("Access-Control-Allow-Headers", "Content-Type");
        res.status = 204;
      });
    }
    server.set_payload_max_length(1 << 20);
    // SO_REUSEADDR only: httplib's default also sets SO_REUSEPORT, which
    // would let a second instance share the port silently.
    server.set_socket_options([](socket_t sock) {
      int yes = 1;
      ::setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof(yes));
    });
  }
};

EvalService::EvalService(ServiceConfig config, EvaluatorRegistry registry)
    : impl_(std::make_unique<Impl>(std::move(config), std::move(registry))) {
  auto& m = *impl_;
  m.config.validate();
  m.demo = load_dataset(m.config.demo_split, SplitName::demo);
  if (!m.config.dev_split.empty()) m.dev = load_dataset(m.config.dev_split, SplitName::dev);
  m.cache = std::make_unique<VerdictCache>(m.config.cache_dir);
  m.feedback = std::make_unique<FeedbackStore>(m.config.feedback_log, m.demo);
  m.routes();
  spdlog::info("service: {} demo dialogues, {} evaluators, static_mode={}", m.demo.dialogues.size(),
               m.registry.list().size(), m.config.static_mode);
}

EvalService::~EvalService() { stop(); }

int EvalService::bind() {
  auto& m = *impl_;
  int port = m.config.port;
  if (port == 0) {
    port = m.server.bind_to_any_port(m.config.host);
  } else if (!m.server.bind_to_port(m.config.host, port)) {
    port = -1;
  }
  if (port < 0) {
    throw EnvironmentError(fmt::format("cannot bind {}:{}", m.config.host, m.config.port));
  }
  m.bound = true;
  return port;
}

void EvalService::run() {
  if (!impl_->bound) throw ArgumentError("bind() must precede run()");
  impl_->server.listen_after_bind();
}

int EvalService::start() {
  const int port = bind();
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return port;
}

void EvalService::stop() {
  if (!impl_) return;
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

const ServiceConfig& EvalService::config() const { return impl_->config; }
const DatasetSplit& EvalService::demo() const { return impl_->demo; }

}  // namespace evalkit
