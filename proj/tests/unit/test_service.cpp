#include <doctest.h>

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>

#include "evalkit/errors.hpp"
#include "evalkit/metrics.hpp"
#include "evalkit/service.hpp"
#include "synthetic.hpp"
// After the Eigen-bearing headers: httplib's <resolv.h> defines _res.
#include "mock_chat.hpp"

using namespace evalkit;
using namespace evalkit::testing;
using Json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

/// When EVALKIT_PAYLOAD_DIR is set, every request and response body seen
/// here is written there, named after the schema definition it must match.
void keep_payload(const std::string& def, const std::string& body) {
  const char* dir = std::getenv("EVALKIT_PAYLOAD_DIR");
  if (dir == nullptr || *dir == '\0') return;
  static std::atomic<int> seq{0};
  fs::create_directories(dir);
  const auto name = def + "__" + std::to_string(seq++) + ".json";
  std::ofstream(fs::path(dir) / name) << body;
}

struct Reply {
  int status = 0;
  Json body;
  std::string raw;
};

/// Counts calls and answers from a per-dimension table keyed by the rubric
/// heading in the prompt.
struct Scripted {
  std::atomic<int> calls{0};
  std::map<std::string, std::string> by_dimension;
  std::string fallback = "Yes";

  std::shared_ptr<Evaluator> evaluator(const std::string& id) {
    auto gen = std::make_shared<FunctionGenerator>([this](const std::string& prompt) {
      ++calls;
      for (const auto& [name, answer] : by_dimension) {
        if (prompt.find("###Rubric: " + name) != std::string::npos) return answer;
      }
      return fallback;
    });
    auto tmpl = PromptTemplate::load(default_template_dir() / "judge.txt");
    return std::make_shared<Evaluator>(EvaluatorInfo{id, "scripted", "scripted-" + id}, gen, tmpl,
                                       4096, whitespace_token_count);
  }
};

class Harness {
 public:
  explicit Harness(bool static_mode, const std::function<void(ServiceConfig&, EvaluatorRegistry&)>& setup = {})
      : dir_("service") {
    dev_ = dev_like(31);
    save_dataset(dev_, dir_ / "dev.json");
    config_.port = 0;
    config_.static_mode = static_mode;
    config_.demo_split = (fixture_dir() / "demo_split.json").string();
    config_.dev_split = (dir_ / "dev.json").string();
    config_.cache_dir = (dir_ / "cache").string();
    config_.feedback_log = (dir_ / "feedback.ndjson").string();
    config_.parallelism = 2;
    EvaluatorRegistry registry;
    if (setup) setup(config_, registry);
    service_ = std::make_unique<EvalService>(config_, std::move(registry));
    port_ = service_->start();
    client_ = std::make_unique<httplib::Client>("127.0.0.1", port_);
    client_->set_read_timeout(30, 0);
  }

  Reply get(const std::string& path, const std::string& def = {}) {
    auto res = client_->Get(path);
    REQUIRE(res);
    return finish(res, def);
  }
  Reply post(const std::string& path, const Json& body, const std::string& req_def = {},
             const std::string& def = {}) {
    if (!req_def.empty()) keep_payload(req_def, body.dump());
    auto res = client_->Post(path, body.dump(), "application/json");
    REQUIRE(res);
    return finish(res, def);
  }
  Reply post_raw(const std::string& path, const std::string& body) {
    auto res = client_->Post(path, body, "application/json");
    REQUIRE(res);
    return finish(res, {});
  }

  EvalService& service() { return *service_; }
  const ServiceConfig& config() const { return config_; }
  const DatasetSplit& dev() const { return dev_; }
  const TempDir& dir() const { return dir_; }
  httplib::Client& client() { return *client_; }

 private:
  Reply finish(const httplib::Result& res, const std::string& def) {
    Reply r;
    r.status = res->status;
    r.raw = res->body;
    r.body = Json::parse(res->body, nullptr, false);
    if (r.status >= 400) {
      keep_payload("Error", res->body);
    } else if (!def.empty()) {
      keep_payload(def, res->body);
    }
    return r;
  }

  TempDir dir_;
  DatasetSplit dev_;
  ServiceConfig config_;
  std::unique_ptr<EvalService> service_;
  int port_ = 0;
  std::unique_ptr<httplib::Client> client_;
};

Json eval_body(const std::string& dialogue, const std::string& tutor, const std::string& evaluator) {
  return {{"dialogue_id", dialogue}, {"tutor_id", tutor}, {"evaluator_id", evaluator}};
}

void check_error(const Reply& r, int status, const std::string& kind) {
  CHECK(r.status == status);
  REQUIRE(r.body.contains("error"));
  CHECK(r.body["error"]["kind"] == kind);
  CHECK_FALSE(r.body["error"]["message"].get<std::string>().empty());
}

}  // namespace

TEST_CASE("config: relative paths resolve against the config file") {
  TempDir dir("svc-config");
  fs::create_directories(dir / "conf");
  write_file(dir / "conf" / "service.json", R"({
    "port": 0, "static_mode": false,
    "demo_split": "data/demo.json", "cache_dir": "/abs/cache", "feedback_log": "fb.ndjson",
    "lomtl": {"checkpoint": "ckpt", "config": "train.json"},
    "judges": [{"judge_id": "gpt", "kind": "remote", "model_id": "gpt-4o",
                "endpoint": "http://127.0.0.1:1/v1/chat/completions", "credentials_ref": "X_KEY"}]
  })");
  const auto c = ServiceConfig::load(dir / "conf" / "service.json");
  const auto base = fs::absolute(dir / "conf");
  CHECK(fs::path(c.demo_split) == (base / "data/demo.json").lexically_normal());
  CHECK(c.cache_dir == "/abs/cache");
  CHECK(fs::path(c.feedback_log) == (base / "fb.ndjson").lexically_normal());
  REQUIRE(c.lomtl);
  CHECK(c.lomtl->id == "lomtl");
  CHECK(fs::path(c.lomtl->checkpoint) == (base / "ckpt").lexically_normal());
  REQUIRE(c.judges.size() == 1);
  CHECK(c.judges[0].credentials_ref == "X_KEY");
  CHECK_FALSE(c.static_mode);

  const auto again = ServiceConfig::from_json(Json::parse(c.to_json().dump()));
  CHECK(again.to_json() == c.to_json());
}

TEST_CASE("config: invalid values are config errors") {
  const Json ok{{"demo_split", "d.json"}, {"cache_dir", "c"}, {"feedback_log", "f"}};
  CHECK_NOTHROW(ServiceConfig::from_json(ok));
  for (const auto& [key, value] : std::vector<std::pair<std::string, Json>>{
           {"port", 70000}, {"parallelism", 0}, {"host", " "}, {"demo_split", ""}, {"port", "eighty"}}) {
    Json bad = ok;
    bad[key] = value;
    CAPTURE(key);
    CHECK_THROWS_AS(ServiceConfig::from_json(bad), ConfigError);
  }
  CHECK_THROWS_AS(ServiceConfig::load("/nonexistent/service.json"), ConfigError);
}

TEST_CASE("registry: factories are lazy and enabled ids must exist") {
  ServiceConfig c;
  c.demo_split = "d";
  c.cache_dir = "c";
  c.feedback_log = "f";
  JudgeSpec remote;
  remote.judge_id = "gpt";
  remote.kind = JudgeKind::remote;
  remote.model_id = "gpt-4o";
  remote.endpoint = "http://127.0.0.1:1/v1/chat/completions";
  remote.credentials_ref = "EVALKIT_TEST_UNSET_KEY";
  c.judges = {remote};
  c.lomtl = LomtlEntry{"lomtl", "/nonexistent/ckpt", "/nonexistent/train.json", "base"};

  ScopedEnv unset("EVALKIT_TEST_UNSET_KEY", "");
  auto registry = EvaluatorRegistry::from_config(c);  // reads no credential, loads no model
  REQUIRE(registry.list().size() == 2);
  CHECK(registry.info("gpt").kind == "remote");
  CHECK(registry.info("lomtl").kind == "lomtl");
  CHECK_THROWS_AS(registry.get("gpt"), ConfigError);
  CHECK_THROWS_AS(registry.info("nope"), NotFoundError);

  c.evaluators = {"gpt"};
  CHECK(EvaluatorRegistry::from_config(c).list().size() == 1);
  c.evaluators = {"gpt", "claude"};
  CHECK_THROWS_AS(EvaluatorRegistry::from_config(c), ConfigError);

  Scripted s;
  EvaluatorRegistry r2;
  r2.add(s.evaluator("x"));
  CHECK_THROWS_AS(r2.add(s.evaluator("x")), ConfigError);
}

TEST_CASE("service: read-only endpoints") {
  Scripted s;
  Harness h(true, [&](ServiceConfig&, EvaluatorRegistry& r) { r.add(s.evaluator("judge-a")); });

  auto health = h.get("/v1/health", "Health");
  CHECK(health.status == 200);
  CHECK(health.body["status"] == "ok");
  CHECK(health.body["static_mode"] == true);

  auto schema = h.get("/v1/schema");
  CHECK(schema.status == 200);
  CHECK(schema.body["$id"] == "urn:evalkit:api:v1");
  CHECK(schema.raw == api_schema_text());

  auto list = h.get("/v1/dialogues", "DialogueList");
  CHECK(list.status == 200);
  CHECK(list.body["split"] == "demo");
  CHECK(list.body["count"] == 10);
  CHECK(list.body["dialogues"].size() == 10);
  CHECK(list.body["dialogues"][0]["tutors"].size() == 9);
  CHECK(list.body["dialogues"][1]["tutors"].size() == 8);

  auto fractions = h.get("/v1/dialogues?topic=fractions", "DialogueList");
  CHECK(fractions.body["count"] == 1);
  CHECK(fractions.body["dialogues"][0]["id"] == "demo-01");

  auto d = h.get("/v1/dialogues/demo-02", "Dialogue");
  CHECK(d.status == 200);
  CHECK(d.body["history"].size() == 4);
  CHECK(d.body["history"][3]["speaker"] == "student");
  CHECK(d.body["has_ground_truth"] == true);
  CHECK_FALSE(d.body.contains("ground_truth"));
  for (const auto& r : d.body["responses"]) CHECK_FALSE(r.contains("annotations"));
  auto with_gt = h.get("/v1/dialogues/demo-02?include_ground_truth=true", "Dialogue");
  CHECK(with_gt.body["ground_truth"].get<std::string>().find("$60") != std::string::npos);

  auto evaluators = h.get("/v1/evaluators", "EvaluatorList");
  REQUIRE(evaluators.body["evaluators"].size() == 1);
  CHECK(evaluators.body["evaluators"][0]["id"] == "judge-a");
  CHECK(evaluators.body["evaluators"][0]["kind"] == "scripted");

  auto overview = h.get("/v1/overview", "Overview");
  CHECK(overview.body["split"] == "dev");
  CHECK(overview.body["dialogues"] == 300);
  CHECK(overview.body["responses"] == h.dev().response_count());
  CHECK(overview.body["tutors"].size() == 9);
  CHECK(overview.body["dimensions"].size() == 4);
  std::size_t mi_total = 0;
  for (const auto& [label, n] : overview.body["label_distribution"]["MI"].items()) mi_total += n.get<std::size_t>();
  CHECK(mi_total == h.dev().response_count());
  for (const auto& t : overview.body["tutors"]) {
    if (t["tutor_id"] == "Novice") CHECK(t["responses"] == 76);
  }
  CHECK(s.calls == 0);
}

TEST_CASE("service: error statuses and bodies") {
  Scripted s;
  Harness h(false, [&](ServiceConfig&, EvaluatorRegistry& r) { r.add(s.evaluator("judge-a")); });

  check_error(h.get("/v1/nowhere"), 404, "not_found");
  check_error(h.get("/v1/dialogues/demo-99"), 404, "not_found");
  check_error(h.post("/v1/evaluate", eval_body("demo-99", "Expert", "judge-a")), 404, "not_found");
  check_error(h.post("/v1/evaluate", eval_body("demo-02", "Novice", "judge-a")), 404, "lookup_error");
  check_error(h.post("/v1/evaluate", eval_body("demo-01", "Expert", "nope")), 404, "not_found");
  check_error(h.post_raw("/v1/evaluate", "{not json"), 400, "schema_error");
  check_error(h.post_raw("/v1/evaluate", "[1,2]"), 400, "schema_error");
  check_error(h.post("/v1/evaluate", Json{{"dialogue_id", "demo-01"}, {"evaluator_id", "judge-a"}}), 400,
              "schema_error");
  auto empty_dims = eval_body("demo-01", "Expert", "judge-a");
  empty_dims["dimensions"] = Json::array();
  check_error(h.post("/v1/evaluate", empty_dims), 400, "argument_error");
  auto bad_dim = eval_body("demo-01", "Expert", "judge-a");
  bad_dim["dimensions"] = {"MI", "XX"};
  check_error(h.post("/v1/evaluate", bad_dim), 400, "argument_error");
  check_error(h.post("/v1/compare", Json{{"dialogue_id", "demo-01"}, {"tutor_a", "Expert"},
                                         {"tutor_b", "Expert"}, {"evaluator_id", "judge-a"}}),
              400, "argument_error");
  check_error(h.get("/v1/visualizer?tutors="), 400, "argument_error");
  check_error(h.get("/v1/visualizer?dimensions="), 400, "argument_error");
  check_error(h.get("/v1/visualizer?tutors=Expert,Nobody"), 404, "not_found");
  check_error(h.get("/v1/feedback/export?kind=stars"), 400, "argument_error");
  check_error(h.post("/v1/feedback", Json{{"kind", "helpfulness"}, {"dialogue_id", "demo-01"},
                                          {"tutor_id", "Nobody"}, {"rater_id", "r1"}, {"rating", "Helpful"}}),
              422, "reference_error");
  check_error(h.post("/v1/feedback", Json{{"kind", "helpfulness"}, {"dialogue_id", "demo-01"},
                                          {"tutor_id", "Expert"}, {"rater_id", "r1"}, {"rating", "Great"}}),
              400, "schema_error");
  CHECK(s.calls == 0);
}

TEST_CASE("service: evaluate computes once, then serves identical bytes") {
  Scripted s;
  s.by_dimension = {{"Mistake Location", "To some extent"}, {"Actionability", "No"}};
  Harness h(false, [&](ServiceConfig&, EvaluatorRegistry& r) { r.add(s.evaluator("judge-a")); });

  auto first = h.post("/v1/evaluate", eval_body("demo-03", "Sonnet", "judge-a"), "EvaluateRequest",
                      "EvaluateResponse");
  REQUIRE(first.status == 200);
  CHECK(s.calls == 4);
  const auto& v = first.body["verdicts"];
  REQUIRE(v.size() == 4);
  CHECK(v[0]["dimension"] == "MI");
  CHECK(v[0]["label"] == "Yes");
  CHECK(v[1]["label"] == "To some extent");
  CHECK(v[3]["label"] == "No");
  CHECK(v[0]["error"].is_null());

  for (int i = 0; i < 3; ++i) {
    auto again = h.post("/v1/evaluate", eval_body("demo-03", "Sonnet", "judge-a"));
    CHECK(again.raw == first.raw);
  }
  CHECK(s.calls == 4);

  auto subset = eval_body("demo-03", "Sonnet", "judge-a");
  subset["dimensions"] = {"AC", "mi", "AC"};
  auto sub = h.post("/v1/evaluate", subset, "EvaluateRequest", "EvaluateResponse");
  REQUIRE(sub.body["verdicts"].size() == 2);
  CHECK(sub.body["verdicts"][0] == v[3]);
  CHECK(sub.body["verdicts"][1] == v[0]);
  CHECK(s.calls == 4);
}

TEST_CASE("service: generator failures are verdict-level errors") {
  Harness h(false, [&](ServiceConfig&, EvaluatorRegistry& r) {
    auto gen = std::make_shared<FunctionGenerator>([](const std::string& prompt) -> std::string {
      if (prompt.find("###Rubric: Providing Guidance") != std::string::npos) throw RemoteError("upstream 503", 503, 1);
      return "Yes";
    });
    r.add(std::make_shared<Evaluator>(EvaluatorInfo{"flaky", "scripted", ""}, gen,
                                      PromptTemplate::load(default_template_dir() / "judge.txt"), 4096,
                                      whitespace_token_count));
  });
  auto r = h.post("/v1/evaluate", eval_body("demo-05", "Expert", "flaky"), "EvaluateRequest", "EvaluateResponse");
  REQUIRE(r.status == 200);
  const auto& v = r.body["verdicts"];
  CHECK(v[0]["label"] == "Yes");
  CHECK(v[2]["label"] == "Unparseable");
  CHECK(v[2]["error"].get<std::string>().find("upstream 503") != std::string::npos);
  CHECK(v[3]["label"] == "Yes");
}

TEST_CASE("service: compare and judge_compare") {
  Scripted a, b;
  b.by_dimension = {{"Mistake Identification", "No"}};
  Harness h(false, [&](ServiceConfig&, EvaluatorRegistry& r) {
    r.add(a.evaluator("judge-a"));
    r.add(b.evaluator("judge-b"));
  });

  SUBCASE("compare two tutors under one evaluator") {
    // judge-b says No on MI for everyone, Yes elsewhere: a full tie.
    auto r = h.post("/v1/compare",
                    Json{{"dialogue_id", "demo-01"}, {"tutor_a", "Expert"}, {"tutor_b", "Novice"},
                         {"evaluator_id", "judge-b"}},
                    "CompareRequest", "CompareResponse");
    REQUIRE(r.status == 200);
    CHECK(r.body["comparison"]["overall_winner"] == "tie");
    CHECK(r.body["verdicts_a"].size() == 4);
    CHECK(r.body["verdicts_b"][0]["tutor_id"] == "Novice");
    CHECK(b.calls == 8);
  }

  SUBCASE("two judges disagreeing on one dimension") {
    auto body = Json{{"dialogue_id", "demo-04"}, {"tutor_id", "GPT-4"}, {"judge_a", "judge-a"},
                     {"judge_b", "judge-b"}};
    auto r = h.post("/v1/judge_compare", body, "JudgeCompareRequest", "JudgeCompareResponse");
    REQUIRE(r.status == 200);
    CHECK(r.body["agreement"]["MI"] == false);
    CHECK(r.body["agreement"]["ML"] == true);
    CHECK(r.body["agreement"]["PG"] == true);
    CHECK(r.body["agreement"]["AC"] == true);
    const auto& diffs = r.body["comparison"]["score_differences"];
    int nonzero = 0;
    for (const auto& [dim, d] : diffs.items()) nonzero += d.get<double>() != 0.0;
    CHECK(nonzero == 1);
    CHECK(diffs["MI"].get<double>() > 0.0);
    CHECK(r.body["comparison"]["overall_winner"] == "A");
  }
}

TEST_CASE("service: visualizer and best_by_dimension") {
  Harness h(true);
  auto all = h.get("/v1/visualizer", "VisualizerResponse");
  REQUIRE(all.status == 200);
  CHECK(all.body["split"] == "dev");
  REQUIRE(all.body["tutors"].size() == 9);
  std::size_t cells = 0;
  const auto summaries = tutor_summary(h.dev());
  for (const auto& t : all.body["tutors"]) {
    cells += t["per_dimension"].size();
    const auto it = std::find_if(summaries.begin(), summaries.end(),
                                 [&](const TutorSummary& s) { return s.tutor_id == t["tutor_id"]; });
    REQUIRE(it != summaries.end());
    for (auto dim : kAllDimensions) {
      const auto& cell = t["per_dimension"][std::string(dimension_code(dim))];
      CHECK(cell["n"] == it->n.at(dim));
      CHECK(cell["mean"].get<double>() == doctest::Approx(it->mean.at(dim)).epsilon(1e-12));
    }
    if (t["tutor_id"] == "Novice") CHECK(t["per_dimension"]["MI"]["n"] == 76);
  }
  CHECK(cells == 36);
  for (const auto& [dim, entry] : all.body["label_totals"].items()) {
    double share = 0.0;
    std::size_t count = 0;
    for (const auto& [label, c] : entry.items()) {
      share += c["share"].get<double>();
      count += c["count"].get<std::size_t>();
    }
    CHECK(share == doctest::Approx(1.0));
    CHECK(count == h.dev().response_count());
  }

  auto picked = h.get("/v1/visualizer?tutors=Novice,Expert&dimensions=ML,MI", "VisualizerResponse");
  REQUIRE(picked.body["tutors"].size() == 2);
  CHECK(picked.body["tutors"][0]["tutor_id"] == "Novice");
  CHECK(picked.body["tutors"][0]["per_dimension"].size() == 2);
  CHECK(picked.body["label_totals"].size() == 2);
  CHECK(picked.body["dimensions"] == Json{"ML", "MI"});

  auto best = h.get("/v1/best_by_dimension", "BestResponse");
  REQUIRE(best.status == 200);
  for (const auto& [dim, ids] : best_by_dimension(summaries)) {
    CHECK(best.body["best"][std::string(dimension_code(dim))] == Json(ids));
  }
  auto best_two = h.get("/v1/best_by_dimension?tutors=Novice,Expert&dimensions=AC", "BestResponse");
  CHECK(best_two.body["best"].size() == 1);
}

TEST_CASE("service: feedback round trip") {
  Harness h(true);
  const Json rating{{"kind", "helpfulness"}, {"dialogue_id", "demo-01"}, {"tutor_id", "Expert"},
                    {"rater_id", "r1"}, {"rating", "Helpful"}};
  const Json pref{{"kind", "pairwise"}, {"dialogue_id", "demo-01"}, {"tutor_a", "Expert"},
                  {"tutor_b", "Novice"}, {"rater_id", "r2"}, {"outcome", "A"}, {"request_id", "req-1"}};
  auto r1 = h.post("/v1/feedback", rating, "FeedbackSubmission", "FeedbackReceipt");
  CHECK(r1.status == 201);
  CHECK(r1.body["receipt"] == "fb-00000001");
  auto r2 = h.post("/v1/feedback", pref, "FeedbackSubmission", "FeedbackReceipt");
  CHECK(r2.body["receipt"] == "fb-00000002");
  auto retry = h.post("/v1/feedback", pref);
  CHECK(retry.status == 201);
  CHECK(retry.body["receipt"] == "fb-00000002");
  auto reused = pref;
  reused["outcome"] = "B";
  check_error(h.post("/v1/feedback", reused), 400, "argument_error");

  auto all = h.get("/v1/feedback/export", "FeedbackExport");
  REQUIRE(all.body.size() == 2);
  CHECK(all.body[0]["kind"] == "helpfulness");
  CHECK(all.body[1]["request_id"] == "req-1");
  CHECK(all.body[0]["timestamp_ms"].get<std::int64_t>() < all.body[1]["timestamp_ms"].get<std::int64_t>());
  CHECK(h.get("/v1/feedback/export?kind=pairwise", "FeedbackExport").body.size() == 1);
  CHECK(h.get("/v1/feedback/export?tutor_id=Novice", "FeedbackExport").body.size() == 1);
  CHECK(h.get("/v1/feedback/export?rater_id=r1", "FeedbackExport").body.size() == 1);
  CHECK(h.get("/v1/feedback/export?dialogue_id=demo-02", "FeedbackExport").body.empty());

  auto summary = h.get("/v1/feedback/summary", "FeedbackSummary");
  CHECK(summary.body["records"] == 2);
  REQUIRE(summary.body["helpfulness"].size() == 1);
  CHECK(summary.body["helpfulness"][0]["tutor_id"] == "Expert");
  REQUIRE(summary.body["win_rates"].size() == 2);
  CHECK(summary.body["win_rates"][0]["tutor_id"] == "Expert");
  CHECK(summary.body["win_rates"][0]["win_rate"] == 1.0);
  CHECK(summary.body["win_rates"][1]["win_rate"] == 0.0);

  // The log is the store: a restarted service sees the same records.
  const auto log = h.config().feedback_log;
  h.service().stop();
  const auto records = read_file(log);
  CHECK(std::count(records.begin(), records.end(), '\n') == 3);
}

TEST_CASE("service: static mode never constructs an evaluator") {
  MockChatServer upstream;
  ScopedEnv key("EVALKIT_TEST_STATIC_KEY", "sk-static-secret");
  Harness h(true, [&](ServiceConfig& c, EvaluatorRegistry& r) {
    JudgeSpec remote;
    remote.judge_id = "gpt";
    remote.kind = JudgeKind::remote;
    remote.model_id = "gpt-4o";
    remote.endpoint = upstream.endpoint();
    remote.credentials_ref = "EVALKIT_TEST_STATIC_KEY";
    remote.max_retries = 0;
    c.judges = {remote};
    c.lomtl = LomtlEntry{"lomtl", "/nonexistent/ckpt", "/nonexistent/train.json", "base"};
    r = EvaluatorRegistry::from_config(c);
  });

  // One precomputed verdict for the remote judge.
  const Dialogue& d = h.service().demo().at("demo-06");
  VerdictCache cache(h.config().cache_dir);
  EvalVerdict pre{d.id, "Expert", DimensionKey::mi, Prediction::yes, "gpt", "Yes", 0.25, std::nullopt};
  cache.put(VerdictCache::key("gpt", d.id, "Expert", DimensionKey::mi, d.response("Expert").text), pre);

  auto hit_body = eval_body("demo-06", "Expert", "gpt");
  hit_body["dimensions"] = {"MI"};
  auto hit = h.post("/v1/evaluate", hit_body, "EvaluateRequest", "EvaluateResponse");
  REQUIRE(hit.status == 200);
  CHECK(hit.body["verdicts"][0] == Json::parse(to_json(pre).dump()));

  check_error(h.post("/v1/evaluate", eval_body("demo-06", "Expert", "gpt")), 503, "unavailable");
  check_error(h.post("/v1/evaluate", eval_body("demo-06", "Expert", "lomtl")), 503, "unavailable");
  check_error(h.post("/v1/compare", Json{{"dialogue_id", "demo-06"}, {"tutor_a", "Expert"},
                                         {"tutor_b", "GPT-4"}, {"evaluator_id", "gpt"}}),
              503, "unavailable");
  check_error(h.post("/v1/judge_compare", Json{{"dialogue_id", "demo-06"}, {"tutor_id", "Expert"},
                                               {"judge_a", "gpt"}, {"judge_b", "lomtl"}}),
              503, "unavailable");
  for (const auto* path : {"/v1/health", "/v1/schema", "/v1/dialogues", "/v1/dialogues/demo-06",
                           "/v1/evaluators", "/v1/overview", "/v1/visualizer", "/v1/best_by_dimension",
                           "/v1/feedback/export", "/v1/feedback/summary"}) {
    CAPTURE(path);
    CHECK(h.get(path).status == 200);
  }
  CHECK(h.post("/v1/feedback", Json{{"kind", "helpfulness"}, {"dialogue_id", "demo-06"}, {"tutor_id", "Expert"},
                                    {"rater_id", "r1"}, {"rating", "NotHelpful"}})
            .status == 201);
  auto evaluators = h.get("/v1/evaluators", "EvaluatorList");
  CHECK(evaluators.body["static_mode"] == true);
  CHECK(evaluators.body["evaluators"].size() == 2);
  CHECK(upstream.calls() == 0);
}

TEST_CASE("service: live remote judge goes upstream once per verdict") {
  MockChatServer upstream;
  upstream.set_fallback([](const std::string& prompt) {
    return MockChatServer::Reply{200, prompt.find("###Rubric: Actionability") != std::string::npos ? "No" : "Yes"};
  });
  ScopedEnv key("EVALKIT_TEST_LIVE_KEY", "sk-live-secret");
  Harness h(false, [&](ServiceConfig& c, EvaluatorRegistry& r) {
    JudgeSpec remote;
    remote.judge_id = "gpt";
    remote.kind = JudgeKind::remote;
    remote.model_id = "gpt-4o";
    remote.endpoint = upstream.endpoint();
    remote.credentials_ref = "EVALKIT_TEST_LIVE_KEY";
    remote.max_retries = 0;
    JudgeSpec missing = remote;
    missing.judge_id = "nokey";
    missing.credentials_ref = "EVALKIT_TEST_MISSING_KEY";
    c.judges = {remote, missing};
    r = EvaluatorRegistry::from_config(c);
  });
  auto r = h.post("/v1/evaluate", eval_body("demo-07", "Mistral", "gpt"));
  REQUIRE(r.status == 200);
  CHECK(r.body["verdicts"][3]["label"] == "No");
  CHECK(upstream.calls() == 4);
  CHECK(h.post("/v1/evaluate", eval_body("demo-07", "Mistral", "gpt")).raw == r.raw);
  CHECK(upstream.calls() == 4);
  CHECK(r.raw.find("sk-live-secret") == std::string::npos);

  ScopedEnv unset("EVALKIT_TEST_MISSING_KEY", "");
  check_error(h.post("/v1/evaluate", eval_body("demo-07", "Mistral", "nokey")), 503, "unavailable");
  CHECK(upstream.calls() == 4);
}

TEST_CASE("service: concurrent clients get consistent answers") {
  Scripted s;
  Harness h(false, [&](ServiceConfig&, EvaluatorRegistry& r) { r.add(s.evaluator("judge-a")); });
  const auto tutors = h.service().demo().at("demo-02").responses;
  std::vector<std::thread> threads;
  std::atomic<int> ok{0};
  const int port = h.client().port();
  for (int t = 0; t < 6; ++t) {
    threads.emplace_back([&, t] {
      httplib::Client c("127.0.0.1", port);
      for (int i = 0; i < 8; ++i) {
        const auto& tutor = tutors[(t + i) % tutors.size()].tutor_id;
        auto res = c.Post("/v1/evaluate", eval_body("demo-02", tutor, "judge-a").dump(), "application/json");
        if (res && res->status == 200 && Json::parse(res->body)["verdicts"].size() == 4) ++ok;
      }
    });
  }
  for (auto& t : threads) t.join();
  CHECK(ok == 48);
  // Each (tutor, dimension) is computed at least once and at most once per racing client.
  CHECK(s.calls >= static_cast<int>(tutors.size() * 4));
  const int before = s.calls;
  for (const auto& r : tutors) h.post("/v1/evaluate", eval_body("demo-02", r.tutor_id, "judge-a"));
  CHECK(s.calls == before);
}

TEST_CASE("service: CORS headers when an origin is configured") {
  Harness h(true, [](ServiceConfig& c, EvaluatorRegistry&) { c.cors_origin = "http://localhost:5173"; });
  auto res = h.client().Get("/v1/health");
  REQUIRE(res);
  CHECK(res->get_header_value("Access-Control-Allow-Origin") == "http://localhost:5173");
  auto pre = h.client().Options("/v1/evaluate");
  REQUIRE(pre);
  CHECK(pre->status == 204);
}

TEST_CASE("service: binding a taken port is an environment error") {
  Harness h(true);
  ServiceConfig c = h.config();
  c.port = h.client().port();
  c.feedback_log = (h.dir() / "other.ndjson").string();
  EvalService second(c, EvaluatorRegistry{});
  CHECK_THROWS_AS(second.bind(), EnvironmentError);
}
