#include <doctest.h>

#include <chrono>
#include <filesystem>

#include "evalkit/errors.hpp"
#include "evalkit/judges.hpp"
#include "evalkit/lomtl/sampling.hpp"
#include "synthetic.hpp"
// After Eigen: httplib pulls in <resolv.h>, whose _res macro breaks Eigen headers.
#include "mock_chat.hpp"

using namespace evalkit;
using testing::LogCapture;
using testing::MockChatServer;
using testing::ScopedEnv;
namespace fs = std::filesystem;

namespace {

constexpr const char* kSecret = "sk-test-9f2c7e1b4d";
constexpr const char* kCredVar = "EVALKIT_TEST_JUDGE_KEY";

DatasetSplit fixture() {
  return load_dataset(testing::fixture_dir() / "golden_dialogues.json", SplitName::test);
}

JudgeSpec remote_spec(const MockChatServer& server) {
  JudgeSpec s;
  s.judge_id = "mock-remote";
  s.kind = JudgeKind::remote;
  s.model_id = "mock-model";
  s.endpoint = server.endpoint();
  s.credentials_ref = kCredVar;
  s.max_retries = 2;
  s.initial_backoff = 0.01;
  s.max_backoff = 0.02;
  s.request_timeout = 5.0;
  return s;
}

std::vector<JudgeItem> all_items(const DatasetSplit& split) {
  std::vector<JudgeItem> items;
  for (const auto& d : split.dialogues) {
    for (const auto& r : d.responses) {
      for (auto dim : kAllDimensions) items.push_back({&d, r.tutor_id, dim});
    }
  }
  return items;
}

std::string dir_contents(const fs::path& dir) {
  std::string all;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) all += testing::read_file(e.path());
  }
  return all;
}

}  // namespace

TEST_CASE("judge spec validation") {
  JudgeSpec s;
  s.judge_id = "j";
  CHECK_THROWS_AS(s.validate(), ConfigError);  // local without command or model
  s.command = {"/bin/cat"};
  CHECK_NOTHROW(s.validate());
  s.max_retries = -1;
  CHECK_THROWS_AS(s.validate(), ConfigError);

  JudgeSpec r;
  r.judge_id = "r";
  r.kind = JudgeKind::remote;
  r.model_id = "m";
  CHECK_THROWS_AS(r.validate(), ConfigError);
  r.endpoint = "ftp://example.invalid/x";
  r.credentials_ref = "X";
  CHECK_THROWS_AS(r.validate(), ConfigError);
  r.endpoint = "https://example.invalid/v1/chat/completions";
  CHECK_NOTHROW(r.validate());
  r.credentials_ref.clear();
  CHECK_THROWS_AS(r.validate(), ConfigError);
}

TEST_CASE("judge spec JSON round-trip") {
  JudgeSpec r;
  r.judge_id = "r";
  r.kind = JudgeKind::remote;
  r.model_id = "m";
  r.endpoint = "http://localhost:1/v1/chat/completions";
  r.credentials_ref = "KEY";
  r.max_retries = 5;
  r.initial_backoff = 0.5;
  const auto back = JudgeSpec::from_json(r.to_json());
  CHECK(back.to_json() == r.to_json());
  CHECK_THROWS_AS(JudgeSpec::from_json(nlohmann::json{{"kind", "remote"}}), ConfigError);
  CHECK_THROWS_AS(JudgeSpec::from_json(nlohmann::json{{"judge_id", "x"}, {"kind", "cloud"}}),
                  ConfigError);
}

TEST_CASE("missing credentials fail before any request") {
  MockChatServer server;
  ::unsetenv(kCredVar);
  const auto spec = remote_spec(server);
  CHECK_THROWS_AS(make_judge(spec), ConfigError);
  const auto split = fixture();
  CHECK_THROWS_AS(judge(spec, split.dialogues[0], "Expert", DimensionKey::mi), ConfigError);
  CHECK_THROWS_AS(judge_batch(spec, all_items(split)), ConfigError);
  ScopedEnv empty(kCredVar, "");
  CHECK_THROWS_AS(make_judge(spec), ConfigError);
  CHECK(server.calls() == 0);
}

TEST_CASE("remote judge: success path") {
  MockChatServer server;
  ScopedEnv env(kCredVar, kSecret);
  server.script({{200, "  To some extent. The tutor hints at the error."}});
  const auto split = fixture();
  const auto v = judge(remote_spec(server), split.dialogues[0], "Expert", DimensionKey::ml);
  CHECK(v.label == Prediction::to_some_extent);
  CHECK(v.raw_output == "  To some extent. The tutor hints at the error.");
  CHECK(v.evaluator_id == "mock-remote");
  CHECK(v.dialogue_id == "gd-001");
  CHECK(v.tutor_id == "Expert");
  CHECK(v.dimension == DimensionKey::ml);
  CHECK(v.latency_seconds >= 0.0);
  CHECK_FALSE(v.error.has_value());
  REQUIRE(server.calls() == 1);
  CHECK(server.auth_headers()[0] == std::string("Bearer ") + kSecret);
  const auto prompt = server.prompts()[0];
  CHECK(prompt.find(split.dialogues[0].response("Expert").text) != std::string::npos);
  CHECK(prompt.find("Mistake Location") != std::string::npos);
}

TEST_CASE("remote judge: unrecognised text is Unparseable, not an error") {
  MockChatServer server;
  ScopedEnv env(kCredVar, kSecret);
  server.script({{200, "The response is adequate."}});
  const auto split = fixture();
  const auto v = judge(remote_spec(server), split.dialogues[0], "Expert", DimensionKey::mi);
  CHECK(v.label == Prediction::unparseable);
  CHECK_FALSE(v.error.has_value());
}

TEST_CASE("remote judge: persistent 429 gives exactly max_retries + 1 attempts") {
  MockChatServer server;
  ScopedEnv env(kCredVar, kSecret);
  server.script({{429, ""}, {429, ""}, {429, ""}, {200, "Yes"}});
  const auto split = fixture();
  const auto spec = remote_spec(server);
  try {
    judge(spec, split.dialogues[0], "Expert", DimensionKey::mi);
    FAIL("expected RemoteError");
  } catch (const RemoteError& e) {
    CHECK(e.status() == 429);
    CHECK(e.attempts() == 3);
  }
  CHECK(server.calls() == 3);
}

TEST_CASE("remote judge: backoff doubles up to the cap") {
  MockChatServer server;
  ScopedEnv env(kCredVar, kSecret);
  server.set_fallback([](const std::string&) { return MockChatServer::Reply{503, ""}; });
  auto spec = remote_spec(server);
  spec.max_retries = 3;
  spec.initial_backoff = 0.05;
  spec.max_backoff = 0.08;  // sleeps 0.05, 0.08, 0.08
  const auto split = fixture();
  const auto t0 = std::chrono::steady_clock::now();
  CHECK_THROWS_AS(judge(spec, split.dialogues[0], "Expert", DimensionKey::mi), RemoteError);
  const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  CHECK(server.calls() == 4);
  CHECK(elapsed >= 0.21);
  CHECK(elapsed < 2.0);
}

TEST_CASE("remote judge: transient failure then success") {
  MockChatServer server;
  ScopedEnv env(kCredVar, kSecret);
  server.script({{500, ""}, {429, ""}, {200, "No"}});
  const auto split = fixture();
  const auto v = judge(remote_spec(server), split.dialogues[0], "Expert", DimensionKey::pg);
  CHECK(v.label == Prediction::no);
  CHECK(server.calls() == 3);
}

TEST_CASE("remote judge: client errors are not retried") {
  MockChatServer server;
  ScopedEnv env(kCredVar, kSecret);
  server.script({{401, ""}});
  const auto split = fixture();
  try {
    judge(remote_spec(server), split.dialogues[0], "Expert", DimensionKey::mi);
    FAIL("expected RemoteError");
  } catch (const RemoteError& e) {
    CHECK(e.status() == 401);
    CHECK(e.attempts() == 1);
  }
  CHECK(server.calls() == 1);
}

TEST_CASE("remote judge: transport failure is retried and reports status 0") {
  int dead_port = 0;
  {
    MockChatServer probe;
    dead_port = std::stoi(probe.endpoint().substr(std::string("http://127.0.0.1:").size()));
  }
  ScopedEnv env(kCredVar, kSecret);
  JudgeSpec spec;
  spec.judge_id = "dead";
  spec.kind = JudgeKind::remote;
  spec.model_id = "m";
  spec.endpoint = "http://127.0.0.1:" + std::to_string(dead_port) + "/v1/chat/completions";
  spec.credentials_ref = kCredVar;
  spec.max_retries = 1;
  spec.initial_backoff = 0.01;
  spec.max_backoff = 0.01;
  spec.request_timeout = 1.0;
  const auto split = fixture();
  try {
    judge(spec, split.dialogues[0], "Expert", DimensionKey::mi);
    FAIL("expected RemoteError");
  } catch (const RemoteError& e) {
    CHECK(e.status() == 0);
    CHECK(e.attempts() == 2);
  }
}

TEST_CASE("remote judge: malformed completion is a RemoteError") {
  MockChatServer server;
  ScopedEnv env(kCredVar, kSecret);
  server.set_fallback([](const std::string&) { return MockChatServer::Reply{200, ""}; });
  auto spec = remote_spec(server);
  // A 200 reply that is not a completion document.
  httplib::Server bad;
  bad.Post("/c", [](const httplib::Request&, httplib::Response& res) {
    res.set_content("{\"unexpected\":true}", "application/json");
  });
  const int port = bad.bind_to_any_port("127.0.0.1");
  std::thread t([&] { bad.listen_after_bind(); });
  bad.wait_until_ready();
  spec.endpoint = "http://127.0.0.1:" + std::to_string(port) + "/c";
  const auto split = fixture();
  CHECK_THROWS_AS(judge(spec, split.dialogues[0], "Expert", DimensionKey::mi), RemoteError);
  bad.stop();
  t.join();
}

TEST_CASE("credentials never reach logs, verdicts or cache files") {
  MockChatServer server;
  ScopedEnv env(kCredVar, kSecret);
  testing::TempDir tmp("judge-cred");
  const std::string echo = std::string("invalid key ") + kSecret;
  // The first item exhausts its retries on replies that echo the key, the
  // second gets a completion that echoes it.
  server.script({{429, echo}, {429, echo}, {429, echo}, {200, std::string("Yes ") + kSecret}});
  const auto split = fixture();
  const std::vector<JudgeItem> items{{&split.dialogues[0], "Expert", DimensionKey::mi},
                                     {&split.dialogues[0], "GPT-4", DimensionKey::mi}};
  VerdictCache cache(tmp.path());
  LogCapture logs;
  const auto verdicts = judge_batch(remote_spec(server), items, &cache, 1);
  REQUIRE(verdicts.size() == 2);
  CHECK(verdicts[0].error.has_value());
  CHECK(verdicts[1].label == Prediction::yes);
  const std::string log_text = logs.text();
  CHECK(log_text.find("attempt") != std::string::npos);
  CHECK(log_text.find(kSecret) == std::string::npos);
  for (const auto& v : verdicts) {
    CHECK(to_json(v).dump().find(kSecret) == std::string::npos);
  }
  CHECK(cache.size() == 1);
  CHECK(dir_contents(tmp.path()).find(kSecret) == std::string::npos);
}

TEST_CASE("warm cache eliminates repeat calls") {
  MockChatServer server;
  ScopedEnv env(kCredVar, kSecret);
  server.set_fallback([](const std::string& prompt) {
    return MockChatServer::Reply{200, prompt.size() % 2 ? "Yes" : "No, not really"};
  });
  testing::TempDir tmp("judge-cache");
  const auto split = fixture();
  const auto items = all_items(split);
  VerdictCache cache(tmp.path());
  const auto first = judge_batch(remote_spec(server), items, &cache, 4);
  CHECK(server.calls() == static_cast<int>(items.size()));
  CHECK(cache.size() == items.size());

  VerdictCache reopened(tmp.path());
  const auto second = judge_batch(remote_spec(server), items, &reopened, 4);
  CHECK(server.calls() == static_cast<int>(items.size()));
  REQUIRE(second.size() == first.size());
  for (std::size_t i = 0; i < first.size(); ++i) {
    CHECK(second[i] == first[i]);
    CHECK(second[i].raw_output == first[i].raw_output);
  }
}

TEST_CASE("cache keys are content addressed") {
  const auto base = VerdictCache::key("e", "d", "t", DimensionKey::mi, "text");
  CHECK(base.size() == 64);
  CHECK(base == VerdictCache::key("e", "d", "t", DimensionKey::mi, "text"));
  CHECK(base != VerdictCache::key("e2", "d", "t", DimensionKey::mi, "text"));
  CHECK(base != VerdictCache::key("e", "d2", "t", DimensionKey::mi, "text"));
  CHECK(base != VerdictCache::key("e", "d", "t2", DimensionKey::mi, "text"));
  CHECK(base != VerdictCache::key("e", "d", "t", DimensionKey::ml, "text"));
  CHECK(base != VerdictCache::key("e", "d", "t", DimensionKey::mi, "text."));
  // Field boundaries are unambiguous.
  CHECK(VerdictCache::key("ab", "c", "t", DimensionKey::mi, "x") !=
        VerdictCache::key("a", "bc", "t", DimensionKey::mi, "x"));
}

TEST_CASE("cache ignores corrupt entries and does not store errors") {
  testing::TempDir tmp("judge-corrupt");
  VerdictCache cache(tmp.path());
  const auto key = VerdictCache::key("e", "d", "t", DimensionKey::mi, "x");
  EvalVerdict v{"d", "t", DimensionKey::mi, Prediction::yes, "e", "Yes", 0.1, std::nullopt};
  cache.put(key, v);
  REQUIRE(cache.get(key).has_value());
  CHECK(*cache.get(key) == v);

  EvalVerdict failed = v;
  failed.error = "boom";
  const auto key2 = VerdictCache::key("e", "d", "t", DimensionKey::ml, "x");
  cache.put(key2, failed);
  CHECK_FALSE(cache.get(key2).has_value());

  fs::path file;
  for (const auto& e : fs::recursive_directory_iterator(tmp.path())) {
    if (e.is_regular_file()) file = e.path();
  }
  testing::write_file(file, "{ not json");
  LogCapture logs;
  CHECK_FALSE(cache.get(key).has_value());
  CHECK(logs.text().find("unreadable") != std::string::npos);
}

TEST_CASE("batch isolates a poisoned item and preserves order") {
  const auto split = fixture();
  auto items = all_items(split);
  items.resize(10);
  items[4].tutor_id = "NoSuchTutor";
  int calls = 0;
  std::mutex m;
  auto gen = std::make_shared<FunctionGenerator>([&](const std::string&) {
    std::lock_guard lock(m);
    ++calls;
    return std::string("Yes");
  });
  Evaluator ev({"scripted", "scripted", ""}, gen, PromptTemplate::load(default_template_dir() / "judge.txt"),
               4096, whitespace_token_count);
  for (int parallelism : {1, 3}) {
    calls = 0;
    const auto out = judge_batch(ev, items, nullptr, parallelism);
    REQUIRE(out.size() == 10);
    CHECK(calls == 9);
    for (std::size_t i = 0; i < out.size(); ++i) {
      CHECK(out[i].tutor_id == items[i].tutor_id);
      CHECK(out[i].dimension == items[i].dimension);
      CHECK(out[i].error.has_value() == (i == 4));
    }
    CHECK(out[4].label == Prediction::unparseable);
    CHECK(out[4].error->find("NoSuchTutor") != std::string::npos);
  }
  CHECK(judge_batch(ev, {}, nullptr, 4).empty());
}

TEST_CASE("batch turns generator exceptions into error verdicts") {
  const auto split = fixture();
  const auto items = all_items(split);
  auto gen = std::make_shared<FunctionGenerator>([](const std::string& prompt) -> std::string {
    if (prompt.find("Mistake Location") != std::string::npos) throw RemoteError("down", 503, 4);
    return "No";
  });
  Evaluator ev({"flaky", "scripted", ""}, gen, PromptTemplate::load(default_template_dir() / "judge.txt"),
               4096, whitespace_token_count);
  testing::TempDir tmp("judge-flaky");
  VerdictCache cache(tmp.path());
  const auto out = judge_batch(ev, items, &cache, 2);
  std::size_t errors = 0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const bool expect_error = items[i].dimension == DimensionKey::ml;
    CHECK(out[i].error.has_value() == expect_error);
    errors += expect_error;
  }
  CHECK(cache.size() == out.size() - errors);
}

TEST_CASE("command judge") {
  const auto split = fixture();
  JudgeSpec s;
  s.judge_id = "cmd";
  s.command = {"/bin/sh", "-c", "wc -w >/dev/null; echo 'Yes, clearly.'"};
  s.request_timeout = 10.0;
  const auto v = judge(s, split.dialogues[1], "Expert", DimensionKey::ac);
  CHECK(v.label == Prediction::yes);
  CHECK(v.raw_output == "Yes, clearly.\n");

  SUBCASE("prompt arrives on stdin") {
    CommandGenerator cat({"/bin/cat"}, 10.0);
    const std::string big(1 << 20, 'x');
    CHECK(cat.generate(big) == big);
  }
  SUBCASE("a child that ignores stdin does not break the caller") {
    CommandGenerator quiet({"/bin/sh", "-c", "echo No"}, 10.0);
    CHECK(quiet.generate(std::string(1 << 20, 'y')) == "No\n");
  }
  SUBCASE("non-zero exit is a RemoteError") {
    CommandGenerator failing({"/bin/sh", "-c", "cat >/dev/null; exit 3"}, 10.0);
    CHECK_THROWS_AS(failing.generate("p"), RemoteError);
  }
  SUBCASE("missing executable is a RemoteError") {
    CommandGenerator missing({"/nonexistent/judge-binary"}, 10.0);
    CHECK_THROWS_AS(missing.generate("p"), RemoteError);
  }
  SUBCASE("timeout kills the child") {
    CommandGenerator slow({"/bin/sh", "-c", "sleep 30"}, 0.3);
    const auto t0 = std::chrono::steady_clock::now();
    CHECK_THROWS_AS(slow.generate("p"), RemoteError);
    CHECK(std::chrono::steady_clock::now() - t0 < std::chrono::seconds(5));
  }
}

TEST_CASE("local model judge decodes greedily and deterministically") {
  const auto split = fixture();
  const auto tmpl = PromptTemplate::load(default_template_dir() / "judge.txt");
  const auto examples = testing::keyword_examples(3, 5, tmpl, 400, whitespace_token_count);
  testing::TempDir tmp("judge-local");
  testing::toy_base(examples, 512, 9).save(tmp.path());

  JudgeSpec s;
  s.judge_id = "toy-local";
  s.model_id = tmp.path().string();
  s.max_new_tokens = 4;
  const auto ev = make_judge(s);
  CHECK(ev->info().kind == "local");
  for (const auto& d : split.dialogues) {
    const auto a = ev->evaluate(d, d.responses[0].tutor_id, DimensionKey::mi);
    const auto b = ev->evaluate(d, d.responses[0].tutor_id, DimensionKey::mi);
    CHECK(a.raw_output == b.raw_output);
    CHECK(a.label == b.label);
    CHECK(a.evaluator_id == "toy-local");
  }

  s.model_id = (tmp.path() / "missing").string();
  CHECK_THROWS_AS(make_judge(s), EnvironmentError);
}
