#include <doctest.h>

#include <signal.h>
#include <sys/resource.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <set>
#include <sstream>
#include <thread>

#include <fmt/format.h>

#include "evalkit/errors.hpp"
#include "evalkit/feedback.hpp"
#include "synthetic.hpp"

using namespace evalkit;
namespace fs = std::filesystem;

namespace {

DatasetSplit fixture() {
  return load_dataset(testing::fixture_dir() / "golden_dialogues.json", SplitName::test);
}

HelpfulnessRating rating(std::string d, std::string t, Helpfulness h, std::string rater = "s-1") {
  return {std::move(d), std::move(t), std::move(rater), h};
}

PairwisePreference pref(std::string d, std::string a, std::string b, PreferenceOutcome o,
                        std::string rater = "s-1") {
  return {std::move(d), std::move(a), std::move(b), std::move(rater), o};
}

std::size_t line_count(const fs::path& p) {
  const auto text = testing::read_file(p);
  return static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n'));
}

}  // namespace

TEST_CASE("feedback vocabularies") {
  for (auto h : {Helpfulness::helpful, Helpfulness::to_some_extent, Helpfulness::not_helpful}) {
    CHECK(parse_helpfulness(helpfulness_name(h)) == h);
  }
  CHECK(parse_helpfulness("To Some Extent") == Helpfulness::to_some_extent);
  CHECK(parse_helpfulness("not helpful") == Helpfulness::not_helpful);
  CHECK_FALSE(parse_helpfulness("meh").has_value());
  for (auto o : {PreferenceOutcome::a, PreferenceOutcome::b, PreferenceOutcome::both_good,
                 PreferenceOutcome::both_bad}) {
    CHECK(parse_outcome(outcome_name(o)) == o);
  }
  CHECK(parse_outcome("both good") == PreferenceOutcome::both_good);
  CHECK_FALSE(parse_outcome("C").has_value());
}

TEST_CASE("feedback JSON round-trip and schema errors") {
  FeedbackRecord r{"fb-00000007", 1234, "req-1", pref("gd-001", "Expert", "GPT-4", PreferenceOutcome::b)};
  CHECK(feedback_record_from_json(to_json(r)) == r);
  FeedbackRecord h{"fb-00000008", 99, "", rating("gd-002", "Expert", Helpfulness::not_helpful)};
  CHECK(feedback_record_from_json(to_json(h)) == h);
  CHECK_FALSE(to_json(h).contains("request_id"));

  CHECK_THROWS_AS(feedback_item_from_json(nlohmann::json::array()), SchemaError);
  CHECK_THROWS_AS(feedback_item_from_json({{"kind", "vote"}}), SchemaError);
  CHECK_THROWS_AS(feedback_item_from_json({{"kind", "helpfulness"},
                                           {"dialogue_id", "d"},
                                           {"tutor_id", "t"},
                                           {"rater_id", "r"},
                                           {"rating", "Great"}}),
                  SchemaError);
  CHECK_THROWS_AS(feedback_item_from_json({{"kind", "pairwise"}, {"dialogue_id", 3}}), SchemaError);
}

TEST_CASE("record, export and filters") {
  const auto split = fixture();
  testing::TempDir tmp("fb-basic");
  FeedbackStore store(tmp / "feedback.ndjson", split);
  CHECK(store.size() == 0);

  const auto r1 = store.record(rating("gd-001", "Expert", Helpfulness::helpful));
  CHECK(store.size() == 1);
  store.record(rating("gd-001", "GPT-4", Helpfulness::to_some_extent, "s-2"));
  store.record(rating("gd-002", "Expert", Helpfulness::not_helpful, "s-2"));
  store.record(pref("gd-001", "Expert", "Phi-3", PreferenceOutcome::a));
  store.record(pref("gd-003", "Sonnet", "Gemini", PreferenceOutcome::both_good, "s-3"));

  const auto all = store.export_records();
  REQUIRE(all.size() == 5);
  CHECK(all[0].receipt == r1);
  std::set<std::string> receipts;
  for (std::size_t i = 0; i < all.size(); ++i) {
    receipts.insert(all[i].receipt);
    if (i > 0) CHECK(all[i - 1].timestamp_ms < all[i].timestamp_ms);
  }
  CHECK(receipts.size() == 5);

  CHECK(store.export_records({.kind = FeedbackKind::pairwise}).size() == 2);
  CHECK(store.export_records({.kind = FeedbackKind::helpfulness}).size() == 3);
  CHECK(store.export_records({.dialogue_id = "gd-001"}).size() == 3);
  CHECK(store.export_records({.tutor_id = "Expert"}).size() == 3);
  CHECK(store.export_records({.tutor_id = "Gemini"}).size() == 1);
  CHECK(store.export_records({.rater_id = "s-2"}).size() == 2);
  CHECK(store.export_records({.dialogue_id = "gd-001", .kind = FeedbackKind::pairwise}).size() == 1);
  CHECK(store.export_records({.rater_id = "nobody"}).empty());

  // Every exported record joins to the served split.
  for (const auto& r : all) CHECK(split.find(r.dialogue_id()) != nullptr);
}

TEST_CASE("invalid feedback is rejected without touching the log") {
  const auto split = fixture();
  testing::TempDir tmp("fb-invalid");
  FeedbackStore store(tmp / "feedback.ndjson", split);
  const auto before = testing::read_file(store.path());
  CHECK_THROWS_AS(store.record(pref("gd-001", "Expert", "Expert", PreferenceOutcome::a)), ReferenceError);
  CHECK_THROWS_AS(store.record(rating("gd-404", "Expert", Helpfulness::helpful)), ReferenceError);
  CHECK_THROWS_AS(store.record(rating("gd-001", "Llama-3.1-8B", Helpfulness::helpful)), ReferenceError);
  CHECK_THROWS_AS(store.record(pref("gd-001", "Expert", "Sonnet", PreferenceOutcome::a)), ReferenceError);
  CHECK_THROWS_AS(store.record(rating("gd-001", "Expert", Helpfulness::helpful, "  ")), ArgumentError);
  CHECK_THROWS_AS(store.record(rating("gd-001", "Expert", Helpfulness::helpful, std::string(200, 'x'))),
                  ArgumentError);
  CHECK(store.size() == 0);
  CHECK(testing::read_file(store.path()) == before);
}

TEST_CASE("reopening replays the log and continues receipts") {
  const auto split = fixture();
  testing::TempDir tmp("fb-reopen");
  std::vector<FeedbackRecord> first;
  {
    FeedbackStore store(tmp / "feedback.ndjson", split);
    store.record(rating("gd-001", "Expert", Helpfulness::helpful), "req-a");
    store.record(pref("gd-002", "Expert", "Llama-3.1-8B", PreferenceOutcome::b), "req-b");
    first = store.export_records();
  }
  FeedbackStore store(tmp / "feedback.ndjson", split);
  CHECK(store.export_records() == first);
  const auto r3 = store.record(rating("gd-003", "Mistral", Helpfulness::not_helpful));
  CHECK(r3 == "fb-00000003");
  CHECK(store.export_records().back().timestamp_ms > first.back().timestamp_ms);

  SUBCASE("a retried request returns its original receipt") {
    CHECK(store.record(rating("gd-001", "Expert", Helpfulness::helpful), "req-a") == first[0].receipt);
    CHECK(store.size() == 3);
    CHECK_THROWS_AS(store.record(rating("gd-001", "Expert", Helpfulness::not_helpful), "req-a"),
                    ArgumentError);
    CHECK(store.size() == 3);
  }
}

TEST_CASE("a torn final record is dropped on open") {
  const auto split = fixture();
  testing::TempDir tmp("fb-torn");
  const auto path = tmp / "feedback.ndjson";
  {
    FeedbackStore store(path, split);
    store.record(rating("gd-001", "Expert", Helpfulness::helpful));
    store.record(rating("gd-001", "Phi-3", Helpfulness::helpful));
  }
  const auto intact = testing::read_file(path);
  testing::write_file(path, intact + R"({"receipt":"fb-00000003","timestamp_ms":17,"kind":"helpf)");
  {
    FeedbackStore store(path, split);
    CHECK(store.size() == 2);
    CHECK(testing::read_file(path) == intact);
    CHECK(store.record(rating("gd-002", "Expert", Helpfulness::helpful)) == "fb-00000003");
  }
  FeedbackStore store(path, split);
  CHECK(store.size() == 3);
}

TEST_CASE("damage before the tail and foreign files are refused") {
  const auto split = fixture();
  testing::TempDir tmp("fb-damage");
  const auto path = tmp / "feedback.ndjson";
  {
    FeedbackStore store(path, split);
    store.record(rating("gd-001", "Expert", Helpfulness::helpful));
  }
  const auto text = testing::read_file(path);
  testing::write_file(path, text + "garbage\n");
  CHECK_THROWS_AS(FeedbackStore(path, split), StorageError);

  testing::write_file(tmp / "other.txt", "{\"format\":\"something-else\"}\n");
  CHECK_THROWS_AS(FeedbackStore(tmp / "other.txt", split), StorageError);

  testing::write_file(tmp / "future.ndjson", "{\"format\":\"evalkit-feedback-log\",\"version\":9}\n");
  CHECK_THROWS_AS(FeedbackStore(tmp / "future.ndjson", split), StorageError);
}

TEST_CASE("a log cannot be opened by two stores") {
  const auto split = fixture();
  testing::TempDir tmp("fb-lock");
  FeedbackStore store(tmp / "feedback.ndjson", split);
  CHECK_THROWS_AS(FeedbackStore(tmp / "feedback.ndjson", split), StorageError);
}

TEST_CASE("a failed append leaves no partial record") {
  const auto split = fixture();
  testing::TempDir tmp("fb-full");
  FeedbackStore store(tmp / "feedback.ndjson", split);
  store.record(rating("gd-001", "Expert", Helpfulness::helpful));
  const auto before = testing::read_file(store.path());

  rlimit old{};
  REQUIRE(::getrlimit(RLIMIT_FSIZE, &old) == 0);
  const auto old_handler = ::signal(SIGXFSZ, SIG_IGN);
  rlimit tight = old;
  tight.rlim_cur = before.size() + 16;  // room for a fragment, not a record
  REQUIRE(::setrlimit(RLIMIT_FSIZE, &tight) == 0);
  CHECK_THROWS_AS(store.record(rating("gd-001", "GPT-4", Helpfulness::helpful)), StorageError);
  ::setrlimit(RLIMIT_FSIZE, &old);
  ::signal(SIGXFSZ, old_handler);

  CHECK(store.size() == 1);
  CHECK(testing::read_file(store.path()) == before);
  CHECK(store.record(rating("gd-001", "GPT-4", Helpfulness::helpful)) == "fb-00000002");
}

TEST_CASE("concurrent records are serialized; exports see a prefix") {
  const auto split = fixture();
  testing::TempDir tmp("fb-concurrent");
  FeedbackStore store(tmp / "feedback.ndjson", split);
  constexpr int kThreads = 8;
  constexpr int kEach = 40;
  std::atomic<bool> done{false};
  std::vector<std::vector<FeedbackRecord>> snapshots;
  std::thread reader([&] {
    while (!done) {
      snapshots.push_back(store.export_records());
      std::this_thread::sleep_for(std::chrono::milliseconds(1));
    }
  });
  std::vector<std::thread> writers;
  for (int t = 0; t < kThreads; ++t) {
    writers.emplace_back([&, t] {
      for (int i = 0; i < kEach; ++i) {
        store.record(rating("gd-001", i % 2 ? "Expert" : "Phi-3", Helpfulness::helpful,
                            "s-" + std::to_string(t)));
      }
    });
  }
  for (auto& w : writers) w.join();
  done = true;
  reader.join();

  const auto final_records = store.export_records();
  REQUIRE(final_records.size() == kThreads * kEach);
  std::set<std::string> receipts;
  for (const auto& r : final_records) receipts.insert(r.receipt);
  CHECK(receipts.size() == final_records.size());
  std::size_t previous = 0;
  for (const auto& snap : snapshots) {
    CHECK(snap.size() >= previous);
    previous = snap.size();
    for (std::size_t i = 0; i < snap.size(); ++i) CHECK(snap[i] == final_records[i]);
  }
  CHECK(line_count(store.path()) == 1 + final_records.size());
}

TEST_CASE("kill and restart: no lost acknowledgements, no duplicates") {
  const auto split = fixture();
  testing::TempDir tmp("fb-kill");
  const auto path = tmp / "feedback.ndjson";
  const auto acks = tmp / "acks.txt";

  const pid_t child = ::fork();
  REQUIRE(child >= 0);
  if (child == 0) {
    // Writer: acknowledges each receipt only after record() returned.
    FeedbackStore store(path, split);
    FILE* out = std::fopen(acks.c_str(), "w");
    for (int i = 0;; ++i) {
      const auto receipt = store.record(rating("gd-001", "Expert", Helpfulness::helpful),
                                        "req-" + std::to_string(i));
      std::fprintf(out, "req-%d %s\n", i, receipt.c_str());
      std::fflush(out);
    }
  }
  const auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(20);
  while (std::chrono::steady_clock::now() < deadline &&
         (!fs::exists(path) || line_count(path) < 60)) {
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
  }
  ::kill(child, SIGKILL);
  int status = 0;
  ::waitpid(child, &status, 0);
  REQUIRE(WIFSIGNALED(status));

  FeedbackStore store(path, split);
  const auto records = store.export_records();
  CHECK(records.size() >= 59);
  std::set<std::string> receipts;
  std::set<std::string> requests;
  for (const auto& r : records) {
    receipts.insert(r.receipt);
    requests.insert(r.request_id);
  }
  CHECK(receipts.size() == records.size());
  CHECK(requests.size() == records.size());

  // Every acknowledged receipt survived, and a client retrying any request
  // (acknowledged or not) gets the stored receipt without a new record.
  std::istringstream ack_lines(testing::read_file(acks));
  std::string request, receipt;
  std::size_t acknowledged = 0;
  while (ack_lines >> request >> receipt) {
    ++acknowledged;
    CHECK(receipts.count(receipt) == 1);
  }
  CHECK(acknowledged <= records.size());
  const std::size_t n = records.size();
  for (const auto& r : records) {
    CHECK(store.record(r.item, r.request_id) == r.receipt);
  }
  CHECK(store.size() == n);
  CHECK(store.record(rating("gd-001", "Expert", Helpfulness::helpful), "req-" + std::to_string(n)) ==
        fmt::format("fb-{:08d}", n + 1));
}

TEST_CASE("helpfulness and win-rate aggregation match a hand count") {
  std::vector<FeedbackRecord> records;
  int seq = 0;
  const auto add = [&](FeedbackItem item) {
    ++seq;
    records.push_back({fmt::format("fb-{:08d}", seq), seq, "", std::move(item)});
  };
  add(pref("gd-001", "Expert", "GPT-4", PreferenceOutcome::a));
  add(pref("gd-001", "Expert", "Phi-3", PreferenceOutcome::a));
  add(pref("gd-001", "GPT-4", "Phi-3", PreferenceOutcome::b));
  add(pref("gd-001", "Expert", "GPT-4", PreferenceOutcome::both_good));
  add(pref("gd-002", "Expert", "Llama-3.1-8B", PreferenceOutcome::b));
  add(pref("gd-003", "Sonnet", "Gemini", PreferenceOutcome::both_bad));
  add(rating("gd-001", "Expert", Helpfulness::helpful));
  add(rating("gd-002", "Expert", Helpfulness::helpful));
  add(rating("gd-001", "Expert", Helpfulness::to_some_extent));
  add(rating("gd-003", "Gemini", Helpfulness::not_helpful));

  const auto wr = win_rates(records);
  // Hand count, tutors sorted by id:
  //   Expert  4 comparisons: won 2, lost 1, both good 1
  //   GPT-4   3 comparisons: lost 2, both good 1
  //   Gemini  1 comparison: both bad
  //   Llama   1 comparison: won 1
  //   Phi-3   2 comparisons: won 1, lost 1
  //   Sonnet  1 comparison: both bad
  REQUIRE(wr.size() == 6);
  const std::vector<std::tuple<std::string, std::size_t, std::size_t, std::size_t, std::size_t, std::size_t, double>>
      expected{{"Expert", 4, 2, 1, 1, 0, 0.5},     {"GPT-4", 3, 0, 2, 1, 0, 0.0},
               {"Gemini", 1, 0, 0, 0, 1, 0.0},     {"Llama-3.1-8B", 1, 1, 0, 0, 0, 1.0},
               {"Phi-3", 2, 1, 1, 0, 0, 0.5},      {"Sonnet", 1, 0, 0, 0, 1, 0.0}};
  for (std::size_t i = 0; i < wr.size(); ++i) {
    const auto& [id, n, w, l, bg, bb, rate] = expected[i];
    CAPTURE(id);
    CHECK(wr[i].tutor_id == id);
    CHECK(wr[i].comparisons == n);
    CHECK(wr[i].wins == w);
    CHECK(wr[i].losses == l);
    CHECK(wr[i].both_good == bg);
    CHECK(wr[i].both_bad == bb);
    CHECK(wr[i].win_rate == doctest::Approx(rate));
  }

  const auto hs = helpfulness_summary(records);
  REQUIRE(hs.size() == 2);
  CHECK(hs[0].tutor_id == "Expert");
  CHECK(hs[0].counts == std::array<std::size_t, 3>{2, 1, 0});
  CHECK(hs[0].total == 3);
  CHECK(hs[1].tutor_id == "Gemini");
  CHECK(hs[1].counts == std::array<std::size_t, 3>{0, 0, 1});
  CHECK(to_json(hs[0])["counts"]["ToSomeExtent"] == 1);
  CHECK(to_json(wr[0])["win_rate"] == 0.5);
}
