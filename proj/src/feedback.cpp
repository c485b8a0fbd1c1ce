#include "evalkit/feedback.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "evalkit/errors.hpp"
#include "evalkit/text.hpp"

namespace evalkit {

namespace fs = std::filesystem;

namespace {

constexpr const char* kLogFormat = "evalkit-feedback-log";
constexpr int kLogVersion = 1;
constexpr std::size_t kMaxRaterIdLength = 128;

std::string squash(std::string_view text) {
  std::string out;
  for (char c : trim(text)) {
    if (c != ' ' && c != '_' && c != '-') out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  }
  return out;
}

std::string errno_text() { return std::strerror(errno); }

std::int64_t now_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(
             std::chrono::system_clock::now().time_since_epoch())
      .count();
}

void write_all(int fd, std::string_view data) {
  while (!data.empty()) {
    const ssize_t n = ::write(fd, data.data(), data.size());
    if (n < 0) {
      if (errno == EINTR) continue;
      throw StorageError(fmt::format("feedback log write failed: {}", errno_text()));
    }
    data.remove_prefix(static_cast<std::size_t>(n));
  }
}

void sync_directory(const fs::path& dir) {
  const int dfd = ::open(dir.c_str(), O_RDONLY | O_DIRECTORY | O_CLOEXEC);
  if (dfd < 0) return;
  ::fsync(dfd);
  ::close(dfd);
}

std::string header_line() {
  nlohmann::ordered_json h;
  h["format"] = kLogFormat;
  h["version"] = kLogVersion;
  return h.dump() + "\n";
}

std::string required_string(const nlohmann::json& j, const char* key) {
  const auto it = j.find(key);
  if (it == j.end() || !it->is_string()) {
    throw SchemaError(fmt::format("feedback field '{}' must be a string", key));
  }
  return it->get<std::string>();
}

}  // namespace

std::string_view helpfulness_name(Helpfulness h) noexcept {
  switch (h) {
    case Helpfulness::helpful: return "Helpful";
    case Helpfulness::to_some_extent: return "ToSomeExtent";
    case Helpfulness::not_helpful: return "NotHelpful";
  }
  return "";
}

std::optional<Helpfulness> parse_helpfulness(std::string_view text) {
  const auto s = squash(text);
  if (s == "helpful") return Helpfulness::helpful;
  if (s == "tosomeextent") return Helpfulness::to_some_extent;
  if (s == "nothelpful") return Helpfulness::not_helpful;
  return std::nullopt;
}

std::string_view outcome_name(PreferenceOutcome o) noexcept {
  switch (o) {
    case PreferenceOutcome::a: return "A";
    case PreferenceOutcome::b: return "B";
    case PreferenceOutcome::both_good: return "BothGood";
    case PreferenceOutcome::both_bad: return "BothBad";
  }
  return "";
}

std::optional<PreferenceOutcome> parse_outcome(std::string_view text) {
  const auto s = squash(text);
  if (s == "a") return PreferenceOutcome::a;
  if (s == "b") return PreferenceOutcome::b;
  if (s == "bothgood") return PreferenceOutcome::both_good;
  if (s == "bothbad") return PreferenceOutcome::both_bad;
  return std::nullopt;
}

std::string_view feedback_kind_name(FeedbackKind k) noexcept {
  return k == FeedbackKind::helpfulness ? "helpfulness" : "pairwise";
}

std::optional<FeedbackKind> parse_feedback_kind(std::string_view text) {
  const auto s = squash(text);
  if (s == "helpfulness" || s == "rating") return FeedbackKind::helpfulness;
  if (s == "pairwise" || s == "preference") return FeedbackKind::pairwise;
  return std::nullopt;
}

FeedbackKind FeedbackRecord::kind() const noexcept {
  return std::holds_alternative<HelpfulnessRating>(item) ? FeedbackKind::helpfulness
                                                         : FeedbackKind::pairwise;
}

const std::string& FeedbackRecord::dialogue_id() const noexcept {
  return std::visit([](const auto& x) -> const std::string& { return x.dialogue_id; }, item);
}

const std::string& FeedbackRecord::rater_id() const noexcept {
  return std::visit([](const auto& x) -> const std::string& { return x.rater_id; }, item);
}

bool FeedbackRecord::involves_tutor(std::string_view tutor_id) const noexcept {
  if (const auto* h = std::get_if<HelpfulnessRating>(&item)) return h->tutor_id == tutor_id;
  const auto& p = std::get<PairwisePreference>(item);
  return p.tutor_a == tutor_id || p.tutor_b == tutor_id;
}

namespace {

void item_fields(nlohmann::ordered_json& j, const FeedbackItem& item) {
  if (const auto* h = std::get_if<HelpfulnessRating>(&item)) {
    j["kind"] = feedback_kind_name(FeedbackKind::helpfulness);
    j["dialogue_id"] = h->dialogue_id;
    j["tutor_id"] = h->tutor_id;
    j["rater_id"] = h->rater_id;
    j["rating"] = helpfulness_name(h->rating);
  } else {
    const auto& p = std::get<PairwisePreference>(item);
    j["kind"] = feedback_kind_name(FeedbackKind::pairwise);
    j["dialogue_id"] = p.dialogue_id;
    j["tutor_a"] = p.tutor_a;
    j["tutor_b"] = p.tutor_b;
    j["rater_id"] = p.rater_id;
    j["outcome"] = outcome_name(p.outcome);
  }
}

}  // namespace

nlohmann::ordered_json to_json(const FeedbackRecord& r) {
  nlohmann::ordered_json j;
  j["receipt"] = r.receipt;
  j["timestamp_ms"] = r.timestamp_ms;
  item_fields(j, r.item);
  if (!r.request_id.empty()) j["request_id"] = r.request_id;
  return j;
}

FeedbackItem feedback_item_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw SchemaError("feedback must be a JSON object");
  const auto kind_text = required_string(j, "kind");
  const auto kind = parse_feedback_kind(kind_text);
  if (!kind) throw SchemaError(fmt::format("unknown feedback kind '{}'", kind_text));
  if (*kind == FeedbackKind::helpfulness) {
    HelpfulnessRating h;
    h.dialogue_id = required_string(j, "dialogue_id");
    h.tutor_id = required_string(j, "tutor_id");
    h.rater_id = required_string(j, "rater_id");
    const auto text = required_string(j, "rating");
    const auto rating = parse_helpfulness(text);
    if (!rating) throw SchemaError(fmt::format("unknown rating '{}'", text));
    h.rating = *rating;
    return h;
  }
  PairwisePreference p;
  p.dialogue_id = required_string(j, "dialogue_id");
  p.tutor_a = required_string(j, "tutor_a");
  p.tutor_b = required_string(j, "tutor_b");
  p.rater_id = required_string(j, "rater_id");
  const auto text = required_string(j, "outcome");
  const auto outcome = parse_outcome(text);
  if (!outcome) throw SchemaError(fmt::format("unknown outcome '{}'", text));
  p.outcome = *outcome;
  return p;
}

FeedbackRecord feedback_record_from_json(const nlohmann::json& j) {
  FeedbackRecord r;
  r.item = feedback_item_from_json(j);
  r.receipt = required_string(j, "receipt");
  const auto ts = j.find("timestamp_ms");
  if (ts == j.end() || !ts->is_number_integer()) {
    throw SchemaError("feedback field 'timestamp_ms' must be an integer");
  }
  r.timestamp_ms = ts->get<std::int64_t>();
  if (const auto rid = j.find("request_id"); rid != j.end()) {
    if (!rid->is_string()) throw SchemaError("feedback field 'request_id' must be a string");
    r.request_id = rid->get<std::string>();
  }
  return r;
}

bool FeedbackFilter::matches(const FeedbackRecord& r) const {
  if (dialogue_id && r.dialogue_id() != *dialogue_id) return false;
  if (tutor_id && !r.involves_tutor(*tutor_id)) return false;
  if (rater_id && r.rater_id() != *rater_id) return false;
  if (kind && r.kind() != *kind) return false;
  return true;
}

// ---------------------------------------------------------------------------

FeedbackStore::FeedbackStore(fs::path log_path, const DatasetSplit& served)
    : path_(std::move(log_path)), served_(served) {
  if (path_.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path_.parent_path(), ec);
    if (ec) {
      throw StorageError(fmt::format("cannot create '{}': {}", path_.parent_path().string(), ec.message()));
    }
  }
  fd_ = ::open(path_.c_str(), O_RDWR | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
  if (fd_ < 0) {
    throw StorageError(fmt::format("cannot open feedback log '{}': {}", path_.string(), errno_text()));
  }
  if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
    ::close(fd_);
    throw StorageError(fmt::format("feedback log '{}' is in use by another store", path_.string()));
  }
  try {
    recover();
  } catch (...) {
    ::close(fd_);
    throw;
  }
}

FeedbackStore::~FeedbackStore() {
  if (fd_ >= 0) ::close(fd_);
}

void FeedbackStore::recover() {
  std::string data;
  {
    std::ifstream in(path_, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    data = ss.str();
  }
  const auto newline = data.find('\n');
  if (newline == std::string::npos) {
    // New file, or a crash before the header was complete.
    if (::ftruncate(fd_, 0) != 0) {
      throw StorageError(fmt::format("cannot reset feedback log '{}': {}", path_.string(), errno_text()));
    }
    write_all(fd_, header_line());
    if (::fdatasync(fd_) != 0) {
      throw StorageError(fmt::format("cannot sync feedback log '{}': {}", path_.string(), errno_text()));
    }
    sync_directory(path_.has_parent_path() ? path_.parent_path() : fs::path("."));
    return;
  }
  try {
    const auto header = nlohmann::json::parse(data.substr(0, newline));
    if (header.at("format") != kLogFormat) throw std::runtime_error("wrong format tag");
    if (header.at("version") != kLogVersion) {
      throw StorageError(fmt::format("feedback log '{}' has unsupported version {}", path_.string(),
                                     header.at("version").dump()));
    }
  } catch (const StorageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StorageError(fmt::format("'{}' is not a feedback log: {}", path_.string(), e.what()));
  }

  std::set<std::string> receipts;
  std::size_t pos = newline + 1;
  std::size_t line_no = 1;
  while (pos < data.size()) {
    ++line_no;
    const auto end = data.find('\n', pos);
    if (end == std::string::npos) {
      spdlog::warn("feedback log '{}': dropping torn final record ({} bytes)", path_.string(),
                   data.size() - pos);
      if (::ftruncate(fd_, static_cast<off_t>(pos)) != 0 || ::fdatasync(fd_) != 0) {
        throw StorageError(fmt::format("cannot repair feedback log '{}': {}", path_.string(), errno_text()));
      }
      break;
    }
    FeedbackRecord r;
    try {
      r = feedback_record_from_json(nlohmann::json::parse(data.substr(pos, end - pos)));
    } catch (const std::exception& e) {
      throw StorageError(
          fmt::format("feedback log '{}' is damaged at line {}: {}", path_.string(), line_no, e.what()));
    }
    pos = end + 1;
    if (!receipts.insert(r.receipt).second) {
      spdlog::warn("feedback log '{}': ignoring repeated receipt {}", path_.string(), r.receipt);
      continue;
    }
    if (!r.request_id.empty() && by_request_.count(r.request_id)) {
      spdlog::warn("feedback log '{}': ignoring repeated request {}", path_.string(), r.request_id);
      continue;
    }
    last_timestamp_ = std::max(last_timestamp_, r.timestamp_ms);
    if (r.receipt.rfind("fb-", 0) == 0) {
      try {
        next_sequence_ = std::max<std::uint64_t>(next_sequence_, std::stoull(r.receipt.substr(3)) + 1);
      } catch (const std::exception&) {
      }
    }
    if (!r.request_id.empty()) by_request_.emplace(r.request_id, records_.size());
    records_.push_back(std::move(r));
  }
  spdlog::info("feedback log '{}': {} records", path_.string(), records_.size());
}

void FeedbackStore::check_references(const FeedbackItem& item) const {
  const auto need_response = [&](const Dialogue& d, const std::string& tutor) {
    if (!d.find_response(tutor)) {
      throw ReferenceError(fmt::format("dialogue '{}' has no response from tutor '{}'", d.id, tutor));
    }
  };
  const auto need_dialogue = [&](const std::string& id) -> const Dialogue& {
    const Dialogue* d = served_.find(id);
    if (!d) throw ReferenceError(fmt::format("unknown dialogue '{}'", id));
    return *d;
  };
  const auto need_rater = [](const std::string& rater) {
    if (trim(rater).empty()) throw ArgumentError("rater_id must not be empty");
    if (rater.size() > kMaxRaterIdLength) {
      throw ArgumentError(fmt::format("rater_id longer than {} characters", kMaxRaterIdLength));
    }
  };
  if (const auto* h = std::get_if<HelpfulnessRating>(&item)) {
    need_rater(h->rater_id);
    need_response(need_dialogue(h->dialogue_id), h->tutor_id);
    return;
  }
  const auto& p = std::get<PairwisePreference>(item);
  need_rater(p.rater_id);
  if (p.tutor_a == p.tutor_b) {
    throw ReferenceError(fmt::format("pairwise preference names tutor '{}' twice", p.tutor_a));
  }
  const Dialogue& d = need_dialogue(p.dialogue_id);
  need_response(d, p.tutor_a);
  need_response(d, p.tutor_b);
}

std::string FeedbackStore::record(const FeedbackItem& item, const std::string& request_id) {
  check_references(item);
  std::unique_lock lock(mutex_);
  if (!request_id.empty()) {
    if (const auto it = by_request_.find(request_id); it != by_request_.end()) {
      const FeedbackRecord& prior = records_[it->second];
      if (prior.item != item) {
        throw ArgumentError(fmt::format("request_id '{}' was already used for different feedback", request_id));
      }
      return prior.receipt;
    }
  }
  FeedbackRecord r;
  r.receipt = fmt::format("fb-{:08d}", next_sequence_);
  r.timestamp_ms = std::max(now_ms(), last_timestamp_ + 1);
  r.request_id = request_id;
  r.item = item;
  const std::string line = to_json(r).dump() + "\n";

  const off_t before = ::lseek(fd_, 0, SEEK_END);
  if (before < 0) throw StorageError(fmt::format("feedback log seek failed: {}", errno_text()));
  try {
    write_all(fd_, line);
    if (::fdatasync(fd_) != 0) {
      throw StorageError(fmt::format("feedback log sync failed: {}", errno_text()));
    }
  } catch (const StorageError&) {
    if (::ftruncate(fd_, before) != 0) {
      spdlog::error("feedback log '{}': could not roll back a failed append: {}", path_.string(), errno_text());
    }
    throw;
  }
  ++next_sequence_;
  last_timestamp_ = r.timestamp_ms;
  if (!request_id.empty()) by_request_.emplace(request_id, records_.size());
  records_.push_back(std::move(r));
  return records_.back().receipt;
}

std::vector<FeedbackRecord> FeedbackStore::export_records(const FeedbackFilter& filter) const {
  std::vector<FeedbackRecord> out;
  {
    std::shared_lock lock(mutex_);
    for (const auto& r : records_) {
      if (filter.matches(r)) out.push_back(r);
    }
  }
  std::stable_sort(out.begin(), out.end(), [](const FeedbackRecord& a, const FeedbackRecord& b) {
    return std::tie(a.timestamp_ms, a.receipt) < std::tie(b.timestamp_ms, b.receipt);
  });
  return out;
}

std::size_t FeedbackStore::size() const {
  std::shared_lock lock(mutex_);
  return records_.size();
}

// ---------------------------------------------------------------------------

std::vector<HelpfulnessSummary> helpfulness_summary(const std::vector<FeedbackRecord>& records) {
  std::map<std::string, HelpfulnessSummary> by_tutor;
  for (const auto& r : records) {
    const auto* h = std::get_if<HelpfulnessRating>(&r.item);
    if (!h) continue;
    auto& s = by_tutor[h->tutor_id];
    s.tutor_id = h->tutor_id;
    ++s.counts[static_cast<std::size_t>(h->rating)];
    ++s.total;
  }
  std::vector<HelpfulnessSummary> out;
  for (auto& [_, s] : by_tutor) out.push_back(std::move(s));
  return out;
}

std::vector<WinRate> win_rates(const std::vector<FeedbackRecord>& records) {
  std::map<std::string, WinRate> by_tutor;
  const auto entry = [&](const std::string& id) -> WinRate& {
    auto& w = by_tutor[id];
    w.tutor_id = id;
    return w;
  };
  for (const auto& r : records) {
    const auto* p = std::get_if<PairwisePreference>(&r.item);
    if (!p) continue;
    WinRate& a = entry(p->tutor_a);
    WinRate& b = entry(p->tutor_b);
    ++a.comparisons;
    ++b.comparisons;
    switch (p->outcome) {
      case PreferenceOutcome::a: ++a.wins; ++b.losses; break;
      case PreferenceOutcome::b: ++b.wins; ++a.losses; break;
      case PreferenceOutcome::both_good: ++a.both_good; ++b.both_good; break;
      case PreferenceOutcome::both_bad: ++a.both_bad; ++b.both_bad; break;
    }
  }
  std::vector<WinRate> out;
  for (auto& [_, w] : by_tutor) {
    w.win_rate = static_cast<double>(w.wins) / static_cast<double>(w.comparisons);
    out.push_back(std::move(w));
  }
  return out;
}

nlohmann::ordered_json to_json(const HelpfulnessSummary& s) {
  nlohmann::ordered_json j;
  j["tutor_id"] = s.tutor_id;
  for (auto h : {Helpfulness::helpful, Helpfulness::to_some_extent, Helpfulness::not_helpful}) {
    j["counts"][std::string(helpfulness_name(h))] = s.counts[static_cast<std::size_t>(h)];
  }
  j["total"] = s.total;
  return j;
}

nlohmann::ordered_json to_json(const WinRate& w) {
  nlohmann::ordered_json j;
  j["tutor_id"] = w.tutor_id;
  j["comparisons"] = w.comparisons;
  j["wins"] = w.wins;
  j["losses"] = w.losses;
  j["both_good"] = w.both_good;
  j["both_bad"] = w.both_bad;
  j["win_rate"] = w.win_rate;
  return j;
}

}  // namespace evalkit
