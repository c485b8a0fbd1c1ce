#include "evalkit/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <tuple>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "evalkit/errors.hpp"
#include "evalkit/text.hpp"

namespace evalkit {

namespace {

void check_lengths(const std::vector<TernaryLabel>& gold, const std::vector<Prediction>& pred) {
  if (gold.size() != pred.size()) {
    throw ArgumentError(
        fmt::format("gold and prediction lengths differ ({} vs {})", gold.size(), pred.size()));
  }
  if (gold.empty()) throw ArgumentError("cannot score an empty label sequence");
}

std::string dim_key(DimensionKey d) { return std::string(dimension_code(d)); }

}  // namespace

double accuracy(const std::vector<TernaryLabel>& gold, const std::vector<Prediction>& pred) {
  check_lengths(gold, pred);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) hits += to_prediction(gold[i]) == pred[i];
  return static_cast<double>(hits) / static_cast<double>(gold.size());
}

std::array<std::optional<double>, 3> per_class_f1(const std::vector<TernaryLabel>& gold,
                                                  const std::vector<Prediction>& pred) {
  check_lengths(gold, pred);
  std::array<std::size_t, 3> tp{}, fp{}, fn{};
  for (std::size_t i = 0; i < gold.size(); ++i) {
    const auto g = static_cast<std::size_t>(gold[i]);
    const auto p = to_label(pred[i]);
    if (p && *p == gold[i]) {
      ++tp[g];
      continue;
    }
    ++fn[g];
    if (p) ++fp[static_cast<std::size_t>(*p)];
  }
  std::array<std::optional<double>, 3> out;
  for (std::size_t c = 0; c < 3; ++c) {
    const std::size_t denom = 2 * tp[c] + fp[c] + fn[c];
    if (denom == 0) continue;
    out[c] = 2.0 * static_cast<double>(tp[c]) / static_cast<double>(denom);
  }
  return out;
}

double macro_f1(const std::vector<TernaryLabel>& gold, const std::vector<Prediction>& pred) {
  const auto f1 = per_class_f1(gold, pred);
  double sum = 0.0;
  int present = 0;
  for (const auto& f : f1) {
    if (!f) continue;
    sum += *f;
    ++present;
  }
  return sum / present;  // gold is non-empty, so at least one class is present
}

ScoreReport finalize_report(std::map<DimensionKey, DimensionMetrics> per_dimension,
                            std::string evaluator_id) {
  if (per_dimension.empty()) throw ArgumentError("score report has no dimensions");
  ScoreReport r;
  r.evaluator_id = std::move(evaluator_id);
  double acc = 0.0;
  double f1 = 0.0;
  for (const auto& [dim, m] : per_dimension) {
    if (m.n == 0) {
      throw ArgumentError(fmt::format("dimension {} has no scored items", dimension_code(dim)));
    }
    acc += m.accuracy;
    f1 += m.macro_f1;
  }
  const auto k = static_cast<double>(per_dimension.size());
  r.averaged_accuracy = acc / k;
  r.averaged_macro_f1 = f1 / k;
  r.per_dimension = std::move(per_dimension);
  return r;
}

ScoreReport score_report(const std::vector<EvalVerdict>& verdicts, const DatasetSplit& gold_source) {
  if (verdicts.empty()) throw ArgumentError("no verdicts to score");
  const std::string& evaluator = verdicts.front().evaluator_id;

  std::map<DimensionKey, std::pair<std::vector<TernaryLabel>, std::vector<Prediction>>> cols;
  std::set<std::tuple<std::string, std::string, DimensionKey>> seen;
  std::vector<std::string> orphans;
  for (const auto& v : verdicts) {
    if (v.evaluator_id != evaluator) {
      throw ArgumentError(fmt::format("verdicts mix evaluators '{}' and '{}'", evaluator,
                                      v.evaluator_id));
    }
    if (!seen.emplace(v.dialogue_id, v.tutor_id, v.dimension).second) {
      throw ArgumentError(fmt::format("duplicate verdict for {}/{}/{}", v.dialogue_id, v.tutor_id,
                                      dimension_code(v.dimension)));
    }
    const Dialogue* d = gold_source.find(v.dialogue_id);
    const ResponseRecord* r = d ? d->find_response(v.tutor_id) : nullptr;
    const auto g = r ? r->gold_for(v.dimension) : std::nullopt;
    if (!g) {
      orphans.push_back(fmt::format("{}/{}/{}", v.dialogue_id, v.tutor_id, dimension_code(v.dimension)));
      continue;
    }
    cols[v.dimension].first.push_back(*g);
    cols[v.dimension].second.push_back(v.label);
  }
  if (!orphans.empty()) {
    throw UnlabeledDataError(fmt::format("{} verdicts have no gold label: {}", orphans.size(),
                                         join(orphans, ", ")));
  }
  std::map<DimensionKey, DimensionMetrics> rows;
  for (const auto& [dim, c] : cols) {
    DimensionMetrics m;
    m.accuracy = accuracy(c.first, c.second);
    m.macro_f1 = macro_f1(c.first, c.second);
    m.n = c.first.size();
    m.unparseable = static_cast<std::size_t>(
        std::count(c.second.begin(), c.second.end(), Prediction::unparseable));
    rows[dim] = m;
  }
  return finalize_report(std::move(rows), evaluator);
}

nlohmann::ordered_json to_json(const ScoreReport& r) {
  nlohmann::ordered_json j;
  j["evaluator_id"] = r.evaluator_id;
  j["per_dimension"] = nlohmann::ordered_json::object();
  for (const auto& [dim, m] : r.per_dimension) {
    j["per_dimension"][dim_key(dim)] = {{"accuracy", m.accuracy},
                                        {"macro_f1", m.macro_f1},
                                        {"n", m.n},
                                        {"unparseable", m.unparseable}};
  }
  j["averaged"] = {{"accuracy", r.averaged_accuracy}, {"macro_f1", r.averaged_macro_f1}};
  return j;
}

double label_to_score(TernaryLabel label) noexcept {
  switch (label) {
    case TernaryLabel::yes: return 1.0;
    case TernaryLabel::to_some_extent: return 0.5;
    case TernaryLabel::no: return 0.0;
  }
  return 0.0;
}

double label_to_score(Prediction label) {
  const auto l = to_label(label);
  if (!l) throw ArgumentError("an Unparseable label has no score");
  return label_to_score(*l);
}

namespace {

struct Accumulator {
  std::vector<std::string> order;
  std::map<std::string, std::map<DimensionKey, std::array<std::size_t, 3>>> counts;

  void add(const std::string& tutor, DimensionKey dim, TernaryLabel label) {
    auto it = counts.find(tutor);
    if (it == counts.end()) {
      order.push_back(tutor);
      it = counts.emplace(tutor, std::map<DimensionKey, std::array<std::size_t, 3>>{}).first;
    }
    ++it->second[dim][static_cast<std::size_t>(label)];
  }

  std::vector<TutorSummary> finish() const {
    std::vector<TutorSummary> out;
    for (const auto& tutor : order) {
      TutorSummary s;
      s.tutor_id = tutor;
      for (const auto& [dim, c] : counts.at(tutor)) {
        const std::size_t n = c[0] + c[1] + c[2];
        double total = 0.0;
        for (std::size_t l = 0; l < 3; ++l) {
          total += static_cast<double>(c[l]) * label_to_score(kAllLabels[l]);
        }
        s.mean[dim] = total / static_cast<double>(n);
        s.n[dim] = n;
        s.distribution[dim] = c;
      }
      out.push_back(std::move(s));
    }
    return out;
  }
};

}  // namespace

std::vector<TutorSummary> tutor_summary(const DatasetSplit& split) {
  Accumulator acc;
  std::vector<std::string> unlabeled;
  for (const auto& tutor : split.tutors()) {
    bool any = false;
    for (const auto& d : split.dialogues) {
      const auto* r = d.find_response(tutor);
      if (!r) continue;
      for (const auto& [dim, label] : r->gold) {
        acc.add(tutor, dim, label);
        any = true;
      }
    }
    if (!any) unlabeled.push_back(tutor);
  }
  for (const auto& t : unlabeled) spdlog::warn("tutor '{}' has no gold labels; omitted", t);
  return acc.finish();
}

std::vector<TutorSummary> tutor_summary(const std::vector<EvalVerdict>& verdicts) {
  Accumulator acc;
  std::size_t skipped = 0;
  for (const auto& v : verdicts) {
    const auto l = to_label(v.label);
    if (!l) {
      ++skipped;
      continue;
    }
    acc.add(v.tutor_id, v.dimension, *l);
  }
  if (skipped) spdlog::warn("{} Unparseable verdicts excluded from tutor means", skipped);
  return acc.finish();
}

std::map<DimensionKey, std::vector<std::string>> best_by_dimension(
    const std::vector<TutorSummary>& summaries) {
  constexpr double kTie = 1e-12;
  std::map<DimensionKey, std::vector<std::string>> out;
  std::map<DimensionKey, double> best;
  for (const auto& s : summaries) {
    for (const auto& [dim, mean] : s.mean) {
      auto it = best.find(dim);
      if (it == best.end() || mean > it->second + kTie) {
        best[dim] = mean;
        out[dim] = {s.tutor_id};
      } else if (std::abs(mean - it->second) <= kTie) {
        out[dim].push_back(s.tutor_id);
      }
    }
  }
  for (auto& [dim, ids] : out) std::sort(ids.begin(), ids.end());
  return out;
}

std::string_view leader_name(Leader l) noexcept {
  switch (l) {
    case Leader::a: return "A";
    case Leader::b: return "B";
    case Leader::tie: return "tie";
  }
  return "tie";
}

ComparisonResult compare_pair(const std::map<DimensionKey, Prediction>& a,
                              const std::map<DimensionKey, Prediction>& b) {
  if (a.size() != b.size() ||
      !std::equal(a.begin(), a.end(), b.begin(),
                  [](const auto& x, const auto& y) { return x.first == y.first; })) {
    throw ArgumentError("compared tutors were evaluated on different dimensions");
  }
  ComparisonResult r;
  for (const auto& [dim, pa] : a) {
    const Prediction pb = b.at(dim);
    if (pa == Prediction::unparseable || pb == Prediction::unparseable) {
      r.unscored.push_back(dim);
      continue;
    }
    const double diff = label_to_score(pa) - label_to_score(pb);
    r.score_differences[dim] = diff;
    const Leader lead = diff > 0 ? Leader::a : diff < 0 ? Leader::b : Leader::tie;
    r.per_dimension_leader[dim] = lead;
    r.leads_a += lead == Leader::a;
    r.leads_b += lead == Leader::b;
  }
  r.overall_winner = r.leads_a > r.leads_b   ? Leader::a
                     : r.leads_b > r.leads_a ? Leader::b
                                             : Leader::tie;
  return r;
}

nlohmann::ordered_json to_json(const ComparisonResult& c) {
  nlohmann::ordered_json j;
  j["per_dimension_leader"] = nlohmann::ordered_json::object();
  for (const auto& [dim, l] : c.per_dimension_leader) j["per_dimension_leader"][dim_key(dim)] = leader_name(l);
  j["score_differences"] = nlohmann::ordered_json::object();
  for (const auto& [dim, d] : c.score_differences) j["score_differences"][dim_key(dim)] = d;
  j["unscored"] = nlohmann::ordered_json::array();
  for (DimensionKey d : c.unscored) j["unscored"].push_back(dim_key(d));
  j["leads"] = {{"A", c.leads_a}, {"B", c.leads_b}};
  j["overall_winner"] = leader_name(c.overall_winner);
  return j;
}

nlohmann::ordered_json to_json(const TutorSummary& s) {
  nlohmann::ordered_json j;
  j["tutor_id"] = s.tutor_id;
  j["per_dimension"] = nlohmann::ordered_json::object();
  for (const auto& [dim, mean] : s.mean) {
    const auto& c = s.distribution.at(dim);
    j["per_dimension"][dim_key(dim)] = {
        {"mean", mean},
        {"n", s.n.at(dim)},
        {"distribution", {{"Yes", c[0]}, {"To some extent", c[1]}, {"No", c[2]}}}};
  }
  return j;
}

}  // namespace evalkit
