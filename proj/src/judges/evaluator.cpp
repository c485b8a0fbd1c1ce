#include <algorithm>
#include <atomic>
#include <chrono>
#include <fstream>
#include <sstream>
#include <thread>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "evalkit/errors.hpp"
#include "evalkit/judges.hpp"
#include "evalkit/lomtl/normalize.hpp"
#include "evalkit/lomtl/trainer.hpp"
#include "evalkit/text.hpp"

namespace evalkit {

namespace fs = std::filesystem;

Evaluator::Evaluator(EvaluatorInfo info, std::shared_ptr<TextGenerator> generator,
                     PromptTemplate tmpl, std::size_t token_budget, TokenCounter counter)
    : info_(std::move(info)),
      generator_(std::move(generator)),
      template_(std::move(tmpl)),
      budget_(token_budget),
      counter_(std::move(counter)) {
  if (!generator_) throw ArgumentError(fmt::format("evaluator '{}' has no generator", info_.id));
}

PromptInstance Evaluator::prompt_for(const Dialogue& d, std::string_view tutor_id,
                                     DimensionKey dim) const {
  return build_prompt(d, tutor_id, dimension(dim), template_, budget_, counter_);
}

EvalVerdict Evaluator::evaluate(const Dialogue& d, std::string_view tutor_id, DimensionKey dim) const {
  const PromptInstance prompt = prompt_for(d, tutor_id, dim);
  const auto start = std::chrono::steady_clock::now();
  std::string raw = generator_->generate(prompt.text);
  EvalVerdict v;
  v.latency_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  v.dialogue_id = d.id;
  v.tutor_id = std::string(tutor_id);
  v.dimension = dim;
  v.label = lomtl::normalize_output(raw);
  v.evaluator_id = info_.id;
  v.raw_output = std::move(raw);
  if (v.label == Prediction::unparseable) {
    spdlog::debug("evaluator '{}': unparseable output for {}/{}/{}", info_.id, d.id, tutor_id,
                 dimension_code(dim));
  }
  return v;
}

namespace {

class LocalModelGenerator final : public TextGenerator {
 public:
  LocalModelGenerator(std::shared_ptr<const lomtl::CausalLM> model, int max_new_tokens)
      : model_(std::move(model)), max_new_tokens_(max_new_tokens) {}
  std::string generate(const std::string& prompt) override {
    lomtl::DecodeOptions opts;
    opts.max_new_tokens = max_new_tokens_;
    return lomtl::generate_text(*model_, nullptr, prompt, opts);
  }

 private:
  std::shared_ptr<const lomtl::CausalLM> model_;
  int max_new_tokens_;
};

class LomtlGenerator final : public TextGenerator {
 public:
  explicit LomtlGenerator(std::shared_ptr<const lomtl::LomtlModel> model) : model_(std::move(model)) {}
  std::string generate(const std::string& prompt) override {
    PromptInstance p;
    p.text = prompt;
    return model_->predict(p);
  }

 private:
  std::shared_ptr<const lomtl::LomtlModel> model_;
};

PromptTemplate judge_template(const JudgeSpec& spec) {
  return PromptTemplate::load(spec.prompt_template.empty() ? default_template_dir() / "judge.txt"
                                                           : fs::path(spec.prompt_template));
}

}  // namespace

std::shared_ptr<Evaluator> make_judge(const JudgeSpec& spec) {
  spec.validate();
  EvaluatorInfo info{spec.judge_id, spec.kind == JudgeKind::remote ? "remote" : "local", spec.model_id};
  std::shared_ptr<TextGenerator> gen;
  TokenCounter counter = whitespace_token_count;
  std::size_t budget = spec.max_prompt_tokens;
  if (spec.kind == JudgeKind::remote) {
    gen = std::make_shared<RemoteChatGenerator>(spec);
  } else if (!spec.command.empty()) {
    gen = std::make_shared<CommandGenerator>(spec.command, spec.request_timeout);
  } else {
    auto model = std::make_shared<const lomtl::CausalLM>(lomtl::CausalLM::load(spec.model_id));
    counter = [model](std::string_view text) { return model->tokenizer().count(text); };
    const auto room = static_cast<std::size_t>(model->shape().context_length - spec.max_new_tokens - 1);
    budget = std::min(budget, room);
    gen = std::make_shared<LocalModelGenerator>(model, spec.max_new_tokens);
  }
  return std::make_shared<Evaluator>(std::move(info), std::move(gen), judge_template(spec), budget,
                                     std::move(counter));
}

std::shared_ptr<Evaluator> make_lomtl_evaluator(const fs::path& checkpoint_dir,
                                                const fs::path& config_path, std::string id) {
  const auto cfg = lomtl::TrainConfig::load(config_path);
  auto model = std::make_shared<const lomtl::LomtlModel>(lomtl::LomtlModel::load(checkpoint_dir, cfg));
  EvaluatorInfo info{std::move(id), "lomtl", cfg.base_model_id};
  return std::make_shared<Evaluator>(std::move(info), std::make_shared<LomtlGenerator>(model),
                                     lomtl::template_for(cfg), model->prompt_budget(),
                                     model->token_counter());
}

EvalVerdict judge(const JudgeSpec& spec, const Dialogue& dialogue, std::string_view tutor_id,
                  DimensionKey dimension) {
  return make_judge(spec)->evaluate(dialogue, tutor_id, dimension);
}

// ---------------------------------------------------------------------------
// Cache

VerdictCache::VerdictCache(fs::path dir) : dir_(std::move(dir)) {
  std::error_code ec;
  fs::create_directories(dir_, ec);
  if (ec) {
    throw StorageError(fmt::format("cannot create verdict cache '{}': {}", dir_.string(), ec.message()));
  }
}

std::string VerdictCache::key(std::string_view evaluator_id, std::string_view dialogue_id,
                              std::string_view tutor_id, DimensionKey dim,
                              std::string_view response_text) {
  nlohmann::ordered_json k;
  k["evaluator_id"] = evaluator_id;
  k["dialogue_id"] = dialogue_id;
  k["tutor_id"] = tutor_id;
  k["dimension"] = dimension_code(dim);
  k["response"] = response_text;
  return sha256_hex(k.dump());
}

fs::path VerdictCache::path_for(const std::string& key) const {
  return dir_ / key.substr(0, 2) / (key + ".json");
}

std::optional<EvalVerdict> VerdictCache::get(const std::string& key) const {
  const fs::path path = path_for(key);
  std::ifstream in(path, std::ios::binary);
  if (!in) return std::nullopt;
  try {
    const auto doc = nlohmann::json::parse(in);
    if (doc.at("key").get<std::string>() != key) {
      spdlog::warn("verdict cache entry '{}' names a different key; ignored", path.string());
      return std::nullopt;
    }
    return verdict_from_json(doc.at("verdict"));
  } catch (const std::exception& e) {
    spdlog::warn("verdict cache entry '{}' is unreadable ({}); ignored", path.string(), e.what());
    return std::nullopt;
  }
}

void VerdictCache::put(const std::string& key, const EvalVerdict& v) {
  if (v.error) return;
  nlohmann::ordered_json doc;
  doc["key"] = key;
  doc["verdict"] = to_json(v);
  const fs::path path = path_for(key);
  std::lock_guard lock(mutex_);
  fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << doc.dump(2) << '\n';
    if (!out) throw StorageError(fmt::format("cannot write verdict cache entry '{}'", tmp.string()));
  }
  fs::rename(tmp, path);
}

std::size_t VerdictCache::size() const {
  std::size_t n = 0;
  std::error_code ec;
  for (const auto& e : fs::recursive_directory_iterator(dir_, ec)) {
    n += e.is_regular_file() && e.path().extension() == ".json";
  }
  return n;
}

// ---------------------------------------------------------------------------
// Batches

std::vector<EvalVerdict> judge_batch(const Evaluator& evaluator, const std::vector<JudgeItem>& items,
                                     VerdictCache* cache, int parallelism) {
  std::vector<EvalVerdict> out(items.size());
  std::atomic<std::size_t> next{0};
  const auto worker = [&] {
    for (std::size_t i = next++; i < items.size(); i = next++) {
      const JudgeItem& item = items[i];
      EvalVerdict& v = out[i];
      v.dialogue_id = item.dialogue ? item.dialogue->id : std::string();
      v.tutor_id = item.tutor_id;
      v.dimension = item.dimension;
      v.evaluator_id = evaluator.id();
      try {
        if (!item.dialogue) throw ArgumentError("batch item has no dialogue");
        const auto& response = item.dialogue->response(item.tutor_id);
        const std::string key = VerdictCache::key(evaluator.id(), item.dialogue->id, item.tutor_id,
                                                  item.dimension, response.text);
        if (cache) {
          if (auto hit = cache->get(key)) {
            v = std::move(*hit);
            continue;
          }
        }
        v = evaluator.evaluate(*item.dialogue, item.tutor_id, item.dimension);
        if (cache) cache->put(key, v);
      } catch (const std::exception& e) {
        v.label = Prediction::unparseable;
        v.raw_output.clear();
        v.error = e.what();
        spdlog::error("evaluator '{}' failed on {}/{}/{}: {}", evaluator.id(), v.dialogue_id,
                      v.tutor_id, dimension_code(v.dimension), e.what());
      }
    }
  };
  const int n_threads =
      std::max(1, std::min(parallelism, static_cast<int>(items.size())));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    for (int t = 0; t < n_threads; ++t) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }
  const auto unparseable = std::count_if(out.begin(), out.end(), [](const EvalVerdict& v) {
    return v.label == Prediction::unparseable && !v.error;
  });
  if (unparseable > 0) {
    spdlog::warn("evaluator '{}': {} of {} outputs were unparseable", evaluator.id(), unparseable, out.size());
  }
  return out;
}

std::vector<EvalVerdict> judge_batch(const JudgeSpec& spec, const std::vector<JudgeItem>& items,
                                     VerdictCache* cache, int parallelism) {
  const auto evaluator = make_judge(spec);
  return judge_batch(*evaluator, items, cache, parallelism);
}

}  // namespace evalkit
