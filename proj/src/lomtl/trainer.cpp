#include "evalkit/lomtl/trainer.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "evalkit/errors.hpp"
#include "evalkit/text.hpp"

namespace evalkit::lomtl {

namespace fs = std::filesystem;

namespace {

constexpr char kAdapterMagic[] = "EVKA";
constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

std::vector<Site> sites_from(const TrainConfig& cfg) {
  std::vector<Site> out;
  for (const auto& name : cfg.lora_targets) {
    const auto s = parse_site(name);
    if (!s) throw ConfigError(fmt::format("unknown LoRA target '{}'", name));
    out.push_back(*s);
  }
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << text;
    if (!out) throw StorageError(fmt::format("cannot write '{}'", tmp.string()));
  }
  fs::rename(tmp, path);
}

class AdamW {
 public:
  explicit AdamW(const LoraAdapters& shape) : m_(shape.zeros_like()), v_(shape.zeros_like()) {}

  void step(LoraAdapters& params, const LoraAdapters& grads, double lr, double weight_decay) {
    ++t_;
    auto p = params.parameters();
    auto g = grads.parameters();
    auto m = m_.parameters();
    auto v = v_.parameters();
    const double bc1 = 1.0 - std::pow(kBeta1, t_);
    const double bc2 = 1.0 - std::pow(kBeta2, t_);
    for (std::size_t i = 0; i < p.size(); ++i) {
      Matrix& pi = *p[i];
      const Matrix& gi = *g[i];
      *m[i] = static_cast<float>(kBeta1) * *m[i] + static_cast<float>(1.0 - kBeta1) * gi;
      *v[i] = static_cast<float>(kBeta2) * *v[i] +
              static_cast<float>(1.0 - kBeta2) * gi.cwiseProduct(gi);
      pi *= static_cast<float>(1.0 - lr * weight_decay);
      const Matrix m_hat = *m[i] / static_cast<float>(bc1);
      const Matrix v_hat = *v[i] / static_cast<float>(bc2);
      pi.array() -= static_cast<float>(lr) *
                    (m_hat.array() / (v_hat.array().sqrt() + static_cast<float>(kAdamEps)));
    }
  }

 private:
  LoraAdapters m_;
  LoraAdapters v_;
  int t_ = 0;
};

void zero(LoraAdapters& a) {
  for (Matrix* m : a.parameters()) m->setZero();
}

double global_norm(const LoraAdapters& a) {
  double s = 0.0;
  for (const Matrix* m : a.parameters()) s += static_cast<double>(m->squaredNorm());
  return std::sqrt(s);
}

}  // namespace

std::string answer_text(TernaryLabel label) { return to_lower(label_name(label)); }

EncodedExample encode_example(const WordTokenizer& tok, const TaskExample& ex) {
  EncodedExample out;
  out.tokens.push_back(WordTokenizer::kBos);
  const auto prompt = tok.encode(ex.prompt.text);
  out.tokens.insert(out.tokens.end(), prompt.begin(), prompt.end());
  out.answer_begin = out.tokens.size();
  const auto answer = tok.encode(answer_text(ex.gold));
  out.tokens.insert(out.tokens.end(), answer.begin(), answer.end());
  out.tokens.push_back(WordTokenizer::kEos);
  return out;
}

double mean_answer_loss(const CausalLM& base, const LoraAdapters* adapters,
                        const std::vector<TaskExample>& examples) {
  double total = 0.0;
  long count = 0;
  for (const auto& ex : examples) {
    const auto enc = encode_example(base.tokenizer(), ex);
    const auto [loss, n] = base.answer_loss(enc.tokens, enc.answer_begin, adapters, nullptr, 1.0F);
    total += loss;
    count += n;
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

// ---------------------------------------------------------------------------
// Checkpoint files

void Checkpoint::save(const fs::path& dir) {
  if (!adapters) throw IntegrityError("checkpoint has no adapter weights to save");
  fs::create_directories(dir);
  const fs::path blob = dir / "adapter.bin";
  const fs::path tmp = dir / "adapter.bin.tmp";
  save_tensors(adapters->to_tensors(), tmp, kAdapterMagic);
  fs::rename(tmp, blob);
  adapter_path = blob;

  nlohmann::ordered_json meta;
  meta["format"] = "evalkit-lomtl-checkpoint";
  meta["version"] = 1;
  meta["step"] = step;
  meta["val_loss"] = val_loss;
  meta["config_hash"] = config_hash;
  meta["base_fingerprint"] = base_fingerprint;
  meta["lora_r"] = lora_r;
  meta["lora_alpha"] = lora_alpha;
  meta["adapter_file"] = "adapter.bin";
  meta["adapter_sha256"] = sha256_hex([&] {
    std::ifstream in(blob, std::ios::binary);
    std::stringstream buf;
    buf << in.rdbuf();
    return buf.str();
  }());
  meta["early_stopped"] = early_stopped;
  meta["total_steps"] = total_steps;
  meta["evaluations"] = nlohmann::ordered_json::array();
  for (const auto& e : evaluations) {
    meta["evaluations"].push_back({{"step", e.step}, {"val_loss", e.val_loss}});
  }
  write_text(dir / "checkpoint.json", meta.dump(2) + "\n");
}

Checkpoint Checkpoint::load(const fs::path& dir) {
  const fs::path meta_path = dir / "checkpoint.json";
  std::ifstream in(meta_path);
  if (!in) throw EnvironmentError(fmt::format("no checkpoint at '{}'", dir.string()));
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(fmt::format("malformed '{}': {}", meta_path.string(), e.what()));
  }
  if (meta.value("format", "") != "evalkit-lomtl-checkpoint") {
    throw IntegrityError(fmt::format("'{}' is not a LoMTL checkpoint", meta_path.string()));
  }
  Checkpoint c;
  c.step = meta.at("step").get<long>();
  c.val_loss = meta.at("val_loss").get<double>();
  c.config_hash = meta.at("config_hash").get<std::string>();
  c.base_fingerprint = meta.at("base_fingerprint").get<std::string>();
  c.lora_r = meta.at("lora_r").get<int>();
  c.lora_alpha = meta.at("lora_alpha").get<int>();
  c.early_stopped = meta.value("early_stopped", false);
  c.total_steps = meta.value("total_steps", 0L);
  for (const auto& e : meta.value("evaluations", nlohmann::json::array())) {
    c.evaluations.push_back({e.at("step").get<long>(), e.at("val_loss").get<double>()});
  }
  c.adapter_path = dir / meta.value("adapter_file", std::string("adapter.bin"));
  std::string blob;
  {
    std::ifstream bin(c.adapter_path, std::ios::binary);
    if (!bin) throw IntegrityError(fmt::format("missing adapter blob '{}'", c.adapter_path.string()));
    std::stringstream buf;
    buf << bin.rdbuf();
    blob = buf.str();
  }
  if (meta.contains("adapter_sha256") && meta["adapter_sha256"].get<std::string>() != sha256_hex(blob)) {
    throw IntegrityError(fmt::format("adapter blob '{}' does not match its recorded hash",
                                     c.adapter_path.string()));
  }
  c.adapters = std::make_shared<const LoraAdapters>(
      LoraAdapters::from_tensors(load_tensors(c.adapter_path, kAdapterMagic), c.lora_r, c.lora_alpha));
  return c;
}

// ---------------------------------------------------------------------------
// Training

Checkpoint train(const std::vector<TaskExample>& train_set,
                 const std::vector<TaskExample>& val_set, const TrainConfig& cfg,
                 const CausalLM& base) {
  cfg.validate();
  if (train_set.empty()) throw ArgumentError("training set is empty");
  if (val_set.empty()) throw ArgumentError("validation set is empty");
  if (base.shape().context_length < cfg.max_length) {
    throw ConfigError(fmt::format("MAX_LENGTH {} exceeds the base model's context length {}",
                                  cfg.max_length, base.shape().context_length));
  }

  Rng init_rng(cfg.seed);
  LoraAdapters adapters =
      LoraAdapters::init(base.shape(), cfg.lora_r, cfg.lora_alpha, sites_from(cfg), init_rng);
  LoraAdapters grads = adapters.zeros_like();
  AdamW optimizer(adapters);
  Rng dropout_rng(cfg.seed ^ 0x9E3779B97F4A7C15ULL);
  const PassOptions pass{static_cast<float>(cfg.lora_dropout), &dropout_rng};

  const auto train_examples = oversample(train_set, cfg.oversample_method, cfg.seed);
  const std::size_t batches_per_epoch =
      build_balanced_batches(train_examples, cfg.batch_size, cfg.seed).size();
  const long steps_per_epoch =
      static_cast<long>((batches_per_epoch + static_cast<std::size_t>(cfg.grad_accum) - 1) /
                        static_cast<std::size_t>(cfg.grad_accum));
  const long total_steps = steps_per_epoch * cfg.epochs;

  std::ostringstream metrics;
  const auto log_metric = [&](const nlohmann::ordered_json& rec) { metrics << rec.dump() << '\n'; };

  Checkpoint best;
  best.config_hash = cfg.hash();
  best.base_fingerprint = base.fingerprint();
  best.lora_r = cfg.lora_r;
  best.lora_alpha = cfg.lora_alpha;
  best.total_steps = total_steps;

  int stale_evals = 0;
  const auto evaluate = [&](long step) {
    const double loss = mean_answer_loss(base, &adapters, val_set);
    if (!std::isfinite(loss)) {
      throw TrainingError(fmt::format("validation loss is not finite at step {}", step),
                          best.step);
    }
    best.evaluations.push_back({step, loss});
    log_metric({{"step", step}, {"eval_loss", loss}});
    spdlog::info("step {}/{}: eval_loss {:.6f}", step, total_steps, loss);
    if (best.evaluations.size() == 1 || best.val_loss - loss > cfg.early_threshold) {
      best.step = step;
      best.val_loss = loss;
      best.adapters = std::make_shared<const LoraAdapters>(adapters);
      stale_evals = 0;
    } else {
      ++stale_evals;
    }
    return stale_evals >= cfg.early_patience;
  };
  const auto persist = [&] {
    if (cfg.output_dir.empty()) return;
    const fs::path dir(cfg.output_dir);
    best.save(dir);
    write_text(dir / "metrics.jsonl", metrics.str());
    write_text(dir / "config.txt", cfg.to_text());
  };

  bool stop = evaluate(0);
  long step = 0;
  long last_eval_step = 0;
  double window_loss = 0.0;
  int window_batches = 0;

  for (int epoch = 0; epoch < cfg.epochs && !stop; ++epoch) {
    const auto batches = build_balanced_batches(
        train_examples, cfg.batch_size, cfg.seed + static_cast<std::uint64_t>(epoch));
    zero(grads);
    int micro = 0;
    for (std::size_t bi = 0; bi < batches.size() && !stop; ++bi) {
      std::vector<EncodedExample> encoded;
      long answer_tokens = 0;
      for (const auto& ex : batches[bi]) {
        encoded.push_back(encode_example(base.tokenizer(), ex));
        answer_tokens += static_cast<long>(encoded.back().tokens.size() - encoded.back().answer_begin);
      }
      const float loss_scale =
          1.0F / static_cast<float>(answer_tokens * cfg.grad_accum);
      double batch_loss = 0.0;
      for (const auto& enc : encoded) {
        batch_loss += base.answer_loss(enc.tokens, enc.answer_begin, &adapters, &grads,
                                       loss_scale, pass)
                          .first;
      }
      batch_loss /= static_cast<double>(answer_tokens);
      if (!std::isfinite(batch_loss)) {
        throw TrainingError(fmt::format("training loss diverged at step {} (epoch {})", step + 1,
                                        epoch),
                            step);
      }
      window_loss += batch_loss;
      ++window_batches;
      ++micro;
      if (micro < cfg.grad_accum && bi + 1 < batches.size()) continue;

      const double norm = global_norm(grads);
      if (!std::isfinite(norm)) {
        throw TrainingError(fmt::format("gradient is not finite at step {}", step + 1), step);
      }
      if (cfg.max_grad_norm > 0.0 && norm > cfg.max_grad_norm) {
        const auto s = static_cast<float>(cfg.max_grad_norm / norm);
        for (Matrix* m : grads.parameters()) *m *= s;
      }
      double lr = cfg.learning_rate;
      if (cfg.lr_schedule == LrSchedule::linear && total_steps > 0) {
        lr *= std::max(0.0, static_cast<double>(total_steps - step) / static_cast<double>(total_steps));
      }
      optimizer.step(adapters, grads, lr, cfg.weight_decay);
      zero(grads);
      micro = 0;
      ++step;

      if (step % cfg.logging_steps == 0) {
        const double mean = window_loss / window_batches;
        log_metric({{"step", step}, {"epoch", epoch}, {"train_loss", mean}, {"learning_rate", lr}});
        spdlog::info("step {}/{}: train_loss {:.6f} lr {:.3g}", step, total_steps, mean, lr);
        window_loss = 0.0;
        window_batches = 0;
      }
      if (step % cfg.eval_steps == 0) {
        stop = evaluate(step);
        last_eval_step = step;
      }
      if (step % cfg.save_steps == 0) persist();
    }
  }
  if (stop) {
    best.early_stopped = true;
    spdlog::info("early stopping at step {}; best step {} (eval_loss {:.6f})", step, best.step,
                 best.val_loss);
  } else if (last_eval_step != step) {
    evaluate(step);
  }
  persist();
  return best;
}

Checkpoint train(const std::vector<TaskExample>& train_set,
                 const std::vector<TaskExample>& val_set, const TrainConfig& cfg) {
  cfg.validate();
  const CausalLM base = CausalLM::load(cfg.base_model_id);
  return train(train_set, val_set, cfg, base);
}

// ---------------------------------------------------------------------------
// Inference

LomtlModel::LomtlModel(std::shared_ptr<const CausalLM> base, Checkpoint checkpoint,
                       TrainConfig active)
    : base_(std::move(base)), checkpoint_(std::move(checkpoint)), config_(std::move(active)) {
  if (!base_) throw IntegrityError("no base model");
  if (!checkpoint_.adapters) throw IntegrityError("checkpoint has no adapter weights");
  if (checkpoint_.config_hash != config_.hash()) {
    throw IntegrityError(fmt::format(
        "checkpoint was trained under config {} but the active config hashes to {}",
        checkpoint_.config_hash.substr(0, 12), config_.hash().substr(0, 12)));
  }
  if (checkpoint_.base_fingerprint != base_->fingerprint()) {
    throw IntegrityError("checkpoint was trained on a different base model");
  }
}

LomtlModel LomtlModel::load(const fs::path& checkpoint_dir, const TrainConfig& active) {
  active.validate();
  auto ckpt = Checkpoint::load(checkpoint_dir);
  auto base = std::make_shared<const CausalLM>(CausalLM::load(active.base_model_id));
  return LomtlModel(std::move(base), std::move(ckpt), active);
}

std::string generate_text(const CausalLM& model, const LoraAdapters* adapters,
                          std::string_view prompt, const DecodeOptions& opts) {
  const auto& tok = model.tokenizer();
  std::vector<TokenId> tokens{WordTokenizer::kBos};
  const auto ids = tok.encode(prompt);
  tokens.insert(tokens.end(), ids.begin(), ids.end());
  const auto ctx = static_cast<std::size_t>(model.shape().context_length);
  if (tokens.size() >= ctx) {
    throw ArgumentError(fmt::format("prompt of {} tokens leaves no room to generate (context {})",
                                    tokens.size(), ctx));
  }
  Rng rng(opts.seed);
  std::vector<TokenId> generated;
  for (int i = 0; i < opts.max_new_tokens && tokens.size() < ctx; ++i) {
    Vector logits = model.next_token_logits(tokens, adapters);
    const float neg_inf = -std::numeric_limits<float>::infinity();
    logits(WordTokenizer::kPad) = neg_inf;
    logits(WordTokenizer::kBos) = neg_inf;
    if (i == 0) logits(WordTokenizer::kEos) = neg_inf;

    TokenId next = 0;
    if (opts.do_sample && opts.temperature > 0.0) {
      const float inv_t = static_cast<float>(1.0 / opts.temperature);
      const float mx = logits.maxCoeff();
      Eigen::VectorXd p = ((logits.array() - mx) * inv_t).exp().cast<double>().matrix();
      const double r = rng.uniform() * p.sum();
      double acc = 0.0;
      next = static_cast<TokenId>(p.size() - 1);
      for (Eigen::Index j = 0; j < p.size(); ++j) {
        acc += p(j);
        if (r < acc) {
          next = static_cast<TokenId>(j);
          break;
        }
      }
    } else {
      Eigen::Index arg = 0;
      logits.maxCoeff(&arg);
      next = static_cast<TokenId>(arg);
    }
    if (next == WordTokenizer::kEos) break;
    generated.push_back(next);
    tokens.push_back(next);
  }
  return tok.decode(generated);
}

std::string LomtlModel::predict(const PromptInstance& prompt, const DecodeOptions& opts) const {
  return generate_text(*base_, checkpoint_.adapters.get(), prompt.text, opts);
}

std::string LomtlModel::predict(const PromptInstance& prompt) const {
  return predict(prompt, DecodeOptions{config_.do_sample, config_.temperature,
                                       config_.max_new_tokens, config_.seed});
}

TokenCounter LomtlModel::token_counter() const {
  auto base = base_;
  return [base](std::string_view text) { return base->tokenizer().count(text); };
}

std::size_t LomtlModel::prompt_budget() const {
  return static_cast<std::size_t>(config_.max_length - kAnswerReserve);
}

PromptTemplate template_for(const TrainConfig& cfg) {
  PromptTemplate t = PromptTemplate::load(
      cfg.prompt_template.empty() ? default_template_dir() / "lomtl.txt" : fs::path(cfg.prompt_template));
  t.include_label_definitions = cfg.include_label_definitions;
  t.include_ground_truth = cfg.include_ground_truth;
  return t;
}

}  // namespace evalkit::lomtl
