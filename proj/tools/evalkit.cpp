// evalkit command-line entry points. Output paths go to stdout, logs to
// stderr. Exit status: 0 success, 1 user error, 2 environment error.

#include <algorithm>
#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <pthread.h>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "evalkit/corpus.hpp"
#include "evalkit/errors.hpp"
#include "evalkit/judges.hpp"
#include "evalkit/lomtl/pipeline.hpp"
#include "evalkit/metrics.hpp"
#include "evalkit/prompting.hpp"
#include "evalkit/service.hpp"
#include "evalkit/text.hpp"
#include "evalkit/verdict.hpp"

namespace fs = std::filesystem;
using namespace evalkit;

namespace {

constexpr int kUserError = 1;
constexpr int kEnvironmentError = 2;

std::vector<DimensionKey> parse_dimensions(const std::string& csv) {
  if (trim(csv).empty()) return {kAllDimensions.begin(), kAllDimensions.end()};
  std::vector<DimensionKey> out;
  for (const auto& part : split(csv, ',')) {
    const auto name = trim(part);
    if (name.empty()) continue;
    const auto d = parse_dimension(name);
    if (!d) throw ArgumentError(fmt::format("unknown dimension '{}'", name));
    if (std::find(out.begin(), out.end(), *d) == out.end()) out.push_back(*d);
  }
  if (out.empty()) throw ArgumentError("dimension selection is empty");
  return out;
}

std::vector<JudgeItem> all_items(const DatasetSplit& split, const std::vector<DimensionKey>& dims) {
  std::vector<JudgeItem> items;
  for (const auto& d : split.dialogues) {
    for (const auto& r : d.responses) {
      for (auto dim : dims) items.push_back({&d, r.tutor_id, dim});
    }
  }
  return items;
}

void write_json(const nlohmann::ordered_json& j, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << j.dump(2) << '\n';
  out.flush();
  if (!out) throw StorageError(fmt::format("cannot write '{}'", path.string()));
}

/// Writes verdicts and, when the split carries gold labels, a score report.
/// Returns the paths written.
std::vector<fs::path> write_results(const std::vector<EvalVerdict>& verdicts, const DatasetSplit& split,
                                    const fs::path& out_dir) {
  std::vector<fs::path> written;
  save_verdicts(verdicts, out_dir / "verdicts.jsonl");
  written.push_back(out_dir / "verdicts.jsonl");
  std::size_t errors = 0;
  for (const auto& v : verdicts) errors += v.error.has_value();
  if (errors > 0) spdlog::warn("{} of {} verdicts failed", errors, verdicts.size());
  try {
    const auto report = score_report(verdicts, split);
    write_json(to_json(report), out_dir / "report.json");
    written.push_back(out_dir / "report.json");
    for (const auto& [dim, m] : report.per_dimension) {
      spdlog::info("{}: accuracy {:.4f} macro-F1 {:.4f} (n={}, unparseable={})", dimension_code(dim), m.accuracy,
                   m.macro_f1, m.n, m.unparseable);
    }
    spdlog::info("average: accuracy {:.4f} macro-F1 {:.4f}", report.averaged_accuracy, report.averaged_macro_f1);
  } catch (const UnlabeledDataError& e) {
    spdlog::info("no score report: {}", e.what());
  }
  return written;
}

// -- commands ---------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::map<std::string, std::string> overrides;
};

int cmd_train(const TrainArgs& a) {
  lomtl::TrainConfig cfg;
  if (!a.config.empty()) cfg = lomtl::TrainConfig::load(a.config);
  for (const auto& [key, value] : a.overrides) cfg.set(key, value);
  cfg.validate();
  const auto ckpt = lomtl::run_training(cfg);
  spdlog::info("best step {} (eval_loss {:.6f}) of {}{}", ckpt.step, ckpt.val_loss, ckpt.total_steps,
               ckpt.early_stopped ? ", stopped early" : "");
  std::cout << cfg.output_dir << '\n';
  return 0;
}

struct EvalArgs {
  std::string checkpoint;
  std::string config;
  std::string predictions;
  std::string split;
  std::string dimensions;
  std::string out;
  std::string cache;
  int parallelism = 1;
};

int cmd_eval(const EvalArgs& a) {
  const DatasetSplit split = load_dataset(a.split);
  const auto dims = parse_dimensions(a.dimensions);
  std::vector<EvalVerdict> verdicts;
  if (!a.predictions.empty()) {
    // Scores a verdict file produced elsewhere, restricted to `dims`.
    for (auto& v : load_verdicts(a.predictions)) {
      if (std::find(dims.begin(), dims.end(), v.dimension) != dims.end()) verdicts.push_back(std::move(v));
    }
  } else {
    if (a.checkpoint.empty() || a.config.empty()) {
      throw ArgumentError("either --predictions or both --checkpoint and --config are required");
    }
    const auto evaluator = make_lomtl_evaluator(a.checkpoint, a.config);
    std::optional<VerdictCache> cache;
    if (!a.cache.empty()) cache.emplace(a.cache);
    verdicts = judge_batch(*evaluator, all_items(split, dims), cache ? &*cache : nullptr, a.parallelism);
  }
  const fs::path out = a.out.empty() ? fs::path(a.checkpoint.empty() ? "." : a.checkpoint) /
                                           fmt::format("eval-{}", split_name(split.name))
                                     : fs::path(a.out);
  for (const auto& p : write_results(verdicts, split, out)) std::cout << p.string() << '\n';
  return 0;
}

struct JudgeArgs {
  std::string spec;
  std::string split;
  std::string dimensions;
  std::string out;
  std::string cache;
  int parallelism = 1;
};

int cmd_judge(const JudgeArgs& a) {
  std::ifstream in(a.spec);
  if (!in) throw ConfigError(fmt::format("cannot read judge spec '{}'", a.spec));
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(fmt::format("'{}' is not valid JSON: {}", a.spec, e.what()));
  }
  const auto spec = JudgeSpec::from_json(j);
  const DatasetSplit split = load_dataset(a.split);
  const auto dims = parse_dimensions(a.dimensions);
  // Fails fast on a bad spec or a missing credential, before any work.
  const auto evaluator = make_judge(spec);
  std::optional<VerdictCache> cache;
  if (!a.cache.empty()) cache.emplace(a.cache);
  const auto verdicts = judge_batch(*evaluator, all_items(split, dims), cache ? &*cache : nullptr, a.parallelism);
  const fs::path out = a.out.empty() ? fs::path(fmt::format("judge-{}-{}", spec.judge_id, split_name(split.name)))
                                     : fs::path(a.out);
  for (const auto& p : write_results(verdicts, split, out)) std::cout << p.string() << '\n';
  return 0;
}

struct PrecomputeArgs {
  std::string service_config;
  std::string evaluators;
  int parallelism = 0;
};

int cmd_precompute(const PrecomputeArgs& a) {
  const auto config = ServiceConfig::load(a.service_config);
  auto registry = EvaluatorRegistry::from_config(config);
  const DatasetSplit demo = load_dataset(config.demo_split, SplitName::demo);
  VerdictCache cache(config.cache_dir);
  std::vector<std::string> ids;
  for (const auto& part : split(a.evaluators, ',')) {
    if (!trim(part).empty()) ids.emplace_back(trim(part));
  }
  const auto summaries =
      precompute_cache(demo, registry, cache, ids, a.parallelism > 0 ? a.parallelism : config.parallelism);
  std::size_t failed = 0;
  for (const auto& s : summaries) failed += s.failed;
  std::cout << config.cache_dir << '\n';
  if (failed > 0) {
    spdlog::error("{} verdicts could not be computed; rerun to retry them", failed);
    return kEnvironmentError;
  }
  return 0;
}

struct DemoArgs {
  std::string split;
  std::size_t n = 10;
  std::uint64_t seed = 42;
  std::string out;
};

int cmd_demo_subset(const DemoArgs& a) {
  const DatasetSplit test = load_dataset(a.split);
  DatasetSplit demo = select_demo_subset(test, a.n, a.seed);
  demo.name = SplitName::demo;
  save_dataset(demo, a.out);
  spdlog::info("{} of {} dialogues selected with seed {}", demo.dialogues.size(), test.dialogues.size(), a.seed);
  std::cout << a.out << '\n';
  return 0;
}

struct ServeArgs {
  std::string service_config;
  std::optional<std::string> host;
  std::optional<int> port;
  bool live = false;
};

int cmd_serve(const ServeArgs& a) {
  auto config = ServiceConfig::load(a.service_config);
  if (a.host) config.host = *a.host;
  if (a.port) config.port = *a.port;
  if (a.live) config.static_mode = false;
  config.validate();
  auto registry = EvaluatorRegistry::from_config(config);

  // Signals are taken synchronously so shutdown runs on this thread.
  sigset_t stop_signals;
  sigemptyset(&stop_signals);
  sigaddset(&stop_signals, SIGINT);
  sigaddset(&stop_signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &stop_signals, nullptr);

  EvalService service(config, std::move(registry));
  const int port = service.start();
  std::cout << fmt::format("http://{}:{}", config.host, port) << std::endl;
  spdlog::info("serving on {}:{} (static_mode={})", config.host, port, config.static_mode);
  int sig = 0;
  sigwait(&stop_signals, &sig);
  spdlog::info("signal {} received, shutting down", sig);
  service.stop();
  return 0;
}

struct InitBaseArgs {
  std::string split;
  std::string config;
  std::string out;
  lomtl::ModelShape shape;
  std::size_t max_vocab = 8192;
  std::uint64_t seed = 0;
};

int cmd_init_base(const InitBaseArgs& a) {
  lomtl::TrainConfig cfg;
  if (!a.config.empty()) cfg = lomtl::TrainConfig::load(a.config);
  const DatasetSplit split = load_dataset(a.split);
  const auto base = lomtl::init_base(split, cfg, a.shape, a.max_vocab, a.seed);
  base.save(a.out);
  spdlog::info("base with {} tokens, fingerprint {}", base.shape().vocab_size, base.fingerprint());
  std::cout << a.out << '\n';
  return 0;
}

struct RenderArgs {
  std::string split;
  std::string dialogue;
  std::string tutor;
  std::string dimension;
  std::string template_path;
  std::size_t budget = 4096;
};

int cmd_render_prompt(const RenderArgs& a) {
  const DatasetSplit split = load_dataset(a.split);
  const auto dims = parse_dimensions(a.dimension);
  if (dims.size() != 1) throw ArgumentError("--dimension takes exactly one dimension");
  const auto tmpl =
      PromptTemplate::load(a.template_path.empty() ? default_template_dir() / "judge.txt" : fs::path(a.template_path));
  const auto p = build_prompt(split.at(a.dialogue), a.tutor, dimension(dims.front()), tmpl, a.budget,
                              whitespace_token_count);
  if (p.truncated) spdlog::warn("prompt truncated: {} leading turns dropped", p.dropped_turns);
  std::cout << p.text;
  return 0;
}

void setup_logging(bool verbose, bool quiet) {
  auto logger = spdlog::stderr_color_mt("evalkit");
  spdlog::set_default_logger(logger);
  spdlog::set_level(quiet ? spdlog::level::warn : verbose ? spdlog::level::debug : spdlog::level::info);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Evaluation toolkit for AI tutor responses"};
  app.require_subcommand(1);
  bool verbose = false;
  bool quiet = false;
  app.add_flag("-v,--verbose", verbose, "Debug logging");
  app.add_flag("-q,--quiet", quiet, "Warnings and errors only");

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "Fine-tune LoRA adapters; prints the checkpoint directory");
  train_cmd->add_option("-c,--config", train.config, "KEY=VALUE config file")->check(CLI::ExistingFile);
  // Every config key is also a flag of the same name, e.g. --LEARNING_RATE 3e-3.
  std::map<std::string, std::string> raw_overrides;
  for (const auto& key : lomtl::TrainConfig::keys()) {
    train_cmd->add_option("--" + key, raw_overrides[key], "Overrides " + key)->group("Config keys");
  }

  EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("eval", "Run or score the fine-tuned model on a split");
  eval_cmd->add_option("--checkpoint", eval.checkpoint, "Checkpoint directory");
  eval_cmd->add_option("-c,--config", eval.config, "Config the checkpoint was trained with");
  eval_cmd->add_option("--predictions", eval.predictions, "Score this verdict file instead of running a model");
  eval_cmd->add_option("--split", eval.split, "Split file to evaluate")->required();
  eval_cmd->add_option("--dimensions", eval.dimensions, "Comma-separated dimension codes (default: all)");
  eval_cmd->add_option("-o,--out", eval.out, "Output directory");
  eval_cmd->add_option("--cache", eval.cache, "Verdict cache directory");
  eval_cmd->add_option("-j,--parallelism", eval.parallelism, "Concurrent evaluations")->check(CLI::Range(1, 64));

  JudgeArgs judge;
  auto* judge_cmd = app.add_subcommand("judge", "Evaluate a split with an LLM judge");
  judge_cmd->add_option("--spec", judge.spec, "Judge spec (JSON)")->required();
  judge_cmd->add_option("--split", judge.split, "Split file to evaluate")->required();
  judge_cmd->add_option("--dimensions", judge.dimensions, "Comma-separated dimension codes (default: all)");
  judge_cmd->add_option("-o,--out", judge.out, "Output directory");
  judge_cmd->add_option("--cache", judge.cache, "Verdict cache directory");
  judge_cmd->add_option("-j,--parallelism", judge.parallelism, "Concurrent requests")->check(CLI::Range(1, 64));

  PrecomputeArgs pre;
  auto* pre_cmd = app.add_subcommand("precompute", "Fill the verdict cache for static serving");
  pre_cmd->add_option("--service-config", pre.service_config, "Service config (JSON)")->required();
  pre_cmd->add_option("--evaluators", pre.evaluators, "Comma-separated evaluator ids (default: all)");
  pre_cmd->add_option("-j,--parallelism", pre.parallelism, "Concurrent evaluations")->check(CLI::Range(1, 64));

  DemoArgs demo;
  auto* demo_cmd = app.add_subcommand("demo-subset", "Sample the demonstration split");
  demo_cmd->add_option("--split", demo.split, "Source split (usually test)")->required();
  demo_cmd->add_option("-n", demo.n, "Number of dialogues")->capture_default_str();
  demo_cmd->add_option("--seed", demo.seed, "Sampling seed")->capture_default_str();
  demo_cmd->add_option("-o,--out", demo.out, "Output split file")->required();

  ServeArgs serve;
  auto* serve_cmd = app.add_subcommand("serve", "Run the HTTP service until SIGINT or SIGTERM");
  serve_cmd->add_option("--service-config", serve.service_config, "Service config (JSON)")->required();
  serve_cmd->add_option("--host", serve.host, "Overrides host");
  serve_cmd->add_option("--port", serve.port, "Overrides port; 0 picks a free one");
  serve_cmd->add_flag("--live", serve.live, "Allow evaluators to run (disables static mode)");

  InitBaseArgs init;
  auto* init_cmd = app.add_subcommand("init-base", "Create a random stand-in base model for a split");
  init_cmd->add_option("--split", init.split, "Split whose prompts define the vocabulary")->required();
  init_cmd->add_option("-c,--config", init.config, "Training config (prompt switches, DIMENSIONS)");
  init_cmd->add_option("-o,--out", init.out, "Model directory")->required();
  init_cmd->add_option("--d-model", init.shape.d_model)->capture_default_str();
  init_cmd->add_option("--layers", init.shape.n_layers)->capture_default_str();
  init_cmd->add_option("--heads", init.shape.n_heads)->capture_default_str();
  init_cmd->add_option("--d-ff", init.shape.d_ff)->capture_default_str();
  init_cmd->add_option("--context-length", init.shape.context_length)->capture_default_str();
  init_cmd->add_option("--max-vocab", init.max_vocab)->capture_default_str();
  init_cmd->add_option("--seed", init.seed)->capture_default_str();

  RenderArgs render;
  auto* render_cmd = app.add_subcommand("render-prompt", "Print the prompt for one response and dimension");
  render_cmd->add_option("--split", render.split, "Split file")->required();
  render_cmd->add_option("--dialogue", render.dialogue, "Dialogue id")->required();
  render_cmd->add_option("--tutor", render.tutor, "Tutor id")->required();
  render_cmd->add_option("--dimension", render.dimension, "Dimension code")->required();
  render_cmd->add_option("--template", render.template_path, "Template file (default: shipped judge template)");
  render_cmd->add_option("--budget", render.budget, "Whitespace-token budget")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUserError;
  }
  setup_logging(verbose, quiet);

  try {
    if (*train_cmd) {
      for (const auto& key : lomtl::TrainConfig::keys()) {
        if (train_cmd->count("--" + key) > 0) train.overrides[key] = raw_overrides[key];
      }
      return cmd_train(train);
    }
    if (*eval_cmd) return cmd_eval(eval);
    if (*judge_cmd) return cmd_judge(judge);
    if (*pre_cmd) return cmd_precompute(pre);
    if (*demo_cmd) return cmd_demo_subset(demo);
    if (*serve_cmd) return cmd_serve(serve);
    if (*init_cmd) return cmd_init_base(init);
    if (*render_cmd) return cmd_render_prompt(render);
  } catch (const Error& e) {
    spdlog::error("{}: {}", e.kind(), e.what());
    return e.error_class() == ErrorClass::environment ? kEnvironmentError : kUserError;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kEnvironmentError;
  }
  return kUserError;
}
