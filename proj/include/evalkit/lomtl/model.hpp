#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "evalkit/lomtl/tokenizer.hpp"
#include "evalkit/rng.hpp"

namespace evalkit::lomtl {

using Matrix = Eigen::MatrixXf;
using Vector = Eigen::VectorXf;

/// Named tensors stored as little-endian float32, row-major.
using TensorMap = std::map<std::string, Matrix>;

void save_tensors(const TensorMap& tensors, const std::filesystem::path& path,
                  std::string_view magic);
TensorMap load_tensors(const std::filesystem::path& path, std::string_view magic);

struct ModelShape {
  int vocab_size = 0;
  int d_model = 64;
  int n_layers = 1;
  int n_heads = 4;
  int d_ff = 128;
  int context_length = 1024;
};

/// Linear layers that can carry a low-rank adapter.
enum class Site { q, k, v, o, up, down, head };

std::string_view site_name(Site s) noexcept;
std::optional<Site> parse_site(std::string_view name);

struct LayerWeights {
  Matrix wq, wk, wv, wo;  // d x d
  Matrix w_up;            // d x d_ff
  Matrix w_down;          // d_ff x d
};

/// Frozen base weights of the stand-in causal LM: a pre-norm transformer
/// (RMSNorm, multi-head causal attention, GELU MLP) with fixed sinusoidal
/// positions and an untied output head.
struct BaseWeights {
  Matrix embedding;  // vocab x d
  std::vector<LayerWeights> layers;
  Matrix head;  // d x vocab

  const Matrix& at(Site s, std::size_t layer) const;
  TensorMap to_tensors() const;
  static BaseWeights from_tensors(const TensorMap& t, const ModelShape& shape);
};

/// Low-rank update for one linear map W (in x out): y = x W + scale * x A B.
struct LoraPair {
  Matrix a;  // in x r
  Matrix b;  // r x out
};

/// Adapter parameters for every targeted (site, layer). The head site uses
/// layer index 0.
class LoraAdapters {
 public:
  LoraAdapters() = default;
  LoraAdapters(int rank, int alpha, std::vector<Site> sites)
      : rank_(rank), alpha_(alpha), sites_(std::move(sites)) {}

  /// A ~ U(-1/sqrt(in), 1/sqrt(in)), B = 0.
  static LoraAdapters init(const ModelShape& shape, int rank, int alpha,
                           const std::vector<Site>& sites, Rng& rng);

  float scale() const { return static_cast<float>(alpha_) / static_cast<float>(rank_); }
  int rank() const { return rank_; }
  int alpha() const { return alpha_; }
  const std::vector<Site>& sites() const { return sites_; }

  const LoraPair* find(Site s, std::size_t layer) const;
  LoraPair* find(Site s, std::size_t layer);

  /// Stable iteration over all parameter matrices (A then B per pair).
  std::vector<Matrix*> parameters();
  std::vector<const Matrix*> parameters() const;

  /// Zero-filled copy with the same shapes, used for gradients.
  LoraAdapters zeros_like() const;

  TensorMap to_tensors() const;
  static LoraAdapters from_tensors(const TensorMap& t, int rank, int alpha);

 private:
  int rank_ = 0;
  int alpha_ = 0;
  std::vector<Site> sites_;
  std::map<std::pair<Site, std::size_t>, LoraPair> pairs_;
};

/// Training-time options for one forward/backward pass.
struct PassOptions {
  float dropout = 0.0F;
  Rng* rng = nullptr;  // required when dropout > 0
};

/// A stand-in small causal LM: tokenizer plus frozen base weights.
class CausalLM {
 public:
  CausalLM(ModelShape shape, WordTokenizer tokenizer, BaseWeights weights);

  /// Randomly initialised base; weights ~ N(0, 1/fan_in).
  static CausalLM random(const ModelShape& shape, WordTokenizer tokenizer, std::uint64_t seed);

  /// Directory layout: model.json, vocab.txt, weights.bin.
  static CausalLM load(const std::filesystem::path& dir);
  void save(const std::filesystem::path& dir) const;

  const ModelShape& shape() const { return shape_; }
  const WordTokenizer& tokenizer() const { return tokenizer_; }
  const BaseWeights& weights() const { return weights_; }
  /// SHA-256 of the serialized base weights.
  const std::string& fingerprint() const { return fingerprint_; }

  /// Summed next-token cross-entropy over the positions predicting
  /// tokens[answer_begin..]. When `grads` is non-null, the gradient of
  /// `loss_scale * loss` with respect to the adapter parameters is added to
  /// it. Returns {loss sum, number of predicted tokens}.
  std::pair<double, int> answer_loss(const std::vector<TokenId>& tokens,
                                     std::size_t answer_begin,
                                     const LoraAdapters* adapters,
                                     LoraAdapters* grads, float loss_scale,
                                     const PassOptions& opts = {}) const;

  /// Logits for the token following `tokens`.
  Vector next_token_logits(const std::vector<TokenId>& tokens,
                           const LoraAdapters* adapters) const;

 private:
  ModelShape shape_;
  WordTokenizer tokenizer_;
  BaseWeights weights_;
  Matrix positions_;  // context_length x d
  std::string fingerprint_;
};

}  // namespace evalkit::lomtl
