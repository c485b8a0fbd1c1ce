#include "evalkit/lomtl/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "evalkit/errors.hpp"
#include "evalkit/text.hpp"

namespace evalkit::lomtl {

// ---------------------------------------------------------------------------
// Tensor files

namespace {

constexpr std::uint32_t kTensorFileVersion = 1;
constexpr float kNormEps = 1e-5F;
constexpr float kPositionScale = 0.3F;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFU));
}

std::uint32_t get_u32(std::string_view in, std::size_t& pos) {
  if (pos + 4 > in.size()) throw IntegrityError("tensor file truncated");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) {
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  }
  pos += 4;
  return v;
}

std::string serialize_tensors(const TensorMap& tensors, std::string_view magic) {
  static_assert(sizeof(float) == 4);
  std::string out(magic);
  put_u32(out, kTensorFileVersion);
  put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, m] : tensors) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<std::uint32_t>(m.rows()));
    put_u32(out, static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) {
        std::uint32_t bits = 0;
        const float v = m(r, c);
        std::memcpy(&bits, &v, 4);
        put_u32(out, bits);
      }
    }
  }
  return out;
}

TensorMap deserialize_tensors(std::string_view in, std::string_view magic) {
  if (in.substr(0, magic.size()) != magic) {
    throw IntegrityError("tensor file has the wrong magic header");
  }
  std::size_t pos = magic.size();
  if (get_u32(in, pos) != kTensorFileVersion) {
    throw IntegrityError("unsupported tensor file version");
  }
  const std::uint32_t count = get_u32(in, pos);
  TensorMap out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t len = get_u32(in, pos);
    if (pos + len > in.size()) throw IntegrityError("tensor file truncated");
    std::string name(in.substr(pos, len));
    pos += len;
    const std::uint32_t rows = get_u32(in, pos);
    const std::uint32_t cols = get_u32(in, pos);
    Matrix m(rows, cols);
    for (std::uint32_t r = 0; r < rows; ++r) {
      for (std::uint32_t c = 0; c < cols; ++c) {
        const std::uint32_t bits = get_u32(in, pos);
        float v = 0;
        std::memcpy(&v, &bits, 4);
        m(r, c) = v;
      }
    }
    out.emplace(std::move(name), std::move(m));
  }
  if (pos != in.size()) throw IntegrityError("trailing bytes in tensor file");
  return out;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw EnvironmentError(fmt::format("cannot read '{}'", path.string()));
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_file(const std::filesystem::path& path, std::string_view data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!out) throw StorageError(fmt::format("cannot write '{}'", path.string()));
}

}  // namespace

void save_tensors(const TensorMap& tensors, const std::filesystem::path& path,
                  std::string_view magic) {
  write_file(path, serialize_tensors(tensors, magic));
}

TensorMap load_tensors(const std::filesystem::path& path, std::string_view magic) {
  return deserialize_tensors(read_file(path), magic);
}

// ---------------------------------------------------------------------------
// Sites and weights

std::string_view site_name(Site s) noexcept {
  switch (s) {
    case Site::q: return "q";
    case Site::k: return "k";
    case Site::v: return "v";
    case Site::o: return "o";
    case Site::up: return "up";
    case Site::down: return "down";
    case Site::head: return "head";
  }
  return "q";
}

std::optional<Site> parse_site(std::string_view name) {
  for (Site s : {Site::q, Site::k, Site::v, Site::o, Site::up, Site::down, Site::head}) {
    if (site_name(s) == name) return s;
  }
  return std::nullopt;
}

const Matrix& BaseWeights::at(Site s, std::size_t layer) const {
  if (s == Site::head) return head;
  const auto& l = layers.at(layer);
  switch (s) {
    case Site::q: return l.wq;
    case Site::k: return l.wk;
    case Site::v: return l.wv;
    case Site::o: return l.wo;
    case Site::up: return l.w_up;
    case Site::down: return l.w_down;
    case Site::head: break;
  }
  return head;
}

TensorMap BaseWeights::to_tensors() const {
  TensorMap t;
  t["embedding"] = embedding;
  t["head"] = head;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto p = fmt::format("layers.{}.", i);
    t[p + "wq"] = layers[i].wq;
    t[p + "wk"] = layers[i].wk;
    t[p + "wv"] = layers[i].wv;
    t[p + "wo"] = layers[i].wo;
    t[p + "w_up"] = layers[i].w_up;
    t[p + "w_down"] = layers[i].w_down;
  }
  return t;
}

BaseWeights BaseWeights::from_tensors(const TensorMap& t, const ModelShape& shape) {
  const auto get = [&](const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    auto it = t.find(name);
    if (it == t.end()) throw IntegrityError(fmt::format("base weights lack '{}'", name));
    if (it->second.rows() != rows || it->second.cols() != cols) {
      throw IntegrityError(fmt::format("tensor '{}' has shape {}x{}, expected {}x{}", name,
                                       it->second.rows(), it->second.cols(), rows, cols));
    }
    return it->second;
  };
  BaseWeights w;
  const int d = shape.d_model;
  w.embedding = get("embedding", shape.vocab_size, d);
  w.head = get("head", d, shape.vocab_size);
  for (int i = 0; i < shape.n_layers; ++i) {
    const auto p = fmt::format("layers.{}.", i);
    LayerWeights l;
    l.wq = get(p + "wq", d, d);
    l.wk = get(p + "wk", d, d);
    l.wv = get(p + "wv", d, d);
    l.wo = get(p + "wo", d, d);
    l.w_up = get(p + "w_up", d, shape.d_ff);
    l.w_down = get(p + "w_down", shape.d_ff, d);
    w.layers.push_back(std::move(l));
  }
  return w;
}

// ---------------------------------------------------------------------------
// Adapters

namespace {

std::pair<Eigen::Index, Eigen::Index> site_dims(const ModelShape& s, Site site) {
  switch (site) {
    case Site::up: return {s.d_model, s.d_ff};
    case Site::down: return {s.d_ff, s.d_model};
    case Site::head: return {s.d_model, s.vocab_size};
    default: return {s.d_model, s.d_model};
  }
}

}  // namespace

LoraAdapters LoraAdapters::init(const ModelShape& shape, int rank, int alpha,
                                const std::vector<Site>& sites, Rng& rng) {
  LoraAdapters out(rank, alpha, sites);
  for (Site s : sites) {
    const std::size_t n_layers = s == Site::head ? 1 : static_cast<std::size_t>(shape.n_layers);
    for (std::size_t l = 0; l < n_layers; ++l) {
      const auto [in, outd] = site_dims(shape, s);
      LoraPair p;
      const float bound = 1.0F / std::sqrt(static_cast<float>(in));
      p.a = Matrix(in, rank);
      for (Eigen::Index i = 0; i < p.a.size(); ++i) {
        p.a.data()[i] = static_cast<float>((2.0 * rng.uniform() - 1.0) * bound);
      }
      p.b = Matrix::Zero(rank, outd);
      out.pairs_.emplace(std::make_pair(s, l), std::move(p));
    }
  }
  return out;
}

const LoraPair* LoraAdapters::find(Site s, std::size_t layer) const {
  auto it = pairs_.find({s, layer});
  return it == pairs_.end() ? nullptr : &it->second;
}

LoraPair* LoraAdapters::find(Site s, std::size_t layer) {
  auto it = pairs_.find({s, layer});
  return it == pairs_.end() ? nullptr : &it->second;
}

std::vector<Matrix*> LoraAdapters::parameters() {
  std::vector<Matrix*> out;
  for (auto& [key, p] : pairs_) {
    out.push_back(&p.a);
    out.push_back(&p.b);
  }
  return out;
}

std::vector<const Matrix*> LoraAdapters::parameters() const {
  std::vector<const Matrix*> out;
  for (const auto& [key, p] : pairs_) {
    out.push_back(&p.a);
    out.push_back(&p.b);
  }
  return out;
}

LoraAdapters LoraAdapters::zeros_like() const {
  LoraAdapters out(rank_, alpha_, sites_);
  for (const auto& [key, p] : pairs_) {
    out.pairs_.emplace(key, LoraPair{Matrix::Zero(p.a.rows(), p.a.cols()),
                                     Matrix::Zero(p.b.rows(), p.b.cols())});
  }
  return out;
}

TensorMap LoraAdapters::to_tensors() const {
  TensorMap t;
  for (const auto& [key, p] : pairs_) {
    const auto prefix = fmt::format("{}.{}.", site_name(key.first), key.second);
    t[prefix + "a"] = p.a;
    t[prefix + "b"] = p.b;
  }
  return t;
}

LoraAdapters LoraAdapters::from_tensors(const TensorMap& t, int rank, int alpha) {
  LoraAdapters out(rank, alpha, {});
  for (const auto& [name, m] : t) {
    const auto parts = split(name, '.');
    if (parts.size() != 3 || (parts[2] != "a" && parts[2] != "b")) {
      throw IntegrityError(fmt::format("unexpected adapter tensor '{}'", name));
    }
    const auto site = parse_site(parts[0]);
    if (!site) throw IntegrityError(fmt::format("unknown adapter site in '{}'", name));
    const auto layer = static_cast<std::size_t>(std::stoul(parts[1]));
    auto& pair = out.pairs_[{*site, layer}];
    (parts[2] == "a" ? pair.a : pair.b) = m;
    if (std::find(out.sites_.begin(), out.sites_.end(), *site) == out.sites_.end()) {
      out.sites_.push_back(*site);
    }
  }
  for (const auto& [key, p] : out.pairs_) {
    if (p.a.cols() != rank || p.b.rows() != rank) {
      throw IntegrityError("adapter tensors do not match the configured rank");
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace {

struct LinearCache {
  bool adapted = false;
  bool dropped = false;
  Matrix xd;    // adapter-path input (after dropout)
  Matrix mask;  // scaled keep mask
  Matrix xa;    // xd * A
};

Matrix linear_forward(const Matrix& x, const Matrix& w, const LoraPair* p, float scale,
                      const PassOptions& opts, LinearCache* cache) {
  Matrix y = x * w;
  if (!p) return y;
  Matrix xd;
  Matrix mask;
  const bool drop = opts.dropout > 0.0F && opts.rng != nullptr;
  if (drop) {
    const float keep = 1.0F - opts.dropout;
    mask.resize(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < mask.size(); ++i) {
      mask.data()[i] = opts.rng->uniform() < keep ? 1.0F / keep : 0.0F;
    }
    xd = x.cwiseProduct(mask);
  } else {
    xd = x;
  }
  Matrix xa = xd * p->a;
  y.noalias() += scale * (xa * p->b);
  if (cache) {
    cache->adapted = true;
    cache->dropped = drop;
    cache->xd = std::move(xd);
    cache->mask = std::move(mask);
    cache->xa = std::move(xa);
  }
  return y;
}

Matrix linear_backward(const Matrix& dy, const Matrix& w, const LoraPair* p, LoraPair* g,
                       float scale, const LinearCache& c) {
  Matrix dx = dy * w.transpose();
  if (!p || !c.adapted) return dx;
  const Matrix d_xa = scale * (dy * p->b.transpose());
  if (g) {
    g->b.noalias() += scale * (c.xa.transpose() * dy);
    g->a.noalias() += c.xd.transpose() * d_xa;
  }
  Matrix dxd = d_xa * p->a.transpose();
  if (c.dropped) dxd = dxd.cwiseProduct(c.mask);
  dx += dxd;
  return dx;
}

Matrix rms_forward(const Matrix& x, Vector& inv) {
  inv.resize(x.rows());
  Matrix y(x.rows(), x.cols());
  const float d = static_cast<float>(x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    inv(i) = 1.0F / std::sqrt(x.row(i).squaredNorm() / d + kNormEps);
    y.row(i) = x.row(i) * inv(i);
  }
  return y;
}

Matrix rms_backward(const Matrix& dy, const Matrix& y, const Vector& inv) {
  Matrix dx(dy.rows(), dy.cols());
  const float d = static_cast<float>(dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const float m = dy.row(i).dot(y.row(i)) / d;
    dx.row(i) = inv(i) * (dy.row(i) - m * y.row(i));
  }
  return dx;
}

constexpr float kGeluC = 0.7978845608028654F;  // sqrt(2/pi)

float gelu(float u) {
  return 0.5F * u * (1.0F + std::tanh(kGeluC * (u + 0.044715F * u * u * u)));
}

float gelu_grad(float u) {
  const float t = std::tanh(kGeluC * (u + 0.044715F * u * u * u));
  return 0.5F * (1.0F + t) +
         0.5F * u * (1.0F - t * t) * kGeluC * (1.0F + 3.0F * 0.044715F * u * u);
}

struct LayerCache {
  Vector inv1, inv2;
  Matrix n1, n2;
  LinearCache cq, ck, cv, co, cup, cdown;
  Matrix q, k, v;
  std::vector<Matrix> probs;  // per head, T x T
  Matrix u;
  Matrix g;
};

}  // namespace

CausalLM::CausalLM(ModelShape shape, WordTokenizer tokenizer, BaseWeights weights)
    : shape_(shape), tokenizer_(std::move(tokenizer)), weights_(std::move(weights)) {
  if (static_cast<std::size_t>(shape_.vocab_size) != tokenizer_.size()) {
    throw IntegrityError(fmt::format("model vocabulary {} does not match tokenizer size {}",
                                     shape_.vocab_size, tokenizer_.size()));
  }
  if (shape_.d_model % shape_.n_heads != 0) {
    throw IntegrityError("d_model must be divisible by n_heads");
  }
  positions_.resize(shape_.context_length, shape_.d_model);
  for (int p = 0; p < shape_.context_length; ++p) {
    for (int i = 0; i < shape_.d_model; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / shape_.d_model);
      positions_(p, i) = kPositionScale * static_cast<float>(std::sin(p * freq));
      if (i + 1 < shape_.d_model) {
        positions_(p, i + 1) = kPositionScale * static_cast<float>(std::cos(p * freq));
      }
    }
  }
  fingerprint_ = sha256_hex(serialize_tensors(weights_.to_tensors(), "EVKW"));
}

CausalLM CausalLM::random(const ModelShape& shape_in, WordTokenizer tokenizer,
                          std::uint64_t seed) {
  ModelShape shape = shape_in;
  shape.vocab_size = static_cast<int>(tokenizer.size());
  Rng rng(seed);
  const auto normal = [&rng](Eigen::Index rows, Eigen::Index cols, double stddev) {
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      m.data()[i] = static_cast<float>(rng.normal() * stddev);
    }
    return m;
  };
  const int d = shape.d_model;
  const double s_d = 1.0 / std::sqrt(static_cast<double>(d));
  BaseWeights w;
  w.embedding = normal(shape.vocab_size, d, 1.0);
  for (int i = 0; i < shape.n_layers; ++i) {
    LayerWeights l;
    l.wq = normal(d, d, s_d);
    l.wk = normal(d, d, s_d);
    l.wv = normal(d, d, s_d);
    l.wo = normal(d, d, s_d);
    l.w_up = normal(d, shape.d_ff, s_d);
    l.w_down = normal(shape.d_ff, d, 1.0 / std::sqrt(static_cast<double>(shape.d_ff)));
    w.layers.push_back(std::move(l));
  }
  w.head = normal(d, shape.vocab_size, s_d);
  return CausalLM(shape, std::move(tokenizer), std::move(w));
}

CausalLM CausalLM::load(const std::filesystem::path& dir) {
  const auto meta_path = dir / "model.json";
  if (!std::filesystem::exists(meta_path)) {
    throw EnvironmentError(fmt::format(
        "cannot load base model '{}': no model.json (expected a directory created by "
        "'evalkit init-base')",
        dir.string()));
  }
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(read_file(meta_path));
  } catch (const nlohmann::json::exception& e) {
    throw EnvironmentError(fmt::format("malformed '{}': {}", meta_path.string(), e.what()));
  }
  if (meta.value("format", "") != "evalkit-causal-lm") {
    throw EnvironmentError(fmt::format("'{}' is not an evalkit causal LM", meta_path.string()));
  }
  ModelShape shape;
  shape.vocab_size = meta.at("vocab_size").get<int>();
  shape.d_model = meta.at("d_model").get<int>();
  shape.n_layers = meta.at("n_layers").get<int>();
  shape.n_heads = meta.at("n_heads").get<int>();
  shape.d_ff = meta.at("d_ff").get<int>();
  shape.context_length = meta.at("context_length").get<int>();
  auto tokenizer = WordTokenizer::load(dir / "vocab.txt");
  auto weights = BaseWeights::from_tensors(load_tensors(dir / "weights.bin", "EVKW"), shape);
  return CausalLM(shape, std::move(tokenizer), std::move(weights));
}

void CausalLM::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json meta;
  meta["format"] = "evalkit-causal-lm";
  meta["version"] = 1;
  meta["vocab_size"] = shape_.vocab_size;
  meta["d_model"] = shape_.d_model;
  meta["n_layers"] = shape_.n_layers;
  meta["n_heads"] = shape_.n_heads;
  meta["d_ff"] = shape_.d_ff;
  meta["context_length"] = shape_.context_length;
  meta["fingerprint"] = fingerprint_;
  write_file(dir / "model.json", meta.dump(2) + "\n");
  tokenizer_.save(dir / "vocab.txt");
  save_tensors(weights_.to_tensors(), dir / "weights.bin", "EVKW");
}

namespace {

struct Forward {
  Matrix final_norm;  // T x d
  Vector final_inv;
  std::vector<LayerCache> layers;
};

Forward run_forward(const ModelShape& shape, const BaseWeights& w, const Matrix& positions,
                    const std::vector<TokenId>& tokens, const LoraAdapters* ad,
                    const PassOptions& opts, bool keep_cache) {
  const auto T = static_cast<Eigen::Index>(tokens.size());
  const int d = shape.d_model;
  const int n_heads = shape.n_heads;
  const int dh = d / n_heads;
  const float att_scale = 1.0F / std::sqrt(static_cast<float>(dh));
  const float scale = ad ? ad->scale() : 0.0F;
  const auto pair = [&](Site s, std::size_t l) { return ad ? ad->find(s, l) : nullptr; };

  Matrix x(T, d);
  for (Eigen::Index t = 0; t < T; ++t) {
    x.row(t) = w.embedding.row(tokens[t]) + positions.row(t);
  }

  Forward fw;
  if (keep_cache) fw.layers.resize(w.layers.size());
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    const auto& lw = w.layers[l];
    LayerCache local;
    LayerCache& c = keep_cache ? fw.layers[l] : local;

    c.n1 = rms_forward(x, c.inv1);
    c.q = linear_forward(c.n1, lw.wq, pair(Site::q, l), scale, opts, &c.cq);
    c.k = linear_forward(c.n1, lw.wk, pair(Site::k, l), scale, opts, &c.ck);
    c.v = linear_forward(c.n1, lw.wv, pair(Site::v, l), scale, opts, &c.cv);

    Matrix attn(T, d);
    c.probs.assign(static_cast<std::size_t>(n_heads), Matrix());
    for (int h = 0; h < n_heads; ++h) {
      const auto qh = c.q.middleCols(h * dh, dh);
      const auto kh = c.k.middleCols(h * dh, dh);
      const auto vh = c.v.middleCols(h * dh, dh);
      Matrix s = (qh * kh.transpose()) * att_scale;
      for (Eigen::Index i = 0; i < T; ++i) {
        float mx = -std::numeric_limits<float>::infinity();
        for (Eigen::Index j = 0; j <= i; ++j) mx = std::max(mx, s(i, j));
        float sum = 0.0F;
        for (Eigen::Index j = 0; j <= i; ++j) {
          s(i, j) = std::exp(s(i, j) - mx);
          sum += s(i, j);
        }
        for (Eigen::Index j = 0; j <= i; ++j) s(i, j) /= sum;
        for (Eigen::Index j = i + 1; j < T; ++j) s(i, j) = 0.0F;
      }
      attn.middleCols(h * dh, dh) = s * vh;
      c.probs[static_cast<std::size_t>(h)] = std::move(s);
    }
    const Matrix o = linear_forward(attn, lw.wo, pair(Site::o, l), scale, opts, &c.co);
    x += o;

    c.n2 = rms_forward(x, c.inv2);
    c.u = linear_forward(c.n2, lw.w_up, pair(Site::up, l), scale, opts, &c.cup);
    c.g = c.u.unaryExpr([](float u) { return gelu(u); });
    const Matrix m = linear_forward(c.g, lw.w_down, pair(Site::down, l), scale, opts, &c.cdown);
    x += m;
  }
  fw.final_norm = rms_forward(x, fw.final_inv);
  return fw;
}

}  // namespace

std::pair<double, int> CausalLM::answer_loss(const std::vector<TokenId>& tokens,
                                             std::size_t answer_begin,
                                             const LoraAdapters* adapters,
                                             LoraAdapters* grads, float loss_scale,
                                             const PassOptions& opts) const {
  const auto T = static_cast<Eigen::Index>(tokens.size());
  if (T > shape_.context_length) {
    throw ArgumentError(fmt::format("sequence of {} tokens exceeds context length {}", T,
                                    shape_.context_length));
  }
  if (answer_begin < 1 || static_cast<Eigen::Index>(answer_begin) >= T) {
    throw ArgumentError("answer span must start after the first token and be non-empty");
  }
  const bool backward = grads != nullptr && adapters != nullptr;
  const Forward fw = run_forward(shape_, weights_, positions_, tokens, adapters, opts, backward);

  const auto p0 = static_cast<Eigen::Index>(answer_begin) - 1;
  const Eigen::Index np = T - 1 - p0;
  const Matrix h = fw.final_norm.middleRows(p0, np);
  const LoraPair* head_pair = adapters ? adapters->find(Site::head, 0) : nullptr;
  const float scale = adapters ? adapters->scale() : 0.0F;
  LinearCache head_cache;
  Matrix logits = linear_forward(h, weights_.head, head_pair, scale, opts, &head_cache);

  double loss = 0.0;
  Matrix dlogits(np, logits.cols());
  for (Eigen::Index i = 0; i < np; ++i) {
    const float mx = logits.row(i).maxCoeff();
    const Eigen::RowVectorXf e = (logits.row(i).array() - mx).exp().matrix();
    const float sum = e.sum();
    const TokenId target = tokens[static_cast<std::size_t>(p0 + i + 1)];
    loss += static_cast<double>(std::log(sum) + mx - logits(i, target));
    if (backward) {
      dlogits.row(i) = e / sum;
      dlogits(i, target) -= 1.0F;
    }
  }
  if (!backward) return {loss, static_cast<int>(np)};
  dlogits *= loss_scale;

  const int d = shape_.d_model;
  const int n_heads = shape_.n_heads;
  const int dh = d / n_heads;
  const float att_scale = 1.0F / std::sqrt(static_cast<float>(dh));

  Matrix d_final = Matrix::Zero(T, d);
  d_final.middleRows(p0, np) = linear_backward(dlogits, weights_.head, head_pair,
                                               grads->find(Site::head, 0), scale, head_cache);
  Matrix dx = rms_backward(d_final, fw.final_norm, fw.final_inv);

  for (std::size_t li = weights_.layers.size(); li-- > 0;) {
    const auto& lw = weights_.layers[li];
    const LayerCache& c = fw.layers[li];
    const auto pair = [&](Site s) { return adapters->find(s, li); };
    const auto gpair = [&](Site s) { return grads->find(s, li); };

    // MLP branch.
    Matrix dg = linear_backward(dx, lw.w_down, pair(Site::down), gpair(Site::down), scale,
                                c.cdown);
    Matrix du = dg.cwiseProduct(c.u.unaryExpr([](float u) { return gelu_grad(u); }));
    Matrix dn2 = linear_backward(du, lw.w_up, pair(Site::up), gpair(Site::up), scale, c.cup);
    dx += rms_backward(dn2, c.n2, c.inv2);

    // Attention branch.
    Matrix dattn = linear_backward(dx, lw.wo, pair(Site::o), gpair(Site::o), scale, c.co);
    Matrix dq(T, d), dk(T, d), dv(T, d);
    for (int hh = 0; hh < n_heads; ++hh) {
      const Matrix& p = c.probs[static_cast<std::size_t>(hh)];
      const auto da = dattn.middleCols(hh * dh, dh);
      const auto qh = c.q.middleCols(hh * dh, dh);
      const auto kh = c.k.middleCols(hh * dh, dh);
      const auto vh = c.v.middleCols(hh * dh, dh);
      const Matrix dp = da * vh.transpose();
      dv.middleCols(hh * dh, dh) = p.transpose() * da;
      Matrix ds(T, T);
      for (Eigen::Index i = 0; i < T; ++i) {
        const float dot = p.row(i).dot(dp.row(i));
        ds.row(i) = p.row(i).cwiseProduct((dp.row(i).array() - dot).matrix());
      }
      ds *= att_scale;
      dq.middleCols(hh * dh, dh) = ds * kh;
      dk.middleCols(hh * dh, dh) = ds.transpose() * qh;
    }
    Matrix dn1 = linear_backward(dq, lw.wq, pair(Site::q), gpair(Site::q), scale, c.cq);
    dn1 += linear_backward(dk, lw.wk, pair(Site::k), gpair(Site::k), scale, c.ck);
    dn1 += linear_backward(dv, lw.wv, pair(Site::v), gpair(Site::v), scale, c.cv);
    dx += rms_backward(dn1, c.n1, c.inv1);
  }
  return {loss, static_cast<int>(np)};
}

Vector CausalLM::next_token_logits(const std::vector<TokenId>& tokens,
                                   const LoraAdapters* adapters) const {
  if (tokens.empty()) throw ArgumentError("cannot score an empty sequence");
  if (static_cast<int>(tokens.size()) > shape_.context_length) {
    throw ArgumentError(fmt::format("sequence of {} tokens exceeds context length {}",
                                    tokens.size(), shape_.context_length));
  }
  const Forward fw = run_forward(shape_, weights_, positions_, tokens, adapters, {}, false);
  const Matrix last = fw.final_norm.bottomRows(1);
  const LoraPair* head_pair = adapters ? adapters->find(Site::head, 0) : nullptr;
  const float scale = adapters ? adapters->scale() : 0.0F;
  const Matrix logits = linear_forward(last, weights_.head, head_pair, scale, {}, nullptr);
  return logits.row(0).transpose();
}

}  // namespace evalkit::lomtl
