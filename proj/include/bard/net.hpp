#pragma once

// Small pre-norm decoder-only transformer with an arbitrary per-sequence
// attention mask and exact reverse-mode gradients.
//
// The input row for token x at position p is
//   tok[x] + pos[p] + prev[y1] + prev2[y2]
// where y_k is the token of the visible row (under the sequence's mask) whose
// position id is p - k; a term is skipped when no such row exists. Only visible
// rows are read, so the mask stays the sole carrier of what a row can see, and
// a packed sequence and its two-branch counterpart pick the same y_k. This gives
// the first attention layer the two preceding tokens for free, which is what a
// key -> value lookup needs (the second value token sits two after its key).
//
// Parameters live in one flat vector (the checkpoint blob); `ParamLayout`
// names the slices. Block structure per layer:
//   h  = LN1(x);  x += Attn(h) Wo + bo
//   h2 = LN2(x);  x += GELU(h2 W1 + b1) W2 + b2
// followed by a final LN and an untied output projection.
//
// Initialization: token and lag embeddings ~ N(0, 0.1^2); position
// rows a sinusoidal table of amplitude 0.2; every weight
// matrix ~ N(0, 1/fan_in), with the two residual-branch outputs (Wo, W2)
// additionally scaled by 1/sqrt(2 * layers); LN gains 1; all biases 0.

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "bard/errors.hpp"
#include "bard/layout.hpp"
#include "bard/rng.hpp"
#include "bard/synth_task.hpp"

namespace bard {

enum class Precision { kF32, kF64 };

inline std::string to_string(Precision p) { return p == Precision::kF32 ? "f32" : "f64"; }
inline Precision parse_precision(const std::string& s) {
  if (s == "f32") return Precision::kF32;
  if (s == "f64") return Precision::kF64;
  throw ConfigError("unknown precision '" + s + "' (expected f32 or f64)");
}

struct NetConfig {
  int layers = 2;
  int model_dim = 64;
  int heads = 4;
  int ff_dim = 256;
  int vocab_total = 65;
  int max_positions = 128;
  std::uint64_t init_seed = 0;
  Precision precision = Precision::kF32;

  int head_dim() const noexcept { return model_dim / heads; }

  void validate() const {
    if (layers < 1 || model_dim < 1 || heads < 1 || ff_dim < 1 || vocab_total < 2 || max_positions < 1)
      throw ConfigError("net dimensions must be positive");
    if (model_dim % heads != 0) throw ConfigError("model_dim must be divisible by heads");
  }

  bool same_shape(const NetConfig& o) const noexcept {
    return layers == o.layers && model_dim == o.model_dim && heads == o.heads && ff_dim == o.ff_dim &&
           vocab_total == o.vocab_total && max_positions == o.max_positions;
  }
};

/// Offsets of every tensor inside the flat parameter vector.
struct ParamLayout {
  struct Layer {
    std::size_t ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w_1, b_1, w_2, b_2;
  };
  std::size_t tok_emb = 0, pos_emb = 0, prev_emb = 0, prev2_emb = 0, lnf_g = 0, lnf_b = 0, w_out = 0, b_out = 0;
  std::vector<Layer> layer;
  std::size_t total = 0;

  explicit ParamLayout(const NetConfig& c) {
    const auto d = static_cast<std::size_t>(c.model_dim);
    const auto f = static_cast<std::size_t>(c.ff_dim);
    const auto v = static_cast<std::size_t>(c.vocab_total);
    std::size_t at = 0;
    auto take = [&](std::size_t n) {
      const std::size_t off = at;
      at += n;
      return off;
    };
    tok_emb = take(v * d);
    pos_emb = take(static_cast<std::size_t>(c.max_positions) * d);
    prev_emb = take(v * d);
    prev2_emb = take(v * d);
    for (int l = 0; l < c.layers; ++l) {
      Layer L{};
      L.ln1_g = take(d);
      L.ln1_b = take(d);
      L.w_qkv = take(d * 3 * d);
      L.b_qkv = take(3 * d);
      L.w_o = take(d * d);
      L.b_o = take(d);
      L.ln2_g = take(d);
      L.ln2_b = take(d);
      L.w_1 = take(d * f);
      L.b_1 = take(f);
      L.w_2 = take(f * d);
      L.b_2 = take(d);
      layer.push_back(L);
    }
    lnf_g = take(d);
    lnf_b = take(d);
    w_out = take(d * v);
    b_out = take(v);
    total = at;
  }
};

/// Closed-form parameter count, kept separate from ParamLayout for testing.
inline std::size_t parameter_count(const NetConfig& c) {
  const auto d = static_cast<std::size_t>(c.model_dim);
  const auto f = static_cast<std::size_t>(c.ff_dim);
  const auto v = static_cast<std::size_t>(c.vocab_total);
  const auto p = static_cast<std::size_t>(c.max_positions);
  const std::size_t per_layer = 4 * d * d + 2 * d * f + 9 * d + f;
  return 3 * v * d + p * d + static_cast<std::size_t>(c.layers) * per_layer + 2 * d + d * v + v;
}

// Flat parameter and gradient storage. The base address is kept aligned so
// Eigen's vectorized reductions over slices always split the same way; with
// plain std::vector the low address bits vary between allocations and the
// last bit of a gradient could differ from one call to the next.
template <typename Scalar>
using FlatVector = std::vector<Scalar, Eigen::aligned_allocator<Scalar>>;

template <typename Scalar>
struct Params {
  NetConfig config;
  FlatVector<Scalar> values;

  bool operator==(const Params&) const = default;
};

template <typename Scalar>
Params<Scalar> init_params(const NetConfig& config, std::uint64_t seed) {
  config.validate();
  const ParamLayout layout(config);
  Params<Scalar> p{config, FlatVector<Scalar>(layout.total, Scalar(0))};
  Rng rng(derive_seed(seed, {0x696e6974ULL}));
  auto fill = [&](std::size_t off, std::size_t n, double stddev) {
    for (std::size_t i = 0; i < n; ++i) p.values[off + i] = static_cast<Scalar>(stddev * rng.normal());
  };
  auto ones = [&](std::size_t off, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) p.values[off + i] = Scalar(1);
  };
  const auto d = static_cast<std::size_t>(config.model_dim);
  const auto f = static_cast<std::size_t>(config.ff_dim);
  const auto v = static_cast<std::size_t>(config.vocab_total);
  const double resid = 1.0 / std::sqrt(2.0 * config.layers);
  fill(layout.tok_emb, v * d, 0.1);
  fill(layout.prev_emb, v * d, 0.1);
  fill(layout.prev2_emb, v * d, 0.1);
  const double pos_amp = 0.2;
  for (int pos = 0; pos < config.max_positions; ++pos) {
    for (std::size_t i = 0; i + 1 < d; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
      p.values[layout.pos_emb + static_cast<std::size_t>(pos) * d + i] = static_cast<Scalar>(pos_amp * std::sin(pos * freq));
      p.values[layout.pos_emb + static_cast<std::size_t>(pos) * d + i + 1] = static_cast<Scalar>(pos_amp * std::cos(pos * freq));
    }
  }
  for (const auto& L : layout.layer) {
    ones(L.ln1_g, d);
    fill(L.w_qkv, d * 3 * d, 1.0 / std::sqrt(double(d)));
    fill(L.w_o, d * d, resid / std::sqrt(double(d)));
    ones(L.ln2_g, d);
    fill(L.w_1, d * f, 1.0 / std::sqrt(double(d)));
    fill(L.w_2, f * d, resid / std::sqrt(double(f)));
  }
  ones(layout.lnf_g, d);
  fill(layout.w_out, d * v, 1.0 / std::sqrt(double(d)));
  return p;
}

/// One sequence handed to the model: tokens, position ids and its mask.
struct SequenceView {
  std::span<const TokenId> tokens;
  std::span<const int> positions;
  const AttentionMaskSpec* mask = nullptr;
};

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

template <typename Scalar>
class Transformer {
 public:
  using Mat = Matrix<Scalar>;
  using Vec = RowVector<Scalar>;
  using CMap = Eigen::Map<const Mat>;
  using MapM = Eigen::Map<Mat>;
  using CVec = Eigen::Map<const Vec>;
  using MapV = Eigen::Map<Vec>;

  static constexpr Scalar kLnEps = Scalar(1e-5);

  struct LayerCache {
    Mat x_in, xhat1, h1, qkv, ctx, x_mid, xhat2, h2, pre_act, act;
    Vec rstd1, rstd2;
    std::vector<Mat> probs;  // [sequence * heads + head], T x T
  };

  /// Everything backward() needs. `logits` has one row per input token, in
  /// the order the sequences were given.
  struct Cache {
    std::vector<TokenId> tokens;
    std::vector<int> positions;
    std::vector<TokenId> prev;   // visible token at position p - 1 per row, -1 if none
    std::vector<TokenId> prev2;  // same for p - 2
    std::vector<int> offsets;  // row offset of each sequence, plus the total
    std::vector<const AttentionMaskSpec*> masks;
    std::vector<LayerCache> layers;
    Mat xhat_f, h_f;
    Vec rstd_f;
    Mat logits;

    int rows() const noexcept { return offsets.back(); }
  };

  explicit Transformer(const NetConfig& config) : config_(config), layout_(config) { config.validate(); }

  const NetConfig& config() const noexcept { return config_; }
  const ParamLayout& layout() const noexcept { return layout_; }

  Cache forward(const Params<Scalar>& params, std::span<const SequenceView> seqs) const {
    check_params(params);
    const int d = config_.model_dim;
    const Scalar* w = params.values.data();

    Cache c;
    c.offsets.push_back(0);
    for (const auto& s : seqs) {
      const int n = static_cast<int>(s.tokens.size());
      if (s.positions.size() != s.tokens.size()) throw InputError("tokens and positions differ in length");
      if (s.mask == nullptr || s.mask->size() != n) throw InputError("attention mask does not match the sequence length");
      for (std::size_t i = 0; i < s.tokens.size(); ++i) {
        if (s.tokens[i] < 0 || s.tokens[i] >= config_.vocab_total) throw InputError("token id out of range");
        if (s.positions[i] < 0 || s.positions[i] >= config_.max_positions) throw InputError("position id out of range");
      }
      c.tokens.insert(c.tokens.end(), s.tokens.begin(), s.tokens.end());
      c.positions.insert(c.positions.end(), s.positions.begin(), s.positions.end());
      c.masks.push_back(s.mask);
      c.offsets.push_back(c.offsets.back() + n);
      for (int r = 0; r < n; ++r) {
        const std::uint8_t* allow = s.mask->row(r);
        auto visible_at = [&](int want) {
          for (int k = n - 1; k >= 0 && want >= 0; --k)
            if (allow[k] && s.positions[static_cast<std::size_t>(k)] == want) return s.tokens[static_cast<std::size_t>(k)];
          return TokenId{-1};
        };
        const int p = s.positions[static_cast<std::size_t>(r)];
        c.prev.push_back(visible_at(p - 1));
        c.prev2.push_back(visible_at(p - 2));
      }
    }
    const int rows = c.rows();

    Mat x(rows, d);
    {
      CMap tok(w + layout_.tok_emb, config_.vocab_total, d);
      CMap pos(w + layout_.pos_emb, config_.max_positions, d);
      CMap prev(w + layout_.prev_emb, config_.vocab_total, d);
      CMap prev2(w + layout_.prev2_emb, config_.vocab_total, d);
      for (int r = 0; r < rows; ++r) {
        const auto i = static_cast<std::size_t>(r);
        x.row(r) = tok.row(c.tokens[i]) + pos.row(c.positions[i]);
        if (c.prev[i] >= 0) x.row(r) += prev.row(c.prev[i]);
        if (c.prev2[i] >= 0) x.row(r) += prev2.row(c.prev2[i]);
      }
    }

    c.layers.resize(static_cast<std::size_t>(config_.layers));
    for (int l = 0; l < config_.layers; ++l) {
      const auto& L = layout_.layer[static_cast<std::size_t>(l)];
      auto& lc = c.layers[static_cast<std::size_t>(l)];
      lc.x_in = x;
      layer_norm(x, CVec(w + L.ln1_g, d), CVec(w + L.ln1_b, d), lc.xhat1, lc.rstd1, lc.h1);
      lc.qkv.noalias() = lc.h1 * CMap(w + L.w_qkv, d, 3 * d);
      lc.qkv.rowwise() += CVec(w + L.b_qkv, 3 * d);
      attention_forward(c, lc);
      x.noalias() += lc.ctx * CMap(w + L.w_o, d, d);
      x.rowwise() += CVec(w + L.b_o, d);
      lc.x_mid = x;
      layer_norm(x, CVec(w + L.ln2_g, d), CVec(w + L.ln2_b, d), lc.xhat2, lc.rstd2, lc.h2);
      lc.pre_act.noalias() = lc.h2 * CMap(w + L.w_1, d, config_.ff_dim);
      lc.pre_act.rowwise() += CVec(w + L.b_1, config_.ff_dim);
      lc.act = lc.pre_act.unaryExpr([](Scalar a) { return gelu(a); });
      x.noalias() += lc.act * CMap(w + L.w_2, config_.ff_dim, d);
      x.rowwise() += CVec(w + L.b_2, d);
    }
    layer_norm(x, CVec(w + layout_.lnf_g, d), CVec(w + layout_.lnf_b, d), c.xhat_f, c.rstd_f, c.h_f);
    c.logits.noalias() = c.h_f * CMap(w + layout_.w_out, d, config_.vocab_total);
    c.logits.rowwise() += CVec(w + layout_.b_out, config_.vocab_total);
    return c;
  }

  /// Accumulates dLoss/dParams into `grad` (same size as params.values).
  void backward(const Params<Scalar>& params, const Cache& c, const Mat& dlogits, FlatVector<Scalar>& grad) const {
    check_params(params);
    if (grad.size() != params.values.size()) grad.assign(params.values.size(), Scalar(0));
    if (dlogits.rows() != c.rows() || dlogits.cols() != config_.vocab_total)
      throw InputError("dlogits shape does not match the forward pass");
    const int d = config_.model_dim;
    const int f = config_.ff_dim;
    const int v = config_.vocab_total;
    const Scalar* w = params.values.data();
    Scalar* g = grad.data();

    MapM(g + layout_.w_out, d, v).noalias() += c.h_f.transpose() * dlogits;
    MapV(g + layout_.b_out, v) += dlogits.colwise().sum();
    Mat dh = dlogits * CMap(w + layout_.w_out, d, v).transpose();
    Mat dx(c.rows(), d);
    layer_norm_backward(dh, c.xhat_f, c.rstd_f, CVec(w + layout_.lnf_g, d), dx, MapV(g + layout_.lnf_g, d),
                        MapV(g + layout_.lnf_b, d), false);

    for (int l = config_.layers - 1; l >= 0; --l) {
      const auto& L = layout_.layer[static_cast<std::size_t>(l)];
      const auto& lc = c.layers[static_cast<std::size_t>(l)];

      MapM(g + L.w_2, f, d).noalias() += lc.act.transpose() * dx;
      MapV(g + L.b_2, d) += dx.colwise().sum();
      Mat dpre = dx * CMap(w + L.w_2, f, d).transpose();
      dpre.array() *= lc.pre_act.unaryExpr([](Scalar a) { return gelu_grad(a); }).array();
      MapM(g + L.w_1, d, f).noalias() += lc.h2.transpose() * dpre;
      MapV(g + L.b_1, f) += dpre.colwise().sum();
      dh.noalias() = dpre * CMap(w + L.w_1, d, f).transpose();
      layer_norm_backward(dh, lc.xhat2, lc.rstd2, CVec(w + L.ln2_g, d), dx, MapV(g + L.ln2_g, d),
                          MapV(g + L.ln2_b, d), true);

      MapM(g + L.w_o, d, d).noalias() += lc.ctx.transpose() * dx;
      MapV(g + L.b_o, d) += dx.colwise().sum();
      Mat dctx = dx * CMap(w + L.w_o, d, d).transpose();
      Mat dqkv = Mat::Zero(c.rows(), 3 * d);
      attention_backward(c, lc, dctx, dqkv);
      MapM(g + L.w_qkv, d, 3 * d).noalias() += lc.h1.transpose() * dqkv;
      MapV(g + L.b_qkv, 3 * d) += dqkv.colwise().sum();
      dh.noalias() = dqkv * CMap(w + L.w_qkv, d, 3 * d).transpose();
      layer_norm_backward(dh, lc.xhat1, lc.rstd1, CVec(w + L.ln1_g, d), dx, MapV(g + L.ln1_g, d),
                          MapV(g + L.ln1_b, d), true);
    }

    MapM tok(g + layout_.tok_emb, v, d);
    MapM pos(g + layout_.pos_emb, config_.max_positions, d);
    MapM prev(g + layout_.prev_emb, v, d);
    MapM prev2(g + layout_.prev2_emb, v, d);
    for (int r = 0; r < c.rows(); ++r) {
      const auto i = static_cast<std::size_t>(r);
      tok.row(c.tokens[i]) += dx.row(r);
      pos.row(c.positions[i]) += dx.row(r);
      if (c.prev[i] >= 0) prev.row(c.prev[i]) += dx.row(r);
      if (c.prev2[i] >= 0) prev2.row(c.prev2[i]) += dx.row(r);
    }
  }

  /// Logits only, for a single sequence.
  Mat logits(const Params<Scalar>& params, const SequenceView& seq) const {
    return forward(params, std::span<const SequenceView>(&seq, 1)).logits;
  }

  static Scalar gelu(Scalar a) {
    return Scalar(0.5) * a * (Scalar(1) + std::erf(a * Scalar(std::numbers::sqrt2 / 2.0)));
  }
  static Scalar gelu_grad(Scalar a) {
    const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(a * Scalar(std::numbers::sqrt2 / 2.0)));
    const Scalar pdf = std::exp(Scalar(-0.5) * a * a) * Scalar(1.0 / std::sqrt(2.0 * std::numbers::pi));
    return cdf + a * pdf;
  }

 private:
  void check_params(const Params<Scalar>& params) const {
    if (params.values.size() != layout_.total) throw InputError("parameter vector size does not match the net config");
  }

  static void layer_norm(const Mat& x, const CVec& gain, const CVec& bias, Mat& xhat, Vec& rstd, Mat& out) {
    const auto n = x.rows();
    const auto d = x.cols();
    xhat.resize(n, d);
    rstd.resize(n);
    for (Eigen::Index r = 0; r < n; ++r) {
      const Scalar mean = x.row(r).mean();
      const Scalar var = (x.row(r).array() - mean).square().mean();
      const Scalar rs = Scalar(1) / std::sqrt(var + kLnEps);
      rstd(r) = rs;
      xhat.row(r) = (x.row(r).array() - mean) * rs;
    }
    out = (xhat.array().rowwise() * gain.array()).rowwise() + bias.array();
  }

  /// dx (+)= d LN(x) given the gradient at the LN output.
  static void layer_norm_backward(const Mat& dy, const Mat& xhat, const Vec& rstd, const CVec& gain, Mat& dx,
                                  MapV dgain, MapV dbias, bool accumulate) {
    dgain += (dy.array() * xhat.array()).colwise().sum().matrix();
    dbias += dy.colwise().sum();
    const auto d = static_cast<Scalar>(dy.cols());
    if (!accumulate) dx.setZero(dy.rows(), dy.cols());
    for (Eigen::Index r = 0; r < dy.rows(); ++r) {
      const auto dxhat = (dy.row(r).array() * gain.array()).eval();
      const Scalar m1 = dxhat.sum() / d;
      const Scalar m2 = (dxhat * xhat.row(r).array()).sum() / d;
      dx.row(r).array() += rstd(r) * (dxhat - m1 - xhat.row(r).array() * m2);
    }
  }

  void attention_forward(const Cache& c, LayerCache& lc) const {
    const int d = config_.model_dim;
    const int dh = config_.head_dim();
    const int heads = config_.heads;
    const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
    const auto nseq = c.masks.size();
    lc.ctx.resize(c.rows(), d);
    lc.probs.assign(nseq * static_cast<std::size_t>(heads), Mat());
    for (std::size_t s = 0; s < nseq; ++s) {
      const int off = c.offsets[s];
      const int n = c.offsets[s + 1] - off;
      const AttentionMaskSpec& mask = *c.masks[s];
      for (int h = 0; h < heads; ++h) {
        Mat& p = lc.probs[s * static_cast<std::size_t>(heads) + static_cast<std::size_t>(h)];
        p.noalias() = (lc.qkv.block(off, h * dh, n, dh) * lc.qkv.block(off, d + h * dh, n, dh).transpose()) * scale;
        for (int q = 0; q < n; ++q) {
          const std::uint8_t* allow = mask.row(q);
          Scalar mx = -std::numeric_limits<Scalar>::infinity();
          for (int k = 0; k < n; ++k)
            if (allow[k] && p(q, k) > mx) mx = p(q, k);
          Scalar sum = 0;
          for (int k = 0; k < n; ++k) {
            const Scalar e = allow[k] ? std::exp(p(q, k) - mx) : Scalar(0);
            p(q, k) = e;
            sum += e;
          }
          p.row(q) /= sum;
        }
        lc.ctx.block(off, h * dh, n, dh).noalias() = p * lc.qkv.block(off, 2 * d + h * dh, n, dh);
      }
    }
  }

  void attention_backward(const Cache& c, const LayerCache& lc, const Mat& dctx, Mat& dqkv) const {
    const int d = config_.model_dim;
    const int dh = config_.head_dim();
    const int heads = config_.heads;
    const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
    for (std::size_t s = 0; s < c.masks.size(); ++s) {
      const int off = c.offsets[s];
      const int n = c.offsets[s + 1] - off;
      for (int h = 0; h < heads; ++h) {
        const Mat& p = lc.probs[s * static_cast<std::size_t>(heads) + static_cast<std::size_t>(h)];
        const auto dout = dctx.block(off, h * dh, n, dh);
        const auto qh = lc.qkv.block(off, h * dh, n, dh);
        const auto kh = lc.qkv.block(off, d + h * dh, n, dh);
        const auto vh = lc.qkv.block(off, 2 * d + h * dh, n, dh);
        dqkv.block(off, 2 * d + h * dh, n, dh).noalias() += p.transpose() * dout;
        Mat dp = dout * vh.transpose();
        // Softmax Jacobian; masked entries have p = 0 and so get no gradient.
        const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inner = (dp.array() * p.array()).rowwise().sum();
        dp = (p.array() * (dp.array().colwise() - inner.array())).matrix() * scale;
        dqkv.block(off, h * dh, n, dh).noalias() += dp * kh;
        dqkv.block(off, d + h * dh, n, dh).noalias() += dp.transpose() * qh;
      }
    }
  }

  NetConfig config_;
  ParamLayout layout_;
};

template <typename Scalar>
bool all_finite(std::span<const Scalar> xs) {
  for (Scalar x : xs)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace bard
