#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "bard/errors.hpp"
#include "bard/net.hpp"

namespace bard {

/// Linear warmup to `peak` over `warmup` steps, then cosine decay to `floor`
/// at `total` steps. Steps are 1-based.
struct LrSchedule {
  double peak = 1e-3;
  double floor = 1e-5;
  int warmup = 100;
  int total = 1000;

  double at(int step) const noexcept {
    if (warmup > 0 && step <= warmup) return peak * static_cast<double>(step) / static_cast<double>(warmup);
    if (total <= warmup) return peak;
    double progress = static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
    if (progress > 1.0) progress = 1.0;
    return floor + 0.5 * (peak - floor) * (1.0 + std::cos(std::numbers::pi * progress));
  }
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double clip_norm = 1.0;  // <= 0 disables clipping
};

template <typename Scalar>
struct AdamWState {
  std::vector<Scalar> m;
  std::vector<Scalar> v;
  int step = 0;
};

struct StepInfo {
  double lr = 0.0;
  double grad_norm = 0.0;  // before clipping
  double scale = 1.0;      // factor applied to the gradient by clipping
};

inline double global_norm(std::span<const float> g) {
  double s = 0.0;
  for (float x : g) s += static_cast<double>(x) * static_cast<double>(x);
  return std::sqrt(s);
}
inline double global_norm(std::span<const double> g) {
  double s = 0.0;
  for (double x : g) s += x * x;
  return std::sqrt(s);
}

/// Weight decay applies to matrices only; embeddings, LN and biases are exempt.
inline std::vector<std::uint8_t> decay_mask(const NetConfig& config) {
  const ParamLayout layout(config);
  std::vector<std::uint8_t> mask(layout.total, 0);
  const auto d = static_cast<std::size_t>(config.model_dim);
  const auto f = static_cast<std::size_t>(config.ff_dim);
  const auto v = static_cast<std::size_t>(config.vocab_total);
  auto mark = [&](std::size_t off, std::size_t n) { std::fill_n(mask.begin() + static_cast<std::ptrdiff_t>(off), n, 1); };
  for (const auto& L : layout.layer) {
    mark(L.w_qkv, d * 3 * d);
    mark(L.w_o, d * d);
    mark(L.w_1, d * f);
    mark(L.w_2, f * d);
  }
  mark(layout.w_out, d * v);
  return mask;
}

/// One decoupled-weight-decay Adam update with global-norm clipping.
/// `decay` may be empty, meaning every coordinate is decayed.
template <typename Scalar>
StepInfo optimizer_step(AdamWState<Scalar>& state, std::span<Scalar> params, std::span<const Scalar> grads,
                        const AdamWConfig& cfg, const LrSchedule& schedule,
                        std::span<const std::uint8_t> decay = {}) {
  const std::size_t n = params.size();
  if (grads.size() != n) throw InputError("gradient size does not match parameters");
  if (!decay.empty() && decay.size() != n) throw InputError("decay mask size does not match parameters");
  if (state.m.size() != n) {
    state.m.assign(n, Scalar(0));
    state.v.assign(n, Scalar(0));
  }
  ++state.step;
  StepInfo info;
  info.lr = schedule.at(state.step);
  info.grad_norm = global_norm(grads);
  if (!std::isfinite(info.grad_norm)) throw NumericError("non-finite gradient norm at optimizer step " + std::to_string(state.step));
  if (cfg.clip_norm > 0.0 && info.grad_norm > cfg.clip_norm) info.scale = cfg.clip_norm / info.grad_norm;

  const double bc1 = 1.0 - std::pow(cfg.beta1, state.step);
  const double bc2 = 1.0 - std::pow(cfg.beta2, state.step);
  const auto b1 = static_cast<Scalar>(cfg.beta1);
  const auto b2 = static_cast<Scalar>(cfg.beta2);
  const auto scale = static_cast<Scalar>(info.scale);
  const auto step_size = static_cast<Scalar>(info.lr / bc1);
  const auto inv_bc2 = static_cast<Scalar>(1.0 / bc2);
  const auto eps = static_cast<Scalar>(cfg.eps);
  const auto wd = static_cast<Scalar>(info.lr * cfg.weight_decay);
  for (std::size_t i = 0; i < n; ++i) {
    const Scalar g = grads[i] * scale;
    state.m[i] = b1 * state.m[i] + (Scalar(1) - b1) * g;
    state.v[i] = b2 * state.v[i] + (Scalar(1) - b2) * g * g;
    if (decay.empty() || decay[i]) params[i] -= wd * params[i];
    params[i] -= step_size * state.m[i] / (std::sqrt(state.v[i] * inv_bc2) + eps);
  }
  return info;
}

}  // namespace bard
