#pragma once

// Mixed corruption kernel: each response position independently stays clean,
// is replaced by a uniformly drawn ordinary token, or is masked, with
// probabilities (k1, k2, k3) that depend on the corruption level t.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "bard/errors.hpp"
#include "bard/rng.hpp"
#include "bard/synth_task.hpp"

namespace bard {

enum class NoiseMode { kMaskOnly, kUniformOnly, kMixture };

inline std::string to_string(NoiseMode mode) {
  switch (mode) {
    case NoiseMode::kMaskOnly: return "mask";
    case NoiseMode::kUniformOnly: return "uniform";
    case NoiseMode::kMixture: return "mixture";
  }
  return "mixture";
}

inline NoiseMode parse_noise_mode(const std::string& name) {
  if (name == "mask" || name == "mask_only") return NoiseMode::kMaskOnly;
  if (name == "uniform" || name == "uniform_only") return NoiseMode::kUniformOnly;
  if (name == "mixture" || name == "mix") return NoiseMode::kMixture;
  throw ConfigError("unknown noise mode '" + name + "' (expected mask, uniform or mixture)");
}

/// Branch probabilities: k1 keep clean, k2 uniform replacement, k3 mask.
struct Kappa {
  double k1 = 0.0;
  double k2 = 0.0;
  double k3 = 0.0;
};

inline Kappa kappa(double t, NoiseMode mode = NoiseMode::kMixture) {
  if (!(t >= 0.0 && t <= 1.0)) throw DomainError("corruption level t must lie in [0, 1]");
  switch (mode) {
    case NoiseMode::kMaskOnly:
      return {t, 0.0, 1.0 - t};
    case NoiseMode::kUniformOnly:
      return {t, 1.0 - t, 0.0};
    case NoiseMode::kMixture: {
      // cos(pi t / 2) written as sin(pi (1 - t) / 2) so both endpoints come
      // out exact; the middle branch is clamped so rounding never makes it negative.
      const double c = std::sin(std::numbers::pi * (1.0 - t) / 2.0);
      const double s = std::sin(std::numbers::pi * t / 2.0);
      const double k2 = c + s - 1.0;
      return {1.0 - c, k2 < 0.0 ? 0.0 : k2, 1.0 - s};
    }
  }
  return {};
}

enum class Branch : std::uint8_t { kClean = 0, kUniform = 1, kMask = 2 };

struct CorruptionSample {
  double t = 0.0;
  TokenSequence x_t;
  std::vector<int> masked;     // M_t, ascending
  std::vector<int> uniform;    // U_t, ascending
  std::vector<int> supervised; // S_t = M_t ∪ U_t, ascending
  std::vector<Branch> branch;  // per position
};

inline double sample_t(std::uint64_t rng_seed) {
  Rng rng(derive_seed(rng_seed, {0x74ULL}));
  return rng.uniform();
}

inline CorruptionSample corrupt(std::span<const TokenId> x1, double t, const Vocab& vocab,
                                std::uint64_t rng_seed, NoiseMode mode) {
  for (std::size_t i = 0; i < x1.size(); ++i) {
    if (x1[i] == vocab.mask_id()) throw InputError("clean response contains the mask id at position " + std::to_string(i));
    if (!vocab.is_ordinary(x1[i])) throw InputError("clean response token out of range at position " + std::to_string(i));
  }
  const Kappa k = kappa(t, mode);
  Rng rng(derive_seed(rng_seed, {0x6e6f697365ULL}));

  CorruptionSample out;
  out.t = t;
  out.x_t.assign(x1.begin(), x1.end());
  out.branch.assign(x1.size(), Branch::kClean);
  for (std::size_t i = 0; i < x1.size(); ++i) {
    const double u = rng.uniform();
    const int pos = static_cast<int>(i);
    if (u < k.k1) continue;
    if (u < k.k1 + k.k2) {
      // The draw may coincide with the clean token; it is still supervised.
      out.x_t[i] = static_cast<TokenId>(rng.below(static_cast<std::uint64_t>(vocab.size)));
      out.branch[i] = Branch::kUniform;
      out.uniform.push_back(pos);
    } else {
      out.x_t[i] = vocab.mask_id();
      out.branch[i] = Branch::kMask;
      out.masked.push_back(pos);
    }
    out.supervised.push_back(pos);
  }
  return out;
}

}  // namespace bard
