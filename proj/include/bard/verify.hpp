#pragma once

// Invariant suites shared by `bard verify` and the acceptance binary. Each
// suite returns a machine-readable result; none of them needs a trained model.

#include <chrono>
#include <cmath>
#include <functional>
#include <json.hpp>
#include <string>
#include <vector>

#include "bard/checkpoint.hpp"
#include "bard/decode.hpp"
#include "bard/layout.hpp"
#include "bard/noise.hpp"
#include "bard/objectives.hpp"
#include "bard/training.hpp"

namespace bard {

struct SuiteResult {
  std::string name;
  bool passed = false;
  nlohmann::json details = nlohmann::json::object();
  double seconds = 0.0;
};

struct VerifyOptions {
  std::uint64_t seed = 0;
  int noise_samples = 200000;  // positions per t value
  int packed_instances = 50;
  int grad_coordinates = 240;
  int ar_contexts = 100;
  bool inject_mask_fault = false;  // test hook: flips one bit of every built mask
};

namespace verify_detail {

template <typename F>
SuiteResult timed(const std::string& name, F&& body) {
  const auto start = std::chrono::steady_clock::now();
  SuiteResult r;
  r.name = name;
  body(r);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

inline NetConfig tiny_net(int vocab_total, int max_positions, std::uint64_t seed) {
  NetConfig c;
  c.layers = 2;
  c.model_dim = 16;
  c.heads = 2;
  c.ff_dim = 24;
  c.vocab_total = vocab_total;
  c.max_positions = max_positions;
  c.init_seed = seed;
  c.precision = Precision::kF64;
  return c;
}

inline TokenSequence random_tokens(Rng& rng, int n, int vocab) {
  TokenSequence out(static_cast<std::size_t>(n));
  for (auto& t : out) t = static_cast<TokenId>(rng.below(static_cast<std::uint64_t>(vocab)));
  return out;
}

}  // namespace verify_detail

/// Simplex and endpoint checks of the mixture schedule on a uniform grid.
inline SuiteResult verify_kappa(int grid = 1000) {
  return verify_detail::timed("kappa", [&](SuiteResult& r) {
    double worst_sum = 0.0;
    double min_component = 1.0;
    for (int i = 0; i < grid; ++i) {
      const double t = static_cast<double>(i) / static_cast<double>(grid - 1);
      const Kappa k = kappa(t);
      worst_sum = std::max(worst_sum, std::abs(k.k1 + k.k2 + k.k3 - 1.0));
      min_component = std::min({min_component, k.k1, k.k2, k.k3});
    }
    const Kappa k0 = kappa(0.0);
    const Kappa k1 = kappa(1.0);
    const bool ends = k0.k1 == 0.0 && k0.k2 == 0.0 && k0.k3 == 1.0 && k1.k1 == 1.0 && k1.k2 == 0.0 && k1.k3 == 0.0;
    r.passed = ends && worst_sum <= 1e-12 && min_component >= 0.0;
    r.details = {{"grid", grid}, {"max_sum_error", worst_sum}, {"min_component", min_component}, {"endpoints_exact", ends}};
  });
}

/// Empirical branch frequencies against kappa(t), within 3 binomial sigma.
inline SuiteResult verify_noise(const VerifyOptions& opt = {}, std::vector<double> ts = {0.1, 0.3, 0.5, 0.7, 0.9},
                                NoiseMode mode = NoiseMode::kMixture) {
  return verify_detail::timed("noise", [&](SuiteResult& r) {
    const Vocab vocab{};
    const TokenSequence x1(32, Vocab::kFirstContent);
    const int per_call = static_cast<int>(x1.size());
    bool ok = true;
    nlohmann::json rows = nlohmann::json::array();
    for (double t : ts) {
      long counts[3] = {0, 0, 0};
      long n = 0;
      for (int call = 0; n < opt.noise_samples; ++call) {
        const auto s = corrupt(x1, t, vocab, derive_seed(opt.seed, {0x6e7366ULL, static_cast<std::uint64_t>(t * 1000), static_cast<std::uint64_t>(call)}),
                               mode);
        for (int i = 0; i < per_call && n < opt.noise_samples; ++i, ++n) ++counts[static_cast<int>(s.branch[static_cast<std::size_t>(i)])];
      }
      const Kappa k = kappa(t, mode);
      const double expect[3] = {k.k1, k.k2, k.k3};
      nlohmann::json row = {{"t", t}, {"n", n}};
      double worst_z = 0.0;
      for (int b = 0; b < 3; ++b) {
        const double freq = static_cast<double>(counts[b]) / static_cast<double>(n);
        const double sigma = std::sqrt(expect[b] * (1.0 - expect[b]) / static_cast<double>(n));
        const double z = sigma > 0.0 ? std::abs(freq - expect[b]) / sigma : (freq == expect[b] ? 0.0 : INFINITY);
        worst_z = std::max(worst_z, z);
        row[b == 0 ? "clean" : b == 1 ? "uniform" : "mask"] = {{"expected", expect[b]}, {"observed", freq}, {"z", z}};
      }
      row["max_z"] = worst_z;
      ok = ok && worst_z <= 3.0;
      rows.push_back(row);
    }
    r.passed = ok;
    r.details = {{"mode", to_string(mode)}, {"per_t", rows}};
  });
}

/// Exhaustive packed-mask check for every |Q| <= 4, L <= 8, B in {1,2,4,8} with B | L.
inline SuiteResult verify_masks(const VerifyOptions& opt = {}) {
  return verify_detail::timed("mask", [&](SuiteResult& r) {
    long configs = 0;
    long pairs = 0;
    long violations = 0;
    nlohmann::json first = nullptr;
    for (int ctx = 0; ctx <= 4; ++ctx) {
      for (int len = 1; len <= 8; ++len) {
        for (int bs : {1, 2, 4, 8}) {
          if (len % bs != 0) continue;
          const TokenSequence q(static_cast<std::size_t>(ctx), Vocab::kFirstContent);
          const TokenSequence x(static_cast<std::size_t>(len), Vocab::kFirstContent);
          const PackedBatch batch = build_packed(q, x, x, bs);
          AttentionMaskSpec mask = build_packed_mask(batch);
          if (opt.inject_mask_fault) {
            const int qrow = batch.size() - 1;
            mask.set(qrow, ctx + len - 1, !mask.allowed(qrow, ctx + len - 1));
          }
          const LeakageReport rep = verify_no_leakage(mask, batch);
          ++configs;
          pairs += static_cast<long>(rep.pairs_checked);
          violations += static_cast<long>(rep.violations.size());
          if (!rep.ok() && first.is_null())
            first = {{"context_len", ctx}, {"response_len", len}, {"block_size", bs},
                     {"query", rep.violations.front().query}, {"key", rep.violations.front().key},
                     {"expected", rep.violations.front().expected}};
        }
      }
    }
    r.passed = violations == 0;
    r.details = {{"configurations", configs}, {"pairs_checked", pairs}, {"violations", violations}, {"first_violation", first}};
  });
}

/// Max |packed - two-branch| over noisy-block logits on random instances.
template <typename Scalar>
double packed_equivalence_gap(const Transformer<Scalar>& net, const Params<Scalar>& params, std::span<const TokenId> q,
                              std::span<const TokenId> x1, std::span<const TokenId> x_t, int block_size) {
  const PackedBatch packed = build_packed(q, x1, x_t, block_size);
  const AttentionMaskSpec mask = build_packed_mask(packed);
  const SequenceView pv{packed.tokens, packed.positions, &mask};
  const Matrix<Scalar> pl = net.logits(params, pv);
  const TwoBranchLayout two = build_two_branch(q, x1, x_t, block_size);
  double gap = 0.0;
  for (const auto& b : two.blocks) {
    const SequenceView bv{b.tokens, b.positions, &b.mask};
    const Matrix<Scalar> bl = net.logits(params, bv);
    for (int j = 0; j < block_size; ++j) {
      const int packed_row = packed.noisy_offset() + b.block * block_size + j;
      gap = std::max(gap, static_cast<double>((pl.row(packed_row) - bl.row(b.readout_offset + j)).cwiseAbs().maxCoeff()));
    }
  }
  const SequenceView cv{two.clean.tokens, two.clean.positions, &two.clean.mask};
  const Matrix<Scalar> cl = net.logits(params, cv);
  gap = std::max(gap, static_cast<double>((pl.topRows(packed.noisy_offset()) - cl).cwiseAbs().maxCoeff()));
  return gap;
}

template <typename Scalar>
SuiteResult verify_packed(const VerifyOptions& opt = {}, double tol = std::is_same_v<Scalar, double> ? 1e-10 : 1e-5) {
  return verify_detail::timed(std::is_same_v<Scalar, double> ? "packed" : "packed_f32", [&](SuiteResult& r) {
    const Vocab vocab{16};
    NetConfig cfg = verify_detail::tiny_net(vocab.total(), 32, opt.seed);
    cfg.precision = precision_of<Scalar>();
    const Transformer<Scalar> net(cfg);
    double worst = 0.0;
    for (int i = 0; i < opt.packed_instances; ++i) {
      Rng rng(derive_seed(opt.seed, {0x7061636bULL, static_cast<std::uint64_t>(i)}));
      const auto params = init_params<Scalar>(cfg, derive_seed(opt.seed, {0x70ULL, static_cast<std::uint64_t>(i)}));
      const int ctx = 1 + static_cast<int>(rng.below(6));
      const int len = rng.below(2) ? 8 : 4;
      const int bs = 1 << rng.below(len == 8 ? 4 : 3);
      const TokenSequence q = verify_detail::random_tokens(rng, ctx, vocab.size);
      const TokenSequence x1 = verify_detail::random_tokens(rng, len, vocab.size);
      const auto s = corrupt(x1, rng.uniform(), vocab, rng.next_u64(), NoiseMode::kMixture);
      worst = std::max(worst, packed_equivalence_gap(net, params, q, x1, s.x_t, bs));
    }
    r.passed = worst <= tol;
    r.details = {{"instances", opt.packed_instances}, {"max_abs_diff", worst}, {"tolerance", tol}};
  });
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  int coordinates = 0;
  double loss = 0.0;
};

/// Central differences (step h) on `coords` deterministic coordinates. The
/// relative error is |fd - an| / max(|fd| + |an|, 1e-6).
inline GradCheckResult grad_check(Objective kind, int coords, std::uint64_t seed, double h = 1e-5) {
  TaskParams task;
  task.num_pairs = 2;
  task.num_queries = 2;
  task.value_len = 1;
  task.vocab.size = 12;
  const NetConfig cfg = verify_detail::tiny_net(task.vocab.total(), task.context_len() + task.response_len(), seed);
  const Transformer<double> net(cfg);
  auto params = init_params<double>(cfg, derive_seed(seed, {0x6763ULL}));
  const int block = 2;
  std::vector<TrainItem> items;
  for (std::uint64_t i = 0; i < 3; ++i) {
    TrainItem it;
    it.example = gen_example(task, i + seed * 7);
    it.sample = corrupt(it.example.x1, 0.25 + 0.2 * static_cast<double>(i), task.vocab, derive_seed(seed, {i}), NoiseMode::kMixture);
    items.push_back(std::move(it));
  }
  std::vector<Matrix<double>> teacher;
  if (kind == Objective::kKd) {
    Rng rng(derive_seed(seed, {0x746368ULL}));
    for (std::size_t i = 0; i < items.size(); ++i) {
      Matrix<double> t(task.response_len(), cfg.vocab_total);
      for (Eigen::Index a = 0; a < t.size(); ++a) t.data()[a] = rng.normal();
      teacher.push_back(std::move(t));
    }
  }
  const ObjectiveSpec spec{kind, block, kind == Objective::kKd ? 2.0 : 1.0};
  const std::span<const TrainItem> batch(items);
  const auto lg = loss_and_grad(net, params, batch, spec, std::span<const Matrix<double>>(teacher));

  GradCheckResult out;
  out.loss = lg.loss;
  Rng pick(derive_seed(seed, {0x636f6f7264ULL, static_cast<std::uint64_t>(kind)}));
  for (int c = 0; c < coords; ++c) {
    const std::size_t i = pick.below(params.values.size());
    const double keep = params.values[i];
    params.values[i] = keep + h;
    const double lp = loss_and_grad(net, params, batch, spec, std::span<const Matrix<double>>(teacher), false).loss;
    params.values[i] = keep - h;
    const double lm = loss_and_grad(net, params, batch, spec, std::span<const Matrix<double>>(teacher), false).loss;
    params.values[i] = keep;
    const double fd = (lp - lm) / (2 * h);
    const double an = lg.grad[i];
    out.max_rel_error = std::max(out.max_rel_error, std::abs(fd - an) / std::max(std::abs(fd) + std::abs(an), 1e-6));
    ++out.coordinates;
  }
  return out;
}

inline SuiteResult verify_gradients(const VerifyOptions& opt = {}) {
  return verify_detail::timed("grad", [&](SuiteResult& r) {
    bool ok = true;
    for (Objective kind : {Objective::kMask, Objective::kMix, Objective::kKd, Objective::kAr}) {
      const auto g = grad_check(kind, opt.grad_coordinates, opt.seed + 1);
      r.details[to_string(kind)] = {{"max_rel_error", g.max_rel_error}, {"coordinates", g.coordinates}, {"loss", g.loss}};
      ok = ok && g.max_rel_error < 1e-4 && g.coordinates >= 200;
    }
    r.passed = ok;
  });
}

inline SuiteResult verify_kd() {
  return verify_detail::timed("kd", [&](SuiteResult& r) {
    Rng rng(0x6b64);
    Matrix<double> z(6, 9);
    for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = 3.0 * rng.normal();
    Matrix<double> shifted = z;
    for (Eigen::Index i = 0; i < z.rows(); ++i) shifted.row(i).array() += 10.0 * rng.normal();
    const std::vector<int> rows = {0, 1, 2, 3, 4, 5};
    const double same = loss_kd<double>(z, z, rows, 1.0);
    const double shift = std::max(loss_kd<double>(shifted, z, rows, 1.0), loss_kd<double>(shifted, z, rows, 2.5));

    Matrix<double> student(1, 2), teacher(1, 2);
    student << std::log(3.0), 0.0;
    teacher << 0.0, 0.0;
    const std::vector<int> one = {0};
    const double hand = 0.5 * std::log(0.5 / 0.75) + 0.5 * std::log(0.5 / 0.25);
    const double got = loss_kd<double>(student, teacher, one, 1.0);
    r.passed = std::abs(same) < 1e-12 && std::abs(shift) < 1e-12 && std::abs(got - hand) < 1e-9;
    r.details = {{"identical", same}, {"shifted", shift}, {"hand_expected", hand}, {"hand_got", got}};
  });
}

/// Block decoding at B=1, eta=0, one step per block against greedy decoding
/// that reads each token from its own (masked) row under a causal mask.
inline SuiteResult verify_ar_equivalence(const VerifyOptions& opt = {}) {
  return verify_detail::timed("ar_equivalence", [&](SuiteResult& r) {
    const Vocab vocab{16};
    NetConfig cfg = verify_detail::tiny_net(vocab.total(), 32, opt.seed);
    cfg.precision = Precision::kF32;
    const Transformer<float> net(cfg);
    const auto params = init_params<float>(cfg, derive_seed(opt.seed, {0x6172ULL}));
    const DecodePolicy policy{1, 0.0, 1, true};
    int agree = 0;
    for (int i = 0; i < opt.ar_contexts; ++i) {
      Rng rng(derive_seed(opt.seed, {0x63747874ULL, static_cast<std::uint64_t>(i)}));
      const int ctx = 1 + static_cast<int>(rng.below(12));
      const int len = 1 + static_cast<int>(rng.below(12));
      const TokenSequence q = verify_detail::random_tokens(rng, ctx, vocab.size);
      const auto [resp, trace] = generate(net, params, q, len, policy, vocab.mask_id());
      const auto ar = greedy_ar(net, params, q, len, vocab.mask_id(), ArReadout::kSamePosition);
      agree += resp == ar.response && trace.forward_passes == ar.forward_passes;
    }
    r.passed = agree == opt.ar_contexts;
    r.details = {{"contexts", opt.ar_contexts}, {"identical", agree}};
  });
}

inline const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> names = {"kappa", "noise", "mask", "packed", "grad", "kd", "ar_equivalence"};
  return names;
}

/// Runs one named suite, or every suite for "all". Unknown names throw ConfigError.
inline std::vector<SuiteResult> run_suites(const std::string& name, const VerifyOptions& opt = {}) {
  std::vector<SuiteResult> out;
  auto want = [&](const char* n) { return name == "all" || name == n; };
  bool known = name == "all";
  for (const auto& n : suite_names()) known = known || n == name;
  if (!known) throw ConfigError("unknown verify suite '" + name + "'");
  if (want("kappa")) out.push_back(verify_kappa());
  if (want("noise")) out.push_back(verify_noise(opt));
  if (want("mask")) out.push_back(verify_masks(opt));
  if (want("packed")) out.push_back(verify_packed<double>(opt));
  if (want("grad")) out.push_back(verify_gradients(opt));
  if (want("kd")) out.push_back(verify_kd());
  if (want("ar_equivalence")) out.push_back(verify_ar_equivalence(opt));
  return out;
}

inline nlohmann::json to_json(const SuiteResult& r) {
  return {{"suite", r.name}, {"passed", r.passed}, {"seconds", r.seconds}, {"details", r.details}};
}

}  // namespace bard
