#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "bard/decode.hpp"
#include "bard/synth_task.hpp"

namespace bard {

/// Held-out examples live far above any training index.
inline constexpr std::uint64_t kEvalIndexBase = std::uint64_t{1} << 40;

inline std::vector<Example> eval_examples(const TaskParams& task, int count, std::uint64_t base = kEvalIndexBase) {
  std::vector<Example> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) out.push_back(gen_example(task, base + static_cast<std::uint64_t>(i)));
  return out;
}

struct DiffusionEval {
  std::vector<TokenSequence> responses;
  std::vector<DecodeTrace> traces;
  std::vector<double> matches;
  PolicyReport report;
};

template <typename Scalar>
DiffusionEval evaluate_policy(const Transformer<Scalar>& net, const Params<Scalar>& params,
                              std::span<const Example> examples, const DecodePolicy& policy, TokenId mask_id,
                              const std::string& policy_id = "") {
  DiffusionEval out;
  for (const auto& ex : examples) {
    auto [resp, trace] = generate(net, params, ex.q, static_cast<int>(ex.x1.size()), policy, mask_id);
    out.matches.push_back(exact_match(resp, ex.x1));
    out.responses.push_back(std::move(resp));
    out.traces.push_back(std::move(trace));
  }
  out.report = summarize_policy(policy_id, policy, out.traces, out.matches);
  return out;
}

struct ArEval {
  std::vector<ArResult> runs;
  std::vector<double> matches;
  PolicyReport report;
};

template <typename Scalar>
ArEval evaluate_ar(const Transformer<Scalar>& net, const Params<Scalar>& params, std::span<const Example> examples,
                   TokenId mask_id, ArReadout readout = ArReadout::kNextToken) {
  ArEval out;
  for (const auto& ex : examples) {
    auto r = greedy_ar(net, params, ex.q, static_cast<int>(ex.x1.size()), mask_id, readout);
    out.matches.push_back(exact_match(r.response, ex.x1));
    out.runs.push_back(std::move(r));
  }
  out.report = summarize_ar(out.runs, out.matches);
  return out;
}

}  // namespace bard
