#pragma once

// Semi-autoregressive block decoding with confidence-threshold
// materialization and higher-confidence revision, plus greedy AR decoding.
//
// Blocks are produced left to right. Each block starts fully masked; every
// refinement step runs one forward pass over [Q, finalized prefix, block]
// where the block attends bidirectionally to itself and to everything before
// it. Argmax ties resolve to the lowest token id and the mask id is never
// emitted.

#include <chrono>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "bard/errors.hpp"
#include "bard/layout.hpp"
#include "bard/net.hpp"
#include "bard/synth_task.hpp"

namespace bard {

struct DecodePolicy {
  int block_size = 4;
  double threshold = 0.9;
  int max_steps_per_block = 0;  // 0 means 2 * block_size
  bool revision_enabled = true;

  int max_steps() const noexcept { return max_steps_per_block > 0 ? max_steps_per_block : 2 * block_size; }

  void validate(int response_len) const {
    check_block_size(response_len, block_size);
    // Thresholds above 1 are accepted: nothing materializes by confidence and
    // every block runs to max_steps before force-filling.
    if (!(threshold >= 0.0) || !std::isfinite(threshold)) throw ConfigError("decode threshold must be finite and >= 0");
    if (max_steps_per_block < 0) throw ConfigError("max_steps_per_block must be >= 0");
  }
};

struct Materialized {
  int position = 0;  // response position
  TokenId token = 0;
  double confidence = 0.0;
  bool forced = false;
};

struct Revision {
  int position = 0;
  TokenId old_token = 0;
  TokenId new_token = 0;
  double old_confidence = 0.0;
  double new_confidence = 0.0;
};

struct StepRecord {
  int block = 0;
  int step = 0;
  std::vector<Materialized> materialized;
  std::vector<Revision> revised;
};

struct DecodeTrace {
  std::vector<StepRecord> steps;
  int forward_passes = 0;
  int generated_tokens = 0;
  double wall_ms = 0.0;

  double passes_per_token() const noexcept {
    return generated_tokens > 0 ? static_cast<double>(forward_passes) / generated_tokens : 0.0;
  }
};

/// Prediction at one row: argmax over ordinary ids and its softmax probability
/// under the full output distribution.
struct Prediction {
  TokenId token = 0;
  double confidence = 0.0;
};

template <typename Scalar>
Prediction predict_row(const Eigen::Ref<const Matrix<Scalar>>& logits, int row, TokenId mask_id) {
  const auto z = logits.row(row);
  const Scalar mx = z.maxCoeff();
  double sum = 0.0;
  for (Eigen::Index v = 0; v < z.size(); ++v) sum += std::exp(static_cast<double>(z(v) - mx));
  const int limit = std::min<int>(static_cast<int>(z.size()), static_cast<int>(mask_id));
  int best = 0;
  for (int v = 1; v < limit; ++v)
    if (z(v) > z(best)) best = v;
  return {static_cast<TokenId>(best), std::exp(static_cast<double>(z(best) - mx)) / sum};
}

/// Mask for [Q, prefix, block]: causal up to the block, block rows see everything.
inline AttentionMaskSpec block_inference_mask(int visible_len, int block_size) {
  const int n = visible_len + block_size;
  AttentionMaskSpec m(n);
  for (int q = 0; q < visible_len; ++q)
    for (int k = 0; k <= q; ++k) m.set(q, k, true);
  for (int q = visible_len; q < n; ++q)
    for (int k = 0; k < n; ++k) m.set(q, k, true);
  return m;
}

struct BlockResult {
  TokenSequence tokens;
  DecodeTrace trace;
};

/// Decodes one block following `context` (Q plus already finalized blocks).
/// `first_position` is the response index of the block's first token, used
/// only for trace bookkeeping.
template <typename Scalar>
BlockResult decode_block(const Transformer<Scalar>& net, const Params<Scalar>& params, std::span<const TokenId> context,
                         const DecodePolicy& policy, TokenId mask_id, int block_index = 0, int first_position = 0) {
  const int bs = policy.block_size;
  const int visible = static_cast<int>(context.size());
  TokenSequence seq(context.begin(), context.end());
  seq.insert(seq.end(), static_cast<std::size_t>(bs), mask_id);
  std::vector<int> positions(seq.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i);
  const AttentionMaskSpec mask = block_inference_mask(visible, bs);

  BlockResult out;
  std::vector<double> conf(static_cast<std::size_t>(bs), 0.0);
  std::vector<bool> open(static_cast<std::size_t>(bs), true);
  int remaining = bs;
  const int max_steps = policy.max_steps();
  for (int step = 0; step < max_steps; ++step) {
    const SequenceView view{seq, positions, &mask};
    const auto cache = net.forward(params, std::span<const SequenceView>(&view, 1));
    ++out.trace.forward_passes;
    StepRecord rec{block_index, step, {}, {}};
    std::vector<Prediction> preds;
    for (int j = 0; j < bs; ++j) preds.push_back(predict_row<Scalar>(cache.logits, visible + j, mask_id));

    for (int j = 0; j < bs; ++j) {
      const auto ju = static_cast<std::size_t>(j);
      const Prediction& p = preds[ju];
      TokenId& tok = seq[static_cast<std::size_t>(visible + j)];
      if (open[ju]) {
        if (p.confidence >= policy.threshold) {
          tok = p.token;
          conf[ju] = p.confidence;
          open[ju] = false;
          --remaining;
          rec.materialized.push_back({first_position + j, p.token, p.confidence, false});
        }
      } else if (policy.revision_enabled && p.confidence > conf[ju]) {
        if (p.token != tok) rec.revised.push_back({first_position + j, tok, p.token, conf[ju], p.confidence});
        tok = p.token;
        conf[ju] = p.confidence;
      }
    }
    const bool revised = !rec.revised.empty();
    if (remaining > 0 && step + 1 == max_steps) {
      for (int j = 0; j < bs; ++j) {
        const auto ju = static_cast<std::size_t>(j);
        if (!open[ju]) continue;
        seq[static_cast<std::size_t>(visible + j)] = preds[ju].token;
        conf[ju] = preds[ju].confidence;
        open[ju] = false;
        rec.materialized.push_back({first_position + j, preds[ju].token, preds[ju].confidence, true});
      }
      remaining = 0;
    }
    out.trace.steps.push_back(std::move(rec));
    if (remaining == 0 && !revised) break;
  }
  out.tokens.assign(seq.begin() + visible, seq.end());
  out.trace.generated_tokens = bs;
  return out;
}

template <typename Scalar>
std::pair<TokenSequence, DecodeTrace> generate(const Transformer<Scalar>& net, const Params<Scalar>& params,
                                               std::span<const TokenId> q, int response_len, const DecodePolicy& policy,
                                               TokenId mask_id) {
  policy.validate(response_len);
  const auto start = std::chrono::steady_clock::now();
  TokenSequence context(q.begin(), q.end());
  TokenSequence response;
  DecodeTrace trace;
  for (int b = 0; b * policy.block_size < response_len; ++b) {
    auto res = decode_block(net, params, context, policy, mask_id, b, b * policy.block_size);
    context.insert(context.end(), res.tokens.begin(), res.tokens.end());
    response.insert(response.end(), res.tokens.begin(), res.tokens.end());
    trace.forward_passes += res.trace.forward_passes;
    trace.generated_tokens += res.trace.generated_tokens;
    for (auto& s : res.trace.steps) trace.steps.push_back(std::move(s));
  }
  trace.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return {std::move(response), std::move(trace)};
}

/// How a one-token-per-pass decoder reads its prediction.
enum class ArReadout {
  kNextToken,     // causal model: logits at the last real token predict the next one
  kSamePosition,  // diffusion model: append one mask and read its own row
};

struct ArResult {
  TokenSequence response;
  int forward_passes = 0;
  double wall_ms = 0.0;
};

/// Greedy decoding with a plain causal mask, one forward pass per token.
template <typename Scalar>
ArResult greedy_ar(const Transformer<Scalar>& net, const Params<Scalar>& params, std::span<const TokenId> q,
                   int response_len, TokenId mask_id, ArReadout readout = ArReadout::kNextToken) {
  const auto start = std::chrono::steady_clock::now();
  ArResult out;
  TokenSequence seq(q.begin(), q.end());
  for (int i = 0; i < response_len; ++i) {
    if (readout == ArReadout::kSamePosition) seq.push_back(mask_id);
    std::vector<int> positions(seq.size());
    for (std::size_t k = 0; k < positions.size(); ++k) positions[k] = static_cast<int>(k);
    const AttentionMaskSpec mask = AttentionMaskSpec::causal(static_cast<int>(seq.size()));
    const SequenceView view{seq, positions, &mask};
    const auto cache = net.forward(params, std::span<const SequenceView>(&view, 1));
    ++out.forward_passes;
    const TokenId tok = predict_row<Scalar>(cache.logits, static_cast<int>(seq.size()) - 1, mask_id).token;
    if (readout == ArReadout::kSamePosition)
      seq.back() = tok;
    else
      seq.push_back(tok);
    out.response.push_back(tok);
  }
  out.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return out;
}

struct PolicyReport {
  std::string policy_id;
  int block_size = 0;
  double threshold = 0.0;
  double exact_match = 0.0;
  double fwd_per_token = 0.0;
  double speedup = 0.0;
  double wall_ms = 0.0;
};

struct ThroughputReport {
  PolicyReport baseline;
  std::vector<PolicyReport> policies;
};

/// Aggregates decode traces against an AR baseline run on identical inputs.
/// Speedup is relative to the AR baseline's 1.0 forward passes per token.
inline PolicyReport summarize_policy(const std::string& id, const DecodePolicy& policy,
                                     std::span<const DecodeTrace> traces, std::span<const double> matches) {
  PolicyReport r;
  r.policy_id = id;
  r.block_size = policy.block_size;
  r.threshold = policy.threshold;
  long passes = 0;
  long tokens = 0;
  for (const auto& t : traces) {
    passes += t.forward_passes;
    tokens += t.generated_tokens;
    r.wall_ms += t.wall_ms;
  }
  double em = 0.0;
  for (double m : matches) em += m;
  r.exact_match = matches.empty() ? 0.0 : em / static_cast<double>(matches.size());
  r.fwd_per_token = tokens > 0 ? static_cast<double>(passes) / static_cast<double>(tokens) : 0.0;
  r.speedup = r.fwd_per_token > 0.0 ? 1.0 / r.fwd_per_token : 0.0;
  if (!traces.empty()) r.wall_ms /= static_cast<double>(traces.size());
  return r;
}

inline PolicyReport summarize_ar(std::span<const ArResult> runs, std::span<const double> matches) {
  PolicyReport r;
  r.policy_id = "ar";
  r.block_size = 1;
  r.threshold = 0.0;
  long passes = 0;
  long tokens = 0;
  for (const auto& a : runs) {
    passes += a.forward_passes;
    tokens += static_cast<long>(a.response.size());
    r.wall_ms += a.wall_ms;
  }
  double em = 0.0;
  for (double m : matches) em += m;
  r.exact_match = matches.empty() ? 0.0 : em / static_cast<double>(matches.size());
  r.fwd_per_token = tokens > 0 ? static_cast<double>(passes) / static_cast<double>(tokens) : 0.0;
  r.speedup = r.fwd_per_token > 0.0 ? 1.0 / r.fwd_per_token : 0.0;
  if (!runs.empty()) r.wall_ms /= static_cast<double>(runs.size());
  return r;
}

}  // namespace bard
