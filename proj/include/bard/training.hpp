#pragma once

// Glue between layouts, the transformer and the losses: batch assembly,
// loss_and_grad for every objective, and teacher logit extraction.

#include <map>
#include <memory>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "bard/errors.hpp"
#include "bard/layout.hpp"
#include "bard/net.hpp"
#include "bard/noise.hpp"
#include "bard/objectives.hpp"
#include "bard/synth_task.hpp"

namespace bard {

enum class Objective { kAr, kMask, kMix, kKd };

inline std::string to_string(Objective o) {
  switch (o) {
    case Objective::kAr: return "ar";
    case Objective::kMask: return "mask";
    case Objective::kMix: return "mix";
    case Objective::kKd: return "kd";
  }
  return "mix";
}

inline Objective parse_objective(const std::string& s) {
  if (s == "ar") return Objective::kAr;
  if (s == "mask") return Objective::kMask;
  if (s == "mix") return Objective::kMix;
  if (s == "kd") return Objective::kKd;
  throw ConfigError("unknown objective '" + s + "'");
}

struct ObjectiveSpec {
  Objective kind = Objective::kMix;
  int block_size = 4;  // unused for kAr
  double tau = 1.0;    // kKd only
};

/// One training example plus its corruption (ignored by the AR objective).
struct TrainItem {
  Example example;
  CorruptionSample sample;
};

/// Owns the token/position/mask storage that SequenceViews point into.
class SequenceBatch {
 public:
  void add(TokenSequence tokens, std::vector<int> positions, const AttentionMaskSpec& mask) {
    tokens_.push_back(std::move(tokens));
    positions_.push_back(std::move(positions));
    masks_.push_back(intern(mask));
  }

  std::vector<SequenceView> views() const {
    std::vector<SequenceView> out;
    for (std::size_t i = 0; i < tokens_.size(); ++i) out.push_back({tokens_[i], positions_[i], masks_[i]});
    return out;
  }

  std::size_t size() const noexcept { return tokens_.size(); }

 private:
  const AttentionMaskSpec* intern(const AttentionMaskSpec& mask) {
    for (const auto& m : unique_)
      if (*m == mask) return m.get();
    unique_.push_back(std::make_unique<AttentionMaskSpec>(mask));
    return unique_.back().get();
  }

  std::vector<TokenSequence> tokens_;
  std::vector<std::vector<int>> positions_;
  std::vector<const AttentionMaskSpec*> masks_;
  std::vector<std::unique_ptr<AttentionMaskSpec>> unique_;
};

/// Packed [Q, x1, x_t] sequences for every item; masks are shared by shape.
inline SequenceBatch packed_sequences(std::span<const TrainItem> items, int block_size) {
  SequenceBatch batch;
  std::map<std::tuple<int, int>, AttentionMaskSpec> masks;
  for (const auto& it : items) {
    PackedBatch p = build_packed(it.example.q, it.example.x1, it.sample.x_t, block_size);
    const auto key = std::make_tuple(p.context_len, p.response_len);
    auto found = masks.find(key);
    if (found == masks.end()) found = masks.emplace(key, build_packed_mask(p)).first;
    batch.add(std::move(p.tokens), std::move(p.positions), found->second);
  }
  return batch;
}

/// Causal [Q, x1] sequences.
inline SequenceBatch causal_sequences(std::span<const TrainItem> items) {
  SequenceBatch batch;
  for (const auto& it : items) {
    TokenSequence tokens = it.example.q;
    tokens.insert(tokens.end(), it.example.x1.begin(), it.example.x1.end());
    std::vector<int> positions(tokens.size());
    for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i);
    batch.add(std::move(tokens), std::move(positions), AttentionMaskSpec::causal(static_cast<int>(positions.size())));
  }
  return batch;
}

template <typename Scalar>
struct LossAndGrad {
  double loss = 0.0;
  std::vector<double> per_item;
  FlatVector<Scalar> grad;
};

/// Mean per-item loss and its exact gradient. For Objective::kKd,
/// `teacher` holds one (response_len x vocab) logit matrix per item.
template <typename Scalar>
LossAndGrad<Scalar> loss_and_grad(const Transformer<Scalar>& net, const Params<Scalar>& params,
                                  std::span<const TrainItem> items, const ObjectiveSpec& spec,
                                  std::span<const Matrix<Scalar>> teacher = {}, bool want_grad = true) {
  using Mat = Matrix<Scalar>;
  LossAndGrad<Scalar> out;
  if (items.empty()) {
    if (want_grad) out.grad.assign(params.values.size(), Scalar(0));
    return out;
  }
  if (spec.kind == Objective::kKd && teacher.size() != items.size())
    throw InputError("distillation needs one teacher logit matrix per item");

  const SequenceBatch seqs = spec.kind == Objective::kAr ? causal_sequences(items) : packed_sequences(items, spec.block_size);
  const auto views = seqs.views();
  auto cache = net.forward(params, views);

  Mat dlogits;
  if (want_grad) dlogits.setZero(cache.logits.rows(), cache.logits.cols());
  const Scalar inv_n = Scalar(1) / static_cast<Scalar>(items.size());
  Mat g;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& it = items[i];
    const int off = cache.offsets[i];
    const int ctx = static_cast<int>(it.example.q.size());
    const int len = static_cast<int>(it.example.x1.size());
    Mat* gp = want_grad ? &g : nullptr;
    Scalar loss = 0;
    int grad_row = off;
    switch (spec.kind) {
      case Objective::kAr:
        loss = loss_ar<Scalar>(cache.logits.middleRows(off, ctx + len), ctx, it.example.x1, gp);
        break;
      case Objective::kMask:
        grad_row = off + ctx + len;
        loss = loss_mask<Scalar>(cache.logits.middleRows(grad_row, len), it.sample, it.example.x1, gp);
        break;
      case Objective::kMix:
        grad_row = off + ctx + len;
        loss = loss_mix<Scalar>(cache.logits.middleRows(grad_row, len), it.sample, it.example.x1, gp);
        break;
      case Objective::kKd:
        grad_row = off + ctx + len;
        loss = loss_kd<Scalar>(cache.logits.middleRows(grad_row, len), teacher[i], it.sample.supervised, spec.tau, gp);
        break;
    }
    if (!std::isfinite(static_cast<double>(loss))) {
      throw NumericError("non-finite " + to_string(spec.kind) + " loss on batch item " + std::to_string(i) +
                         " (t=" + std::to_string(it.sample.t) + ", |S_t|=" + std::to_string(it.sample.supervised.size()) + ")");
    }
    out.per_item.push_back(static_cast<double>(loss));
    out.loss += static_cast<double>(loss);
    if (want_grad) dlogits.middleRows(grad_row, g.rows()) += g * inv_n;
  }
  out.loss /= static_cast<double>(items.size());
  if (want_grad) {
    out.grad.assign(params.values.size(), Scalar(0));
    net.backward(params, cache, dlogits, out.grad);
  }
  return out;
}

/// Noisy-branch logits of a frozen diffusion teacher under its own block mask.
template <typename Scalar>
std::vector<Matrix<Scalar>> anchor_teacher_logits(const Transformer<Scalar>& net, const Params<Scalar>& teacher,
                                                  std::span<const TrainItem> items, int teacher_block) {
  const SequenceBatch seqs = packed_sequences(items, teacher_block);
  const auto views = seqs.views();
  const auto cache = net.forward(teacher, views);
  std::vector<Matrix<Scalar>> out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const int ctx = static_cast<int>(items[i].example.q.size());
    const int len = static_cast<int>(items[i].example.x1.size());
    out.push_back(cache.logits.middleRows(cache.offsets[i] + ctx + len, len));
  }
  return out;
}

/// Next-token logits of an AR model on clean [Q, x1], aligned to response positions.
template <typename Scalar>
std::vector<Matrix<Scalar>> ar_teacher_logits(const Transformer<Scalar>& net, const Params<Scalar>& teacher,
                                              std::span<const TrainItem> items) {
  const SequenceBatch seqs = causal_sequences(items);
  const auto views = seqs.views();
  const auto cache = net.forward(teacher, views);
  std::vector<Matrix<Scalar>> out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const int ctx = static_cast<int>(items[i].example.q.size());
    const int len = static_cast<int>(items[i].example.x1.size());
    out.push_back(align_ar_teacher<Scalar>(cache.logits.middleRows(cache.offsets[i], ctx + len), ctx, len));
  }
  return out;
}

}  // namespace bard
