#pragma once

// Training losses over logit rows. Every function returns the scalar loss and,
// when `grad` is non-null, writes dLoss/dLogits into it (same shape as the
// logits it was given, zero on unsupervised rows).
//
// Row conventions:
//   * diffusion losses take one logit row per response position (the noisy
//     branch), target = clean token at the same position;
//   * loss_ar takes the full causal [Q, x1] logits; row ctx+i-1 predicts x1[i].

#include <Eigen/Dense>
#include <cmath>
#include <span>
#include <string>

#include "bard/errors.hpp"
#include "bard/net.hpp"
#include "bard/noise.hpp"
#include "bard/synth_task.hpp"

namespace bard {

enum class TeacherKind { kDiffusionAnchor, kAutoregressive };

inline std::string to_string(TeacherKind k) {
  return k == TeacherKind::kDiffusionAnchor ? "anchor" : "ar";
}

struct KDConfig {
  double tau = 1.0;
  int teacher_block = 4;
  TeacherKind teacher_kind = TeacherKind::kDiffusionAnchor;

  void validate() const {
    if (!(tau > 0.0)) throw ConfigError("distillation temperature must be > 0");
    if (teacher_block < 1) throw ConfigError("teacher block size must be >= 1");
  }
};

namespace detail {

template <typename Scalar>
using LogitRows = Eigen::Ref<const Matrix<Scalar>>;

/// log-softmax of one row, computed in the row's own precision.
template <typename Scalar>
RowVector<Scalar> log_softmax(const Eigen::Ref<const RowVector<Scalar>>& z) {
  const Scalar mx = z.maxCoeff();
  const Scalar lse = mx + std::log((z.array() - mx).exp().sum());
  return (z.array() - lse).matrix();
}

}  // namespace detail

/// Mean negative log-likelihood of `targets[row]` over `rows`, normalized by
/// max(1, |rows|).
template <typename Scalar>
Scalar cross_entropy_rows(detail::LogitRows<Scalar> logits, std::span<const TokenId> targets, std::span<const int> rows,
                          Matrix<Scalar>* grad = nullptr) {
  if (grad) grad->setZero(logits.rows(), logits.cols());
  const Scalar norm = Scalar(1) / static_cast<Scalar>(std::max<std::size_t>(1, rows.size()));
  Scalar loss = 0;
  for (int r : rows) {
    const auto tgt = targets[static_cast<std::size_t>(r)];
    const RowVector<Scalar> lp = detail::log_softmax<Scalar>(logits.row(r));
    loss -= lp(tgt);
    if (grad) {
      grad->row(r) = lp.array().exp() * norm;
      (*grad)(r, tgt) -= norm;
    }
  }
  return loss * norm;
}

/// Masked-diffusion loss: supervision on M_t only.
template <typename Scalar>
Scalar loss_mask(detail::LogitRows<Scalar> logits, const CorruptionSample& sample, std::span<const TokenId> x1,
                 Matrix<Scalar>* grad = nullptr) {
  return cross_entropy_rows<Scalar>(logits, x1, sample.masked, grad);
}

/// Mixed-noise loss: supervision on S_t = M_t ∪ U_t, target is always the clean token.
template <typename Scalar>
Scalar loss_mix(detail::LogitRows<Scalar> logits, const CorruptionSample& sample, std::span<const TokenId> x1,
                Matrix<Scalar>* grad = nullptr) {
  return cross_entropy_rows<Scalar>(logits, x1, sample.supervised, grad);
}

/// tau^2 * KL(softmax(z_T / tau) || softmax(z_S / tau)) averaged over `rows`
/// with the max(1, |rows|) guard. Teacher logits are constants.
template <typename Scalar>
Scalar loss_kd(detail::LogitRows<Scalar> student, detail::LogitRows<Scalar> teacher, std::span<const int> rows,
               double tau, Matrix<Scalar>* grad = nullptr) {
  if (!(tau > 0.0)) throw ConfigError("distillation temperature must be > 0");
  if (student.cols() != teacher.cols() || student.rows() != teacher.rows())
    throw InputError("student and teacher logits differ in shape");
  if (grad) grad->setZero(student.rows(), student.cols());
  const Scalar t = static_cast<Scalar>(tau);
  const Scalar norm = Scalar(1) / static_cast<Scalar>(std::max<std::size_t>(1, rows.size()));
  Scalar loss = 0;
  for (int r : rows) {
    const RowVector<Scalar> lt = detail::log_softmax<Scalar>(teacher.row(r) / t);
    const RowVector<Scalar> ls = detail::log_softmax<Scalar>(student.row(r) / t);
    const auto pt = lt.array().exp();
    loss += (pt * (lt.array() - ls.array())).sum();
    // d/dz_S of tau^2 KL = tau * (softmax(z_S/tau) - softmax(z_T/tau)).
    if (grad) grad->row(r) = (ls.array().exp() - pt) * (t * norm);
  }
  return loss * t * t * norm;
}

/// Next-token loss over response positions of a causal [Q, x1] forward.
template <typename Scalar>
Scalar loss_ar(detail::LogitRows<Scalar> logits, int context_len, std::span<const TokenId> x1,
               Matrix<Scalar>* grad = nullptr) {
  const int len = static_cast<int>(x1.size());
  if (context_len < 1) throw InputError("autoregressive loss needs a non-empty context");
  if (logits.rows() < context_len + len - 1) throw InputError("logits do not cover the response");
  std::vector<TokenId> targets(static_cast<std::size_t>(logits.rows()), 0);
  std::vector<int> rows;
  for (int i = 0; i < len; ++i) {
    const int r = context_len + i - 1;
    targets[static_cast<std::size_t>(r)] = x1[static_cast<std::size_t>(i)];
    rows.push_back(r);
  }
  return cross_entropy_rows<Scalar>(logits, targets, rows, grad);
}

/// Picks the causal slot that predicts response token i (row ctx+i-1) for
/// every response position, so an AR teacher can be compared position by
/// position with a diffusion student.
template <typename Scalar>
Matrix<Scalar> align_ar_teacher(detail::LogitRows<Scalar> ar_logits, int context_len, int response_len) {
  if (context_len < 1 || ar_logits.rows() < context_len + response_len - 1)
    throw InputError("autoregressive logits do not cover the response");
  return ar_logits.middleRows(context_len - 1, response_len);
}

/// KD against an AR teacher. The teacher rows must already be aligned with
/// align_ar_teacher; the form is otherwise identical to loss_kd.
template <typename Scalar>
Scalar loss_kd_ar_teacher(detail::LogitRows<Scalar> student, detail::LogitRows<Scalar> aligned_teacher,
                          std::span<const int> rows, double tau, Matrix<Scalar>* grad = nullptr) {
  return loss_kd<Scalar>(student, aligned_teacher, rows, tau, grad);
}

}  // namespace bard
