#include <gtest/gtest.h>

#include <cmath>

#include "bard/objectives.hpp"
#include "bard/rng.hpp"

using namespace bard;
using Mat = Matrix<double>;

namespace {

// Scalar reference implementations, written without Eigen reductions.
double scalar_log_softmax(const Mat& z, int r, int v) {
  double mx = z(r, 0);
  for (int k = 1; k < z.cols(); ++k) mx = std::max(mx, z(r, k));
  double s = 0.0;
  for (int k = 0; k < z.cols(); ++k) s += std::exp(z(r, k) - mx);
  return z(r, v) - mx - std::log(s);
}

double scalar_ce(const Mat& z, const TokenSequence& tgt, const std::vector<int>& rows) {
  double acc = 0.0;
  for (int r : rows) acc -= scalar_log_softmax(z, r, tgt[static_cast<std::size_t>(r)]);
  return acc / std::max<std::size_t>(1, rows.size());
}

double scalar_kd(const Mat& s, const Mat& t, const std::vector<int>& rows, double tau) {
  const Mat st = s / tau, tt = t / tau;
  double acc = 0.0;
  for (int r : rows)
    for (int k = 0; k < s.cols(); ++k) {
      const double lt = scalar_log_softmax(tt, r, k);
      acc += std::exp(lt) * (lt - scalar_log_softmax(st, r, k));
    }
  return tau * tau * acc / std::max<std::size_t>(1, rows.size());
}

Mat random_logits(int rows, int cols, std::uint64_t seed, double scale = 2.0) {
  Rng rng(seed);
  Mat z(rows, cols);
  for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = scale * rng.normal();
  return z;
}

CorruptionSample sample_with(std::vector<int> masked, std::vector<int> uniform) {
  CorruptionSample s;
  s.masked = masked;
  s.uniform = uniform;
  s.supervised = masked;
  s.supervised.insert(s.supervised.end(), uniform.begin(), uniform.end());
  std::sort(s.supervised.begin(), s.supervised.end());
  return s;
}

}  // namespace

TEST(LossMask, EmptyMaskSetIsZero) {
  const Mat z = random_logits(4, 9, 1);
  const TokenSequence x1 = {1, 2, 3, 4};
  Mat g;
  EXPECT_EQ(loss_mask<double>(z, sample_with({}, {}), x1, &g), 0.0);
  EXPECT_EQ(g.cwiseAbs().maxCoeff(), 0.0);
}

TEST(LossMask, UniformLogitsGiveLogV) {
  const Mat z = Mat::Zero(6, 13);
  const TokenSequence x1 = {1, 2, 3, 4, 5, 6};
  EXPECT_NEAR(loss_mask<double>(z, sample_with({0, 2, 5}, {}), x1), std::log(13.0), 1e-14);
  EXPECT_NEAR(loss_mix<double>(z, sample_with({0}, {1, 3}), x1), std::log(13.0), 1e-14);
}

TEST(LossMask, OneHotMarginTwentyIsTiny) {
  const TokenSequence x1 = {3, 0, 7};
  Mat z = Mat::Zero(3, 9);
  for (int r = 0; r < 3; ++r) z(r, x1[static_cast<std::size_t>(r)]) = 20.0;
  const double l = loss_mask<double>(z, sample_with({0, 1, 2}, {}), x1);
  EXPECT_LT(l, 2e-8);
  // closed form: log(1 + 8 e^-20)
  EXPECT_NEAR(l, std::log1p(8.0 * std::exp(-20.0)), 1e-14);
}

TEST(LossMix, NoUniformEqualsMaskExactly) {
  const Mat z = random_logits(8, 11, 2);
  const TokenSequence x1 = {1, 2, 3, 4, 5, 6, 7, 8};
  const auto s = sample_with({1, 4, 6}, {});
  EXPECT_EQ(loss_mix<double>(z, s, x1), loss_mask<double>(z, s, x1));
}

TEST(LossMix, MatchesScalarOracle) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Mat z = random_logits(8, 11, seed + 10);
    Rng rng(seed);
    TokenSequence x1(8);
    for (auto& t : x1) t = static_cast<TokenId>(rng.below(11));
    std::vector<int> m, u;
    for (int i = 0; i < 8; ++i) {
      const auto b = rng.below(3);
      if (b == 1) m.push_back(i);
      if (b == 2) u.push_back(i);
    }
    const auto s = sample_with(m, u);
    EXPECT_NEAR(loss_mix<double>(z, s, x1), scalar_ce(z, x1, s.supervised), 1e-10);
    // purely visible supervision
    const auto vis = sample_with({}, {0, 3});
    EXPECT_NEAR(loss_mix<double>(z, vis, x1), scalar_ce(z, x1, {0, 3}), 1e-10);
  }
}

TEST(LossKd, IdenticalAndShiftedLogitsGiveZero) {
  const Mat z = random_logits(5, 7, 3, 4.0);
  Mat shifted = z;
  for (int r = 0; r < 5; ++r) shifted.row(r).array() += 3.5 * r - 2.0;
  const std::vector<int> rows = {0, 1, 2, 3, 4};
  for (double tau : {0.5, 1.0, 3.0}) {
    EXPECT_LT(std::abs(loss_kd<double>(z, z, rows, tau)), 1e-12);
    EXPECT_LT(std::abs(loss_kd<double>(shifted, z, rows, tau)), 1e-12);
  }
}

TEST(LossKd, HandComputedTwoTokenExample) {
  Mat s(1, 2), t(1, 2);
  s << std::log(3.0), 0.0;
  t << 0.0, 0.0;
  const double want = 0.5 * std::log(0.5 / 0.75) + 0.5 * std::log(0.5 / 0.25);
  EXPECT_NEAR(want, 0.14384103622589042, 1e-15);
  EXPECT_NEAR(loss_kd<double>(s, t, std::vector<int>{0}, 1.0), want, 1e-9);
}

TEST(LossKd, MatchesScalarOracleAndIsNonNegative) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Mat s = random_logits(6, 9, 100 + seed), t = random_logits(6, 9, 200 + seed);
    const std::vector<int> rows = {0, 2, 3, 5};
    for (double tau : {0.7, 1.0, 2.0}) {
      const double l = loss_kd<double>(s, t, rows, tau);
      EXPECT_GE(l, 0.0);
      EXPECT_NEAR(l, scalar_kd(s, t, rows, tau), 1e-10);
      EXPECT_NEAR(loss_kd_ar_teacher<double>(s, t, rows, tau), l, 0.0);
    }
  }
  EXPECT_EQ(loss_kd<double>(random_logits(2, 3, 1), random_logits(2, 3, 2), std::vector<int>{}, 1.0), 0.0);
  EXPECT_THROW(loss_kd<double>(Mat::Zero(2, 3), Mat::Zero(2, 3), std::vector<int>{0}, 0.0), ConfigError);
  EXPECT_THROW(loss_kd<double>(Mat::Zero(2, 3), Mat::Zero(2, 4), std::vector<int>{0}, 1.0), InputError);
}

TEST(LossKd, LargeTemperatureConvergesMonotonically) {
  const Mat s = random_logits(3, 6, 41), t = random_logits(3, 6, 42);
  const std::vector<int> rows = {0, 1, 2};
  // tau^2 KL -> (1 / 2V) sum_k (d_k - mean d)^2 averaged over rows, d = z_T - z_S.
  double limit = 0.0;
  for (int r : rows) {
    const Eigen::RowVectorXd d = t.row(r) - s.row(r);
    limit += (d.array() - d.mean()).square().sum() / (2.0 * 6.0);
  }
  limit /= 3.0;
  double prev_gap = INFINITY;
  for (double tau : {2.0, 5.0, 20.0, 100.0, 1000.0}) {
    const double gap = std::abs(loss_kd<double>(s, t, rows, tau) - limit);
    EXPECT_LT(gap, prev_gap) << "tau " << tau;
    prev_gap = gap;
  }
  EXPECT_LT(prev_gap, 1e-3 * limit);
}

TEST(LossAr, RowAlignmentAndContextInvariance) {
  const int ctx = 3;
  const TokenSequence x1 = {2, 5, 1};
  Mat z = Mat::Zero(ctx + 3, 8);
  z(2, 2) = 20.0;  // row ctx-1 predicts x1[0]
  z(3, 5) = 20.0;
  z(4, 1) = 20.0;
  const double l = loss_ar<double>(z, ctx, x1);
  EXPECT_LT(l, 2e-8);
  Mat perturbed = z;
  perturbed.row(0).setConstant(9.0);
  perturbed.row(1) = random_logits(1, 8, 3);
  perturbed.row(5) = random_logits(1, 8, 4);  // last row predicts nothing
  EXPECT_EQ(loss_ar<double>(perturbed, ctx, x1), l);
  EXPECT_NEAR(loss_ar<double>(Mat::Zero(6, 8), ctx, x1), std::log(8.0), 1e-14);
}

TEST(AlignArTeacher, PicksShiftedRows) {
  const Mat z = random_logits(7, 4, 5);
  const Mat a = align_ar_teacher<double>(z, 4, 3);
  ASSERT_EQ(a.rows(), 3);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(a.row(i), z.row(3 + i));
  EXPECT_NEAR(loss_kd_ar_teacher<double>(a, a, std::vector<int>{0, 1, 2}, 1.0), 0.0, 1e-15);
}

TEST(Losses, PermutationInvariantOverRows) {
  const Mat z = random_logits(6, 9, 8), t = random_logits(6, 9, 9);
  const TokenSequence x1 = {1, 2, 3, 4, 5, 6};
  const std::vector<int> a = {0, 2, 5}, b = {5, 0, 2};
  EXPECT_NEAR(cross_entropy_rows<double>(z, x1, a), cross_entropy_rows<double>(z, x1, b), 1e-15);
  EXPECT_NEAR(loss_kd<double>(z, t, a, 1.0), loss_kd<double>(z, t, b, 1.0), 1e-15);
}
