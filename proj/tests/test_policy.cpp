#include <gtest/gtest.h>

#include <random>

#include "bpsurv/pipeline.hpp"
#include "bpsurv/simulate.hpp"
#include "oracles.hpp"

using namespace bpsurv;

namespace {

struct Toy {
  CensoredDataset ds;
  ImputedOutcomes imputed;
  Matrix K;
  Matrix muhat;
};

/// Small fully observed design with a smooth arm-dependent outcome.
Toy make_toy(int n, int m, int d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  std::uniform_int_distribution<int> arm(0, m - 1);
  Toy t;
  t.ds.m = m;
  t.ds.tau = 10.0;
  t.ds.X.resize(n, d);
  t.ds.y.resize(n);
  for (int i = 0; i < n; ++i) {
    for (int k = 0; k < d; ++k) t.ds.X(i, k) = nd(rng);
    const int a = i < m ? i : arm(rng);
    t.ds.arm.push_back(a);
    t.ds.event.push_back(true);
    t.ds.y[i] = 1.0 + 0.5 * std::sin(t.ds.X(i, 0) * (a + 1)) + 0.1 * nd(rng);
  }
  t.imputed.yhat = t.ds.y;
  t.imputed.floor_hit.assign(static_cast<std::size_t>(n), false);
  const KernelConfig cfg = KernelConfig::identity(d, m, 1.5);
  t.K = gram(t.ds.X, cfg).K;
  t.muhat.resize(n, m);
  for (int i = 0; i < n; ++i)
    for (int a = 0; a < m; ++a) t.muhat(i, a) = 1.0 + 0.4 * std::sin(t.ds.X(i, 0) * (a + 1));
  return t;
}

Matrix random_beta(int m, Eigen::Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, 0.5);
  Matrix b(m, cols);
  for (auto& v : b.reshaped()) v = nd(rng);
  return b;
}

}  // namespace

TEST(SoftmaxPolicy, ZeroCoefficientsGiveUniformRows) {
  PolicyParams p{Matrix::Zero(3, 4)};
  const Matrix X = Matrix::Random(7, 3);
  const auto pi = softmax_policy(p, X);
  EXPECT_LT((pi.array() - 1.0 / 3.0).abs().maxCoeff(), 1e-15);
}

TEST(SoftmaxPolicy, ShiftInvariantAndOverflowSafe) {
  std::mt19937_64 rng(2);
  PolicyParams p{random_beta(4, 3, rng)};
  const Matrix X = Matrix::Random(20, 2);
  PolicyParams shifted = p;
  shifted.beta.col(0).array() += 3.7;
  shifted.beta.col(1).array() -= 1.2;
  EXPECT_LT((softmax_policy(p, X) - softmax_policy(shifted, X)).cwiseAbs().maxCoeff(), 1e-14);

  PolicyParams big{Matrix::Zero(3, 2)};
  big.beta(1, 0) = 50.0;
  const auto pi = softmax_policy(big, Matrix::Zero(1, 1));
  // 1 - 1e-20 is not representable, so check the mass left on the other arms.
  EXPECT_LT(pi(0, 0) + pi(0, 2), 1e-20);
  EXPECT_EQ(pi(0, 1), 1.0);
  big.beta *= 1e6;
  EXPECT_TRUE(softmax_policy(big, Matrix::Zero(1, 1)).allFinite());
}

TEST(DeterministicPolicy, TiesGoToFirstArmAndMatchSoftmaxArgmax) {
  PolicyParams zero{Matrix::Zero(3, 3)};
  EXPECT_EQ(deterministic_policy(zero)(Vector::Zero(2)), 0);
  std::mt19937_64 rng(9);
  PolicyParams p{random_beta(4, 4, rng)};
  const Matrix X = Matrix::Random(1000, 3) * 2.0;
  const auto rule = deterministic_policy(p);
  PolicyParams scaled = p;
  scaled.beta *= 3.5;
  const auto pi = softmax_policy(p, X);
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    Eigen::Index best;
    pi.row(i).maxCoeff(&best);
    const int arm = rule(X.row(i).transpose());
    EXPECT_EQ(arm, best);
    EXPECT_EQ(choose_arm(scaled, X.row(i).transpose()), arm);
  }
}

TEST(PolicyGradient, ImplicitMatchesFiniteDifferences) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto toy = make_toy(40, 3, 2, seed);
    std::mt19937_64 rng(seed + 100);
    for (auto mode : {BalancedMode::weighted, BalancedMode::dr}) {
      BalancedPolicyObjective obj(toy.ds, toy.imputed, toy.K, Vector::Ones(3), 0.3, mode, toy.muhat);
      const Matrix beta = random_beta(3, 3, rng);
      const auto ev = obj.evaluate(beta);
      ASSERT_TRUE(ev.converged);
      bool fell_back = true;
      const Matrix g = obj.gradient(beta, ev, GradMode::implicit, &fell_back);
      EXPECT_FALSE(fell_back);
      const Vector fd = oracle::central_difference(
          [&](const Vector& b) { return obj.evaluate(b.reshaped(3, 3)).value; }, beta.reshaped(), 1e-4);
      EXPECT_LT(oracle::relative_error(g.reshaped(), fd), 1e-3) << "seed " << seed;
    }
  }
}

TEST(PolicyGradient, FrozenWeightsHaveNoDirectTermInWeightedMode) {
  auto toy = make_toy(30, 3, 2, 4);
  BalancedPolicyObjective obj(toy.ds, toy.imputed, toy.K, Vector::Ones(3), 0.5, BalancedMode::weighted);
  std::mt19937_64 rng(3);
  const Matrix beta = random_beta(3, 3, rng);
  const auto ev = obj.evaluate(beta);
  EXPECT_EQ(obj.gradient(beta, ev, GradMode::implicit, nullptr, true).cwiseAbs().maxCoeff(), 0.0);
}

TEST(PolicyGradient, ArmConstantOutcomeModelHasNoDirectTerm) {
  auto toy = make_toy(30, 3, 2, 5);
  for (Eigen::Index i = 0; i < toy.muhat.rows(); ++i) toy.muhat.row(i).setConstant(toy.muhat(i, 0));
  BalancedPolicyObjective obj(toy.ds, toy.imputed, toy.K, Vector::Ones(3), 0.5, BalancedMode::dr, toy.muhat);
  std::mt19937_64 rng(6);
  const Matrix beta = random_beta(3, 3, rng);
  const auto ev = obj.evaluate(beta);
  EXPECT_LT(obj.gradient(beta, ev, GradMode::implicit, nullptr, true).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(WeightedPolicyObjective, AnalyticGradientMatchesFiniteDifferences) {
  auto toy = make_toy(50, 3, 2, 7);
  toy.ds.event[3] = false;
  const Matrix probs = Matrix::Constant(50, 3, 1.0 / 3.0);
  Vector g = Vector::Constant(50, 0.8);
  const Vector c = WeightedPolicyObjective::inverse_probability_factors(toy.ds, probs, 0.05, g, WeightRule::ipw_ipcw);
  EXPECT_EQ(c[3], 0.0);
  const WeightedPolicyObjective obj(toy.ds, toy.ds.y, c);
  std::mt19937_64 rng(8);
  const Matrix beta = random_beta(3, 3, rng);
  const Matrix grad = obj.gradient(obj.evaluate(beta));
  const Vector fd = oracle::central_difference([&](const Vector& b) { return obj.evaluate(b.reshaped(3, 3)).value; },
                                               beta.reshaped(), 1e-5);
  EXPECT_LT(oracle::relative_error(grad.reshaped(), fd), 1e-6);
}

TEST(WeightedPolicyObjective, CensoredUnitsDoNotMoveTheGradient) {
  auto toy = make_toy(40, 2, 2, 12);
  toy.ds.event[5] = false;
  const Matrix probs = Matrix::Constant(40, 2, 0.5);
  const Vector g = Vector::Ones(40);
  const Vector c = WeightedPolicyObjective::inverse_probability_factors(toy.ds, probs, 0.05, g, WeightRule::ipw_ipcw);
  std::mt19937_64 rng(1);
  const Matrix beta = random_beta(2, 3, rng);
  const WeightedPolicyObjective a(toy.ds, toy.ds.y, c);
  Vector y2 = toy.ds.y;
  y2[5] += 100.0;
  toy.ds.X.row(5) *= 7.0;
  const WeightedPolicyObjective b(toy.ds, y2, c);
  EXPECT_LT((a.gradient(a.evaluate(beta)) - b.gradient(b.evaluate(beta))).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(WeightedPolicyObjective, BestArmLogitBeatsUniform) {
  auto toy = make_toy(60, 3, 2, 13);
  const Matrix probs = Matrix::Constant(60, 3, 1.0 / 3.0);
  const Vector c = WeightedPolicyObjective::inverse_probability_factors(toy.ds, probs, 0.05, std::nullopt, WeightRule::ipw);
  const WeightedPolicyObjective obj(toy.ds, toy.ds.y, c);
  Vector arm_mean = Vector::Zero(3), cnt = Vector::Zero(3);
  for (int i = 0; i < 60; ++i) {
    arm_mean[toy.ds.arm[static_cast<std::size_t>(i)]] += toy.ds.y[i];
    cnt[toy.ds.arm[static_cast<std::size_t>(i)]] += 1;
  }
  Eigen::Index best;
  arm_mean.cwiseQuotient(cnt).maxCoeff(&best);
  Matrix beta = Matrix::Zero(3, 3);
  beta(best, 0) = 30.0;
  const double uniform = obj.evaluate(Matrix::Zero(3, 3)).value;
  EXPECT_NEAR(uniform, toy.ds.y.mean(), 1e-12);
  EXPECT_GT(obj.evaluate(beta).value, uniform);
}

TEST(LearnBalanced, TraceIsMonotoneAndValueIsBestStart) {
  auto toy = make_toy(60, 3, 2, 21);
  BalancedPolicyObjective obj(toy.ds, toy.imputed, toy.K, Vector::Ones(3), 0.3, BalancedMode::dr, toy.muhat);
  LearnConfig cfg;
  cfg.starts = 3;
  cfg.max_outer = 30;
  const auto res = learn_balanced(obj, 3, cfg);
  ASSERT_EQ(res.start_values.size(), 3u);
  EXPECT_DOUBLE_EQ(res.value, *std::max_element(res.start_values.begin(), res.start_values.end()));
  for (std::size_t k = 1; k < res.trace.size(); ++k) EXPECT_GT(res.trace[k].value, res.trace[k - 1].value);
  EXPECT_EQ(res.params.beta.row(0).cwiseAbs().maxCoeff(), 0.0);

  cfg.starts = 6;
  EXPECT_GE(learn_balanced(obj, 3, cfg).value, res.value);
}

TEST(LearnBalanced, FiniteDifferenceModeAlsoAscends) {
  auto toy = make_toy(30, 2, 1, 22);
  BalancedPolicyObjective obj(toy.ds, toy.imputed, toy.K, Vector::Ones(2), 0.3, BalancedMode::weighted);
  LearnConfig cfg;
  cfg.starts = 2;
  cfg.max_outer = 10;
  cfg.grad_mode = GradMode::finite_diff;
  const auto res = learn_balanced(obj, 2, cfg);
  EXPECT_GE(res.value, res.trace.front().value);
}

TEST(LearnBaselines, RejectInvalidConfig) {
  auto toy = make_toy(20, 2, 1, 2);
  LearnConfig cfg;
  cfg.starts = 0;
  EXPECT_THROW(learn_regression(toy.ds, toy.muhat, cfg), ConfigError);
}

TEST(LearnBalanced, PermutingArmLabelsPermutesTheLearnedRule) {
  auto toy = make_toy(45, 3, 2, 31);
  const std::vector<int> perm{2, 0, 1};  // old arm a becomes perm[a]
  auto permuted = toy;
  for (auto& a : permuted.ds.arm) a = perm[static_cast<std::size_t>(a)];
  for (int a = 0; a < 3; ++a) permuted.muhat.col(perm[static_cast<std::size_t>(a)]) = toy.muhat.col(a);
  LearnConfig cfg;
  cfg.starts = 1;
  cfg.init_sd = 0.0;
  cfg.pin_first_arm = false;
  cfg.max_outer = 25;
  for (auto mode : {BalancedMode::weighted, BalancedMode::dr}) {
    const auto mu = mode == BalancedMode::dr ? std::optional<Matrix>(toy.muhat) : std::nullopt;
    const auto mu_p = mode == BalancedMode::dr ? std::optional<Matrix>(permuted.muhat) : std::nullopt;
    const auto base = learn_balanced(BalancedPolicyObjective(toy.ds, toy.imputed, toy.K, Vector::Ones(3), 0.3, mode, mu), 3, cfg);
    const auto other =
        learn_balanced(BalancedPolicyObjective(permuted.ds, permuted.imputed, permuted.K, Vector::Ones(3), 0.3, mode, mu_p), 3, cfg);
    PolicyParams unpermuted{Matrix(3, 3)};
    for (int a = 0; a < 3; ++a) unpermuted.beta.row(a) = other.params.beta.row(perm[static_cast<std::size_t>(a)]);
    const auto rule = deterministic_policy(base.params);
    const auto rule_p = deterministic_policy(unpermuted);
    for (double u = -2.0; u <= 2.0; u += 0.25)
      for (double v = -2.0; v <= 2.0; v += 0.25) EXPECT_EQ(rule(Vector{{u, v}}), rule_p(Vector{{u, v}}));
  }
}

namespace {

double share_of_arm_two(const LearnResult& res, const Matrix& X_test) {
  int hits = 0;
  for (Eigen::Index i = 0; i < X_test.rows(); ++i) hits += choose_arm(res.params, X_test.row(i).transpose()) == 1;
  return static_cast<double>(hits) / static_cast<double>(X_test.rows());
}

}  // namespace

TEST(LearnBalanced, DominantArmIsRecovered) {
  const auto sim = simulate_setting2(1000, 41, Setting2Variant::dominant_arm2);
  const Matrix X_test = simulate_setting2(10000, 42, Setting2Variant::dominant_arm2).data.X;
  PipelineOptions opt;
  opt.tune.seed = 41;
  opt.learn.seed = 41;
  const auto prepared = prepare(sim.data, opt);
  const double balanced = share_of_arm_two(learn_policy(prepared, Method::balanced, opt), X_test);
  EXPECT_GE(balanced, 0.95);
  for (auto rule : {Method::ipw_ipcw, Method::ipw_imputed})
    EXPECT_GE(share_of_arm_two(learn_policy(prepared, rule, opt), X_test), 0.90) << to_string(rule);
}
