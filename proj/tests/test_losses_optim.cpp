#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "mtask/losses.hpp"
#include "mtask/optim.hpp"
#include "mtask/train.hpp"
#include "test_support.hpp"

using namespace mtask;
using namespace mtask::testing;

namespace {

Tensor logits_row(double z, std::size_t attempted, std::size_t rows = 1) {
  Tensor t(Shape{rows, 18}, 0.0, true);
  for (std::size_t r = 0; r < rows; ++r) t[r * 18 + attempted] = z;
  return t;
}

double grasp_value(const Tensor& logits, std::vector<int> theta, std::vector<int> y) {
  auto tape = Tape::no_grad();
  return grasp_loss(tape, logits, theta, y).item();
}

}  // namespace

// --- grasp loss ---------------------------------------------------------------

TEST(GraspLoss, ZeroLogitIsLn2ForEitherLabel) {
  EXPECT_NEAR(grasp_value(logits_row(0.0, 4), {4}, {1}), std::numbers::ln2, 1e-12);
  EXPECT_NEAR(grasp_value(logits_row(0.0, 4), {4}, {0}), std::numbers::ln2, 1e-12);
}

TEST(GraspLoss, ConfidentAndExtremeLogits) {
  EXPECT_LE(grasp_value(logits_row(20.0, 0), {0}, {1}), 1e-8);
  EXPECT_LE(grasp_value(logits_row(500.0, 0), {0}, {1}), 1e-200);
  EXPECT_EQ(grasp_value(logits_row(-500.0, 0), {0}, {1}), 500.0);
  EXPECT_EQ(grasp_value(logits_row(500.0, 0), {0}, {0}), 500.0);
  EXPECT_TRUE(std::isfinite(grasp_value(logits_row(-1e6, 0), {0}, {1})));
}

// Stable form against a long-double evaluation of the unsimplified terms.
TEST(GraspLoss, StableFormMatchesHighPrecisionReference) {
  for (double z = -30.0; z <= 30.0; z += 0.37) {
    for (int y : {0, 1}) {
      // −log σ(z) = log(1+e^{−z});  −log(1−σ(z)) = z + log(1+e^{−z})
      const long double zl = z;
      const long double ref = std::log1p(std::exp(-zl)) + (y ? 0.0L : zl);
      EXPECT_NEAR(stable_bce(z, y), static_cast<double>(ref), 1e-12 * std::max(1.0, std::abs(static_cast<double>(ref))))
          << "z=" << z << " y=" << y;
    }
  }
}

TEST(GraspLoss, BatchMean) {
  Tensor l(Shape{2, 18}, 0.0, true);
  l[0 * 18 + 3] = 2.0;
  l[1 * 18 + 7] = -1.0;
  const double want = (stable_bce(2.0, 1) + stable_bce(-1.0, 0)) / 2.0;
  EXPECT_DOUBLE_EQ(grasp_value(l, {3, 7}, {1, 0}), want);
}

TEST(GraspLoss, OnlyAttemptedLogitGetsGradient) {
  Rng rng(1);
  auto l = random_tensor(Shape{3, 18}, rng, true);
  std::vector<int> theta{2, 17, 0}, y{1, 0, 1};
  Tape tape;
  tape.backward(grasp_loss(tape, l, theta, y));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 18; ++j) {
      const double g = l.grad()[i * 18 + j];
      if (static_cast<int>(j) == theta[i]) {
        EXPECT_NEAR(g, (sigmoid_value(l[i * 18 + j]) - y[i]) / 3.0, 1e-15);
      } else {
        EXPECT_EQ(g, 0.0);
      }
    }
}

TEST(GraspLoss, PerturbingOtherLogitsLeavesLossUnchanged) {
  Rng rng(2);
  auto l = random_tensor(Shape{2, 18}, rng);
  const double base = grasp_value(l, {5, 9}, {1, 0});
  for (std::size_t k = 0; k < l.numel(); ++k) {
    if (k == 5 || k == 18 + 9) continue;
    auto p = l.clone();
    p[k] += 3.7;
    EXPECT_EQ(grasp_value(p, {5, 9}, {1, 0}), base);
  }
}

TEST(GraspLoss, InvalidInputs) {
  Tape tape;
  auto l = logits_row(0.0, 0);
  std::vector<int> bad_theta{18}, neg_theta{-1}, ok{0}, bad_y{2}, y{1};
  EXPECT_THROW(grasp_loss(tape, l, bad_theta, y), IndexError);
  EXPECT_THROW(grasp_loss(tape, l, neg_theta, y), IndexError);
  EXPECT_THROW(grasp_loss(tape, l, ok, bad_y), ContractError);
  std::vector<int> two{0, 1};
  EXPECT_THROW(grasp_loss(tape, l, two, two), DimensionError);
}

// --- push / poke loss ---------------------------------------------------------

TEST(RegressionLoss, ClosedForms) {
  auto tape = Tape::no_grad();
  Tensor t5(Shape{1, 5}, {0.5, -1.0, 2.0, 0.0, 3.0});
  Tensor p5(Shape{1, 5}, {1.5, 1.0, 5.0, 4.0, 8.0});
  EXPECT_EQ(push_loss(tape, p5, t5).item(), 55.0);
  EXPECT_EQ(push_loss(tape, t5, t5).item(), 0.0);
  Tensor unit(Shape{1, 5}, {1.5, -1.0, 2.0, 0.0, 3.0});
  EXPECT_EQ(push_loss(tape, unit, t5).item(), 1.0);
  Tensor t2(Shape{1, 2}, {1.0, -2.0});
  Tensor p2(Shape{1, 2}, {4.0, 2.0});
  EXPECT_EQ(poke_loss(tape, p2, t2).item(), 25.0);
  EXPECT_EQ(poke_loss(tape, t2, t2).item(), 0.0);
}

TEST(RegressionLoss, MeanOverBatch) {
  auto tape = Tape::no_grad();
  Tensor p(Shape{2, 2}, {3.0, 4.0, 0.0, 0.0});
  Tensor t(Shape{2, 2}, 0.0);
  EXPECT_EQ(poke_loss(tape, p, t).item(), 12.5);
}

TEST(RegressionLoss, ShapeErrors) {
  Tape tape;
  EXPECT_THROW(push_loss(tape, Tensor(Shape{2, 5}), Tensor(Shape{3, 5})), DimensionError);
  EXPECT_THROW(push_loss(tape, Tensor(Shape{2, 4}), Tensor(Shape{2, 4})), DimensionError);
  EXPECT_THROW(poke_loss(tape, Tensor(Shape{2, 2}), Tensor(Shape{2, 3})), DimensionError);
}

TEST(RegressionLoss, PokeGradientIsTwiceDiffOverN) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    auto p = random_tensor(Shape{4, 2}, rng, true);
    auto t = random_tensor(Shape{4, 2}, rng);
    Tape tape;
    tape.backward(poke_loss(tape, p, t));
    for (std::size_t i = 0; i < p.numel(); ++i) EXPECT_NEAR(p.grad()[i], 2.0 * (p[i] - t[i]) / 4.0, 1e-15);
    p.zero_grad();
    auto r = grad_check({p}, [&](Tape& tp) { return poke_loss(tp, p, t); }, rng, 100);
    EXPECT_LE(r.max_rel_error, 1e-4);
    auto q = random_tensor(Shape{3, 5}, rng, true);
    auto u = random_tensor(Shape{3, 5}, rng);
    auto rq = grad_check({q}, [&](Tape& tp) { return push_loss(tp, q, u); }, rng, 100);
    EXPECT_LE(rq.max_rel_error, 1e-4);
  }
}

// --- RMSProp ------------------------------------------------------------------

TEST(RmsProp, HandComputedScalarStep) {
  RmsProp opt;
  Tensor w(Shape{1}, {1.0}, true);
  w.grad_buffer()[0] = 1.0;
  opt.step({{"w", w, ParamGroup::shared}});
  const auto& slot = opt.slots().at("w");
  EXPECT_NEAR(slot.mean_square[0], 0.1, 1e-16);
  const double step = 0.002 / std::sqrt(0.1 + 1e-8);
  EXPECT_NEAR(slot.velocity[0], 0.0063245, 1e-6);
  EXPECT_DOUBLE_EQ(slot.velocity[0], step);
  EXPECT_NEAR(w[0] - 1.0, -0.0063245, 1e-6);
  EXPECT_EQ(opt.iteration(), 1u);
}

TEST(RmsProp, ScheduleIsExact) {
  RmsPropConfig cfg;
  EXPECT_EQ(scheduled_learning_rate(cfg, 0), 0.002);
  EXPECT_EQ(scheduled_learning_rate(cfg, 4999), 0.002);
  EXPECT_EQ(scheduled_learning_rate(cfg, 5000), 0.0002);
  EXPECT_EQ(scheduled_learning_rate(cfg, 9999), 0.0002);
  EXPECT_EQ(scheduled_learning_rate(cfg, 10000), 0.00002);
  RmsProp opt(cfg);
  opt.set_iteration(5000);
  EXPECT_EQ(opt.current_learning_rate(), 0.0002);
}

TEST(RmsProp, ZeroGradientKeepsMomentumCarry) {
  RmsProp opt;
  Tensor w(Shape{1}, {0.0}, true);
  w.grad_buffer()[0] = 1.0;
  opt.step({{"w", w, ParamGroup::shared}});
  const double s1 = opt.slots().at("w").velocity[0];
  const double a1 = opt.slots().at("w").mean_square[0];
  const double w1 = w[0];
  w.grad_buffer()[0] = 0.0;
  opt.step({{"w", w, ParamGroup::shared}});
  EXPECT_DOUBLE_EQ(opt.slots().at("w").mean_square[0], 0.9 * a1);
  EXPECT_DOUBLE_EQ(w[0], w1 - 0.9 * s1);
}

TEST(RmsProp, ZeroGradientAndZeroMomentumLeavesParameter) {
  RmsProp opt;
  Tensor w(Shape{3}, {1.0, -2.0, 3.0}, true);
  w.grad_buffer();  // zero gradient present
  opt.step({{"w", w, ParamGroup::shared}});
  EXPECT_EQ(w[0], 1.0);
  EXPECT_EQ(w[1], -2.0);
  EXPECT_EQ(w[2], 3.0);
  for (double a : opt.slots().at("w").mean_square) EXPECT_GE(a, 0.0);
}

TEST(RmsProp, ParameterWithoutGradientIsFrozen) {
  RmsProp opt;
  Tensor w(Shape{2}, {1.0, 2.0}, true);
  opt.step({{"w", w, ParamGroup::push}});
  EXPECT_EQ(w[0], 1.0);
  EXPECT_TRUE(opt.slots().empty());
}

// --- joint step ---------------------------------------------------------------

TEST(JointStep, TrunkGradientIsSumOfTaskGradients) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto r = joint_law_check(seed);
    EXPECT_LE(r.trunk_max_diff, 1e-12);
    EXPECT_LE(r.head_max_diff, 1e-12);
    EXPECT_TRUE(r.foreign_heads_clean);
    EXPECT_GT(r.trunk_entries, 0u);
  }
}

TEST(JointStep, AbsentHeadsAndTheirOptimizerStateFrozen) {
  Rng rng(4);
  NetConfig cfg;
  cfg.width = WidthScale{1, 8};
  MultiTaskNet net(cfg, 5);
  RmsProp opt;
  const auto push_before = snapshot(net.params().group(ParamGroup::push));
  const auto poke_before = snapshot(net.params().group(ParamGroup::poke));
  const auto grasp_before = snapshot(net.params().group(ParamGroup::grasp));
  const auto trunk_before = snapshot(net.params().group(ParamGroup::shared));
  auto batches = random_batches(4, rng, true, false, false);
  Rng drop(6);
  for (int i = 0; i < 3; ++i) {
    auto losses = joint_step(net, opt, batches, drop);
    EXPECT_TRUE(losses.grasp.has_value());
    EXPECT_FALSE(losses.push.has_value());
    EXPECT_FALSE(losses.poke.has_value());
  }
  EXPECT_EQ(opt.iteration(), 3u);
  EXPECT_TRUE(bitwise_same(snapshot(net.params().group(ParamGroup::push)), push_before));
  EXPECT_TRUE(bitwise_same(snapshot(net.params().group(ParamGroup::poke)), poke_before));
  EXPECT_FALSE(bitwise_same(snapshot(net.params().group(ParamGroup::grasp)), grasp_before));
  EXPECT_FALSE(bitwise_same(snapshot(net.params().group(ParamGroup::shared)), trunk_before));
  for (const auto& [name, slot] : opt.slots()) {
    EXPECT_TRUE(name.starts_with("trunk.") || name.starts_with("grasp.")) << name;
  }
  for (const auto& p : net.params().parameters()) EXPECT_FALSE(p.tensor.has_grad()) << p.name;
}

TEST(JointStep, EmptyBatchSetRejected) {
  MultiTaskNet net(NetConfig{.width = WidthScale{1, 8}}, 1);
  RmsProp opt;
  Rng rng(1);
  EXPECT_THROW(joint_step(net, opt, TaskBatches{}, rng), ContractError);
  EXPECT_EQ(opt.iteration(), 0u);
}

TEST(JointStep, NonFiniteLossRaisesNumericError) {
  Rng rng(7);
  MultiTaskNet net(NetConfig{.width = WidthScale{1, 8}}, 1);
  RmsProp opt;
  auto batches = random_batches(2, rng, false, false, true);
  batches.poke->response[0] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(joint_step(net, opt, batches, rng), NumericError);
}
