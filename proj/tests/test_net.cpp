#include <gtest/gtest.h>

#include <set>

#include "mtask/net.hpp"
#include "test_support.hpp"

using namespace mtask;
using namespace mtask::testing;

namespace {

NetConfig small_config() {
  NetConfig c;
  c.width = WidthScale{1, 8};
  return c;
}

std::uint64_t bits(double v) { return std::bit_cast<std::uint64_t>(v); }

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.numel(); ++i)
    if (bits(a[i]) != bits(b[i])) return false;
  return true;
}

}  // namespace

TEST(NetConfig, DefaultGeometry) {
  NetConfig c;
  EXPECT_EQ(c.conv1_side(), 20u);
  EXPECT_EQ(c.conv2_side(), 10u);
  EXPECT_EQ(c.trunk_side(), 6u);
  EXPECT_EQ(c.push_conv_side(), 2u);
  EXPECT_EQ(c.trunk_features(), 6u * 6u * 128u);
  EXPECT_EQ(2 * c.push_tower_features(), 1024u);
}

TEST(NetConfig, WidthScaleParsingAndRounding) {
  EXPECT_EQ(WidthScale::parse("1/8"), (WidthScale{1, 8}));
  EXPECT_EQ(WidthScale::parse("0.25"), (WidthScale{1, 4}));
  EXPECT_EQ(WidthScale::parse("2"), (WidthScale{2, 1}));
  EXPECT_EQ(WidthScale::parse("2/4"), (WidthScale{1, 2}));
  EXPECT_THROW(WidthScale::parse("0"), ContractError);
  EXPECT_THROW(WidthScale::parse("abc"), ContractError);
  EXPECT_EQ((WidthScale{1, 8}).apply(96), 12u);
  EXPECT_EQ((WidthScale{1, 1000}).apply(96), 1u);  // never below one channel
}

TEST(NetConfig, BadGeometryRejected) {
  NetConfig c;
  c.conv1.stride = 4;
  EXPECT_THROW(MultiTaskNet(c, 1), GeometryError);
}

TEST(MultiTaskNet, OutputShapesIndependentOfWidth) {
  Rng rng(1);
  for (auto w : {WidthScale{1, 8}, WidthScale{1, 4}, WidthScale{1, 1000}}) {
    NetConfig c;
    c.width = w;
    MultiTaskNet net(c, 3);
    auto x = random_images(3, rng);
    auto tape = Tape::no_grad();
    EXPECT_EQ(net.grasp_forward(tape, x, {}).shape(), (Shape{3, 18}));
    EXPECT_EQ(net.push_forward(tape, x, x, {}).shape(), (Shape{3, 5}));
    EXPECT_EQ(net.poke_forward(tape, x, {}).shape(), (Shape{3, 2}));
  }
}

TEST(MultiTaskNet, FullWidthForwardShapes) {
  Rng rng(2);
  MultiTaskNet net(NetConfig{}, 3);
  auto x = random_images(2, rng);
  auto tape = Tape::no_grad();
  EXPECT_EQ(net.grasp_forward(tape, x, {}).shape(), (Shape{2, 18}));
  EXPECT_EQ(net.push_forward(tape, x, x, {}).shape(), (Shape{2, 5}));
  EXPECT_EQ(net.poke_forward(tape, x, {}).shape(), (Shape{2, 2}));
}

TEST(MultiTaskNet, WrongInputsRejected) {
  MultiTaskNet net(small_config(), 3);
  auto tape = Tape::no_grad();
  EXPECT_THROW(net.grasp_forward(tape, Tensor(Shape{1, 3, 32, 32}), {}), DimensionError);
  EXPECT_THROW(net.poke_forward(tape, Tensor(Shape{1, 1, 64, 64}), {}), DimensionError);
  EXPECT_THROW(net.push_forward(tape, Tensor(Shape{2, 3, 64, 64}), Tensor(Shape{3, 3, 64, 64}), {}), DimensionError);
}

TEST(MultiTaskNet, IdenticalPatchesGiveIdenticalRows) {
  Rng rng(4);
  MultiTaskNet net(small_config(), 5);
  auto one = random_images(1, rng);
  Tensor two(Shape{2, 3, 64, 64});
  for (std::size_t i = 0; i < one.numel(); ++i) two[i] = two[i + one.numel()] = one[i];
  auto tape = Tape::no_grad();
  auto y = net.grasp_forward(tape, two, {Mode::eval, nullptr});
  for (std::size_t j = 0; j < 18; ++j) EXPECT_LE(std::abs(y[j] - y[18 + j]), 1e-12);
}

TEST(MultiTaskNet, SeededConstructionIsBitwiseReproducible) {
  Rng r1(6), r2(6);
  MultiTaskNet a(small_config(), 42), b(small_config(), 42);
  auto xa = random_images(2, r1), xb = random_images(2, r2);
  auto tape = Tape::no_grad();
  EXPECT_TRUE(bitwise_equal(a.grasp_forward(tape, xa, {}), b.grasp_forward(tape, xb, {})));
  MultiTaskNet c(small_config(), 43);
  EXPECT_FALSE(bitwise_equal(a.grasp_forward(tape, xa, {}), c.grasp_forward(tape, xa, {})));
}

TEST(MultiTaskNet, EvalModeIsIdempotent) {
  Rng rng(7);
  MultiTaskNet net(small_config(), 8);
  auto x = random_images(3, rng);
  auto tape = Tape::no_grad();
  auto p1 = net.poke_forward(tape, x, {Mode::eval, nullptr});
  auto p2 = net.poke_forward(tape, x, {Mode::eval, nullptr});
  EXPECT_TRUE(bitwise_equal(p1, p2));
}

TEST(MultiTaskNet, CloneIsIndependent) {
  Rng rng(9);
  MultiTaskNet net(small_config(), 10);
  auto copy = net.clone();
  auto x = random_images(2, rng);
  auto tape = Tape::no_grad();
  EXPECT_TRUE(bitwise_equal(net.grasp_forward(tape, x, {}), copy.grasp_forward(tape, x, {})));
  copy.params().grasp.fc3.bias[0] += 1.0;
  EXPECT_FALSE(bitwise_equal(net.grasp_forward(tape, x, {}), copy.grasp_forward(tape, x, {})));
}

TEST(ParamGroups, DisjointAndComplete) {
  MultiTaskNet net(small_config(), 1);
  std::set<const void*> seen;
  std::map<ParamGroup, std::size_t> per_group;
  for (const auto& p : net.params().parameters()) {
    EXPECT_TRUE(seen.insert(p.tensor.id()).second) << p.name << " appears twice";
    ++per_group[p.group];
  }
  EXPECT_EQ(per_group[ParamGroup::shared], 12u);  // 3 conv (w,b) + 3 BN (γ,β)
  EXPECT_EQ(per_group[ParamGroup::grasp], 6u);
  EXPECT_EQ(per_group[ParamGroup::push], 6u);
  EXPECT_EQ(per_group[ParamGroup::poke], 6u);
  EXPECT_EQ(group_name(ParamGroup::shared), "W_S");
  EXPECT_EQ(group_name(ParamGroup::poke), "W_Poke");
}

// Closed-form count: k·c·kh·kw + k per conv, m·d + m per fc, 2c per BN.
TEST(ParamGroups, ParameterCountAudit) {
  for (auto w : {WidthScale{1, 1}, WidthScale{1, 4}, WidthScale{1, 8}}) {
    NetConfig c;
    c.width = w;
    MultiTaskNet net(c, 1);
    auto conv = [](std::size_t k, std::size_t ch, std::size_t ks) { return k * ch * ks * ks + k; };
    auto fc = [](std::size_t m, std::size_t d) { return m * d + m; };
    const auto c1 = w.apply(96), c2 = w.apply(256), c3 = w.apply(128), pc = w.apply(128);
    const auto gh = w.apply(512), ph = w.apply(128), kh = w.apply(128);
    const std::size_t trunk = conv(c1, 3, 11) + 2 * c1 + conv(c2, c1, 11) + 2 * c2 + conv(c3, c2, 5) + 2 * c3;
    const std::size_t grasp = fc(gh, c3 * 36) + fc(gh, gh) + fc(18, gh);
    const std::size_t push = conv(pc, c3, 5) + fc(ph, 2 * pc * 4) + fc(5, ph);
    const std::size_t poke = fc(kh, c3 * 36) + fc(kh, kh) + fc(2, kh);
    std::map<ParamGroup, std::size_t> got;
    for (const auto& p : net.params().parameters()) got[p.group] += p.tensor.numel();
    EXPECT_EQ(got[ParamGroup::shared], trunk) << w.str();
    EXPECT_EQ(got[ParamGroup::grasp], grasp) << w.str();
    EXPECT_EQ(got[ParamGroup::push], push) << w.str();
    EXPECT_EQ(got[ParamGroup::poke], poke) << w.str();
    EXPECT_EQ(net.parameter_count(), trunk + grasp + push + poke);
    std::printf("width %-4s W_S %9zu  W_G %9zu  W_P %9zu  W_Poke %9zu  total %9zu\n", w.str().c_str(), trunk, grasp,
                push, poke, net.parameter_count());
  }
}

TEST(Siamese, BothTowersContributeToTrunkGradient) {
  Rng rng(11);
  MultiTaskNet net(small_config(), 12);
  auto a = random_images(2, rng), b = random_images(2, rng);
  auto target = random_tensor(Shape{2, 5}, rng);
  auto trunk_grad = [&](const Tensor& begin, const Tensor& end) {
    net.params().zero_grad();
    Tape tape;
    auto l = push_loss(tape, net.push_forward(tape, begin, end, {Mode::eval, nullptr}), target);
    tape.backward(l);
    auto g = net.params().shared.conv1.weight.grad();
    return std::vector<double>(g.begin(), g.end());
  };
  const auto both = trunk_grad(a, b);
  const auto zeroed = trunk_grad(a, Tensor(Shape{2, 3, 64, 64}));
  EXPECT_NE(both, zeroed);
}

// The push head must see tower(begin) in the first half of its input and
// tower(end) in the second; rebuild that composition by hand and compare.
TEST(Siamese, TowerAssignment) {
  Rng rng(13);
  MultiTaskNet net(small_config(), 14);
  auto a = random_images(2, rng), b = random_images(2, rng);
  auto tape = Tape::no_grad();
  auto& h = net.params().push;
  auto tower = [&](const Tensor& img) {
    auto x = net.trunk_forward(tape, img, Mode::eval);
    return flatten(tape, relu(tape, conv2d(tape, x, h.conv1.weight, h.conv1.bias, h.conv1.geometry)));
  };
  auto manual = [&](const Tensor& first, const Tensor& second) {
    auto x = relu(tape, fully_connected(tape, concat(tape, {tower(first), tower(second)}, 1), h.fc1.weight, h.fc1.bias));
    return fully_connected(tape, x, h.fc2.weight, h.fc2.bias);
  };
  auto forward = net.push_forward(tape, a, b, {Mode::eval, nullptr});
  auto swapped = net.push_forward(tape, b, a, {Mode::eval, nullptr});
  EXPECT_TRUE(bitwise_equal(forward, manual(a, b)));
  EXPECT_TRUE(bitwise_equal(swapped, manual(b, a)));
  EXPECT_FALSE(bitwise_equal(forward, swapped));
}

TEST(TrunkSharing, TrunkPerturbationReachesEveryHead) {
  Rng rng(15);
  MultiTaskNet net(small_config(), 16);
  auto x = random_images(2, rng);
  auto tape = Tape::no_grad();
  auto g0 = net.grasp_forward(tape, x, {});
  auto p0 = net.push_forward(tape, x, x, {});
  auto k0 = net.poke_forward(tape, x, {});
  for (auto& v : net.params().shared.conv2.weight.data()) v *= 1.01;
  EXPECT_FALSE(bitwise_equal(g0, net.grasp_forward(tape, x, {})));
  EXPECT_FALSE(bitwise_equal(p0, net.push_forward(tape, x, x, {})));
  EXPECT_FALSE(bitwise_equal(k0, net.poke_forward(tape, x, {})));
}

TEST(TrunkSharing, GraspHeadUpdateLeavesOtherHeadsBitwise) {
  Rng rng(17);
  MultiTaskNet net(small_config(), 18);
  auto x = random_images(2, rng);
  auto tape = Tape::no_grad();
  auto g0 = net.grasp_forward(tape, x, {});
  auto p0 = net.push_forward(tape, x, x, {});
  auto k0 = net.poke_forward(tape, x, {});
  for (const auto& p : net.params().group(ParamGroup::grasp))
    for (auto& v : Tensor(p.tensor).data()) v += 0.01;
  EXPECT_FALSE(bitwise_equal(g0, net.grasp_forward(tape, x, {})));
  EXPECT_TRUE(bitwise_equal(p0, net.push_forward(tape, x, x, {})));
  EXPECT_TRUE(bitwise_equal(k0, net.poke_forward(tape, x, {})));
}

class HeadGradient : public ::testing::TestWithParam<Head> {};

TEST_P(HeadGradient, MatchesFiniteDifferencesAtWidthEighth) {
  for (std::uint64_t trial = 0; trial < 20; ++trial) {
    auto r = head_grad_check(GetParam(), 1000 + trial, 2);
    EXPECT_LE(r.max_rel_error, 1e-4) << head_name(GetParam()) << " trial " << trial;
    EXPECT_GE(r.checked, 2u * 18u);
    EXPECT_LE(r.kink_skips, 2u);
  }
}

INSTANTIATE_TEST_SUITE_P(AllHeads, HeadGradient, ::testing::Values(Head::grasp, Head::push, Head::poke),
                         [](const auto& info) { return std::string(head_name(info.param)); });
