#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "mtask/autodiff.hpp"

namespace mtask {

/// Uniform multiplier for every channel and hidden width, kept as a
/// rational so that configs round-trip exactly through checkpoints.
struct WidthScale {
  std::int64_t num = 1;
  std::int64_t den = 1;

  std::size_t apply(std::size_t base) const {
    const auto scaled = (static_cast<std::int64_t>(base) * num + den / 2) / den;
    return static_cast<std::size_t>(std::max<std::int64_t>(1, scaled));
  }

  double value() const { return static_cast<double>(num) / static_cast<double>(den); }

  std::string str() const { return den == 1 ? std::to_string(num) : std::to_string(num) + "/" + std::to_string(den); }

  // Accepts "1", "1/8" or "0.25".
  static WidthScale parse(std::string_view text) {
    const std::string s(text);
    WidthScale w;
    try {
      if (const auto slash = s.find('/'); slash != std::string::npos) {
        w.num = std::stoll(s.substr(0, slash));
        w.den = std::stoll(s.substr(slash + 1));
      } else if (s.find('.') != std::string::npos) {
        const double v = std::stod(s);
        w.den = 1000000;
        w.num = std::llround(v * static_cast<double>(w.den));
      } else {
        w.num = std::stoll(s);
      }
    } catch (const std::logic_error&) {
      throw ContractError("width scale: cannot parse '" + s + "'");
    }
    if (w.num <= 0 || w.den <= 0) throw ContractError("width scale must be positive: '" + s + "'");
    const auto g = std::gcd(w.num, w.den);
    w.num /= g;
    w.den /= g;
    return w;
  }

  friend bool operator==(const WidthScale&, const WidthScale&) = default;
};

struct ConvSpec {
  std::size_t channels;
  std::size_t kernel;
  std::size_t stride;
  std::size_t pad;
  friend bool operator==(const ConvSpec&, const ConvSpec&) = default;
};

/// Layer table. Defaults give the full-size network on 64×64×3 inputs:
/// conv1 → 20×20, conv2 → 10×10, conv3 → 6×6, push conv → 2×2.
struct NetConfig {
  std::size_t input_side = 64;
  std::size_t input_channels = 3;
  ConvSpec conv1{96, 11, 3, 2};
  ConvSpec conv2{256, 11, 1, 0};
  ConvSpec conv3{128, 5, 1, 0};
  ConvSpec push_conv{128, 5, 1, 0};
  std::size_t grasp_hidden = 512;
  std::size_t push_hidden = 128;
  std::size_t poke_hidden = 128;
  double dropout = 0.5;
  WidthScale width{};

  static constexpr std::size_t kGraspOutputs = 18;
  static constexpr std::size_t kPushOutputs = 5;
  static constexpr std::size_t kPokeOutputs = 2;

  std::size_t channels(const ConvSpec& c) const { return width.apply(c.channels); }
  std::size_t hidden(std::size_t base) const { return width.apply(base); }

  std::size_t conv1_side() const { return conv_output_size(input_side, conv1.kernel, {conv1.stride, conv1.pad}); }
  std::size_t conv2_side() const { return conv_output_size(conv1_side(), conv2.kernel, {conv2.stride, conv2.pad}); }
  std::size_t trunk_side() const { return conv_output_size(conv2_side(), conv3.kernel, {conv3.stride, conv3.pad}); }
  std::size_t push_conv_side() const {
    return conv_output_size(trunk_side(), push_conv.kernel, {push_conv.stride, push_conv.pad});
  }
  std::size_t trunk_features() const { return channels(conv3) * trunk_side() * trunk_side(); }
  std::size_t push_tower_features() const { return channels(push_conv) * push_conv_side() * push_conv_side(); }

  // Throws GeometryError if any layer fails to tile its input.
  void validate() const {
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ContractError("net config: dropout must lie in [0,1)");
    (void)push_conv_side();
  }

  friend bool operator==(const NetConfig&, const NetConfig&) = default;
};

struct ConvLayer {
  Tensor weight;
  Tensor bias;
  ConvGeometry geometry;
};

struct LinearLayer {
  Tensor weight;
  Tensor bias;
};

struct BatchNormLayer {
  Tensor gamma;
  Tensor beta;
  BatchNormStats stats;
};

enum class ParamGroup { shared, grasp, push, poke };

inline std::string_view group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::shared: return "W_S";
    case ParamGroup::grasp: return "W_G";
    case ParamGroup::push: return "W_P";
    case ParamGroup::poke: return "W_Poke";
  }
  return "?";
}

struct NamedTensor {
  std::string name;
  Tensor tensor;
  ParamGroup group;
};

struct Trunk {
  ConvLayer conv1;
  BatchNormLayer bn1;
  ConvLayer conv2;
  BatchNormLayer bn2;
  ConvLayer conv3;
  BatchNormLayer bn3;
};

struct GraspHead {
  LinearLayer fc1, fc2, fc3;
};

struct PushHead {
  ConvLayer conv1;
  LinearLayer fc1, fc2;
};

struct PokeHead {
  LinearLayer fc1, fc2, fc3;
};

/// The four disjoint learnable sets: trunk (W_S) and one head per task.
struct ParamGroups {
  Trunk shared;
  GraspHead grasp;
  PushHead push;
  PokeHead poke;

  std::vector<NamedTensor> parameters() const {
    std::vector<NamedTensor> out;
    auto conv = [&](const std::string& n, const ConvLayer& l, ParamGroup g) {
      out.push_back({n + ".weight", l.weight, g});
      out.push_back({n + ".bias", l.bias, g});
    };
    auto lin = [&](const std::string& n, const LinearLayer& l, ParamGroup g) {
      out.push_back({n + ".weight", l.weight, g});
      out.push_back({n + ".bias", l.bias, g});
    };
    auto bn = [&](const std::string& n, const BatchNormLayer& l) {
      out.push_back({n + ".gamma", l.gamma, ParamGroup::shared});
      out.push_back({n + ".beta", l.beta, ParamGroup::shared});
    };
    conv("trunk.conv1", shared.conv1, ParamGroup::shared);
    bn("trunk.bn1", shared.bn1);
    conv("trunk.conv2", shared.conv2, ParamGroup::shared);
    bn("trunk.bn2", shared.bn2);
    conv("trunk.conv3", shared.conv3, ParamGroup::shared);
    bn("trunk.bn3", shared.bn3);
    lin("grasp.gr_fc1", grasp.fc1, ParamGroup::grasp);
    lin("grasp.gr_fc2", grasp.fc2, ParamGroup::grasp);
    lin("grasp.gr_fc3", grasp.fc3, ParamGroup::grasp);
    conv("push.pu_conv1", push.conv1, ParamGroup::push);
    lin("push.pu_fc1", push.fc1, ParamGroup::push);
    lin("push.pu_fc2", push.fc2, ParamGroup::push);
    lin("poke.po_fc1", poke.fc1, ParamGroup::poke);
    lin("poke.po_fc2", poke.fc2, ParamGroup::poke);
    lin("poke.po_fc3", poke.fc3, ParamGroup::poke);
    return out;
  }

  std::vector<NamedTensor> group(ParamGroup g) const {
    std::vector<NamedTensor> out;
    for (auto& p : parameters())
      if (p.group == g) out.push_back(p);
    return out;
  }

  /// Non-learnable state (batch-norm running statistics).
  std::vector<NamedTensor> buffers() const {
    return {
        {"trunk.bn1.running_mean", shared.bn1.stats.running_mean, ParamGroup::shared},
        {"trunk.bn1.running_var", shared.bn1.stats.running_var, ParamGroup::shared},
        {"trunk.bn2.running_mean", shared.bn2.stats.running_mean, ParamGroup::shared},
        {"trunk.bn2.running_var", shared.bn2.stats.running_var, ParamGroup::shared},
        {"trunk.bn3.running_mean", shared.bn3.stats.running_mean, ParamGroup::shared},
        {"trunk.bn3.running_var", shared.bn3.stats.running_var, ParamGroup::shared},
    };
  }

  void zero_grad() const {
    for (auto& p : parameters()) {
      Tensor t = p.tensor;
      t.zero_grad();
    }
  }
};

/// Forward-pass switches: batch-norm/dropout mode and the dropout stream.
struct ForwardContext {
  Mode mode = Mode::eval;
  Rng* rng = nullptr;
};

namespace detail {

inline Tensor he_normal(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor t(std::move(shape), 0.0, true);
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

inline ConvLayer make_conv(std::size_t in_c, std::size_t out_c, const ConvSpec& spec, Rng& rng) {
  const std::size_t fan_in = in_c * spec.kernel * spec.kernel;
  return ConvLayer{he_normal(Shape{out_c, in_c, spec.kernel, spec.kernel}, fan_in, rng), Tensor(Shape{out_c}, 0.0, true),
                   ConvGeometry{spec.stride, spec.pad}};
}

inline LinearLayer make_linear(std::size_t in, std::size_t out, Rng& rng) {
  return LinearLayer{he_normal(Shape{out, in}, in, rng), Tensor(Shape{out}, 0.0, true)};
}

inline BatchNormLayer make_bn(std::size_t c) {
  return BatchNormLayer{Tensor(Shape{c}, 1.0, true), Tensor(Shape{c}, 0.0, true), BatchNormStats::fresh(c)};
}

}  // namespace detail

/// Shared three-conv trunk with grasp (18-way), siamese push (5-d) and
/// poke (2-d) heads. Move-only; use clone() for an independent copy.
class MultiTaskNet {
 public:
  MultiTaskNet(NetConfig config, std::uint64_t seed) : config_(config) {
    config_.validate();
    Rng rng(seed);
    const auto c1 = config_.channels(config_.conv1);
    const auto c2 = config_.channels(config_.conv2);
    const auto c3 = config_.channels(config_.conv3);
    const auto pc = config_.channels(config_.push_conv);
    const auto gh = config_.hidden(config_.grasp_hidden);
    const auto ph = config_.hidden(config_.push_hidden);
    const auto kh = config_.hidden(config_.poke_hidden);

    auto& t = params_.shared;
    t.conv1 = detail::make_conv(config_.input_channels, c1, config_.conv1, rng);
    t.bn1 = detail::make_bn(c1);
    t.conv2 = detail::make_conv(c1, c2, config_.conv2, rng);
    t.bn2 = detail::make_bn(c2);
    t.conv3 = detail::make_conv(c2, c3, config_.conv3, rng);
    t.bn3 = detail::make_bn(c3);

    const auto feat = config_.trunk_features();
    params_.grasp.fc1 = detail::make_linear(feat, gh, rng);
    params_.grasp.fc2 = detail::make_linear(gh, gh, rng);
    params_.grasp.fc3 = detail::make_linear(gh, NetConfig::kGraspOutputs, rng);

    params_.push.conv1 = detail::make_conv(c3, pc, config_.push_conv, rng);
    params_.push.fc1 = detail::make_linear(2 * config_.push_tower_features(), ph, rng);
    params_.push.fc2 = detail::make_linear(ph, NetConfig::kPushOutputs, rng);

    params_.poke.fc1 = detail::make_linear(feat, kh, rng);
    params_.poke.fc2 = detail::make_linear(kh, kh, rng);
    params_.poke.fc3 = detail::make_linear(kh, NetConfig::kPokeOutputs, rng);
  }

  MultiTaskNet(MultiTaskNet&&) = default;
  MultiTaskNet& operator=(MultiTaskNet&&) = default;
  MultiTaskNet(const MultiTaskNet&) = delete;
  MultiTaskNet& operator=(const MultiTaskNet&) = delete;

  MultiTaskNet clone() const {
    MultiTaskNet copy(config_, 0);
    copy.copy_state_from(*this);
    return copy;
  }

  void copy_state_from(const MultiTaskNet& other) {
    auto dst = params_.parameters();
    auto src = other.params_.parameters();
    for (std::size_t i = 0; i < dst.size(); ++i) std::ranges::copy(src[i].tensor.data(), dst[i].tensor.data().begin());
    auto dbuf = params_.buffers();
    auto sbuf = other.params_.buffers();
    for (std::size_t i = 0; i < dbuf.size(); ++i) std::ranges::copy(sbuf[i].tensor.data(), dbuf[i].tensor.data().begin());
  }

  const NetConfig& config() const { return config_; }
  ParamGroups& params() { return params_; }
  const ParamGroups& params() const { return params_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_.parameters()) n += p.tensor.numel();
    return n;
  }

  /// conv → BN → ReLU, three times. Output [N, conv3, side, side].
  Tensor trunk_forward(Tape& tape, const Tensor& images, Mode mode) {
    check_images(images, "trunk");
    auto& t = params_.shared;
    auto block = [&](const Tensor& x, ConvLayer& conv, BatchNormLayer& bn) {
      auto y = conv2d(tape, x, conv.weight, conv.bias, conv.geometry);
      y = batch_norm(tape, y, bn.gamma, bn.beta, bn.stats, mode);
      return relu(tape, y);
    };
    auto x = block(images, t.conv1, t.bn1);
    x = block(x, t.conv2, t.bn2);
    return block(x, t.conv3, t.bn3);
  }

  /// Pre-sigmoid scores [N,18], one per 10° grasp-angle bin.
  Tensor grasp_forward(Tape& tape, const Tensor& patches, ForwardContext ctx) {
    check_images(patches, "grasp_forward");
    auto& h = params_.grasp;
    auto x = flatten(tape, trunk_forward(tape, patches, ctx.mode));
    x = hidden_layer(tape, x, h.fc1, ctx);
    x = hidden_layer(tape, x, h.fc2, ctx);
    return fully_connected(tape, x, h.fc3.weight, h.fc3.bias);
  }

  /// Siamese towers over (begin, end) with shared trunk weights → [N,5].
  Tensor push_forward(Tape& tape, const Tensor& begin, const Tensor& end, ForwardContext ctx) {
    check_images(begin, "push_forward(begin)");
    check_images(end, "push_forward(end)");
    if (begin.dim(0) != end.dim(0)) {
      throw DimensionError("push_forward: batch axis (0) mismatch between begin (" + std::to_string(begin.dim(0)) +
                           ") and end (" + std::to_string(end.dim(0)) + ")");
    }
    auto& h = params_.push;
    auto tower = [&](const Tensor& img) {
      auto x = trunk_forward(tape, img, ctx.mode);
      x = relu(tape, conv2d(tape, x, h.conv1.weight, h.conv1.bias, h.conv1.geometry));
      return flatten(tape, x);
    };
    auto joined = concat(tape, {tower(begin), tower(end)}, 1);
    auto x = hidden_layer(tape, joined, h.fc1, ctx);
    return fully_connected(tape, x, h.fc2.weight, h.fc2.bias);
  }

  /// (slope, intercept) regression → [N,2].
  Tensor poke_forward(Tape& tape, const Tensor& images, ForwardContext ctx) {
    check_images(images, "poke_forward");
    auto& h = params_.poke;
    auto x = flatten(tape, trunk_forward(tape, images, ctx.mode));
    x = hidden_layer(tape, x, h.fc1, ctx);
    x = hidden_layer(tape, x, h.fc2, ctx);
    return fully_connected(tape, x, h.fc3.weight, h.fc3.bias);
  }

 private:
  // fc → dropout → ReLU
  Tensor hidden_layer(Tape& tape, const Tensor& x, LinearLayer& fc, ForwardContext ctx) {
    auto y = fully_connected(tape, x, fc.weight, fc.bias);
    y = dropout(tape, y, config_.dropout, ctx.mode, ctx.rng);
    return relu(tape, y);
  }

  void check_images(const Tensor& images, std::string_view where) const {
    const auto side = config_.input_side;
    if (images.rank() != 4 || images.dim(1) != config_.input_channels || images.dim(2) != side ||
        images.dim(3) != side) {
      throw DimensionError(std::string(where) + ": expected [N," + std::to_string(config_.input_channels) + "," +
                           std::to_string(side) + "," + std::to_string(side) + "], got " +
                           shape_str(images.shape()));
    }
  }

  NetConfig config_;
  ParamGroups params_;
};

}  // namespace mtask
