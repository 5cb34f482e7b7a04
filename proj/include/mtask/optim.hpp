#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mtask/net.hpp"

namespace mtask {

struct RmsPropConfig {
  double learning_rate = 0.002;
  double momentum = 0.9;
  double decay = 0.9;
  double epsilon = 1e-8;
  std::uint64_t step_size = 5000;  // iterations between learning-rate drops
  double gamma = 0.1;              // drop factor

  friend bool operator==(const RmsPropConfig&, const RmsPropConfig&) = default;
};

/// lr · gamma^floor(iteration / step_size)
inline double scheduled_learning_rate(const RmsPropConfig& cfg, std::uint64_t iteration) {
  const auto drops = cfg.step_size == 0 ? 0 : iteration / cfg.step_size;
  double lr = cfg.learning_rate;
  // Repeated division by the reciprocal keeps decimal factors such as 0.1
  // exact to the nearest double (0.002 → 0.0002 → 0.00002).
  const double divisor = 1.0 / cfg.gamma;
  for (std::uint64_t i = 0; i < drops; ++i) lr /= divisor;
  return lr;
}

/// Per-parameter optimizer memory.
struct RmsPropSlot {
  std::vector<double> mean_square;  // decayed mean of g²
  std::vector<double> velocity;     // momentum buffer

  friend bool operator==(const RmsPropSlot&, const RmsPropSlot&) = default;
};

/// Momentum RMSProp:
///   a ← decay·a + (1−decay)·g²
///   s ← momentum·s + lr·g/√(a+ε)
///   w ← w − s
/// Parameters without a gradient are skipped entirely, state included.
class RmsProp {
 public:
  explicit RmsProp(RmsPropConfig config = {}) : config_(config) {}

  const RmsPropConfig& config() const { return config_; }
  std::uint64_t iteration() const { return iteration_; }
  void set_iteration(std::uint64_t it) { iteration_ = it; }
  double current_learning_rate() const { return scheduled_learning_rate(config_, iteration_); }

  const std::map<std::string, RmsPropSlot>& slots() const { return slots_; }
  std::map<std::string, RmsPropSlot>& slots() { return slots_; }

  void update(const std::string& name, Tensor param) {
    if (!param.has_grad()) return;
    const auto g = param.grad();
    auto& slot = slots_[name];
    if (slot.mean_square.empty()) {
      slot.mean_square.assign(g.size(), 0.0);
      slot.velocity.assign(g.size(), 0.0);
    }
    if (slot.mean_square.size() != g.size()) throw DimensionError("rmsprop: state size mismatch for " + name);
    const double lr = current_learning_rate();
    auto w = param.data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      slot.mean_square[i] = config_.decay * slot.mean_square[i] + (1.0 - config_.decay) * g[i] * g[i];
      slot.velocity[i] = config_.momentum * slot.velocity[i] + lr * g[i] / std::sqrt(slot.mean_square[i] + config_.epsilon);
      w[i] -= slot.velocity[i];
    }
  }

  /// Updates every parameter that carries a gradient, then advances the
  /// schedule by one iteration.
  void step(const std::vector<NamedTensor>& params) {
    for (const auto& p : params) update(p.name, p.tensor);
    ++iteration_;
  }

  friend bool operator==(const RmsProp&, const RmsProp&) = default;

 private:
  RmsPropConfig config_;
  std::uint64_t iteration_ = 0;
  std::map<std::string, RmsPropSlot> slots_;
};

}  // namespace mtask
