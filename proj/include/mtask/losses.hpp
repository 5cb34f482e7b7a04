#pragma once

#include <cmath>
#include <span>
#include <string>

#include "mtask/autodiff.hpp"
#include "mtask/net.hpp"

namespace mtask {

/// Binary cross-entropy on sigmoid(z) for label y, evaluated in the
/// overflow-free form max(z,0) − z·y + log(1 + e^{−|z|}).
inline double stable_bce(double z, double y) {
  return std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
}

/// Mean over the batch of the binary cross-entropy of the attempted-angle
/// logit only. The other 17 logits of each row get no gradient.
inline Tensor grasp_loss(Tape& tape, const Tensor& logits, std::span<const int> theta_d, std::span<const int> success) {
  detail::require_rank(logits, 2, "grasp_loss", "logits");
  const std::size_t n = logits.dim(0);
  const std::size_t bins = logits.dim(1);
  if (theta_d.size() != n || success.size() != n) {
    throw DimensionError("grasp_loss: batch axis (0) has " + std::to_string(n) + " rows but " +
                         std::to_string(theta_d.size()) + " angles and " + std::to_string(success.size()) + " labels");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (theta_d[i] < 0 || static_cast<std::size_t>(theta_d[i]) >= bins) {
      throw IndexError("grasp_loss: angle index " + std::to_string(theta_d[i]) + " outside 0.." +
                       std::to_string(bins - 1));
    }
    if (success[i] != 0 && success[i] != 1) throw ContractError("grasp_loss: labels must be 0 or 1");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    total += stable_bce(logits[i * bins + static_cast<std::size_t>(theta_d[i])], success[i]);
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(n));
  if (tape.wants({&logits})) {
    std::vector<int> theta(theta_d.begin(), theta_d.end());
    std::vector<int> y(success.begin(), success.end());
    tape.record("grasp_loss", {logits}, out, [logits, out, theta, y, n, bins]() mutable {
      const double g = out.grad()[0] / static_cast<double>(n);
      auto& gl = logits.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t k = i * bins + static_cast<std::size_t>(theta[i]);
        gl[k] += g * (sigmoid_value(logits[k]) - y[i]);
      }
    });
  }
  return out;
}

/// Mean over rows of the squared Euclidean distance (no ½ factor).
inline Tensor squared_error_loss(Tape& tape, const Tensor& pred, const Tensor& target, std::string_view name = "euclidean_loss") {
  detail::require_rank(pred, 2, name, "prediction");
  if (pred.shape() != target.shape()) {
    throw DimensionError(std::string(name) + ": prediction " + shape_str(pred.shape()) + " vs target " +
                         shape_str(target.shape()));
  }
  const std::size_t n = pred.dim(0);
  double total = 0.0;
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    const double d = pred[i] - target[i];
    total += d * d;
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(n));
  if (tape.wants({&pred, &target})) {
    tape.record(name, {pred, target}, out, [pred, target, out, n]() mutable {
      const double g = 2.0 * out.grad()[0] / static_cast<double>(n);
      if (pred.requires_grad()) {
        auto& gp = pred.grad_buffer();
        for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g * (pred[i] - target[i]);
      }
      if (target.requires_grad()) {
        auto& gt = target.grad_buffer();
        for (std::size_t i = 0; i < gt.size(); ++i) gt[i] -= g * (pred[i] - target[i]);
      }
    });
  }
  return out;
}

inline Tensor push_loss(Tape& tape, const Tensor& pred, const Tensor& target) {
  if (pred.rank() != 2 || pred.dim(1) != NetConfig::kPushOutputs) {
    throw DimensionError("push_loss: prediction must be [N,5], got " + shape_str(pred.shape()));
  }
  return squared_error_loss(tape, pred, target, "push_loss");
}

inline Tensor poke_loss(Tape& tape, const Tensor& pred, const Tensor& target) {
  if (pred.rank() != 2 || pred.dim(1) != NetConfig::kPokeOutputs) {
    throw DimensionError("poke_loss: prediction must be [N,2], got " + shape_str(pred.shape()));
  }
  return squared_error_loss(tape, pred, target, "poke_loss");
}

}  // namespace mtask
