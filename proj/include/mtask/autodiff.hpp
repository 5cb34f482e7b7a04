#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include <Eigen/Core>

#include "mtask/tensor.hpp"

namespace mtask {

using Rng = std::mt19937_64;

enum class Mode { train, eval };

/// Records operations in creation order and replays them in exact reverse
/// order on backward(). A tape is single-use: a second backward() throws.
class Tape {
 public:
  struct OpRecord {
    std::string_view kind;
    std::vector<Tensor> inputs;
    Tensor output;
    std::function<void()> backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape no_grad() {
    Tape t;
    t.enabled_ = false;
    return t;
  }
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  bool enabled() const { return enabled_; }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<OpRecord>& nodes() const { return nodes_; }

  // True when the op should record a backward closure.
  bool wants(std::initializer_list<const Tensor*> inputs) const {
    if (!enabled_) return false;
    return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
  }

  void record(std::string_view kind, std::vector<Tensor> inputs, Tensor output, std::function<void()> backward) {
    if (consumed_) throw ContractError("tape: recording on a tape that already ran backward");
    output.set_requires_grad(true);
    nodes_.push_back(OpRecord{kind, std::move(inputs), std::move(output), std::move(backward)});
  }

  void backward(Tensor loss) {
    if (consumed_) throw ContractError("tape: backward called twice on the same graph");
    if (loss.numel() != 1) throw ContractError("tape: backward needs a scalar loss, got " + shape_str(loss.shape()));

    std::unordered_set<const void*> produced;
    for (const auto& n : nodes_) produced.insert(n.output.id());
    for (const auto& n : nodes_) {
      for (const auto& in : n.inputs) {
        if (in.requires_grad() && !produced.count(in.id()) && in.has_grad()) {
          throw ContractError("tape: leaf gradient not reset before backward");
        }
      }
    }

    loss.grad_buffer()[0] = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (it->output.has_grad()) it->backward();
    }
    consumed_ = true;
    nodes_.clear();
  }

 private:
  std::vector<OpRecord> nodes_;
  bool enabled_ = true;
  bool consumed_ = false;
};

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapConstMat = Eigen::Map<const RowMat>;

inline MapConstMat cmat(std::span<const double> s, Eigen::Index r, Eigen::Index c, std::size_t offset = 0) {
  return MapConstMat(s.data() + offset, r, c);
}
inline MapMat mmat(std::span<double> s, Eigen::Index r, Eigen::Index c, std::size_t offset = 0) {
  return MapMat(s.data() + offset, r, c);
}
inline MapMat mmat(Buffer& s, Eigen::Index r, Eigen::Index c, std::size_t offset = 0) {
  return MapMat(s.data() + offset, r, c);
}

struct ConvDims {
  std::size_t n, c, h, w, k, kh, kw, stride, pad, ho, wo;
  std::size_t patch() const { return c * kh * kw; }
  std::size_t positions() const { return ho * wo; }
};

inline void im2col(const double* img, const ConvDims& d, double* col) {
  const std::size_t p = d.positions();
  for (std::size_t c = 0; c < d.c; ++c) {
    for (std::size_t u = 0; u < d.kh; ++u) {
      for (std::size_t v = 0; v < d.kw; ++v) {
        double* row = col + ((c * d.kh + u) * d.kw + v) * p;
        for (std::size_t i = 0; i < d.ho; ++i) {
          const auto y = static_cast<std::ptrdiff_t>(i * d.stride + u) - static_cast<std::ptrdiff_t>(d.pad);
          double* out = row + i * d.wo;
          if (y < 0 || y >= static_cast<std::ptrdiff_t>(d.h)) {
            std::fill(out, out + d.wo, 0.0);
            continue;
          }
          const double* src = img + (c * d.h + static_cast<std::size_t>(y)) * d.w;
          for (std::size_t j = 0; j < d.wo; ++j) {
            const auto x = static_cast<std::ptrdiff_t>(j * d.stride + v) - static_cast<std::ptrdiff_t>(d.pad);
            out[j] = (x < 0 || x >= static_cast<std::ptrdiff_t>(d.w)) ? 0.0 : src[x];
          }
        }
      }
    }
  }
}

inline void col2im_add(const double* col, const ConvDims& d, double* img) {
  const std::size_t p = d.positions();
  for (std::size_t c = 0; c < d.c; ++c) {
    for (std::size_t u = 0; u < d.kh; ++u) {
      for (std::size_t v = 0; v < d.kw; ++v) {
        const double* row = col + ((c * d.kh + u) * d.kw + v) * p;
        for (std::size_t i = 0; i < d.ho; ++i) {
          const auto y = static_cast<std::ptrdiff_t>(i * d.stride + u) - static_cast<std::ptrdiff_t>(d.pad);
          if (y < 0 || y >= static_cast<std::ptrdiff_t>(d.h)) continue;
          double* dst = img + (c * d.h + static_cast<std::size_t>(y)) * d.w;
          for (std::size_t j = 0; j < d.wo; ++j) {
            const auto x = static_cast<std::ptrdiff_t>(j * d.stride + v) - static_cast<std::ptrdiff_t>(d.pad);
            if (x >= 0 && x < static_cast<std::ptrdiff_t>(d.w)) dst[x] += row[i * d.wo + j];
          }
        }
      }
    }
  }
}

inline void require_rank(const Tensor& t, std::size_t rank, std::string_view op, std::string_view what) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": " + std::string(what) + " must have rank " + std::to_string(rank) +
                         ", got " + shape_str(t.shape()));
  }
}

}  // namespace detail

struct ConvGeometry {
  std::size_t stride = 1;
  std::size_t pad = 0;
};

/// Output side length of a strided, zero-padded convolution. Throws
/// GeometryError when the window does not tile the padded input exactly.
inline std::size_t conv_output_size(std::size_t in, std::size_t kernel, ConvGeometry g, std::string_view axis = "height") {
  if (g.stride == 0) throw GeometryError("conv2d: stride must be positive");
  if (in + 2 * g.pad < kernel) {
    throw GeometryError("conv2d: kernel larger than padded input along " + std::string(axis));
  }
  if ((in + 2 * g.pad - kernel) % g.stride != 0) {
    throw GeometryError("conv2d: stride " + std::to_string(g.stride) + " does not divide padded " +
                        std::string(axis) + " span");
  }
  return (in + 2 * g.pad - kernel) / g.stride + 1;
}

/// 2-D cross-correlation over [N,C,H,W] with weight [K,C,kh,kw] and bias [K].
/// Lowered to im2col + GEMM per image; the column buffer is rebuilt in
/// backward instead of being kept alive.
inline Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& weight, const Tensor& bias, ConvGeometry g) {
  detail::require_rank(input, 4, "conv2d", "input");
  detail::require_rank(weight, 4, "conv2d", "weight");
  detail::require_rank(bias, 1, "conv2d", "bias");
  if (input.dim(1) != weight.dim(1)) {
    throw DimensionError("conv2d: channel axis (1) mismatch: input has " + std::to_string(input.dim(1)) +
                         ", weight expects " + std::to_string(weight.dim(1)));
  }
  if (bias.dim(0) != weight.dim(0)) {
    throw DimensionError("conv2d: bias axis (0) has " + std::to_string(bias.dim(0)) + " entries for " +
                         std::to_string(weight.dim(0)) + " kernels");
  }
  detail::ConvDims d{};
  d.n = input.dim(0);
  d.c = input.dim(1);
  d.h = input.dim(2);
  d.w = input.dim(3);
  d.k = weight.dim(0);
  d.kh = weight.dim(2);
  d.kw = weight.dim(3);
  d.stride = g.stride;
  d.pad = g.pad;
  d.ho = conv_output_size(d.h, d.kh, g, "height");
  d.wo = conv_output_size(d.w, d.kw, g, "width");

  const auto K = static_cast<Eigen::Index>(d.k);
  const auto CKK = static_cast<Eigen::Index>(d.patch());
  const auto P = static_cast<Eigen::Index>(d.positions());
  const std::size_t in_stride = d.c * d.h * d.w;
  const std::size_t out_stride = d.k * d.positions();

  Tensor out(Shape{d.n, d.k, d.ho, d.wo});
  Buffer col(d.patch() * d.positions());
  auto W = detail::cmat(weight.data(), K, CKK);
  auto B = Eigen::Map<const Eigen::VectorXd>(bias.data().data(), K);
  for (std::size_t n = 0; n < d.n; ++n) {
    detail::im2col(input.data().data() + n * in_stride, d, col.data());
    auto O = detail::mmat(out.data(), K, P, n * out_stride);
    O.noalias() = W * detail::cmat(col, CKK, P);
    O.colwise() += B;
  }

  if (tape.wants({&input, &weight, &bias})) {
    tape.record("conv2d", {input, weight, bias}, out, [input, weight, bias, out, d]() mutable {
      const auto K = static_cast<Eigen::Index>(d.k);
      const auto CKK = static_cast<Eigen::Index>(d.patch());
      const auto P = static_cast<Eigen::Index>(d.positions());
      const std::size_t in_stride = d.c * d.h * d.w;
      const std::size_t out_stride = d.k * d.positions();
      Buffer col(d.patch() * d.positions());
      Buffer gcol;
      auto W = detail::cmat(weight.data(), K, CKK);
      const auto gout = out.grad();
      for (std::size_t n = 0; n < d.n; ++n) {
        auto gO = detail::cmat(gout, K, P, n * out_stride);
        if (weight.requires_grad()) {
          detail::im2col(input.data().data() + n * in_stride, d, col.data());
          detail::mmat(weight.grad_buffer(), K, CKK).noalias() += gO * detail::cmat(col, CKK, P).transpose();
        }
        if (bias.requires_grad()) {
          Eigen::Map<Eigen::VectorXd>(bias.grad_buffer().data(), K) += gO.rowwise().sum();
        }
        if (input.requires_grad()) {
          gcol.resize(col.size());
          detail::mmat(gcol, CKK, P).noalias() = W.transpose() * gO;
          detail::col2im_add(gcol.data(), d, input.grad_buffer().data() + n * in_stride);
        }
      }
    });
  }
  return out;
}

/// output = input · weightᵀ + bias, input [N,D], weight [M,D], bias [M].
inline Tensor fully_connected(Tape& tape, const Tensor& input, const Tensor& weight, const Tensor& bias) {
  detail::require_rank(input, 2, "fully_connected", "input");
  detail::require_rank(weight, 2, "fully_connected", "weight");
  detail::require_rank(bias, 1, "fully_connected", "bias");
  if (input.dim(1) != weight.dim(1)) {
    throw DimensionError("fully_connected: inner axis mismatch: input has " + std::to_string(input.dim(1)) +
                         " features, weight expects " + std::to_string(weight.dim(1)));
  }
  if (bias.dim(0) != weight.dim(0)) throw DimensionError("fully_connected: bias length does not match output width");
  const auto N = static_cast<Eigen::Index>(input.dim(0));
  const auto D = static_cast<Eigen::Index>(input.dim(1));
  const auto M = static_cast<Eigen::Index>(weight.dim(0));

  Tensor out(Shape{input.dim(0), weight.dim(0)});
  auto O = detail::mmat(out.data(), N, M);
  O.noalias() = detail::cmat(input.data(), N, D) * detail::cmat(weight.data(), M, D).transpose();
  O.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.data().data(), M);

  if (tape.wants({&input, &weight, &bias})) {
    tape.record("fully_connected", {input, weight, bias}, out, [input, weight, bias, out, N, D, M]() mutable {
      auto gO = detail::cmat(out.grad(), N, M);
      if (input.requires_grad()) {
        detail::mmat(input.grad_buffer(), N, D).noalias() += gO * detail::cmat(weight.data(), M, D);
      }
      if (weight.requires_grad()) {
        detail::mmat(weight.grad_buffer(), M, D).noalias() += gO.transpose() * detail::cmat(input.data(), N, D);
      }
      if (bias.requires_grad()) {
        Eigen::Map<Eigen::RowVectorXd>(bias.grad_buffer().data(), M) += gO.colwise().sum();
      }
    });
  }
  return out;
}

/// Per-channel running statistics used by batch_norm in eval mode.
struct BatchNormStats {
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.9;  // running ← momentum·running + (1−momentum)·batch
  double epsilon = 1e-5;

  static BatchNormStats fresh(std::size_t channels) {
    return BatchNormStats{Tensor(Shape{channels}, 0.0), Tensor(Shape{channels}, 1.0)};
  }
};

inline Tensor batch_norm(Tape& tape, const Tensor& input, const Tensor& gamma, const Tensor& beta, BatchNormStats& stats,
                         Mode mode) {
  if (input.rank() < 2) throw DimensionError("batch_norm: input needs a channel axis, got " + shape_str(input.shape()));
  const std::size_t N = input.dim(0);
  const std::size_t C = input.dim(1);
  if (gamma.numel() != C || beta.numel() != C || stats.running_mean.numel() != C || stats.running_var.numel() != C) {
    throw DimensionError("batch_norm: channel axis (1) has " + std::to_string(C) +
                         " channels but parameters disagree");
  }
  if (mode == Mode::train && N < 2) {
    throw BatchSizeError("batch_norm: train mode needs batch size >= 2, got " + std::to_string(N));
  }
  const std::size_t S = input.numel() / (N * C);
  const double m = static_cast<double>(N * S);

  std::vector<double> mean(C), inv_std(C);
  const auto x = input.data();
  if (mode == Mode::train) {
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < S; ++i) s += x[(n * C + c) * S + i];
      const double mu = s / m;
      double v = 0.0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < S; ++i) {
          const double dlt = x[(n * C + c) * S + i] - mu;
          v += dlt * dlt;
        }
      v /= m;
      mean[c] = mu;
      inv_std[c] = 1.0 / std::sqrt(v + stats.epsilon);
      const double unbiased = m > 1.0 ? v * m / (m - 1.0) : v;
      stats.running_mean[c] = stats.momentum * stats.running_mean[c] + (1.0 - stats.momentum) * mu;
      stats.running_var[c] = stats.momentum * stats.running_var[c] + (1.0 - stats.momentum) * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = stats.running_mean[c];
      inv_std[c] = 1.0 / std::sqrt(stats.running_var[c] + stats.epsilon);
    }
  }

  Tensor out(input.shape());
  std::vector<double> xhat(input.numel());
  auto y = out.data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < S; ++i) {
        const std::size_t k = (n * C + c) * S + i;
        xhat[k] = (x[k] - mean[c]) * inv_std[c];
        y[k] = gamma[c] * xhat[k] + beta[c];
      }

  if (tape.wants({&input, &gamma, &beta})) {
    tape.record("batch_norm", {input, gamma, beta}, out,
                [input, gamma, beta, out, xhat = std::move(xhat), inv_std, N, C, S, m, mode]() mutable {
                  const auto gy = out.grad();
                  for (std::size_t c = 0; c < C; ++c) {
                    double sum_g = 0.0, sum_gx = 0.0;
                    for (std::size_t n = 0; n < N; ++n)
                      for (std::size_t i = 0; i < S; ++i) {
                        const std::size_t k = (n * C + c) * S + i;
                        sum_g += gy[k];
                        sum_gx += gy[k] * xhat[k];
                      }
                    if (gamma.requires_grad()) gamma.grad_buffer()[c] += sum_gx;
                    if (beta.requires_grad()) beta.grad_buffer()[c] += sum_g;
                    if (!input.requires_grad()) continue;
                    auto& gx = input.grad_buffer();
                    const double g = gamma[c];
                    for (std::size_t n = 0; n < N; ++n)
                      for (std::size_t i = 0; i < S; ++i) {
                        const std::size_t k = (n * C + c) * S + i;
                        if (mode == Mode::train) {
                          // dx = γ/σ · (dy − mean(dy) − x̂·mean(dy·x̂))
                          gx[k] += g * inv_std[c] * (gy[k] - sum_g / m - xhat[k] * sum_gx / m);
                        } else {
                          gx[k] += g * inv_std[c] * gy[k];
                        }
                      }
                  }
                });
  }
  return out;
}

namespace detail {

template <class Fwd, class Deriv>
Tensor unary(Tape& tape, std::string_view kind, const Tensor& input, Fwd fwd, Deriv deriv) {
  Tensor out(input.shape());
  auto x = input.data();
  auto y = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = fwd(x[i]);
  if (tape.wants({&input})) {
    tape.record(kind, {input}, out, [input, out, deriv]() mutable {
      auto& gx = input.grad_buffer();
      const auto gy = out.grad();
      const auto xs = input.data();
      const auto ys = out.data();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * deriv(xs[i], ys[i]);
    });
  }
  return out;
}

}  // namespace detail

inline double sigmoid_value(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Tensor relu(Tape& tape, const Tensor& input) {
  return detail::unary(
      tape, "relu", input, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor sigmoid(Tape& tape, const Tensor& input) {
  return detail::unary(
      tape, "sigmoid", input, [](double x) { return sigmoid_value(x); },
      [](double, double y) { return y * (1.0 - y); });
}

/// Inverted dropout. Eval mode returns the input handle unchanged.
inline Tensor dropout(Tape& tape, const Tensor& input, double p, Mode mode, Rng* rng) {
  if (!(p >= 0.0 && p < 1.0)) throw ContractError("dropout: probability must lie in [0,1)");
  if (mode == Mode::eval || p == 0.0) return input;
  if (rng == nullptr) throw ContractError("dropout: train mode needs a random engine");
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const double keep_scale = 1.0 / (1.0 - p);
  std::vector<double> mask(input.numel());
  for (auto& v : mask) v = unif(*rng) < p ? 0.0 : keep_scale;
  Tensor out(input.shape());
  auto x = input.data();
  auto y = out.data();
  for (std::size_t i = 0; i < mask.size(); ++i) y[i] = x[i] * mask[i];
  if (tape.wants({&input})) {
    tape.record("dropout", {input}, out, [input, out, mask = std::move(mask)]() mutable {
      auto& gx = input.grad_buffer();
      const auto gy = out.grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * mask[i];
    });
  }
  return out;
}

/// Joins tensors along `axis`; all other axes must agree.
inline Tensor concat(Tape& tape, const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw DimensionError("concat: axis " + std::to_string(axis) + " out of range");
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != first.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t a = 0; a < first.size(); ++a) {
      if (a != axis && p.dim(a) != first[a]) {
        throw DimensionError("concat: axis " + std::to_string(a) + " mismatch (" + std::to_string(p.dim(a)) + " vs " +
                             std::to_string(first[a]) + ")");
      }
    }
    out_shape[axis] += p.dim(axis);
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t a = 0; a < axis; ++a) outer *= first[a];
  for (std::size_t a = axis + 1; a < first.size(); ++a) inner *= first[a];

  Tensor out(out_shape);
  auto y = out.data();
  const std::size_t row = out_shape[axis] * inner;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t chunk = p.dim(axis) * inner;
    auto x = p.data();
    for (std::size_t o = 0; o < outer; ++o) std::copy_n(x.data() + o * chunk, chunk, y.data() + o * row + offset);
    offset += chunk;
  }

  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (tape.enabled() && any) {
    tape.record("concat", parts, out, [parts, out, outer, inner, row, axis]() mutable {
      const auto gy = out.grad();
      std::size_t offset = 0;
      for (auto& p : parts) {
        const std::size_t chunk = p.dim(axis) * inner;
        if (p.requires_grad()) {
          auto& gx = p.grad_buffer();
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < chunk; ++i) gx[o * chunk + i] += gy[o * row + offset + i];
        }
        offset += chunk;
      }
    });
  }
  return out;
}

inline Tensor reshape(Tape& tape, const Tensor& input, Shape shape) {
  if (shape_numel(shape) != input.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(input.shape()) + " as " + shape_str(shape));
  }
  Tensor out(std::move(shape), std::vector<double>(input.data().begin(), input.data().end()));
  if (tape.wants({&input})) {
    tape.record("reshape", {input}, out, [input, out]() mutable {
      auto& gx = input.grad_buffer();
      const auto gy = out.grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i];
    });
  }
  return out;
}

/// [N, ...] → [N, prod(...)]
inline Tensor flatten(Tape& tape, const Tensor& input) {
  return reshape(tape, input, Shape{input.dim(0), input.numel() / input.dim(0)});
}

inline Tensor sum(Tape& tape, const Tensor& input) {
  double s = 0.0;
  for (double v : input.data()) s += v;
  Tensor out = Tensor::scalar(s);
  if (tape.wants({&input})) {
    tape.record("sum", {input}, out, [input, out]() mutable {
      const double g = out.grad()[0];
      for (auto& v : input.grad_buffer()) v += g;
    });
  }
  return out;
}

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, std::string_view op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

}  // namespace detail

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] + b[i];
  if (tape.wants({&a, &b})) {
    tape.record("add", {a, b}, out, [a, b, out]() mutable {
      const auto gy = out.grad();
      if (a.requires_grad()) {
        auto& ga = a.grad_buffer();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i];
      }
      if (b.requires_grad()) {
        auto& gb = b.grad_buffer();
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gy[i];
      }
    });
  }
  return out;
}

/// Elementwise product.
inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] * b[i];
  if (tape.wants({&a, &b})) {
    tape.record("mul", {a, b}, out, [a, b, out]() mutable {
      const auto gy = out.grad();
      // Both branches may target the same node (x·x); each adds its share.
      if (a.requires_grad()) {
        auto& ga = a.grad_buffer();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i] * b[i];
      }
      if (b.requires_grad()) {
        auto& gb = b.grad_buffer();
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gy[i] * a[i];
      }
    });
  }
  return out;
}

}  // namespace mtask
