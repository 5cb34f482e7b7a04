#pragma once

#include <cstddef>
#include <functional>
#include <new>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mtask {

// Error taxonomy shared by every module.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class GeometryError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class BatchSizeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Every buffer starts on a 64-byte boundary. Vectorised Eigen reductions
/// peel a data-dependent number of leading elements, so summation order
/// (and the low bits of the result) would otherwise follow malloc's choice.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <class U>
  friend bool operator==(const AlignedAllocator&, const AlignedAllocator<U>&) noexcept {
    return true;
  }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

namespace detail {

struct TensorNode {
  Shape shape;
  Buffer data;
  Buffer grad;  // empty until a backward pass reaches the node
  bool requires_grad = false;
};

}  // namespace detail

/// Reference-counted handle to a float64 n-d array. Copies of a Tensor share
/// storage, which is how the siamese towers share the trunk weights. Use
/// clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false)
      : node_(std::make_shared<detail::TensorNode>()) {
    check_shape(shape);
    node_->data.assign(shape_numel(shape), fill);
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : node_(std::make_shared<detail::TensorNode>()) {
    check_shape(shape);
    if (shape_numel(shape) != values.size()) {
      throw DimensionError("tensor: shape " + shape_str(shape) + " holds " +
                           std::to_string(shape_numel(shape)) + " values, got " +
                           std::to_string(values.size()));
    }
    node_->shape = std::move(shape);
    node_->data.assign(values.begin(), values.end());
    node_->requires_grad = requires_grad;
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor(Shape{1}, std::vector<double>{v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const void* id() const { return node_.get(); }
  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

  const Shape& shape() const { return node().shape; }
  std::size_t rank() const { return node().shape.size(); }
  std::size_t dim(std::size_t axis) const {
    if (axis >= rank()) throw DimensionError("tensor: axis " + std::to_string(axis) + " out of range");
    return node().shape[axis];
  }
  std::size_t numel() const { return node().data.size(); }

  std::span<double> data() { return node().data; }
  std::span<const double> data() const { return node().data; }
  double& operator[](std::size_t i) { return node().data[i]; }
  double operator[](std::size_t i) const { return node().data[i]; }

  double item() const {
    if (numel() != 1) throw ContractError("tensor: item() on tensor of shape " + shape_str(shape()));
    return node().data[0];
  }

  bool requires_grad() const { return node().requires_grad; }
  void set_requires_grad(bool v) { node().requires_grad = v; }

  bool has_grad() const { return !node().grad.empty(); }
  std::span<const double> grad() const { return node().grad; }
  std::span<double> grad() { return node().grad; }

  // Gradient storage, zero-initialised on first access.
  Buffer& grad_buffer() const {
    auto& n = node();
    if (n.grad.empty()) n.grad.assign(n.data.size(), 0.0);
    return n.grad;
  }

  void zero_grad() const {
    node().grad.clear();
    node().grad.shrink_to_fit();
  }

  Tensor clone() const {
    Tensor t(shape(), 0.0, requires_grad());
    t.node().data = node().data;
    return t;
  }

 private:
  static void check_shape(const Shape& shape) {
    for (auto d : shape) {
      if (d == 0) throw DimensionError("tensor: zero-sized axis in shape " + shape_str(shape));
    }
  }

  detail::TensorNode& node() const {
    if (!node_) throw ContractError("tensor: use of undefined tensor");
    return *node_;
  }

  std::shared_ptr<detail::TensorNode> node_;
};

}  // namespace mtask
