#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace qart {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {
struct TensorImpl;
}

/// Dense row-major tensor of doubles with reverse-mode autodiff.
///
/// A Tensor is a shared handle: copies alias the same storage and graph
/// node. Use clone() for an independent leaf.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double value);

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  /// Mutable view for initialisation and optimiser updates. Writing into a
  /// tensor that is part of a live graph invalidates saved values.
  std::span<double> mutable_data();
  double item() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag);
  bool is_leaf() const;

  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  /// Reverse-mode sweep from a single-element tensor.
  void backward() const;

  /// Independent leaf copy without graph history.
  Tensor clone() const;
  /// Leaf that shares nothing with the graph; requires_grad is false.
  Tensor detach() const;

  bool same_storage(const Tensor& other) const noexcept { return impl_ == other.impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  const detail::TensorImpl& impl() const;
  detail::TensorImpl& impl();

  std::shared_ptr<detail::TensorImpl> impl_;

  friend class GradTape;
  friend Tensor make_result(std::string_view, Shape, std::vector<double>, std::vector<Tensor>,
                            std::function<void(std::span<const double>, std::span<const double>)>);
  friend void accumulate_grad(const Tensor&, std::span<const double>);
};

/// A tensor with a stable name, used for parameter listings and checkpoints.
struct NamedTensor {
  std::string name;
  Tensor value;
};

/// Backward rule: receives the upstream gradient and the forward output.
using BackwardRule = std::function<void(std::span<const double> grad_out, std::span<const double> out)>;

/// Builds an op result. When grad mode is on and any input requires grad, the
/// result is recorded as a graph node whose backward rule is `backward`.
Tensor make_result(std::string_view op, Shape shape, std::vector<double> values,
                   std::vector<Tensor> inputs, BackwardRule backward);

/// Adds `grad` into the gradient buffer of `t` when t requires grad.
void accumulate_grad(const Tensor& t, std::span<const double> grad);

bool grad_enabled() noexcept;

/// Disables graph recording for the lifetime of the guard (thread-local).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

struct TapeEntry {
  std::uint64_t sequence;
  std::string op;
};

/// Ordered record of the operations reachable from a root, in forward
/// execution order. backward() replays it in exact reverse.
class GradTape {
 public:
  static GradTape record(const Tensor& root);

  const std::vector<TapeEntry>& entries() const noexcept { return entries_; }

  /// Seeds d(root)/d(root) = 1 and runs every backward rule in reverse
  /// forward order. `visit` is called before each rule runs.
  void backward(const std::function<void(const TapeEntry&)>& visit = {}) const;

 private:
  Tensor root_;
  std::vector<std::shared_ptr<detail::TensorImpl>> nodes_;
  std::vector<TapeEntry> entries_;
};

}  // namespace qart
