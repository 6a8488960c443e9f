#include "qart/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <numeric>
#include <unordered_set>

#include "qart/errors.hpp"

namespace qart {

namespace detail {

struct GradNode {
  std::uint64_t sequence = 0;
  std::string op;
  std::vector<Tensor> inputs;
  BackwardRule backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::unique_ptr<GradNode> node;
};

}  // namespace detail

namespace {

thread_local bool g_grad_enabled = true;
std::atomic<std::uint64_t> g_sequence{0};

void check_extents(const Shape& shape) {
  for (auto e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_string(shape));
  }
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Tensor::Tensor(Shape shape, double fill) : impl_(std::make_shared<detail::TensorImpl>()) {
  check_extents(shape);
  impl_->data.assign(shape_numel(shape), fill);
  impl_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : impl_(std::make_shared<detail::TensorImpl>()) {
  check_extents(shape);
  if (values.size() != shape_numel(shape)) {
    throw DimensionError("data length " + std::to_string(values.size()) + " does not match shape " +
                         shape_string(shape));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{1}, std::vector<double>{value}); }

const detail::TensorImpl& Tensor::impl() const {
  if (!impl_) throw DimensionError("use of undefined tensor");
  return *impl_;
}

detail::TensorImpl& Tensor::impl() {
  if (!impl_) throw DimensionError("use of undefined tensor");
  return *impl_;
}

const Shape& Tensor::shape() const { return impl().shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw DimensionError("axis out of range for shape " + shape_string(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return impl().data.size(); }

std::span<const double> Tensor::data() const { return impl().data; }

std::span<double> Tensor::mutable_data() { return impl().data; }

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_string(shape()));
  return impl().data[0];
}

bool Tensor::requires_grad() const { return impl().requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
  impl().requires_grad = flag;
  return *this;
}

bool Tensor::is_leaf() const { return impl().node == nullptr; }

bool Tensor::has_grad() const { return !impl().grad.empty(); }

std::span<const double> Tensor::grad() const { return impl().grad; }

void Tensor::zero_grad() { impl().grad.clear(); }

void Tensor::backward() const { GradTape::record(*this).backward(); }

Tensor Tensor::clone() const {
  Tensor t(shape(), std::vector<double>(impl().data));
  t.impl_->requires_grad = impl().requires_grad;
  return t;
}

Tensor Tensor::detach() const { return Tensor(shape(), std::vector<double>(impl().data)); }

Tensor make_result(std::string_view op, Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                   BackwardRule backward) {
  Tensor out(std::move(shape), std::move(values));
  if (!g_grad_enabled) return out;
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const Tensor& t) { return t.defined() && t.requires_grad(); });
  if (!any) return out;
  auto node = std::make_unique<detail::GradNode>();
  node->sequence = g_sequence.fetch_add(1, std::memory_order_relaxed);
  node->op = std::string(op);
  node->inputs = std::move(inputs);
  node->backward = std::move(backward);
  out.impl_->requires_grad = true;
  out.impl_->node = std::move(node);
  return out;
}

void accumulate_grad(const Tensor& t, std::span<const double> grad) {
  if (!t.defined() || !t.impl_->requires_grad) return;
  auto& impl = *t.impl_;
  if (grad.size() != impl.data.size()) {
    throw DimensionError("gradient of length " + std::to_string(grad.size()) + " for tensor of shape " +
                         shape_string(impl.shape));
  }
  if (impl.grad.empty()) {
    impl.grad.assign(grad.begin(), grad.end());
  } else {
    for (std::size_t i = 0; i < grad.size(); ++i) impl.grad[i] += grad[i];
  }
}

bool grad_enabled() noexcept { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }

NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

GradTape GradTape::record(const Tensor& root) {
  GradTape tape;
  tape.root_ = root;
  std::unordered_set<const detail::TensorImpl*> seen;
  std::vector<std::shared_ptr<detail::TensorImpl>> stack{root.impl_};
  while (!stack.empty()) {
    auto cur = std::move(stack.back());
    stack.pop_back();
    if (!cur || !seen.insert(cur.get()).second) continue;
    if (!cur->node) continue;
    tape.nodes_.push_back(cur);
    for (const auto& in : cur->node->inputs) {
      if (in.defined() && in.impl_->requires_grad) stack.push_back(in.impl_);
    }
  }
  std::sort(tape.nodes_.begin(), tape.nodes_.end(),
            [](const auto& a, const auto& b) { return a->node->sequence < b->node->sequence; });
  tape.entries_.reserve(tape.nodes_.size());
  for (const auto& n : tape.nodes_) tape.entries_.push_back({n->node->sequence, n->node->op});
  return tape;
}

void GradTape::backward(const std::function<void(const TapeEntry&)>& visit) const {
  if (!root_.defined()) throw DimensionError("backward on undefined tensor");
  if (root_.numel() != 1) {
    throw DimensionError("backward requires a single-element root, got " + shape_string(root_.shape()));
  }
  if (!root_.requires_grad()) return;
  const double one = 1.0;
  accumulate_grad(root_, std::span<const double>(&one, 1));
  for (std::size_t k = nodes_.size(); k-- > 0;) {
    auto& impl = *nodes_[k];
    if (visit) visit(entries_[k]);
    if (impl.grad.empty()) continue;
    impl.node->backward(impl.grad, impl.data);
  }
}

}  // namespace qart
