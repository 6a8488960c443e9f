#pragma once

#include <vector>

#include "qart/tensor.hpp"

namespace qart {

/// Parameters sharing one learning rate.
struct ParamGroup {
  std::vector<Tensor> params;
  double lr = 1e-5;
};

/// Plain gradient descent. Parameters without a gradient are left untouched.
class Sgd {
 public:
  explicit Sgd(std::vector<ParamGroup> groups);
  void step();
  void zero_grad();

 private:
  std::vector<ParamGroup> groups_;
};

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam. Only tensors registered in a group are ever written.
class Adam {
 public:
  explicit Adam(std::vector<ParamGroup> groups, AdamOptions options = {});
  void step();
  void zero_grad();
  std::size_t steps() const noexcept { return t_; }
  /// Multiplies every group's base learning rate by `factor` from now on.
  void set_lr_scale(double factor) noexcept { lr_scale_ = factor; }

 private:
  struct Slot {
    std::vector<double> m, v;
  };
  std::vector<ParamGroup> groups_;
  std::vector<std::vector<Slot>> slots_;
  AdamOptions opt_;
  std::size_t t_ = 0;
  double lr_scale_ = 1.0;
};

}  // namespace qart
