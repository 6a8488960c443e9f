#include "qart/optim.hpp"

#include <cmath>

namespace qart {

Sgd::Sgd(std::vector<ParamGroup> groups) : groups_(std::move(groups)) {}

void Sgd::step() {
  for (auto& g : groups_) {
    for (auto& p : g.params) {
      if (!p.has_grad()) continue;
      const auto grad = p.grad();
      auto data = p.mutable_data();
      for (std::size_t i = 0; i < data.size(); ++i) data[i] -= g.lr * grad[i];
    }
  }
}

void Sgd::zero_grad() {
  for (auto& g : groups_)
    for (auto& p : g.params) p.zero_grad();
}

Adam::Adam(std::vector<ParamGroup> groups, AdamOptions options) : groups_(std::move(groups)), opt_(options) {
  for (const auto& g : groups_) {
    std::vector<Slot> s;
    for (const auto& p : g.params) s.push_back({std::vector<double>(p.numel(), 0.0), std::vector<double>(p.numel(), 0.0)});
    slots_.push_back(std::move(s));
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
  for (std::size_t gi = 0; gi < groups_.size(); ++gi) {
    auto& group = groups_[gi];
    for (std::size_t pi = 0; pi < group.params.size(); ++pi) {
      auto& p = group.params[pi];
      auto& slot = slots_[gi][pi];
      const bool has = p.has_grad();
      const auto grad = p.grad();
      auto data = p.mutable_data();
      for (std::size_t i = 0; i < data.size(); ++i) {
        const double g = has ? grad[i] : 0.0;
        slot.m[i] = opt_.beta1 * slot.m[i] + (1.0 - opt_.beta1) * g;
        slot.v[i] = opt_.beta2 * slot.v[i] + (1.0 - opt_.beta2) * g * g;
        const double mhat = slot.m[i] / bc1;
        const double vhat = slot.v[i] / bc2;
        data[i] -= group.lr * lr_scale_ * mhat / (std::sqrt(vhat) + opt_.eps);
      }
    }
  }
}

void Adam::zero_grad() {
  for (auto& g : groups_)
    for (auto& p : g.params) p.zero_grad();
}

}  // namespace qart
