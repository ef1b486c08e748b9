#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "zssrt/errors.hpp"

namespace zssrt {

// Adam with bias correction and no weight decay. Each group has its own base
// learning rate; step() takes a global multiplier for schedules.
template <typename Real>
class Adam {
 public:
  Adam(double beta1 = 0.9, double beta2 = 0.99, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void add_group(std::string name, std::span<Real> params, double lr) {
    groups_.push_back({std::move(name), params, lr, std::vector<Real>(params.size()),
                       std::vector<Real>(params.size())});
  }

  std::size_t group_count() const { return groups_.size(); }
  int steps() const { return t_; }

  void step(const std::vector<std::span<const Real>>& grads, double lr_scale = 1.0) {
    if (grads.size() != groups_.size())
      throw ShapeError("Adam::step: gradient groups do not match parameter groups");
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, t_);
    const double c2 = 1.0 - std::pow(beta2_, t_);
    const Real b1 = Real(beta1_), b2 = Real(beta2_);
    for (std::size_t gi = 0; gi < groups_.size(); ++gi) {
      Group& g = groups_[gi];
      const auto& grad = grads[gi];
      if (grad.size() != g.params.size())
        throw ShapeError("Adam::step: size mismatch in group " + g.name);
      const Real step_size = Real(g.lr * lr_scale / c1);
      const Real inv_c2 = Real(1.0 / c2);
      const Real eps = Real(eps_);
      Real* p = g.params.data();
      Real* m = g.m.data();
      Real* v = g.v.data();
      const Real* d = grad.data();
      const std::size_t n = g.params.size();
      for (std::size_t i = 0; i < n; ++i) {
        m[i] = b1 * m[i] + (Real(1) - b1) * d[i];
        v[i] = b2 * v[i] + (Real(1) - b2) * d[i] * d[i];
        p[i] -= step_size * m[i] / (std::sqrt(v[i] * inv_c2) + eps);
      }
    }
  }

 private:
  struct Group {
    std::string name;
    std::span<Real> params;
    double lr;
    std::vector<Real> m, v;
  };
  double beta1_, beta2_, eps_;
  int t_ = 0;
  std::vector<Group> groups_;
};

}  // namespace zssrt
