// SPDX-License-Identifier: Apache-2.0
// AdamW with decoupled weight decay: the decay shrinks the parameter
// directly (p <- p - lr*wd*p) and never enters the moment estimates.

#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "diffpoint/error.hpp"
#include "diffpoint/params.hpp"

namespace diffpoint {

struct AdamWConfig {
  double lr = 2e-4;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class Real>
class AdamWT {
 public:
  struct Slot {
    std::vector<Real> m;  // first moment
    std::vector<Real> v;  // second moment
  };

  explicit AdamWT(AdamWConfig cfg = {}) : cfg_(cfg) {}

  const AdamWConfig& config() const { return cfg_; }
  std::uint64_t step_count() const { return step_; }
  std::map<std::string, Slot>& slots() { return slots_; }
  const std::map<std::string, Slot>& slots() const { return slots_; }
  void set_step_count(std::uint64_t s) { step_ = s; }

  void step(ParamStoreT<Real>& params) {
    // Validate before touching anything: the non-const grad() accessor
    // allocates on demand, which would turn a missing gradient into silent
    // zeros and leave a half-stepped store behind the throw.
    for (const auto& [name, p] : params.map()) {
      if (p.grad().size() != p.size())
        throw ContractError("AdamW: missing gradient for parameter '" + name + "'");
    }
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (auto& [name, p] : params.map()) {
      Slot& slot = slots_[name];
      if (slot.m.size() != p.size()) {
        slot.m.assign(p.size(), Real(0));
        slot.v.assign(p.size(), Real(0));
      }
      Real* w = p.data();
      const Real* g = p.grad().data();
      for (std::size_t i = 0; i < p.size(); ++i) {
        double wi = static_cast<double>(w[i]);
        // decoupled decay, independent of the gradient
        wi -= cfg_.lr * cfg_.weight_decay * wi;
        const double gi = static_cast<double>(g[i]);
        const double m = cfg_.beta1 * slot.m[i] + (1.0 - cfg_.beta1) * gi;
        const double v = cfg_.beta2 * slot.v[i] + (1.0 - cfg_.beta2) * gi * gi;
        slot.m[i] = static_cast<Real>(m);
        slot.v[i] = static_cast<Real>(v);
        wi -= cfg_.lr * (m / bc1) / (std::sqrt(v / bc2) + cfg_.eps);
        w[i] = static_cast<Real>(wi);
      }
    }
  }

 private:
  AdamWConfig cfg_;
  std::uint64_t step_ = 0;
  std::map<std::string, Slot> slots_;
};

using AdamW = AdamWT<float>;

}  // namespace diffpoint
