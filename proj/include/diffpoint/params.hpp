// SPDX-License-Identifier: Apache-2.0
// Named parameter collection. std::map keeps a stable name order, which the
// optimizer, checkpoints, and gradient checks all rely on.

#pragma once

#include <map>
#include <string>
#include <vector>

#include "diffpoint/error.hpp"
#include "diffpoint/rng.hpp"
#include "diffpoint/tensor.hpp"

namespace diffpoint {

template <class Real>
class ParamStoreT {
 public:
  using Map = std::map<std::string, TensorT<Real>>;

  TensorT<Real>& add(const std::string& name, TensorT<Real> tensor) {
    if (params_.contains(name)) throw ContractError("parameter already registered: " + name);
    auto [it, ok] = params_.emplace(name, std::move(tensor));
    (void)ok;
    return it->second;
  }

  TensorT<Real>& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ContractError("unknown parameter: " + name);
    return it->second;
  }
  const TensorT<Real>& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ContractError("unknown parameter: " + name);
    return it->second;
  }
  bool contains(const std::string& name) const { return params_.contains(name); }

  Map& map() { return params_; }
  const Map& map() const { return params_; }
  std::size_t count() const { return params_.size(); }

  std::size_t total_parameters() const {
    std::size_t n = 0;
    for (const auto& [name, t] : params_) n += t.size();
    return n;
  }

  void zero_grads() {
    for (auto& [name, t] : params_) t.zero_grad();
  }

 private:
  Map params_;
};

using ParamStore = ParamStoreT<float>;

// Truncated-normal-free init: plain normal(0, std). Weights get fan-in scaled
// std, biases and norm offsets start at zero, norm gains at one.
template <class Real>
TensorT<Real> init_normal(Shape shape, double stddev, SeededRng& rng) {
  TensorT<Real> t = TensorT<Real>::zeros(std::move(shape), true);
  for (std::size_t i = 0; i < t.size(); ++i)
    t.data()[i] = static_cast<Real>(rng.normal() * stddev);
  return t;
}

}  // namespace diffpoint
