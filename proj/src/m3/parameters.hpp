#pragma once

#include <cmath>
#include <cstddef>
#include <deque>
#include <random>
#include <string>
#include <unordered_map>

#include "m3/error.hpp"
#include "m3/tensor.hpp"

namespace m3 {

// Named parameters with stable addresses, kept in creation order.
template <class Real>
class ParameterSet {
 public:
  ParameterSet() = default;
  ParameterSet(const ParameterSet&) = delete;
  ParameterSet& operator=(const ParameterSet&) = delete;

  Parameter<Real>& add(const std::string& name, Shape shape) {
    if (index_.count(name)) fail(ErrorCode::internal, "duplicate parameter " + name);
    params_.emplace_back(name, BasicTensor<Real>(std::move(shape)));
    index_[name] = params_.size() - 1;
    return params_.back();
  }

  Parameter<Real>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
  }
  const Parameter<Real>* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
  }

  std::size_t size() const noexcept { return params_.size(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

 private:
  std::deque<Parameter<Real>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Glorot-uniform for matrices; vectors (biases) stay zero.
template <class Real>
void init_glorot(Parameter<Real>& p, std::mt19937_64& rng) {
  if (p.value.rank() != 2) return;
  const double fan = static_cast<double>(p.value.shape()[0] + p.value.shape()[1]);
  const double a = std::sqrt(6.0 / fan);
  std::uniform_real_distribution<double> u(-a, a);
  for (auto& v : p.value.values()) v = static_cast<Real>(u(rng));
}

}  // namespace m3
