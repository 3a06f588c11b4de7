#pragma once

#include <functional>
#include <span>

#include "m3/autodiff.hpp"

namespace m3 {

template <class Real>
using LossBuilder = std::function<Var<Real>(Tape<Real>&)>;

// Compares reverse-mode gradients with central differences and returns
// max |analytic - numeric| / max(1, |analytic|, |numeric|) over every entry of
// every parameter. Parameter values and gradients are restored on return.
template <class Real>
double grad_check(const LossBuilder<Real>& build, std::span<Parameter<Real>* const> params,
                  double step = 1e-5);

}  // namespace m3
