#include "m3/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "m3/error.hpp"

namespace m3 {

namespace {

template <class Real>
Real evaluate(const LossBuilder<Real>& build) {
  Tape<Real> tape;
  const Var<Real> loss = build(tape);
  if (loss.value().size() != 1) {
    fail(ErrorCode::shape_mismatch, "grad_check: loss must be scalar, got shape " +
                                        shape_string(loss.value().shape()));
  }
  return loss.value()[0];
}

}  // namespace

template <class Real>
double grad_check(const LossBuilder<Real>& build, std::span<Parameter<Real>* const> params,
                  double step) {
  require(step > 0, "grad_check: step must be positive");

  std::vector<BasicTensor<Real>> saved;
  saved.reserve(params.size());
  for (auto* p : params) {
    saved.push_back(p->gradient);
    p->zero_grad();
  }

  Real first = 0;
  {
    Tape<Real> tape;
    const Var<Real> loss = build(tape);
    if (loss.value().size() != 1) {
      fail(ErrorCode::shape_mismatch, "grad_check: loss must be scalar, got shape " +
                                          shape_string(loss.value().shape()));
    }
    first = loss.value()[0];
    tape.backward(loss);
  }
  if (evaluate(build) != first) {
    fail(ErrorCode::invalid_argument,
         "grad_check: loss builder is not deterministic (two evaluations differ)");
  }

  double worst = 0;
  for (auto* p : params) {
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const Real original = p->value[i];
      p->value[i] = original + static_cast<Real>(step);
      const double up = evaluate(build);
      p->value[i] = original - static_cast<Real>(step);
      const double down = evaluate(build);
      p->value[i] = original;
      const double numeric = (up - down) / (2 * step);
      const double analytic = p->gradient[i];
      const double denom = std::max({1.0, std::abs(analytic), std::abs(numeric)});
      worst = std::max(worst, std::abs(analytic - numeric) / denom);
    }
  }

  for (std::size_t k = 0; k < params.size(); ++k) params[k]->gradient = std::move(saved[k]);
  return worst;
}

template double grad_check<double>(const LossBuilder<double>&, std::span<Parameter<double>* const>,
                                   double);
template double grad_check<float>(const LossBuilder<float>&, std::span<Parameter<float>* const>,
                                  double);

}  // namespace m3
