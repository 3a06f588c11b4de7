#include "m3/tensor.hpp"

#include <cmath>
#include <functional>
#include <numeric>

#include "m3/error.hpp"

namespace m3 {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

namespace {
void check_extents(const Shape& shape) {
  for (auto extent : shape) {
    if (extent == 0) {
      fail(ErrorCode::shape_mismatch,
           "tensor extents must be positive, got " + shape_string(shape));
    }
  }
}
}  // namespace

template <class Real>
BasicTensor<Real>::BasicTensor(Shape shape, Real fill)
    : shape_(std::move(shape)) {
  check_extents(shape_);
  values_.assign(shape_size(shape_), fill);
}

template <class Real>
BasicTensor<Real>::BasicTensor(Shape shape, std::vector<Real> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  check_extents(shape_);
  if (shape_size(shape_) != values_.size()) {
    fail(ErrorCode::shape_mismatch,
         "tensor of shape " + shape_string(shape_) + " needs " +
             std::to_string(shape_size(shape_)) + " values, got " +
             std::to_string(values_.size()));
  }
}

template <class Real>
std::size_t BasicTensor<Real>::rows() const noexcept {
  if (shape_.size() <= 1) return 1;
  return values_.size() / shape_.back();
}

template <class Real>
std::size_t BasicTensor<Real>::cols() const noexcept {
  return shape_.empty() ? 0 : shape_.back();
}

template <class Real>
void BasicTensor<Real>::fill(Real value) noexcept {
  std::fill(values_.begin(), values_.end(), value);
}

template <class Real>
bool all_finite(std::span<const Real> values) noexcept {
  for (Real v : values) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

template <class Real>
bool BasicTensor<Real>::all_finite() const noexcept {
  return m3::all_finite<Real>(values_);
}

template class BasicTensor<double>;
template class BasicTensor<float>;
template bool all_finite<double>(std::span<const double>) noexcept;
template bool all_finite<float>(std::span<const float>) noexcept;

}  // namespace m3
