#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace m3 {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

// Dense row-major array. Rank is usually 1 or 2; "scalar" means a single
// element of shape {1}.
template <class Real>
class BasicTensor {
 public:
  using value_type = Real;

  BasicTensor() = default;
  explicit BasicTensor(Shape shape, Real fill = Real(0));
  BasicTensor(Shape shape, std::vector<Real> values);

  static BasicTensor scalar(Real value) { return BasicTensor({1}, {value}); }
  static BasicTensor matrix(std::size_t rows, std::size_t cols,
                            std::vector<Real> values) {
    return BasicTensor({rows, cols}, std::move(values));
  }
  static BasicTensor vector(std::vector<Real> values) {
    const std::size_t n = values.size();
    return BasicTensor({n}, std::move(values));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  // 2-D view: rank-1 tensors are a single row; higher ranks fold leading axes.
  std::size_t rows() const noexcept;
  std::size_t cols() const noexcept;

  Real* data() noexcept { return values_.data(); }
  const Real* data() const noexcept { return values_.data(); }
  std::span<Real> values() noexcept { return values_; }
  std::span<const Real> values() const noexcept { return values_; }
  std::vector<Real>& storage() noexcept { return values_; }

  Real& operator[](std::size_t i) noexcept { return values_[i]; }
  const Real& operator[](std::size_t i) const noexcept { return values_[i]; }
  Real& at(std::size_t r, std::size_t c) noexcept { return values_[r * cols() + c]; }
  const Real& at(std::size_t r, std::size_t c) const noexcept {
    return values_[r * cols() + c];
  }

  std::span<Real> row(std::size_t r) noexcept {
    return std::span<Real>(values_).subspan(r * cols(), cols());
  }
  std::span<const Real> row(std::size_t r) const noexcept {
    return std::span<const Real>(values_).subspan(r * cols(), cols());
  }

  void fill(Real value) noexcept;
  bool all_finite() const noexcept;

  friend bool operator==(const BasicTensor&, const BasicTensor&) = default;

 private:
  Shape shape_;
  std::vector<Real> values_;
};

using Tensor = BasicTensor<double>;
using TensorF = BasicTensor<float>;

template <class Real>
bool all_finite(std::span<const Real> values) noexcept;

// Parameter: named tensor plus a gradient accumulator of the same shape.
template <class Real>
struct Parameter {
  Parameter(std::string name_, BasicTensor<Real> value_)
      : name(std::move(name_)), value(std::move(value_)),
        gradient(value.shape()) {}

  void zero_grad() noexcept { gradient.fill(Real(0)); }

  std::string name;
  BasicTensor<Real> value;
  BasicTensor<Real> gradient;
};

extern template class BasicTensor<double>;
extern template class BasicTensor<float>;

}  // namespace m3
