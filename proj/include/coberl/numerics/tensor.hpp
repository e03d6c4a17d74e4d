#pragma once

#include <cstddef>
#include <initializer_list>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace coberl::numerics {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Cache-line aligned so vectorised kernels take the same path for every buffer
/// and repeated evaluations agree bit for bit.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

/// Dense row-major array of doubles.
///
/// The autodiff tape only ever sees rank-2 tensors; higher ranks appear at
/// module boundaries (observations are [H, W, C]) and are flattened on entry.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor zeros(std::size_t rows, std::size_t cols) { return Tensor({rows, cols}); }
  static Tensor row(std::initializer_list<double> values);
  static Tensor row(std::span<const double> values);
  static Tensor scalar(double value) { return Tensor({1, 1}, value); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  /// Rank-2 accessors. Rank-1 tensors are viewed as a single row.
  std::size_t rows() const {
    if (shape_.size() == 2) return shape_[0];
    if (shape_.size() == 1) return 1;
    if (shape_.empty()) return 0;
    rank_error();
  }
  std::size_t cols() const {
    if (shape_.size() == 2) return shape_[1];
    if (shape_.size() == 1) return shape_[0];
    if (shape_.empty()) return 0;
    rank_error();
  }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }

  /// Same values, new shape with an equal element count.
  Tensor reshaped(Shape shape) const;

  bool all_finite() const noexcept;
  void fill(double value);

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  [[noreturn]] void rank_error() const;

  Shape shape_;
  std::vector<double, AlignedAllocator<double>> data_;
};

double max_abs(const Tensor& t);
double sum_of_squares(const Tensor& t);

}  // namespace coberl::numerics
