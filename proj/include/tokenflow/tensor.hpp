#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "tokenflow/error.hpp"

namespace tokenflow {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// Dense row-major tensor of doubles. Value type; copies are deep.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size()) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor vector(std::initializer_list<double> values) {
    return Tensor({values.size()}, std::vector<double>(values));
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    std::size_t r = rows.size();
    std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }

  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.data_[i * n + i] = 1.0;
    return t;
  }

  static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  const double& operator[](std::size_t i) const { return data_[i]; }

  // 2-D access; the tensor must be rank 2.
  double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  const double& at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  std::span<const double> row(std::size_t r) const {
    std::size_t w = row_width();
    return std::span<const double>(data_).subspan(r * w, w);
  }
  std::span<double> row(std::size_t r) {
    std::size_t w = row_width();
    return std::span<double>(data_).subspan(r * w, w);
  }

  // Number of rows when viewed as [rows x last-extent].
  std::size_t rows() const {
    if (shape_.empty()) return 0;
    return shape_size(Shape(shape_.begin(), shape_.end() - 1));
  }
  std::size_t row_width() const { return shape_.empty() ? 0 : shape_.back(); }

  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != data_.size()) {
      throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  double sum() const {
    double s = 0.0;
    for (double v : data_) s += v;
    return s;
  }

  double squared_norm() const {
    double s = 0.0;
    for (double v : data_) s += v * v;
    return s;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": shape " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Stacks two [n x d] tensors along the rows.
inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
    throw DimensionError("concat_rows: " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  std::vector<double> data(a.storage());
  data.insert(data.end(), b.storage().begin(), b.storage().end());
  return Tensor({a.dim(0) + b.dim(0), a.dim(1)}, std::move(data));
}

// SplitMix64 finalizer. Used to derive independent seeds from (seed, tags...).
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

template <typename... Tags>
constexpr std::uint64_t derive_seed(std::uint64_t seed, Tags... tags) {
  std::uint64_t s = mix64(seed);
  ((s = mix64(s ^ static_cast<std::uint64_t>(tags))), ...);
  return s;
}

// Seeded random source. The engine is std::mt19937_64, whose output sequence
// is fixed by the standard; the distributions below are computed from raw
// engine words so results do not depend on the standard library vendor.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }

  // Child stream keyed by (this seed, tags...). Does not advance this stream.
  template <typename... Tags>
  Rng split(Tags... tags) const {
    return Rng(derive_seed(seed_, tags...));
  }

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Rejection sampling removes modulo bias.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw ParameterError("Rng::below: n must be positive");
    std::uint64_t limit = (~std::uint64_t{0}) - (~std::uint64_t{0}) % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  // Standard normal via Box-Muller; one draw per call, no cached spare.
  double normal() {
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  Tensor normal_tensor(Shape shape, double stddev) {
    Tensor t(std::move(shape));
    for (double& v : t.storage()) v = normal() * stddev;
    return t;
  }

  Tensor uniform_tensor(Shape shape, double lo, double hi) {
    Tensor t(std::move(shape));
    for (double& v : t.storage()) v = uniform(lo, hi);
    return t;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace tokenflow
