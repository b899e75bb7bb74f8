#pragma once

#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "bnn/rng.hpp"

namespace bnn {

/// Dense row-major array of 32-bit floats. Values are immutable once a
/// tensor leaves the operation that built it; every operation below returns
/// a fresh tensor and never mutates its inputs.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int64_t> shape)
      : shape_(std::move(shape)), data_(checked_size(shape_), /*zero=*/true) {}

  Tensor(std::vector<int64_t> shape, const std::vector<float>& data)
      : shape_(std::move(shape)), data_(checked_size(shape_), /*zero=*/false) {
    if (static_cast<int64_t>(data.size()) != data_.n)
      throw std::invalid_argument("Tensor: data length does not match shape");
    std::memcpy(data_.ptr.get(), data.data(), static_cast<size_t>(data_.n) * 4);
  }

  /// Allocation without the zero fill, for operations that overwrite every
  /// output element.
  static Tensor uninitialized(std::vector<int64_t> shape) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = Buffer(checked_size(t.shape_), /*zero=*/false);
    return t;
  }

  static Tensor full(std::vector<int64_t> shape, float value) {
    Tensor t = uninitialized(std::move(shape));
    for (int64_t i = 0; i < t.size(); ++i) t[i] = value;
    return t;
  }

  /// 2-D convenience constructor for tests and small fixtures.
  static Tensor matrix(std::initializer_list<std::initializer_list<float>> rows);

  const std::vector<int64_t>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int64_t size() const { return data_.n; }

  float* data() { return data_.ptr.get(); }
  const float* data() const { return data_.ptr.get(); }

  float& operator[](int64_t i) { return data_.ptr[i]; }
  float operator[](int64_t i) const { return data_.ptr[i]; }

  /// Row-major element access by multi-index.
  float at(std::initializer_list<int64_t> idx) const;

  /// Same data, new shape (element counts must agree). The rvalue overload
  /// moves the buffer instead of copying it.
  Tensor reshaped(std::vector<int64_t> new_shape) const&;
  Tensor reshaped(std::vector<int64_t> new_shape) &&;

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  /// Number of rows when viewed as (rows, last-dim) — the layout used by
  /// Dense layers on inputs of any rank.
  int64_t rows_flat() const { return last_dim() == 0 ? 0 : size() / last_dim(); }
  int64_t last_dim() const { return shape_.empty() ? 0 : shape_.back(); }

 private:
  struct Buffer {
    std::unique_ptr<float[]> ptr;
    int64_t n = 0;

    Buffer() = default;
    Buffer(int64_t count, bool zero)
        : ptr(zero ? new float[static_cast<size_t>(count)]()
                   : new float[static_cast<size_t>(count)]),
          n(count) {}
    Buffer(const Buffer& other)
        : ptr(other.n ? new float[static_cast<size_t>(other.n)] : nullptr), n(other.n) {
      if (other.n)
        std::memcpy(ptr.get(), other.ptr.get(), static_cast<size_t>(other.n) * 4);
    }
    Buffer& operator=(const Buffer& other) {
      if (this != &other) *this = Buffer(other);
      return *this;
    }
    Buffer(Buffer&&) = default;
    Buffer& operator=(Buffer&&) = default;
  };

  static int64_t checked_size(const std::vector<int64_t>& shape);

  std::vector<int64_t> shape_;
  Buffer data_;
};

std::string shape_string(const std::vector<int64_t>& shape);

/// Throws if any element is NaN or infinite; `context` names the producer.
void ensure_finite(const Tensor& t, const std::string& context);
bool all_finite(const Tensor& t);

// ---- linear algebra ------------------------------------------------------

/// Matrix product a[m×k] · b[k×n]. Each output element accumulates over k in
/// ascending order, so results are bit-for-bit reproducible and identical to
/// a naive triple loop compiled with the same flags.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor transpose2d(const Tensor& a);

/// a^T · b without materializing the transpose. Per output element the
/// accumulation order over the shared (leading) dimension is ascending, so
/// the result is bit-identical to matmul(transpose2d(a), b).
Tensor matmul_tn(const Tensor& a, const Tensor& b);

/// Cross-correlation (no kernel flip) with zero padding.
/// input n×c×h×w, kernels o×c×kh×kw; out h' = (h+2p-kh)/stride + 1.
/// Per output element the accumulation order is c-major, then kh, then kw.
Tensor conv2d(const Tensor& input, const Tensor& kernels, int stride, int padding);

// ---- elementwise ---------------------------------------------------------

template <typename F>
Tensor map(const Tensor& t, F f) {
  Tensor out = Tensor::uninitialized(t.shape());
  const float* src = t.data();
  float* dst = out.data();
  const int64_t n = t.size();
  for (int64_t i = 0; i < n; ++i) dst[i] = f(src[i]);
  return out;
}

template <typename F>
Tensor zip(const Tensor& a, const Tensor& b, F f) {
  if (!a.same_shape(b))
    throw std::invalid_argument("zip: shape mismatch " + shape_string(a.shape()) +
                                " vs " + shape_string(b.shape()));
  Tensor out = Tensor::uninitialized(a.shape());
  const float* pa = a.data();
  const float* pb = b.data();
  float* dst = out.data();
  const int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) dst[i] = f(pa[i], pb[i]);
  return out;
}

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
Tensor clip(const Tensor& a, float lo, float hi);
Tensor tanh(const Tensor& a);
Tensor relu(const Tensor& a);

// ---- reductions and loss -------------------------------------------------

double sum(const Tensor& t);
double mean(const Tensor& t);
float max_abs(const Tensor& t);
double l2_norm(const Tensor& t);

/// Index of the largest entry in each row of a 2-D tensor (first on ties).
std::vector<int64_t> argmax_rows(const Tensor& t);

struct LossResult {
  float loss = 0.0f;   ///< mean over the batch
  Tensor error;        ///< (softmax(logits) - targets) / n, the exact logit gradient
};

/// Mean cross entropy of logits[n×C] against one-hot targets, stabilized by
/// per-row max subtraction.
LossResult softmax_cross_entropy(const Tensor& logits, const Tensor& targets);

Tensor one_hot(const std::vector<int>& labels, int num_classes);

// ---- random tensors ------------------------------------------------------

Tensor rng_uniform(Rng& rng, std::vector<int64_t> shape, float lo, float hi);
Tensor rng_normal(Rng& rng, std::vector<int64_t> shape, float mean, float std);

}  // namespace bnn
