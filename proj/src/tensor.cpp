#include "bnn/tensor.hpp"

#include <malloc.h>

#include <algorithm>
#include <cmath>

namespace bnn {

namespace {

// Activation-sized buffers churn every step; keep them on the heap instead of
// round-tripping through mmap so freed blocks are reused.
const bool kMallocTuned = [] {
  mallopt(M_MMAP_THRESHOLD, 256 * 1024 * 1024);
  mallopt(M_TRIM_THRESHOLD, 256 * 1024 * 1024);
  return true;
}();

}  // namespace

int64_t Tensor::checked_size(const std::vector<int64_t>& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d <= 0) throw std::invalid_argument("Tensor: dimensions must be positive");
    n *= d;
  }
  return n;
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<float>> rows) {
  const int64_t m = static_cast<int64_t>(rows.size());
  const int64_t n = static_cast<int64_t>(rows.begin()->size());
  std::vector<float> data;
  data.reserve(static_cast<size_t>(m * n));
  for (const auto& row : rows) {
    if (static_cast<int64_t>(row.size()) != n)
      throw std::invalid_argument("Tensor::matrix: ragged rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({m, n}, data);
}

float Tensor::at(std::initializer_list<int64_t> idx) const {
  if (static_cast<int>(idx.size()) != rank())
    throw std::invalid_argument("Tensor::at: index rank mismatch");
  int64_t flat = 0;
  int i = 0;
  for (int64_t v : idx) {
    flat = flat * shape_[static_cast<size_t>(i)] + v;
    ++i;
  }
  return data_.ptr[flat];
}

Tensor Tensor::reshaped(std::vector<int64_t> new_shape) const& {
  if (checked_size(new_shape) != size())
    throw std::invalid_argument("reshaped: element count mismatch");
  Tensor out;
  out.shape_ = std::move(new_shape);
  out.data_ = data_;  // deep copy
  return out;
}

Tensor Tensor::reshaped(std::vector<int64_t> new_shape) && {
  if (checked_size(new_shape) != size())
    throw std::invalid_argument("reshaped: element count mismatch");
  Tensor out;
  out.shape_ = std::move(new_shape);
  out.data_ = std::move(data_);
  return out;
}

std::string shape_string(const std::vector<int64_t>& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

bool all_finite(const Tensor& t) {
  const float* p = t.data();
  const int64_t n = t.size();
  for (int64_t i = 0; i < n; ++i)
    if (!std::isfinite(p[i])) return false;
  return true;
}

void ensure_finite(const Tensor& t, const std::string& context) {
  if (!all_finite(t))
    throw std::runtime_error(context + ": non-finite value");
}

// ---- matmul ----------------------------------------------------------------

namespace {

// Register-blocked kernel. k stays innermost and sequential per output
// element, so the summation order matches the naive triple loop exactly.
constexpr int kRowBlock = 4;
constexpr int kColBlock = 64;

void matmul_block(const float* a, const float* b, float* c, int64_t m, int64_t k,
                  int64_t n) {
#pragma omp parallel for schedule(static)
  for (int64_t i0 = 0; i0 < m; i0 += kRowBlock) {
    const int ib = static_cast<int>(std::min<int64_t>(kRowBlock, m - i0));
    for (int64_t j0 = 0; j0 < n; j0 += kColBlock) {
      const int jb = static_cast<int>(std::min<int64_t>(kColBlock, n - j0));
      float acc[kRowBlock][kColBlock];
      for (int i = 0; i < ib; ++i)
        for (int j = 0; j < jb; ++j) acc[i][j] = 0.0f;
      if (ib == kRowBlock && jb == kColBlock) {
        for (int64_t p = 0; p < k; ++p) {
          const float* brow = b + p * n + j0;
          for (int i = 0; i < kRowBlock; ++i) {
            const float av = a[(i0 + i) * k + p];
            for (int j = 0; j < kColBlock; ++j) acc[i][j] += av * brow[j];
          }
        }
      } else {
        for (int64_t p = 0; p < k; ++p) {
          const float* brow = b + p * n + j0;
          for (int i = 0; i < ib; ++i) {
            const float av = a[(i0 + i) * k + p];
            for (int j = 0; j < jb; ++j) acc[i][j] += av * brow[j];
          }
        }
      }
      for (int i = 0; i < ib; ++i)
        for (int j = 0; j < jb; ++j) c[(i0 + i) * n + j0 + j] = acc[i][j];
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw std::invalid_argument("matmul: expects 2-D tensors");
  if (a.dim(1) != b.dim(0))
    throw std::invalid_argument("matmul: inner dimensions disagree, " +
                                shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = Tensor::uninitialized({m, n});
  matmul_block(a.data(), b.data(), out.data(), m, k, n);
  return out;
}

Tensor transpose2d(const Tensor& a) {
  if (a.rank() != 2) throw std::invalid_argument("transpose2d: expects a 2-D tensor");
  const int64_t m = a.dim(0), n = a.dim(1);
  Tensor out = Tensor::uninitialized({n, m});
  const float* src = a.data();
  float* dst = out.data();
  constexpr int64_t kTile = 32;  // keeps both sides cache-resident
#pragma omp parallel for collapse(2) schedule(static)
  for (int64_t i0 = 0; i0 < m; i0 += kTile)
    for (int64_t j0 = 0; j0 < n; j0 += kTile) {
      const int64_t i1 = std::min(i0 + kTile, m);
      const int64_t j1 = std::min(j0 + kTile, n);
      for (int64_t i = i0; i < i1; ++i)
        for (int64_t j = j0; j < j1; ++j) dst[j * m + i] = src[i * n + j];
    }
  return out;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw std::invalid_argument("matmul_tn: expects 2-D tensors");
  if (a.dim(0) != b.dim(0))
    throw std::invalid_argument("matmul_tn: leading dimensions disagree, " +
                                shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  const int64_t k = a.dim(0), m = a.dim(1), n = b.dim(1);
  Tensor out = Tensor::uninitialized({m, n});
  const float* pa = a.data();
  const float* pb = b.data();
  float* pc = out.data();
  constexpr int MR = 4;
  constexpr int NR = 64;
#pragma omp parallel for schedule(static)
  for (int64_t i0 = 0; i0 < m; i0 += MR) {
    const int ib = static_cast<int>(std::min<int64_t>(MR, m - i0));
    for (int64_t j0 = 0; j0 < n; j0 += NR) {
      const int jb = static_cast<int>(std::min<int64_t>(NR, n - j0));
      float acc[MR][NR];
      for (int i = 0; i < ib; ++i)
        for (int j = 0; j < jb; ++j) acc[i][j] = 0.0f;
      if (ib == MR && jb == NR) {
        for (int64_t p = 0; p < k; ++p) {
          const float* arow = pa + p * m + i0;
          const float* brow = pb + p * n + j0;
          for (int i = 0; i < MR; ++i) {
            const float av = arow[i];
            for (int j = 0; j < NR; ++j) acc[i][j] += av * brow[j];
          }
        }
      } else {
        for (int64_t p = 0; p < k; ++p) {
          const float* arow = pa + p * m + i0;
          const float* brow = pb + p * n + j0;
          for (int i = 0; i < ib; ++i) {
            const float av = arow[i];
            for (int j = 0; j < jb; ++j) acc[i][j] += av * brow[j];
          }
        }
      }
      for (int i = 0; i < ib; ++i)
        for (int j = 0; j < jb; ++j) pc[(i0 + i) * n + j0 + j] = acc[i][j];
    }
  }
  return out;
}

// ---- conv2d ----------------------------------------------------------------

Tensor conv2d(const Tensor& input, const Tensor& kernels, int stride, int padding) {
  if (input.rank() != 4 || kernels.rank() != 4)
    throw std::invalid_argument("conv2d: expects 4-D input and kernels");
  if (stride < 1 || padding < 0)
    throw std::invalid_argument("conv2d: invalid stride/padding");
  const int64_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const int64_t o = kernels.dim(0), kc = kernels.dim(1), kh = kernels.dim(2),
                kw = kernels.dim(3);
  if (kc != c) throw std::invalid_argument("conv2d: channel count mismatch");
  if (kh > h + 2 * padding || kw > w + 2 * padding)
    throw std::invalid_argument("conv2d: kernel larger than padded input");
  const int64_t oh = (h + 2 * padding - kh) / stride + 1;
  const int64_t ow = (w + 2 * padding - kw) / stride + 1;

  Tensor out = Tensor::uninitialized({n, o, oh, ow});
  const float* in = input.data();
  const float* kr = kernels.data();
  float* dst = out.data();

#pragma omp parallel for collapse(2) schedule(static)
  for (int64_t ni = 0; ni < n; ++ni) {
    for (int64_t oi = 0; oi < o; ++oi) {
      const float* kbase = kr + oi * c * kh * kw;
      float* obase = dst + (ni * o + oi) * oh * ow;
      for (int64_t y = 0; y < oh; ++y) {
        for (int64_t x = 0; x < ow; ++x) {
          float acc = 0.0f;
          const int64_t iy0 = y * stride - padding;
          const int64_t ix0 = x * stride - padding;
          for (int64_t ci = 0; ci < c; ++ci) {
            const float* ibase = in + (ni * c + ci) * h * w;
            const float* kc2 = kbase + ci * kh * kw;
            for (int64_t ky = 0; ky < kh; ++ky) {
              const int64_t iy = iy0 + ky;
              if (iy < 0 || iy >= h) continue;  // zero padding contributes nothing
              for (int64_t kx = 0; kx < kw; ++kx) {
                const int64_t ix = ix0 + kx;
                if (ix < 0 || ix >= w) continue;
                acc += ibase[iy * w + ix] * kc2[ky * kw + kx];
              }
            }
          }
          obase[y * ow + x] = acc;
        }
      }
    }
  }
  return out;
}

// ---- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  return zip(a, b, [](float x, float y) { return x + y; });
}
Tensor sub(const Tensor& a, const Tensor& b) {
  return zip(a, b, [](float x, float y) { return x - y; });
}
Tensor mul(const Tensor& a, const Tensor& b) {
  return zip(a, b, [](float x, float y) { return x * y; });
}
Tensor scale(const Tensor& a, float s) {
  return map(a, [s](float x) { return x * s; });
}
Tensor clip(const Tensor& a, float lo, float hi) {
  return map(a, [lo, hi](float x) { return std::min(std::max(x, lo), hi); });
}
Tensor tanh(const Tensor& a) {
  return map(a, [](float x) { return std::tanh(x); });
}
Tensor relu(const Tensor& a) {
  return map(a, [](float x) { return x > 0.0f ? x : 0.0f; });
}

// ---- reductions and loss ---------------------------------------------------

double sum(const Tensor& t) {
  double acc = 0.0;
  const float* p = t.data();
  const int64_t n = t.size();
  for (int64_t i = 0; i < n; ++i) acc += p[i];
  return acc;
}

double mean(const Tensor& t) { return sum(t) / static_cast<double>(t.size()); }

float max_abs(const Tensor& t) {
  float m = 0.0f;
  const float* p = t.data();
  const int64_t n = t.size();
  for (int64_t i = 0; i < n; ++i) m = std::max(m, std::fabs(p[i]));
  return m;
}

double l2_norm(const Tensor& t) {
  double acc = 0.0;
  const float* p = t.data();
  const int64_t n = t.size();
  for (int64_t i = 0; i < n; ++i) acc += static_cast<double>(p[i]) * p[i];
  return std::sqrt(acc);
}

std::vector<int64_t> argmax_rows(const Tensor& t) {
  if (t.rank() != 2) throw std::invalid_argument("argmax_rows: expects a 2-D tensor");
  const int64_t m = t.dim(0), n = t.dim(1);
  std::vector<int64_t> out(static_cast<size_t>(m));
  for (int64_t i = 0; i < m; ++i) {
    const float* row = t.data() + i * n;
    int64_t best = 0;
    for (int64_t j = 1; j < n; ++j)
      if (row[j] > row[best]) best = j;
    out[static_cast<size_t>(i)] = best;
  }
  return out;
}

LossResult softmax_cross_entropy(const Tensor& logits, const Tensor& targets) {
  if (logits.rank() != 2 || !logits.same_shape(targets))
    throw std::invalid_argument("softmax_cross_entropy: logits/targets must be equal 2-D shapes");
  const int64_t n = logits.dim(0), c = logits.dim(1);
  LossResult res;
  res.error = Tensor::uninitialized({n, c});
  double total = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const float* row = logits.data() + i * c;
    const float* tgt = targets.data() + i * c;
    float* err = res.error.data() + i * c;
    float mx = row[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (int64_t j = 0; j < c; ++j) denom += std::exp(static_cast<double>(row[j]) - mx);
    const double log_denom = std::log(denom);
    for (int64_t j = 0; j < c; ++j) {
      const double logp = static_cast<double>(row[j]) - mx - log_denom;
      total -= tgt[j] * logp;
      err[j] = static_cast<float>((std::exp(logp) - tgt[j]) / static_cast<double>(n));
    }
  }
  res.loss = static_cast<float>(total / static_cast<double>(n));
  ensure_finite(res.error, "softmax_cross_entropy");
  return res;
}

Tensor one_hot(const std::vector<int>& labels, int num_classes) {
  const int64_t n = static_cast<int64_t>(labels.size());
  Tensor out({n, num_classes});
  for (int64_t i = 0; i < n; ++i) {
    const int y = labels[static_cast<size_t>(i)];
    if (y < 0 || y >= num_classes)
      throw std::invalid_argument("one_hot: label out of range");
    out[i * num_classes + y] = 1.0f;
  }
  return out;
}

// ---- random tensors --------------------------------------------------------

Tensor rng_uniform(Rng& rng, std::vector<int64_t> shape, float lo, float hi) {
  if (!(lo < hi)) throw std::invalid_argument("rng_uniform: requires lo < hi");
  Tensor out = Tensor::uninitialized(std::move(shape));
  float* p = out.data();
  const int64_t n = out.size();
  for (int64_t i = 0; i < n; ++i) p[i] = rng.uniform(lo, hi);
  return out;
}

Tensor rng_normal(Rng& rng, std::vector<int64_t> shape, float mean, float std) {
  if (std < 0.0f) throw std::invalid_argument("rng_normal: requires std >= 0");
  Tensor out = Tensor::uninitialized(std::move(shape));
  float* p = out.data();
  const int64_t n = out.size();
  for (int64_t i = 0; i < n; ++i) p[i] = rng.normal(mean, std);
  return out;
}

}  // namespace bnn
