#pragma once

// Shared oracles and fixtures for the test binaries. Everything here is
// independent of the library's backward path: losses are recomputed in double
// precision and gradients checked by central finite differences.

#include <cmath>
#include <cstring>
#include <vector>

#include "bnn/graph.hpp"
#include "bnn/tensor.hpp"

namespace testutil {

inline double double_ce_loss(const bnn::Tensor& logits, const bnn::Tensor& targets) {
  const int64_t n = logits.dim(0), c = logits.dim(1);
  double total = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    double mx = logits[i * c];
    for (int64_t j = 1; j < c; ++j)
      mx = std::max(mx, static_cast<double>(logits[i * c + j]));
    double denom = 0.0;
    for (int64_t j = 0; j < c; ++j) denom += std::exp(logits[i * c + j] - mx);
    for (int64_t j = 0; j < c; ++j)
      total -= targets[i * c + j] * (logits[i * c + j] - mx - std::log(denom));
  }
  return total / static_cast<double>(n);
}

/// Backpropagation through the whole graph by chaining segment_backward.
inline bnn::Gradients bp_grads_chained(bnn::ModelGraph& model, const bnn::Tensor& x,
                                       const bnn::Tensor& y) {
  bnn::ForwardTrace trace(model.nodes.size());
  const bnn::Tensor logits =
      bnn::forward(model, x, bnn::Mode::Train, bnn::RetentionPolicy::All, &trace);
  const auto loss = bnn::softmax_cross_entropy(logits, y);
  bnn::Gradients grads = bnn::Gradients::sized_for(model);
  bnn::Tensor err = loss.error;
  for (int k = model.num_segments() - 1; k >= 0; --k) {
    auto sb = bnn::segment_backward(model, trace, k, err, grads);
    err = std::move(sb.input_error);
  }
  return grads;
}

/// Max relative error between analytic gradients and central finite
/// differences of the train-mode loss. Deviations are measured against the
/// gradient's global magnitude, so exactly-zero entries (e.g. a dense bias
/// feeding batchnorm, whose true gradient vanishes) are compared against the
/// gradient scale rather than against float rounding noise.
inline double fd_max_rel_error(bnn::ModelGraph& model, const bnn::Tensor& x,
                               const bnn::Tensor& y, const bnn::Gradients& grads,
                               float h = 1e-3f) {
  std::vector<std::vector<std::vector<double>>> fd(model.nodes.size());
  double scale = 1e-9;
  for (size_t i = 0; i < model.nodes.size(); ++i) {
    fd[i].resize(grads.by_node[i].size());
    for (size_t s = 0; s < grads.by_node[i].size(); ++s) {
      const bnn::Tensor& g = grads.by_node[i][s];
      bnn::Tensor& param = model.nodes[i].params[s];
      fd[i][s].resize(static_cast<size_t>(g.size()));
      for (int64_t j = 0; j < g.size(); ++j) {
        const float saved = param[j];
        param[j] = saved + h;
        const double up = double_ce_loss(
            bnn::forward(model, x, bnn::Mode::Train, bnn::RetentionPolicy::None, nullptr), y);
        param[j] = saved - h;
        const double down = double_ce_loss(
            bnn::forward(model, x, bnn::Mode::Train, bnn::RetentionPolicy::None, nullptr), y);
        param[j] = saved;
        fd[i][s][static_cast<size_t>(j)] = (up - down) / (2.0 * static_cast<double>(h));
        scale = std::max({scale, std::fabs(fd[i][s][static_cast<size_t>(j)]),
                          std::fabs(static_cast<double>(g[j]))});
      }
    }
  }
  double worst = 0.0;
  for (size_t i = 0; i < model.nodes.size(); ++i)
    for (size_t s = 0; s < grads.by_node[i].size(); ++s) {
      const bnn::Tensor& g = grads.by_node[i][s];
      for (int64_t j = 0; j < g.size(); ++j)
        worst = std::max(worst,
                         std::fabs(fd[i][s][static_cast<size_t>(j)] - g[j]) / scale);
    }
  return worst;
}

struct Blobs {
  bnn::Tensor x;
  std::vector<int> labels;
};

/// Gaussian class blobs: class c centered at a random direction, unit noise.
inline Blobs make_blobs(bnn::Rng& rng, int64_t n, int classes, int64_t dim,
                        float spread = 3.0f) {
  Blobs b;
  b.x = bnn::Tensor({n, dim});
  b.labels.resize(static_cast<size_t>(n));
  std::vector<bnn::Tensor> centers;
  for (int c = 0; c < classes; ++c)
    centers.push_back(bnn::rng_normal(rng, {dim}, 0.0f, spread));
  for (int64_t i = 0; i < n; ++i) {
    const int c = static_cast<int>(rng.next_u64() % static_cast<uint64_t>(classes));
    b.labels[static_cast<size_t>(i)] = c;
    for (int64_t d = 0; d < dim; ++d)
      b.x[i * dim + d] = centers[static_cast<size_t>(c)][d] + rng.normal(0.0f, 1.0f);
  }
  return b;
}

inline bool bit_equal(const bnn::Tensor& a, const bnn::Tensor& b) {
  if (!a.same_shape(b)) return false;
  return std::memcmp(a.data(), b.data(), static_cast<size_t>(a.size()) * 4) == 0;
}

}  // namespace testutil
