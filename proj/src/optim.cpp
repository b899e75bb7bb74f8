#include "bnn/optim.hpp"

#include <cmath>

namespace bnn {

AdamState::AdamState(const ModelGraph& model, AdamConfig config) : config_(config) {
  m_.resize(model.nodes.size());
  v_.resize(model.nodes.size());
  for (size_t i = 0; i < model.nodes.size(); ++i) {
    // Moments exist for the trained slots: Dense/Conv {W,b}, BatchNorm {scale,shift}.
    const LayerNode& node = model.nodes[i];
    size_t trained = 0;
    if (node.trainable()) trained = 2;
    else if (node.kind == NodeKind::BatchNorm) trained = 2;
    m_[i].reserve(trained);
    v_[i].reserve(trained);
    for (size_t s = 0; s < trained; ++s) {
      m_[i].emplace_back(node.params[s].shape());
      v_[i].emplace_back(node.params[s].shape());
    }
  }
}

void AdamState::step(ModelGraph& model, const Gradients& grads) {
  struct WorkItem {
    size_t node, slot;
  };
  std::vector<WorkItem> work;
  for (size_t i = 0; i < model.nodes.size(); ++i) {
    const auto& node_grads = grads.by_node[i];
    for (size_t s = 0; s < node_grads.size(); ++s) {
      if (!all_finite(node_grads[s])) {
        int segment = -1;
        for (size_t k = 0; k < model.segments.size(); ++k)
          if (static_cast<int>(i) >= model.segments[k].first &&
              static_cast<int>(i) <= model.segments[k].second)
            segment = static_cast<int>(k);
        throw std::runtime_error("adam_step: non-finite gradient in segment " +
                                 std::to_string(segment) + " (node " + std::to_string(i) +
                                 ", param " + std::to_string(s) + ")");
      }
      work.push_back({i, s});
    }
  }

  ++t_;
  const float bc1 = 1.0f - std::pow(config_.beta1, static_cast<float>(t_));
  const float bc2 = 1.0f - std::pow(config_.beta2, static_cast<float>(t_));

  // split large tensors so both threads share the memory-bound update
  struct Chunk {
    size_t node, slot;
    int64_t begin, end;
  };
  constexpr int64_t kChunk = 65536;
  std::vector<Chunk> chunks;
  for (const auto& [i, s] : work) {
    const int64_t n = model.nodes[i].params[s].size();
    for (int64_t b = 0; b < n; b += kChunk)
      chunks.push_back({i, s, b, std::min(b + kChunk, n)});
  }

#pragma omp parallel for schedule(dynamic)
  for (size_t ci = 0; ci < chunks.size(); ++ci) {
    const Chunk& ch = chunks[ci];
    LayerNode& node = model.nodes[ch.node];
    const Tensor& grad = grads.by_node[ch.node][ch.slot];
    Tensor& param = node.params[ch.slot];
    Tensor& m = m_[ch.node][ch.slot];
    Tensor& v = v_[ch.node][ch.slot];
    const bool clip_this = config_.clip_latent && node.binarize_weights && ch.slot == 0;
    for (int64_t j = ch.begin; j < ch.end; ++j) {
      float g = grad[j];
      if (config_.weight_decay != 0.0f && !config_.decoupled)
        g += config_.weight_decay * param[j];
      m[j] = config_.beta1 * m[j] + (1.0f - config_.beta1) * g;
      v[j] = config_.beta2 * v[j] + (1.0f - config_.beta2) * g * g;
      const float mhat = m[j] / bc1;
      const float vhat = v[j] / bc2;
      float p = param[j] - config_.lr * mhat / (std::sqrt(vhat) + config_.eps);
      if (config_.weight_decay != 0.0f && config_.decoupled)
        p -= config_.lr * config_.weight_decay * param[j];
      if (clip_this) p = std::min(std::max(p, -1.0f), 1.0f);
      param[j] = p;
    }
  }
}

}  // namespace bnn
