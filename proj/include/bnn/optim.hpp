#pragma once

#include "bnn/graph.hpp"

namespace bnn {

struct AdamConfig {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float weight_decay = 0.0f;
  bool decoupled = false;     ///< decay applied directly to params instead of the gradient
  bool clip_latent = false;   ///< clamp binarized latent weights to [-1,1] after the update
};

/// Adam moments for every trainable parameter of one model instance. Latent
/// parameters are updated in full precision; binarization happens only in the
/// forward pass.
class AdamState {
 public:
  AdamState(const ModelGraph& model, AdamConfig config);

  /// One update over all parameters that have gradients. Throws on non-finite
  /// gradients, naming the offending segment.
  void step(ModelGraph& model, const Gradients& grads);

  int64_t steps_taken() const { return t_; }
  const AdamConfig& config() const { return config_; }

 private:
  AdamConfig config_;
  std::vector<std::vector<Tensor>> m_;
  std::vector<std::vector<Tensor>> v_;
  int64_t t_ = 0;
};

}  // namespace bnn
