#pragma once

#include "bnn/tensor.hpp"

namespace bnn {

/// Straight-through estimator variants for the sign nonlinearity.
/// NonSaturating passes the incoming gradient unchanged; Saturating masks it
/// where |pre-activation| > 1 (hard-tanh surrogate). Weight binarization is
/// hard-wired to NonSaturating and binary activations to Saturating.
enum class SteKind { NonSaturating, Saturating };

/// Elementwise sign with the tie broken upward: sign(0) = +1. The output
/// contains only the values -1 and +1, so it packs to one bit per element.
inline Tensor sign_forward(const Tensor& x) {
  return map(x, [](float v) { return v >= 0.0f ? 1.0f : -1.0f; });
}

/// Surrogate backward pass of sign. `preactivation` is the input the sign saw
/// in the forward pass; the boundary |z| = 1 still passes the gradient.
inline Tensor ste_backward(SteKind kind, const Tensor& upstream,
                           const Tensor& preactivation) {
  if (kind == SteKind::NonSaturating) {
    if (!upstream.same_shape(preactivation))
      throw std::invalid_argument("ste_backward: shape mismatch");
    return upstream;
  }
  return zip(upstream, preactivation,
             [](float dy, float z) { return std::fabs(z) <= 1.0f ? dy : 0.0f; });
}

/// sign(W) of the latent weights; the latent tensor itself is left untouched
/// and keeps accumulating full-precision updates. The gradient computed
/// against the binarized weights is applied to the latent weights unchanged
/// (NonSaturating STE).
inline Tensor binarize_weights(const Tensor& latent) { return sign_forward(latent); }

}  // namespace bnn
