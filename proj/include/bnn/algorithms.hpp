#pragma once

#include "bnn/graph.hpp"

namespace bnn {

enum class AlgoKind { BP, DFA, DRTP, HSIC, SigpropTL };

const char* algo_name(AlgoKind kind);
AlgoKind algo_from_name(const std::string& name);

/// Constant random projections sampled once at strategy construction and
/// bitwise constant afterwards. For DFA/DRTP there is one matrix per hidden
/// segment, shaped (num_classes x segment output size); for SigpropTL a single
/// matrix maps the output error back to the input space.
struct FeedbackMatrices {
  std::vector<Tensor> per_segment;
  float scale = 0.0f;
};

/// Entries ~ Uniform(-s, s) with s = 1/sqrt(C); SigpropTL multiplies s by the
/// grid-searched factor alpha.
FeedbackMatrices make_feedback(AlgoKind kind, const ModelGraph& model, Rng& rng,
                               float alpha);

struct TrainStepResult {
  float loss = 0.0f;
  Tensor logits;  ///< network output of the step's forward pass
  Gradients grads;
  std::vector<double> segment_grad_norms;
  std::vector<float> segment_objectives;  ///< HSIC per-segment objective values
  std::vector<int> ste_crossings;  ///< STEs the error crossed before reaching each segment's weights
  int64_t peak_trace_bytes = 0;
  int peak_segments_retained = 0;
};

/// One of the five training algorithms bound to a model's segment structure.
/// BP and DFA run a fully retained forward pass; DRTP, HSIC and SigpropTL
/// stream segment by segment and never hold more than one segment's buffers.
class TrainingStrategy {
 public:
  TrainingStrategy(AlgoKind kind, const ModelGraph& model, Rng& rng, float gamma = 2.0f,
                   float alpha = 1.0f);

  TrainStepResult train_step(ModelGraph& model, const Tensor& input,
                             const Tensor& targets_onehot);

  AlgoKind kind() const { return kind_; }
  const FeedbackMatrices& feedback() const { return feedback_; }
  float gamma() const { return gamma_; }
  float alpha() const { return alpha_; }

  /// Per-segment gradient norms cost a full pass over the gradients; the
  /// training loop turns them off.
  void set_collect_diagnostics(bool on) { collect_diagnostics_ = on; }

 private:
  TrainStepResult step_bp(ModelGraph& model, const Tensor& x, const Tensor& y);
  TrainStepResult step_dfa(ModelGraph& model, const Tensor& x, const Tensor& y);
  TrainStepResult step_drtp(ModelGraph& model, const Tensor& x, const Tensor& y);
  TrainStepResult step_hsic(ModelGraph& model, const Tensor& x, const Tensor& y);
  TrainStepResult step_sigprop(ModelGraph& model, const Tensor& x, const Tensor& y);

  AlgoKind kind_;
  FeedbackMatrices feedback_;
  float gamma_;
  float alpha_;
  bool collect_diagnostics_ = true;
};

// ---- HSIC machinery ----------------------------------------------------------
// Biased estimator HSIC(A,B) = tr(K_A H K_B H) / (m-1)^2 with H = I - (1/m) 11^T.
// All m x m arithmetic runs in double precision internally.

/// Gaussian kernel matrix on the rows of `rows` (m x d), bandwidth sigma.
Tensor gaussian_kernel(const Tensor& rows, float sigma);

/// Median of the m(m-1)/2 pairwise euclidean distances between rows.
float median_pairwise_distance(const Tensor& rows);

/// tr(K H L H) / (m-1)^2 for two m x m kernel matrices.
double hsic_biased(const Tensor& k_a, const Tensor& k_b);

struct HsicSignal {
  Tensor grad;        ///< d objective / d z, shape of z_flat
  float objective;    ///< HSIC(Z,X) - gamma * HSIC(Z,Y)
};

/// Objective and gradient of HSIC(Z,X) - gamma*HSIC(Z,Y) with respect to the
/// flattened activations Z. Bandwidths: median pairwise distance per variable
/// floored at `sigma_floor`; the label kernel uses sigma = `label_sigma`.
HsicSignal hsic_signal(const Tensor& z_flat, const Tensor& x_flat,
                       const Tensor& y_onehot, float gamma, float label_sigma = 1.0f,
                       float sigma_floor = 1e-8f);

}  // namespace bnn
