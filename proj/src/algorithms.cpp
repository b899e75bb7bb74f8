#include "bnn/algorithms.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace bnn {

const char* algo_name(AlgoKind kind) {
  switch (kind) {
    case AlgoKind::BP: return "bp";
    case AlgoKind::DFA: return "dfa";
    case AlgoKind::DRTP: return "drtp";
    case AlgoKind::HSIC: return "hsic";
    case AlgoKind::SigpropTL: return "sigproptl";
  }
  return "?";
}

AlgoKind algo_from_name(const std::string& name) {
  if (name == "bp") return AlgoKind::BP;
  if (name == "dfa") return AlgoKind::DFA;
  if (name == "drtp") return AlgoKind::DRTP;
  if (name == "hsic") return AlgoKind::HSIC;
  if (name == "sigproptl" || name == "sigprop") return AlgoKind::SigpropTL;
  throw std::invalid_argument("unknown algorithm: " + name);
}

FeedbackMatrices make_feedback(AlgoKind kind, const ModelGraph& model, Rng& rng,
                               float alpha) {
  FeedbackMatrices fb;
  const int64_t classes = model.num_classes;
  const float base = 1.0f / std::sqrt(static_cast<float>(classes));
  if (kind == AlgoKind::DFA || kind == AlgoKind::DRTP) {
    fb.scale = base;
    const int k = model.num_segments();
    fb.per_segment.reserve(static_cast<size_t>(k - 1));
    for (int s = 0; s < k - 1; ++s)
      fb.per_segment.push_back(
          rng_uniform(rng, {classes, model.segment_output_size(s)}, -fb.scale, fb.scale));
  } else if (kind == AlgoKind::SigpropTL) {
    fb.scale = base * alpha;
    int64_t input_size = 1;
    for (int64_t d : model.input_shape) input_size *= d;
    fb.per_segment.push_back(
        fb.scale > 0.0f
            ? rng_uniform(rng, {classes, input_size}, -fb.scale, fb.scale)
            : Tensor({classes, input_size}));  // alpha = 0 degenerates to zero
  }
  return fb;
}

// ---- HSIC ----------------------------------------------------------------------

float median_pairwise_distance(const Tensor& rows) {
  const int64_t m = rows.dim(0), d = rows.dim(1);
  std::vector<double> dist;
  dist.reserve(static_cast<size_t>(m * (m - 1) / 2));
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = i + 1; j < m; ++j) {
      double acc = 0.0;
      const float* a = rows.data() + i * d;
      const float* b = rows.data() + j * d;
      for (int64_t t = 0; t < d; ++t) {
        const double diff = static_cast<double>(a[t]) - b[t];
        acc += diff * diff;
      }
      dist.push_back(std::sqrt(acc));
    }
  if (dist.empty()) return 0.0f;
  const size_t mid = dist.size() / 2;
  std::nth_element(dist.begin(), dist.begin() + static_cast<long>(mid), dist.end());
  return static_cast<float>(dist[mid]);
}

Tensor gaussian_kernel(const Tensor& rows, float sigma) {
  const int64_t m = rows.dim(0), d = rows.dim(1);
  const double denom = 2.0 * static_cast<double>(sigma) * sigma;
  Tensor k({m, m});
  for (int64_t i = 0; i < m; ++i) {
    k[i * m + i] = 1.0f;
    for (int64_t j = i + 1; j < m; ++j) {
      double acc = 0.0;
      const float* a = rows.data() + i * d;
      const float* b = rows.data() + j * d;
      for (int64_t t = 0; t < d; ++t) {
        const double diff = static_cast<double>(a[t]) - b[t];
        acc += diff * diff;
      }
      const float v = static_cast<float>(std::exp(-acc / denom));
      k[i * m + j] = v;
      k[j * m + i] = v;
    }
  }
  return k;
}

namespace {

// H K H for symmetric K, in double.
std::vector<double> center_kernel(const Tensor& k, int64_t m) {
  std::vector<double> row_mean(static_cast<size_t>(m), 0.0);
  double total = 0.0;
  for (int64_t i = 0; i < m; ++i) {
    double acc = 0.0;
    for (int64_t j = 0; j < m; ++j) acc += k[i * m + j];
    row_mean[static_cast<size_t>(i)] = acc / static_cast<double>(m);
    total += acc;
  }
  const double grand = total / static_cast<double>(m * m);
  std::vector<double> g(static_cast<size_t>(m * m));
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < m; ++j)
      g[static_cast<size_t>(i * m + j)] = static_cast<double>(k[i * m + j]) -
                                          row_mean[static_cast<size_t>(i)] -
                                          row_mean[static_cast<size_t>(j)] + grand;
  return g;
}

}  // namespace

double hsic_biased(const Tensor& k_a, const Tensor& k_b) {
  if (k_a.rank() != 2 || k_a.dim(0) != k_a.dim(1) || !k_a.same_shape(k_b))
    throw std::invalid_argument("hsic_biased: expects two equal square matrices");
  const int64_t m = k_a.dim(0);
  const auto g = center_kernel(k_b, m);  // tr(K_A H K_B H) = sum_ij K_A[i,j] (H K_B H)[j,i]
  double tr = 0.0;
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < m; ++j)
      tr += static_cast<double>(k_a[i * m + j]) * g[static_cast<size_t>(j * m + i)];
  const double mm1 = static_cast<double>(m - 1);
  return tr / (mm1 * mm1);
}

HsicSignal hsic_signal(const Tensor& z_flat, const Tensor& x_flat, const Tensor& y_onehot,
                       float gamma, float label_sigma, float sigma_floor) {
  const int64_t m = z_flat.dim(0), d = z_flat.dim(1);
  if (x_flat.dim(0) != m || y_onehot.dim(0) != m)
    throw std::invalid_argument("hsic_signal: batch dimension mismatch");

  const float sigma_z = std::max(median_pairwise_distance(z_flat), sigma_floor);
  const float sigma_x = std::max(median_pairwise_distance(x_flat), sigma_floor);
  const Tensor k_z = gaussian_kernel(z_flat, sigma_z);
  const Tensor k_x = gaussian_kernel(x_flat, sigma_x);
  const Tensor k_y = gaussian_kernel(y_onehot, label_sigma);

  const auto g_x = center_kernel(k_x, m);
  const auto g_y = center_kernel(k_y, m);
  const double mm1 = static_cast<double>(m - 1);
  const double norm = 1.0 / (mm1 * mm1);

  double obj_x = 0.0, obj_y = 0.0;
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < m; ++j) {
      obj_x += static_cast<double>(k_z[i * m + j]) * g_x[static_cast<size_t>(j * m + i)];
      obj_y += static_cast<double>(k_z[i * m + j]) * g_y[static_cast<size_t>(j * m + i)];
    }

  HsicSignal sig;
  sig.objective = static_cast<float>((obj_x - gamma * obj_y) * norm);

  // d tr(K_Z G)/d z_p = -(2/sigma^2) sum_j G_pj K_pj (z_p - z_j)
  const double coef = -2.0 * norm / (static_cast<double>(sigma_z) * sigma_z);
  sig.grad = Tensor({m, d});
  for (int64_t p = 0; p < m; ++p) {
    const float* zp = z_flat.data() + p * d;
    float* out = sig.grad.data() + p * d;
    for (int64_t j = 0; j < m; ++j) {
      if (j == p) continue;
      const double mpj = g_x[static_cast<size_t>(p * m + j)] -
                         static_cast<double>(gamma) * g_y[static_cast<size_t>(p * m + j)];
      const double w = coef * mpj * k_z[p * m + j];
      const float* zj = z_flat.data() + j * d;
      for (int64_t t = 0; t < d; ++t)
        out[t] += static_cast<float>(w * (static_cast<double>(zp[t]) - zj[t]));
    }
  }
  return sig;
}

// ---- strategies -----------------------------------------------------------------

TrainingStrategy::TrainingStrategy(AlgoKind kind, const ModelGraph& model, Rng& rng,
                                   float gamma, float alpha)
    : kind_(kind), feedback_(make_feedback(kind, model, rng, alpha)), gamma_(gamma),
      alpha_(alpha) {}

namespace {

std::vector<int64_t> injection_shape(const ModelGraph& model, int k, int64_t n) {
  const auto& per_sample =
      model.nodes[static_cast<size_t>(model.injection_points[static_cast<size_t>(k)])]
          .out_shape;
  std::vector<int64_t> s{n};
  s.insert(s.end(), per_sample.begin(), per_sample.end());
  return s;
}

double segment_grad_norm(const ModelGraph& model, const Gradients& grads, int k) {
  const auto& [s, e] = model.segments[static_cast<size_t>(k)];
  double acc = 0.0;
  for (int i = s; i <= e; ++i)
    for (const Tensor& g : grads.by_node[static_cast<size_t>(i)]) {
      const double nn = l2_norm(g);
      acc += nn * nn;
    }
  return std::sqrt(acc);
}

void finish_result(const ModelGraph& model, const BufferAccountant& acct,
                   TrainStepResult& result, bool collect_diagnostics) {
  result.peak_trace_bytes = acct.peak_bytes();
  result.peak_segments_retained = acct.peak_segments();
  if (!collect_diagnostics) return;
  result.segment_grad_norms.resize(static_cast<size_t>(model.num_segments()));
  for (int k = 0; k < model.num_segments(); ++k)
    result.segment_grad_norms[static_cast<size_t>(k)] =
        segment_grad_norm(model, result.grads, k);
}

}  // namespace

TrainStepResult TrainingStrategy::train_step(ModelGraph& model, const Tensor& input,
                                             const Tensor& targets_onehot) {
  switch (kind_) {
    case AlgoKind::BP: return step_bp(model, input, targets_onehot);
    case AlgoKind::DFA: return step_dfa(model, input, targets_onehot);
    case AlgoKind::DRTP: return step_drtp(model, input, targets_onehot);
    case AlgoKind::HSIC: return step_hsic(model, input, targets_onehot);
    case AlgoKind::SigpropTL: return step_sigprop(model, input, targets_onehot);
  }
  throw std::logic_error("train_step: unknown algorithm");
}

TrainStepResult TrainingStrategy::step_bp(ModelGraph& model, const Tensor& x,
                                          const Tensor& y) {
  const int num_segments = model.num_segments();
  TrainStepResult result;
  result.grads = Gradients::sized_for(model);
  result.ste_crossings.assign(static_cast<size_t>(num_segments), 0);

  BufferAccountant acct;
  ForwardTrace trace(model.nodes.size(), &acct);
  const Tensor logits = forward(model, x, Mode::Train, RetentionPolicy::All, &trace);
  const LossResult loss = softmax_cross_entropy(logits, y);
  result.loss = loss.loss;
  result.logits = logits;

  Tensor err = loss.error;
  int crossings_above = 0;
  for (int k = num_segments - 1; k >= 0; --k) {
    auto sb = segment_backward(model, trace, k, err, result.grads, /*need_input_error=*/k > 0);
    result.ste_crossings[static_cast<size_t>(k)] = crossings_above + sb.ste_crossings;
    crossings_above += sb.ste_crossings;
    err = std::move(sb.input_error);
    trace.release_segment(model, k);
  }
  finish_result(model, acct, result, collect_diagnostics_);
  return result;
}

TrainStepResult TrainingStrategy::step_dfa(ModelGraph& model, const Tensor& x,
                                           const Tensor& y) {
  const int num_segments = model.num_segments();
  if (static_cast<int>(feedback_.per_segment.size()) != num_segments - 1)
    throw std::invalid_argument("dfa: feedback matrices missing");
  TrainStepResult result;
  result.grads = Gradients::sized_for(model);
  result.ste_crossings.assign(static_cast<size_t>(num_segments), 0);

  BufferAccountant acct;
  ForwardTrace trace(model.nodes.size(), &acct);
  const Tensor logits = forward(model, x, Mode::Train, RetentionPolicy::All, &trace);
  const LossResult loss = softmax_cross_entropy(logits, y);
  result.loss = loss.loss;
  result.logits = logits;

  // hidden segments receive the output error through their constant projection
  for (int k = 0; k < num_segments - 1; ++k) {
    Tensor delta = matmul(loss.error, feedback_.per_segment[static_cast<size_t>(k)])
                       .reshaped(injection_shape(model, k, x.dim(0)));
    auto sb = segment_backward(model, trace, k, delta, result.grads, false);
    result.ste_crossings[static_cast<size_t>(k)] = sb.ste_crossings;
    trace.release_segment(model, k);
  }
  auto sb = segment_backward(model, trace, num_segments - 1, loss.error, result.grads, false);
  result.ste_crossings[static_cast<size_t>(num_segments - 1)] = sb.ste_crossings;
  trace.release_segment(model, num_segments - 1);
  finish_result(model, acct, result, collect_diagnostics_);
  return result;
}

TrainStepResult TrainingStrategy::step_drtp(ModelGraph& model, const Tensor& x,
                                            const Tensor& y) {
  const int num_segments = model.num_segments();
  if (static_cast<int>(feedback_.per_segment.size()) != num_segments - 1)
    throw std::invalid_argument("drtp: feedback matrices missing");
  TrainStepResult result;
  result.grads = Gradients::sized_for(model);
  result.ste_crossings.assign(static_cast<size_t>(num_segments), 0);

  BufferAccountant acct;
  ForwardTrace trace(model.nodes.size(), &acct);
  Tensor act = x;
  for (int k = 0; k < num_segments - 1; ++k) {
    act = forward_segment(model, k, act, Mode::Train, true, &trace);
    // the one-hot target projected by the constant matrix is the error signal
    Tensor delta = matmul(y, feedback_.per_segment[static_cast<size_t>(k)])
                       .reshaped(injection_shape(model, k, x.dim(0)));
    auto sb = segment_backward(model, trace, k, delta, result.grads, false);
    result.ste_crossings[static_cast<size_t>(k)] = sb.ste_crossings;
    trace.release_segment(model, k);
  }
  const Tensor logits =
      forward_segment(model, num_segments - 1, act, Mode::Train, true, &trace);
  const LossResult loss = softmax_cross_entropy(logits, y);
  result.loss = loss.loss;
  result.logits = logits;
  auto sb = segment_backward(model, trace, num_segments - 1, loss.error, result.grads, false);
  result.ste_crossings[static_cast<size_t>(num_segments - 1)] = sb.ste_crossings;
  trace.release_segment(model, num_segments - 1);
  finish_result(model, acct, result, collect_diagnostics_);
  return result;
}

TrainStepResult TrainingStrategy::step_hsic(ModelGraph& model, const Tensor& x,
                                            const Tensor& y) {
  const int64_t m = x.dim(0);
  if (m < 4) throw std::invalid_argument("hsic: batch size must be at least 4");
  const int num_segments = model.num_segments();
  TrainStepResult result;
  result.grads = Gradients::sized_for(model);
  result.ste_crossings.assign(static_cast<size_t>(num_segments), 0);
  result.segment_objectives.assign(static_cast<size_t>(num_segments), 0.0f);

  const Tensor x_flat = x.reshaped({m, x.size() / m});
  BufferAccountant acct;
  ForwardTrace trace(model.nodes.size(), &acct);
  Tensor act = x;
  for (int k = 0; k < num_segments - 1; ++k) {
    act = forward_segment(model, k, act, Mode::Train, true, &trace);
    const Tensor z_flat = act.reshaped({m, act.size() / m});
    HsicSignal sig = hsic_signal(z_flat, x_flat, y, gamma_);
    result.segment_objectives[static_cast<size_t>(k)] = sig.objective;
    Tensor delta = sig.grad.reshaped(injection_shape(model, k, m));
    auto sb = segment_backward(model, trace, k, delta, result.grads, false);
    result.ste_crossings[static_cast<size_t>(k)] = sb.ste_crossings;
    trace.release_segment(model, k);
  }
  // final segment: local cross entropy on its (detached) input
  const Tensor logits =
      forward_segment(model, num_segments - 1, act, Mode::Train, true, &trace);
  const LossResult loss = softmax_cross_entropy(logits, y);
  result.loss = loss.loss;
  result.logits = logits;
  result.segment_objectives[static_cast<size_t>(num_segments - 1)] = loss.loss;
  auto sb = segment_backward(model, trace, num_segments - 1, loss.error, result.grads, false);
  result.ste_crossings[static_cast<size_t>(num_segments - 1)] = sb.ste_crossings;
  trace.release_segment(model, num_segments - 1);
  finish_result(model, acct, result, collect_diagnostics_);
  return result;
}

TrainStepResult TrainingStrategy::step_sigprop(ModelGraph& model, const Tensor& x,
                                               const Tensor& y) {
  if (feedback_.per_segment.empty())
    throw std::invalid_argument("sigproptl: feedback matrix missing");
  const int num_segments = model.num_segments();
  const int64_t m = x.dim(0);
  TrainStepResult result;
  result.grads = Gradients::sized_for(model);
  result.ste_crossings.assign(static_cast<size_t>(num_segments), 0);

  // pass 1: plain forward to obtain the output error
  const Tensor logits1 = forward(model, x, Mode::Train, RetentionPolicy::None, nullptr);
  const LossResult loss1 = softmax_cross_entropy(logits1, y);

  // target input: the output error projected back to the input space
  Tensor x_star =
      sub(x.reshaped({m, x.size() / m}), matmul(loss1.error, feedback_.per_segment[0]))
          .reshaped(x.shape());

  // pass 2: input and target streamed together, segment by segment
  BufferAccountant acct;
  ForwardTrace trace(model.nodes.size(), &acct);
  Tensor act = x;
  Tensor target_act = std::move(x_star);
  for (int k = 0; k < num_segments - 1; ++k) {
    act = forward_segment(model, k, act, Mode::Train, true, &trace);
    target_act = forward_segment(model, k, target_act, Mode::Train, false, nullptr);
    // gradient of 0.5 * ||y_k - y*_k||^2 with the target treated as constant
    Tensor delta = sub(act, target_act);
    auto sb = segment_backward(model, trace, k, delta, result.grads, false);
    result.ste_crossings[static_cast<size_t>(k)] = sb.ste_crossings;
    trace.release_segment(model, k);
  }
  const Tensor logits =
      forward_segment(model, num_segments - 1, act, Mode::Train, true, &trace);
  const LossResult loss = softmax_cross_entropy(logits, y);
  result.loss = loss.loss;
  result.logits = logits;
  auto sb = segment_backward(model, trace, num_segments - 1, loss.error, result.grads, false);
  result.ste_crossings[static_cast<size_t>(num_segments - 1)] = sb.ste_crossings;
  trace.release_segment(model, num_segments - 1);
  finish_result(model, acct, result, collect_diagnostics_);
  return result;
}

}  // namespace bnn
