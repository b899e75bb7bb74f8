#pragma once

#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "bnn/binarize.hpp"
#include "bnn/tensor.hpp"

namespace bnn {

enum class NodeKind {
  Dense,
  Conv2d,
  Activation,
  BatchNorm,
  MaxPool,
  AvgPool,
  Flatten,
  Reshape,
  Transpose,  // swaps the last two axes; used by the mixer's token path
  SkipAdd,
};

enum class ActKind { Tanh, Relu, Sign };

enum class ArchId { MlpPlain, MlpResidual, ConvPlain, MiniMixer };

/// One node of the layer graph. Parameter layout by kind:
///   Dense:     params = { W (in x out), b (out) }
///   Conv2d:    params = { K (o x c x kh x kw), b (o) }
///   BatchNorm: params = { scale, shift, running_mean, running_var } per channel
/// Biases are never binarized; `binarize_weights` applies to slot 0 only.
struct LayerNode {
  NodeKind kind = NodeKind::Flatten;
  int index = -1;
  std::vector<Tensor> params;
  bool binarize_weights = false;
  ActKind act = ActKind::Tanh;
  SteKind ste = SteKind::Saturating;
  int stride = 1;
  int padding = 0;
  int pool_k = 2;
  int pool_stride = 2;
  int skip_source = -1;  // SkipAdd: index of the node whose output is added
  std::vector<int64_t> reshape_to;  // Reshape: per-sample target shape
  std::vector<int64_t> in_shape;   // per-sample, filled by finalize_model
  std::vector<int64_t> out_shape;  // per-sample, filled by finalize_model

  bool trainable() const { return kind == NodeKind::Dense || kind == NodeKind::Conv2d; }
};

struct ModelSpec {
  int layers = 3;                    // hidden blocks
  int width = 512;                   // dense width / conv base channels / mixer channels
  int patch = 7;                     // mixer patch edge (square patches)
  std::vector<int64_t> input_shape;  // per-sample, e.g. {1,28,28} or {784}
  int num_classes = 10;
};

struct ModelOptions {
  bool binarize_weights = false;
  bool binary_activations = false;
  bool skip_connections = true;
  /// Force a specific hidden activation instead of the default rule
  /// (sign when binary_activations, tanh for binary-weight models, relu otherwise).
  std::optional<ActKind> activation_override;
};

/// Topologically ordered layer graph with its trainable-segment structure.
/// Injection points are the node outputs where the alternative algorithms
/// deliver their teaching signal: the last operation before each Dense/Conv2d
/// layer after the first, plus the network output. Segment k covers the node
/// range (injection_points[k-1], injection_points[k]].
struct ModelGraph {
  ArchId arch = ArchId::MlpPlain;
  ModelSpec spec;
  ModelOptions options;
  std::vector<LayerNode> nodes;
  std::vector<int> injection_points;
  std::vector<std::pair<int, int>> segments;  // inclusive node ranges
  std::vector<int64_t> input_shape;
  int num_classes = 0;

  int num_segments() const { return static_cast<int>(segments.size()); }
  /// Flattened activation size at segment k's injection point.
  int64_t segment_output_size(int k) const;
  int64_t parameter_count() const;
};

/// Validates topology, infers per-node shapes, and computes injection points
/// and segments. Must be called on hand-assembled graphs before use.
void finalize_model(ModelGraph& model);

ModelGraph build_model(ArchId arch, const ModelSpec& spec, const ModelOptions& options,
                       Rng& rng);

// ---- forward ----------------------------------------------------------------

enum class Mode { Train, Eval };
enum class RetentionPolicy { None, All };

inline constexpr float kBatchNormEps = 1e-5f;

/// Eval-mode forward of one node without touching model state (batchnorm uses
/// running statistics). `skip_source_output` supplies the source activation
/// for SkipAdd nodes. Shared by the float and the packed execution paths.
Tensor node_forward_eval(const LayerNode& node, const Tensor& input,
                         const Tensor* skip_source_output);

/// Tracks retained trace bytes across a training step; shared by the trace
/// objects a strategy creates so the peak covers the whole step.
class BufferAccountant {
 public:
  void add(int64_t bytes) {
    current_bytes_ += bytes;
    peak_bytes_ = std::max(peak_bytes_, current_bytes_);
  }
  void release(int64_t bytes) { current_bytes_ -= bytes; }
  void segment_retained() {
    ++current_segments_;
    peak_segments_ = std::max(peak_segments_, current_segments_);
  }
  void segment_released() { --current_segments_; }

  int64_t current_bytes() const { return current_bytes_; }
  int64_t peak_bytes() const { return peak_bytes_; }
  int peak_segments() const { return peak_segments_; }

 private:
  int64_t current_bytes_ = 0;
  int64_t peak_bytes_ = 0;
  int current_segments_ = 0;
  int peak_segments_ = 0;
};

/// Per-node buffers kept for the backward pass. What is stored depends on the
/// node kind: Dense/Conv2d keep their input, activations keep the tensor their
/// backward needs (output for tanh, pre-activation otherwise), batchnorm keeps
/// the normalized values plus inverse std, maxpool keeps argmax indices.
struct NodeTrace {
  Tensor main;
  Tensor aux;
  int64_t bytes = 0;
  bool retained = false;
};

struct ForwardTrace {
  std::vector<NodeTrace> nodes;
  BufferAccountant* accountant = nullptr;
  int64_t retained_bytes = 0;

  explicit ForwardTrace(size_t node_count, BufferAccountant* acct = nullptr)
      : nodes(node_count), accountant(acct) {}

  bool segment_retained(const ModelGraph& model, int k) const;
  void release_segment(const ModelGraph& model, int k);
  void release_all(const ModelGraph& model);
};

/// Runs the graph. In Train mode batchnorm uses batch statistics and updates
/// running stats; Eval uses running stats. With RetentionPolicy::None (or a
/// null trace) nothing is retained. Dense/Conv2d nodes flagged for weight
/// binarization compute with sign(W); the latent weights are not modified.
Tensor forward(ModelGraph& model, const Tensor& input, Mode mode,
               RetentionPolicy retention, ForwardTrace* trace);

/// Runs only segment k from its input activation. `retain` stores the
/// segment's backward buffers into `trace` and marks the segment retained.
Tensor forward_segment(ModelGraph& model, int k, const Tensor& segment_input,
                       Mode mode, bool retain, ForwardTrace* trace);

// ---- backward ---------------------------------------------------------------

/// Per-parameter gradients, laid out parallel to model.nodes[i].params.
struct Gradients {
  std::vector<std::vector<Tensor>> by_node;

  static Gradients sized_for(const ModelGraph& model) {
    Gradients g;
    g.by_node.resize(model.nodes.size());
    return g;
  }
  bool empty_node(int i) const { return by_node[static_cast<size_t>(i)].empty(); }
};

struct SegmentBackwardResult {
  Tensor input_error;  ///< error at the segment input, for callers that chain
  int ste_crossings = 0;  ///< sign-activation STE applications in this segment
};

/// Propagates `output_error` backward through segment k only, accumulating
/// parameter gradients into `grads`. Activation STEs use each node's SteKind;
/// tanh/relu/batchnorm/pool use exact derivatives. Weight gradients against
/// binarized weights flow to the latent weights unchanged (non-saturating
/// weight STE). SkipAdd routes the error to both branches. Callers that
/// discard the segment-input error pass `need_input_error = false` to skip
/// its final projection.
SegmentBackwardResult segment_backward(const ModelGraph& model, const ForwardTrace& trace,
                                       int k, const Tensor& output_error,
                                       Gradients& grads, bool need_input_error = true);

}  // namespace bnn
