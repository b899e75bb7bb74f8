#include "bnn/graph.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace bnn {

namespace {

constexpr float kBnMomentum = 0.1f;

int64_t product(const std::vector<int64_t>& dims) {
  return std::accumulate(dims.begin(), dims.end(), int64_t{1}, std::multiplies<>());
}

[[noreturn]] void node_error(int index, const std::string& msg) {
  throw std::invalid_argument("node " + std::to_string(index) + ": " + msg);
}

std::vector<int64_t> batched(int64_t n, const std::vector<int64_t>& per_sample) {
  std::vector<int64_t> s;
  s.reserve(per_sample.size() + 1);
  s.push_back(n);
  s.insert(s.end(), per_sample.begin(), per_sample.end());
  return s;
}

}  // namespace

int64_t ModelGraph::segment_output_size(int k) const {
  return product(nodes[static_cast<size_t>(injection_points[static_cast<size_t>(k)])].out_shape);
}

int64_t ModelGraph::parameter_count() const {
  int64_t n = 0;
  for (const auto& node : nodes)
    for (const auto& p : node.params) n += p.size();
  return n;
}

// ---- shape inference and validation -----------------------------------------

void finalize_model(ModelGraph& model) {
  if (model.nodes.empty()) throw std::invalid_argument("finalize_model: empty graph");
  if (model.input_shape.empty())
    throw std::invalid_argument("finalize_model: input shape not set");

  std::vector<int64_t> shape = model.input_shape;
  for (size_t i = 0; i < model.nodes.size(); ++i) {
    LayerNode& node = model.nodes[i];
    node.index = static_cast<int>(i);
    node.in_shape = shape;
    switch (node.kind) {
      case NodeKind::Dense: {
        if (node.params.size() != 2) node_error(node.index, "Dense expects {W, b}");
        const Tensor& w = node.params[0];
        if (w.rank() != 2 || shape.empty() || shape.back() != w.dim(0))
          node_error(node.index, "Dense weight shape " + shape_string(w.shape()) +
                                     " does not accept input " + shape_string(shape));
        if (node.params[1].size() != w.dim(1))
          node_error(node.index, "Dense bias length mismatch");
        shape.back() = w.dim(1);
        break;
      }
      case NodeKind::Conv2d: {
        if (node.params.size() != 2) node_error(node.index, "Conv2d expects {K, b}");
        const Tensor& k = node.params[0];
        if (shape.size() != 3 || k.rank() != 4 || k.dim(1) != shape[0])
          node_error(node.index, "Conv2d kernels " + shape_string(k.shape()) +
                                     " do not accept input " + shape_string(shape));
        const int64_t h = shape[1] + 2 * node.padding, w = shape[2] + 2 * node.padding;
        if (k.dim(2) > h || k.dim(3) > w || node.stride < 1)
          node_error(node.index, "Conv2d geometry invalid");
        shape = {k.dim(0), (h - k.dim(2)) / node.stride + 1,
                 (w - k.dim(3)) / node.stride + 1};
        break;
      }
      case NodeKind::Activation:
        break;
      case NodeKind::BatchNorm: {
        if (node.params.size() != 4) node_error(node.index, "BatchNorm expects 4 params");
        const int64_t channels = shape.size() == 3 ? shape[0] : shape.back();
        if (node.params[0].size() != channels)
          node_error(node.index, "BatchNorm channel count mismatch");
        break;
      }
      case NodeKind::MaxPool: {
        if (shape.size() != 3) node_error(node.index, "MaxPool expects c,h,w input");
        if (shape[1] < node.pool_k || shape[2] < node.pool_k)
          node_error(node.index, "MaxPool window larger than input");
        shape = {shape[0], (shape[1] - node.pool_k) / node.pool_stride + 1,
                 (shape[2] - node.pool_k) / node.pool_stride + 1};
        break;
      }
      case NodeKind::AvgPool: {
        if (shape.size() == 2) shape = {shape.back()};       // (P,C) -> (C)
        else if (shape.size() == 3) shape = {shape[0]};      // (c,h,w) -> (c)
        else node_error(node.index, "AvgPool expects rank-2/3 per-sample input");
        break;
      }
      case NodeKind::Flatten:
        shape = {product(shape)};
        break;
      case NodeKind::Reshape:
        if (node.reshape_to.empty() || product(node.reshape_to) != product(shape))
          node_error(node.index, "Reshape target size mismatch");
        shape = node.reshape_to;
        break;
      case NodeKind::Transpose:
        if (shape.size() < 2) node_error(node.index, "Transpose expects rank >= 2");
        std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
        break;
      case NodeKind::SkipAdd: {
        if (node.skip_source < 0 || node.skip_source >= node.index)
          node_error(node.index, "SkipAdd source must precede the node");
        const auto& src = model.nodes[static_cast<size_t>(node.skip_source)].out_shape;
        if (src != shape)
          node_error(node.index, "SkipAdd source shape " + shape_string(src) +
                                     " != input shape " + shape_string(shape));
        break;
      }
    }
    node.out_shape = shape;
  }

  // Injection points: last operation before each trainable layer after the
  // first, plus the network output.
  int first_trainable = -1;
  for (const auto& node : model.nodes)
    if (node.trainable() && first_trainable < 0) first_trainable = node.index;
  if (first_trainable < 0) throw std::invalid_argument("finalize_model: no trainable layers");

  model.injection_points.clear();
  for (const auto& node : model.nodes)
    if (node.trainable() && node.index > first_trainable)
      model.injection_points.push_back(node.index - 1);
  model.injection_points.push_back(static_cast<int>(model.nodes.size()) - 1);

  model.segments.clear();
  int start = 0;
  for (int inj : model.injection_points) {
    model.segments.emplace_back(start, inj);
    start = inj + 1;
  }

  // Skip connections must not reach past the owning segment's input.
  for (const auto& node : model.nodes) {
    if (node.kind != NodeKind::SkipAdd) continue;
    int seg_start = 0;
    for (const auto& [s, e] : model.segments)
      if (node.index >= s && node.index <= e) seg_start = s;
    if (node.skip_source < seg_start - 1)
      node_error(node.index, "SkipAdd source crosses a segment boundary");
  }
}

// ---- model construction ------------------------------------------------------

namespace {

Tensor glorot_init(Rng& rng, std::vector<int64_t> shape, int64_t fan_in, int64_t fan_out) {
  const float bound = std::sqrt(6.0f / static_cast<float>(fan_in + fan_out));
  return rng_uniform(rng, std::move(shape), -bound, bound);
}

LayerNode make_dense(Rng& rng, int64_t in, int64_t out) {
  LayerNode node;
  node.kind = NodeKind::Dense;
  node.params = {glorot_init(rng, {in, out}, in, out), Tensor({out})};
  return node;
}

LayerNode make_conv(Rng& rng, int64_t in_ch, int64_t out_ch, int k, int stride, int padding) {
  LayerNode node;
  node.kind = NodeKind::Conv2d;
  node.params = {glorot_init(rng, {out_ch, in_ch, k, k}, in_ch * k * k, out_ch * k * k),
                 Tensor({out_ch})};
  node.stride = stride;
  node.padding = padding;
  return node;
}

LayerNode make_batchnorm(int64_t channels) {
  LayerNode node;
  node.kind = NodeKind::BatchNorm;
  node.params = {Tensor::full({channels}, 1.0f), Tensor({channels}),
                 Tensor({channels}), Tensor::full({channels}, 1.0f)};
  return node;
}

LayerNode make_act(ActKind act) {
  LayerNode node;
  node.kind = NodeKind::Activation;
  node.act = act;
  node.ste = SteKind::Saturating;
  return node;
}

LayerNode make_simple(NodeKind kind) {
  LayerNode node;
  node.kind = kind;
  return node;
}

}  // namespace

ModelGraph build_model(ArchId arch, const ModelSpec& spec, const ModelOptions& options,
                       Rng& rng) {
  if (spec.layers < 1 || spec.width < 1 || spec.num_classes < 2 || spec.input_shape.empty())
    throw std::invalid_argument("build_model: inconsistent model spec");

  ModelGraph model;
  model.arch = arch;
  model.spec = spec;
  model.options = options;
  model.input_shape = spec.input_shape;
  model.num_classes = spec.num_classes;

  const ActKind hidden_act =
      options.activation_override.value_or(options.binary_activations ? ActKind::Sign
                                           : options.binarize_weights ? ActKind::Tanh
                                                                      : ActKind::Relu);
  const int64_t input_size = product(spec.input_shape);
  const int64_t width = spec.width;
  auto& nodes = model.nodes;

  switch (arch) {
    case ArchId::MlpPlain:
    case ArchId::MlpResidual: {
      nodes.push_back(make_simple(NodeKind::Flatten));
      int64_t prev = input_size;
      for (int l = 0; l < spec.layers; ++l) {
        const int block_input = static_cast<int>(nodes.size()) - 1;
        nodes.push_back(make_dense(rng, prev, width));
        nodes.push_back(make_batchnorm(width));
        if (arch == ArchId::MlpResidual && options.skip_connections && prev == width) {
          LayerNode skip = make_simple(NodeKind::SkipAdd);
          skip.skip_source = block_input;
          nodes.push_back(skip);
        }
        nodes.push_back(make_act(hidden_act));
        prev = width;
      }
      nodes.push_back(make_dense(rng, prev, spec.num_classes));
      break;
    }
    case ArchId::ConvPlain: {
      if (spec.input_shape.size() != 3)
        throw std::invalid_argument("build_model: ConvPlain expects c,h,w input");
      int64_t ch = spec.input_shape[0];
      int64_t h = spec.input_shape[1], w = spec.input_shape[2];
      int64_t out_ch = width;
      for (int l = 0; l < spec.layers; ++l) {
        nodes.push_back(make_conv(rng, ch, out_ch, 3, 1, 1));
        nodes.push_back(make_batchnorm(out_ch));
        nodes.push_back(make_act(hidden_act));
        ch = out_ch;
        if (l % 2 == 1 && h >= 2 && w >= 2) {
          nodes.push_back(make_simple(NodeKind::MaxPool));
          h /= 2;
          w /= 2;
          out_ch = std::min<int64_t>(out_ch * 2, width * 8);
        }
      }
      nodes.push_back(make_simple(NodeKind::Flatten));
      nodes.push_back(make_dense(rng, ch * h * w, spec.num_classes));
      break;
    }
    case ArchId::MiniMixer: {
      if (spec.input_shape.size() != 3)
        throw std::invalid_argument("build_model: MiniMixer expects c,h,w input");
      const int64_t c = spec.input_shape[0];
      const int64_t h = spec.input_shape[1], w = spec.input_shape[2];
      const int p = spec.patch;
      if (p < 1 || h % p != 0 || w % p != 0)
        throw std::invalid_argument("build_model: MiniMixer requires an exact patch grid");
      const int64_t patches = (h / p) * (w / p);

      nodes.push_back(make_conv(rng, c, width, p, p, 0));  // patch embedding
      LayerNode reshape = make_simple(NodeKind::Reshape);
      reshape.reshape_to = {width, patches};
      nodes.push_back(reshape);
      nodes.push_back(make_simple(NodeKind::Transpose));  // -> (patches, width)

      for (int l = 0; l < spec.layers; ++l) {
        // token mixing, applied in (width, patches) orientation
        nodes.push_back(make_simple(NodeKind::Transpose));
        const int token_input = static_cast<int>(nodes.size()) - 1;
        nodes.push_back(make_dense(rng, patches, patches));
        if (options.skip_connections) {
          LayerNode skip = make_simple(NodeKind::SkipAdd);
          skip.skip_source = token_input;
          nodes.push_back(skip);
        }
        nodes.push_back(make_simple(NodeKind::Transpose));
        nodes.push_back(make_batchnorm(width));
        nodes.push_back(make_act(hidden_act));
        const int channel_input = static_cast<int>(nodes.size()) - 1;
        // channel mixing
        nodes.push_back(make_dense(rng, width, width));
        nodes.push_back(make_batchnorm(width));
        if (options.skip_connections) {
          LayerNode skip = make_simple(NodeKind::SkipAdd);
          skip.skip_source = channel_input;
          nodes.push_back(skip);
        }
        nodes.push_back(make_act(hidden_act));
      }
      nodes.push_back(make_simple(NodeKind::AvgPool));
      nodes.push_back(make_dense(rng, width, spec.num_classes));
      break;
    }
  }

  if (options.binarize_weights) {
    // the first and last layers of the models are not binarized
    int first = -1, last = -1;
    for (auto& node : nodes)
      if (node.trainable()) {
        if (first < 0) first = static_cast<int>(&node - nodes.data());
        last = static_cast<int>(&node - nodes.data());
      }
    for (auto& node : nodes)
      if (node.trainable()) node.binarize_weights = true;
    nodes[static_cast<size_t>(first)].binarize_weights = false;
    nodes[static_cast<size_t>(last)].binarize_weights = false;
  }

  finalize_model(model);
  return model;
}

// ---- trace ------------------------------------------------------------------

namespace {

int64_t tensor_bytes(const Tensor& t) { return t.size() * static_cast<int64_t>(sizeof(float)); }

void retain_buffers(ForwardTrace& trace, int node, Tensor main, Tensor aux = {}) {
  NodeTrace& nt = trace.nodes[static_cast<size_t>(node)];
  nt.main = std::move(main);
  nt.aux = std::move(aux);
  nt.bytes = tensor_bytes(nt.main) + tensor_bytes(nt.aux);
  nt.retained = true;
  trace.retained_bytes += nt.bytes;
  if (trace.accountant) trace.accountant->add(nt.bytes);
}

}  // namespace

bool ForwardTrace::segment_retained(const ModelGraph& model, int k) const {
  const auto& [s, e] = model.segments[static_cast<size_t>(k)];
  for (int i = s; i <= e; ++i)
    if (nodes[static_cast<size_t>(i)].retained) return true;
  return false;
}

void ForwardTrace::release_segment(const ModelGraph& model, int k) {
  const bool was_retained = segment_retained(model, k);
  const auto& [s, e] = model.segments[static_cast<size_t>(k)];
  for (int i = s; i <= e; ++i) {
    NodeTrace& nt = nodes[static_cast<size_t>(i)];
    if (!nt.retained) continue;
    retained_bytes -= nt.bytes;
    if (accountant) accountant->release(nt.bytes);
    nt = NodeTrace{};
  }
  if (was_retained && accountant) accountant->segment_released();
}

void ForwardTrace::release_all(const ModelGraph& model) {
  for (int k = 0; k < model.num_segments(); ++k) release_segment(model, k);
}

// ---- batchnorm --------------------------------------------------------------

namespace {

// Channel layout: dim 1 for image tensors (n,c,h,w), last dim otherwise.
struct ChannelView {
  int64_t channels;
  int64_t per_channel;  // elements per channel
  bool channel_last;
  int64_t n, spatial;  // rank-4 only
};

ChannelView channel_view(const Tensor& x) {
  ChannelView v{};
  if (x.rank() == 4) {
    v.channels = x.dim(1);
    v.n = x.dim(0);
    v.spatial = x.dim(2) * x.dim(3);
    v.per_channel = v.n * v.spatial;
    v.channel_last = false;
  } else {
    v.channels = x.shape().back();
    v.per_channel = x.size() / v.channels;
    v.channel_last = true;
  }
  return v;
}

template <typename Fn>
void for_each_in_channel(const ChannelView& v, int64_t c, Fn fn) {
  if (v.channel_last) {
    for (int64_t r = 0; r < v.per_channel; ++r) fn(r * v.channels + c);
  } else {
    for (int64_t ni = 0; ni < v.n; ++ni) {
      const int64_t base = (ni * v.channels + c) * v.spatial;
      for (int64_t s = 0; s < v.spatial; ++s) fn(base + s);
    }
  }
}

Tensor batchnorm_eval(const LayerNode& node, const Tensor& x) {
  const ChannelView v = channel_view(x);
  Tensor out = Tensor::uninitialized(x.shape());
  const Tensor& scale = node.params[0];
  const Tensor& shift = node.params[1];
  const Tensor& running_mean = node.params[2];
  const Tensor& running_var = node.params[3];
#pragma omp parallel for schedule(static)
  for (int64_t c = 0; c < v.channels; ++c) {
    const float inv = 1.0f / std::sqrt(running_var[c] + kBatchNormEps);
    const float g = scale[c], b = shift[c], m = running_mean[c];
    for_each_in_channel(v, c, [&](int64_t i) { out[i] = (x[i] - m) * inv * g + b; });
  }
  return out;
}

Tensor batchnorm_forward(LayerNode& node, const Tensor& x, Mode mode, bool retain,
                         ForwardTrace* trace) {
  if (mode == Mode::Eval) return batchnorm_eval(node, x);

  const ChannelView v = channel_view(x);
  Tensor out = Tensor::uninitialized(x.shape());
  const Tensor& scale = node.params[0];
  const Tensor& shift = node.params[1];
  Tensor& running_mean = node.params[2];
  Tensor& running_var = node.params[3];

  Tensor xhat = Tensor::uninitialized(x.shape());
  Tensor inv_std = Tensor::uninitialized({v.channels});
  const double n_elems = static_cast<double>(v.per_channel);
#pragma omp parallel for schedule(static)
  for (int64_t c = 0; c < v.channels; ++c) {
    double sum = 0.0;
    for_each_in_channel(v, c, [&](int64_t i) { sum += x[i]; });
    const float m = static_cast<float>(sum / n_elems);
    double var_acc = 0.0;
    for_each_in_channel(v, c, [&](int64_t i) {
      const double d = x[i] - m;
      var_acc += d * d;
    });
    const float var = static_cast<float>(var_acc / n_elems);
    const float inv = 1.0f / std::sqrt(var + kBatchNormEps);
    inv_std[c] = inv;
    const float g = scale[c], b = shift[c];
    for_each_in_channel(v, c, [&](int64_t i) {
      const float xh = (x[i] - m) * inv;
      xhat[i] = xh;
      out[i] = xh * g + b;
    });
    running_mean[c] = (1.0f - kBnMomentum) * running_mean[c] + kBnMomentum * m;
    const float unbiased =
        v.per_channel > 1 ? var * static_cast<float>(n_elems / (n_elems - 1.0)) : var;
    running_var[c] = (1.0f - kBnMomentum) * running_var[c] + kBnMomentum * unbiased;
  }
  if (retain && trace) retain_buffers(*trace, node.index, std::move(xhat), std::move(inv_std));
  return out;
}

Tensor maxpool_forward(const LayerNode& node, const Tensor& input, Tensor* argmax) {
  const int64_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const int64_t oh = (h - node.pool_k) / node.pool_stride + 1;
  const int64_t ow = (w - node.pool_k) / node.pool_stride + 1;
  Tensor out = Tensor::uninitialized({n, c, oh, ow});
  for (int64_t ni = 0; ni < n; ++ni)
    for (int64_t ci = 0; ci < c; ++ci) {
      const float* ib = input.data() + (ni * c + ci) * h * w;
      float* ob = out.data() + (ni * c + ci) * oh * ow;
      float* ab = argmax ? argmax->data() + (ni * c + ci) * oh * ow : nullptr;
      for (int64_t y = 0; y < oh; ++y)
        for (int64_t x = 0; x < ow; ++x) {
          int64_t best = -1;
          float bv = 0.0f;
          for (int ky = 0; ky < node.pool_k; ++ky)
            for (int kx = 0; kx < node.pool_k; ++kx) {
              const int64_t iy = y * node.pool_stride + ky;
              const int64_t ix = x * node.pool_stride + kx;
              const float v = ib[iy * w + ix];
              if (best < 0 || v > bv) {  // first-encountered wins ties
                best = iy * w + ix;
                bv = v;
              }
            }
          ob[y * ow + x] = bv;
          if (ab) ab[y * ow + x] = static_cast<float>(best);
        }
    }
  return out;
}

Tensor avgpool_forward(const Tensor& input) {
  if (input.rank() == 3) {
    const int64_t n = input.dim(0), p = input.dim(1), c = input.dim(2);
    Tensor out = Tensor::uninitialized({n, c});
    for (int64_t ni = 0; ni < n; ++ni)
      for (int64_t ci = 0; ci < c; ++ci) {
        float acc = 0.0f;
        for (int64_t pi = 0; pi < p; ++pi) acc += input[(ni * p + pi) * c + ci];
        out[ni * c + ci] = acc / static_cast<float>(p);
      }
    return out;
  }
  const int64_t n = input.dim(0), c = input.dim(1), spatial = input.dim(2) * input.dim(3);
  Tensor out = Tensor::uninitialized({n, c});
  for (int64_t ni = 0; ni < n; ++ni)
    for (int64_t ci = 0; ci < c; ++ci) {
      const float* ib = input.data() + (ni * c + ci) * spatial;
      float acc = 0.0f;
      for (int64_t s = 0; s < spatial; ++s) acc += ib[s];
      out[ni * c + ci] = acc / static_cast<float>(spatial);
    }
  return out;
}

Tensor batchnorm_backward(const LayerNode& node, const NodeTrace& nt, const Tensor& dy,
                          std::vector<Tensor>& param_grads) {
  const Tensor& xhat = nt.main;
  const Tensor& inv_std = nt.aux;
  const Tensor& scale = node.params[0];
  const ChannelView v = channel_view(dy);
  Tensor dx = Tensor::uninitialized(dy.shape());
  Tensor dscale = Tensor::uninitialized({v.channels});
  Tensor dshift = Tensor::uninitialized({v.channels});
  const double n_elems = static_cast<double>(v.per_channel);
#pragma omp parallel for schedule(static)
  for (int64_t c = 0; c < v.channels; ++c) {
    const float g = scale[c];
    double s_dy = 0.0, s_dyxh = 0.0;
    for_each_in_channel(v, c, [&](int64_t i) {
      s_dy += dy[i];
      s_dyxh += static_cast<double>(dy[i]) * xhat[i];
    });
    dscale[c] = static_cast<float>(s_dyxh);
    dshift[c] = static_cast<float>(s_dy);
    const float mean_dxh = static_cast<float>(s_dy * g / n_elems);
    const float mean_dxh_xh = static_cast<float>(s_dyxh * g / n_elems);
    const float inv = inv_std[c];
    for_each_in_channel(v, c, [&](int64_t i) {
      dx[i] = inv * (dy[i] * g - mean_dxh - xhat[i] * mean_dxh_xh);
    });
  }
  param_grads = {std::move(dscale), std::move(dshift)};
  return dx;
}

// ---- dense / conv helpers -----------------------------------------------------

// Borrows the latent weights directly for float layers; binarized layers
// materialize sign(W) into the holder.
struct WeightView {
  Tensor binarized;
  const Tensor* w = nullptr;
};

WeightView weight_view(const LayerNode& node) {
  WeightView v;
  if (node.binarize_weights) {
    v.binarized = binarize_weights(node.params[0]);
    v.w = &v.binarized;
  } else {
    v.w = &node.params[0];
  }
  return v;
}

Tensor add_row_bias(Tensor z, const Tensor& bias) {
  const int64_t rows = z.rows_flat(), cols = z.last_dim();
  float* p = z.data();
  const float* b = bias.data();
  for (int64_t i = 0; i < rows; ++i)
    for (int64_t j = 0; j < cols; ++j) p[i * cols + j] += b[j];
  return z;
}

Tensor add_channel_bias(Tensor z, const Tensor& bias) {
  const int64_t n = z.dim(0), c = z.dim(1), spatial = z.dim(2) * z.dim(3);
  float* p = z.data();
  for (int64_t ni = 0; ni < n; ++ni)
    for (int64_t ci = 0; ci < c; ++ci) {
      const float b = bias[ci];
      float* base = p + (ni * c + ci) * spatial;
      for (int64_t s = 0; s < spatial; ++s) base[s] += b;
    }
  return z;
}

Tensor transpose_last2(const Tensor& x) {
  const int64_t b = x.dim(0), r = x.dim(1), c = x.dim(2);
  Tensor out = Tensor::uninitialized({b, c, r});
  const float* src = x.data();
  float* dst = out.data();
  for (int64_t bi = 0; bi < b; ++bi) {
    const float* sb = src + bi * r * c;
    float* db = dst + bi * r * c;
    for (int64_t i = 0; i < r; ++i)
      for (int64_t j = 0; j < c; ++j) db[j * r + i] = sb[i * c + j];
  }
  return out;
}

Tensor conv2d_input_grad(const Tensor& dy, const Tensor& kernels, int stride, int padding,
                         const std::vector<int64_t>& in_shape_batched) {
  const int64_t n = dy.dim(0), o = dy.dim(1), oh = dy.dim(2), ow = dy.dim(3);
  const int64_t c = kernels.dim(1), kh = kernels.dim(2), kw = kernels.dim(3);
  const int64_t h = in_shape_batched[2], w = in_shape_batched[3];
  Tensor dx(in_shape_batched);
  const float* pdy = dy.data();
  const float* pk = kernels.data();
  float* pdx = dx.data();
#pragma omp parallel for collapse(2) schedule(static)
  for (int64_t ni = 0; ni < n; ++ni) {
    for (int64_t ci = 0; ci < c; ++ci) {
      float* dxb = pdx + (ni * c + ci) * h * w;
      for (int64_t oi = 0; oi < o; ++oi) {
        const float* dyb = pdy + (ni * o + oi) * oh * ow;
        const float* kb = pk + (oi * c + ci) * kh * kw;
        for (int64_t y = 0; y < oh; ++y) {
          const int64_t iy0 = y * stride - padding;
          for (int64_t x = 0; x < ow; ++x) {
            const int64_t ix0 = x * stride - padding;
            const float g = dyb[y * ow + x];
            for (int64_t ky = 0; ky < kh; ++ky) {
              const int64_t iy = iy0 + ky;
              if (iy < 0 || iy >= h) continue;
              for (int64_t kx = 0; kx < kw; ++kx) {
                const int64_t ix = ix0 + kx;
                if (ix < 0 || ix >= w) continue;
                dxb[iy * w + ix] += g * kb[ky * kw + kx];
              }
            }
          }
        }
      }
    }
  }
  return dx;
}

Tensor conv2d_weight_grad(const Tensor& input, const Tensor& dy, int stride, int padding,
                          const std::vector<int64_t>& kernel_shape) {
  const int64_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const int64_t o = dy.dim(1), oh = dy.dim(2), ow = dy.dim(3);
  const int64_t kh = kernel_shape[2], kw = kernel_shape[3];
  Tensor dk(kernel_shape);
  const float* pin = input.data();
  const float* pdy = dy.data();
  float* pdk = dk.data();
#pragma omp parallel for collapse(2) schedule(static)
  for (int64_t oi = 0; oi < o; ++oi) {
    for (int64_t ci = 0; ci < c; ++ci) {
      float* dkb = pdk + (oi * c + ci) * kh * kw;
      for (int64_t ky = 0; ky < kh; ++ky) {
        for (int64_t kx = 0; kx < kw; ++kx) {
          float acc = 0.0f;
          for (int64_t ni = 0; ni < n; ++ni) {
            const float* dyb = pdy + (ni * o + oi) * oh * ow;
            const float* inb = pin + (ni * c + ci) * h * w;
            for (int64_t y = 0; y < oh; ++y) {
              const int64_t iy = y * stride - padding + ky;
              if (iy < 0 || iy >= h) continue;
              for (int64_t x = 0; x < ow; ++x) {
                const int64_t ix = x * stride - padding + kx;
                if (ix < 0 || ix >= w) continue;
                acc += dyb[y * ow + x] * inb[iy * w + ix];
              }
            }
          }
          dkb[ky * kw + kx] = acc;
        }
      }
    }
  }
  return dk;
}

}  // namespace

// ---- forward ------------------------------------------------------------------

Tensor node_forward_eval(const LayerNode& node, const Tensor& input,
                         const Tensor* skip_source_output) {
  switch (node.kind) {
    case NodeKind::Dense: {
      const Tensor x2 = input.reshaped({input.rows_flat(), input.last_dim()});
      const WeightView wv = weight_view(node);
      Tensor z = add_row_bias(matmul(x2, *wv.w), node.params[1]);
      return std::move(z).reshaped(batched(input.dim(0), node.out_shape));
    }
    case NodeKind::Conv2d:
      return add_channel_bias(
          conv2d(input, node.binarize_weights ? binarize_weights(node.params[0])
                                              : node.params[0],
                 node.stride, node.padding),
          node.params[1]);
    case NodeKind::Activation:
      switch (node.act) {
        case ActKind::Tanh: return tanh(input);
        case ActKind::Relu: return relu(input);
        case ActKind::Sign: return sign_forward(input);
      }
      node_error(node.index, "unknown activation");
    case NodeKind::BatchNorm:
      return batchnorm_eval(node, input);
    case NodeKind::MaxPool:
      return maxpool_forward(node, input, nullptr);
    case NodeKind::AvgPool:
      return avgpool_forward(input);
    case NodeKind::Flatten:
      return input.reshaped({input.dim(0), product(node.out_shape)});
    case NodeKind::Reshape:
      return input.reshaped(batched(input.dim(0), node.reshape_to));
    case NodeKind::Transpose:
      return transpose_last2(input);
    case NodeKind::SkipAdd:
      if (!skip_source_output)
        node_error(node.index, "SkipAdd source activation not supplied");
      return add(input, *skip_source_output);
  }
  node_error(node.index, "unknown node kind");
}

namespace {

Tensor node_forward(LayerNode& node, const Tensor& input, Mode mode, bool retain,
                    ForwardTrace* trace, const std::vector<Tensor>& segment_outputs,
                    int segment_start, const Tensor& segment_input) {
  switch (node.kind) {
    case NodeKind::Dense: {
      Tensor x2 = input.reshaped({input.rows_flat(), input.last_dim()});
      const WeightView wv = weight_view(node);
      Tensor z = add_row_bias(matmul(x2, *wv.w), node.params[1]);
      if (retain && trace) retain_buffers(*trace, node.index, std::move(x2));
      return std::move(z).reshaped(batched(input.dim(0), node.out_shape));
    }
    case NodeKind::Conv2d: {
      Tensor z = node_forward_eval(node, input, nullptr);
      if (retain && trace) retain_buffers(*trace, node.index, input);
      return z;
    }
    case NodeKind::Activation: {
      Tensor y = node_forward_eval(node, input, nullptr);
      if (retain && trace)
        retain_buffers(*trace, node.index, node.act == ActKind::Tanh ? y : input);
      return y;
    }
    case NodeKind::BatchNorm:
      return batchnorm_forward(node, input, mode, retain, trace);
    case NodeKind::MaxPool: {
      Tensor arg({input.dim(0), input.dim(1),
                  (input.dim(2) - node.pool_k) / node.pool_stride + 1,
                  (input.dim(3) - node.pool_k) / node.pool_stride + 1});
      Tensor out = maxpool_forward(node, input, &arg);
      if (retain && trace) retain_buffers(*trace, node.index, Tensor(), std::move(arg));
      return out;
    }
    case NodeKind::SkipAdd: {
      const Tensor& src =
          node.skip_source >= segment_start
              ? segment_outputs[static_cast<size_t>(node.skip_source - segment_start)]
              : segment_input;
      return node_forward_eval(node, input, &src);
    }
    default:
      return node_forward_eval(node, input, nullptr);
  }
}

}  // namespace

Tensor forward_segment(ModelGraph& model, int k, const Tensor& segment_input, Mode mode,
                       bool retain, ForwardTrace* trace) {
  const auto& [start, end] = model.segments[static_cast<size_t>(k)];
  if (retain && trace && trace->accountant && !trace->segment_retained(model, k))
    trace->accountant->segment_retained();
  std::vector<Tensor> outputs(static_cast<size_t>(end - start + 1));
  const Tensor* current = &segment_input;
  for (int i = start; i <= end; ++i) {
    LayerNode& node = model.nodes[static_cast<size_t>(i)];
    try {
      outputs[static_cast<size_t>(i - start)] =
          node_forward(node, *current, mode, retain, trace, outputs, start,
                      segment_input);
    } catch (const std::invalid_argument& e) {
      node_error(i, e.what());
    }
    current = &outputs[static_cast<size_t>(i - start)];
  }
  return std::move(outputs.back());
}

Tensor forward(ModelGraph& model, const Tensor& input, Mode mode,
               RetentionPolicy retention, ForwardTrace* trace) {
  if (batched(input.dim(0), model.input_shape) != input.shape() &&
      !(model.input_shape.size() == 1 && input.rank() == 2 &&
        input.dim(1) == model.input_shape[0]))
    throw std::invalid_argument("forward: input shape " + shape_string(input.shape()) +
                                " does not match model input " +
                                shape_string(model.input_shape));
  const bool retain = retention == RetentionPolicy::All && trace != nullptr;
  Tensor act = input;
  for (int k = 0; k < model.num_segments(); ++k)
    act = forward_segment(model, k, act, mode, retain, trace);
  return act;
}

// ---- backward -------------------------------------------------------------------

namespace {

void accumulate(Tensor& into, Tensor t) {
  if (into.size() == 0)
    into = std::move(t);
  else
    into = add(into, t);
}

}  // namespace

SegmentBackwardResult segment_backward(const ModelGraph& model, const ForwardTrace& trace,
                                       int k, const Tensor& output_error,
                                       Gradients& grads, bool need_input_error) {
  const auto& [start, end] = model.segments[static_cast<size_t>(k)];
  SegmentBackwardResult result;

  // err[i - start + 1] is the error at node i's output; err[0] is the error at
  // the segment input.
  std::vector<Tensor> err(static_cast<size_t>(end - start + 2));
  err[static_cast<size_t>(end - start + 1)] = output_error;

  for (int i = end; i >= start; --i) {
    const LayerNode& node = model.nodes[static_cast<size_t>(i)];
    const NodeTrace& nt = trace.nodes[static_cast<size_t>(i)];
    Tensor dy = std::move(err[static_cast<size_t>(i - start + 1)]);
    if (dy.size() == 0)
      node_error(i, "no error reached this node in backward");
    Tensor& below = err[static_cast<size_t>(i - start)];

    const bool needs_trace = node.kind == NodeKind::Dense || node.kind == NodeKind::Conv2d ||
                             node.kind == NodeKind::Activation ||
                             node.kind == NodeKind::BatchNorm ||
                             node.kind == NodeKind::MaxPool;
    if (needs_trace && !nt.retained)
      node_error(i, "missing trace buffers (segment not retained)");

    switch (node.kind) {
      case NodeKind::Dense: {
        const Tensor& x2 = nt.main;
        const int64_t batch_n = dy.dim(0);
        const Tensor dz2 = std::move(dy).reshaped({x2.dim(0), node.out_shape.back()});
        Tensor dw = matmul_tn(x2, dz2);  // latent grad == binary grad (NS STE)
        Tensor db = Tensor::uninitialized({node.out_shape.back()});
        for (int64_t j = 0; j < db.size(); ++j) {
          float acc = 0.0f;
          for (int64_t r = 0; r < dz2.dim(0); ++r) acc += dz2[r * db.size() + j];
          db[j] = acc;
        }
        grads.by_node[static_cast<size_t>(i)] = {std::move(dw), std::move(db)};
        if (i != start || need_input_error) {
          const WeightView wv = weight_view(node);
          Tensor dx = matmul(dz2, transpose2d(*wv.w));
          accumulate(below, std::move(dx).reshaped(batched(batch_n, node.in_shape)));
        }
        break;
      }
      case NodeKind::Conv2d: {
        const Tensor& x = nt.main;
        Tensor dk = conv2d_weight_grad(x, dy, node.stride, node.padding,
                                       node.params[0].shape());
        const int64_t o = dy.dim(1), n = dy.dim(0), spatial = dy.dim(2) * dy.dim(3);
        Tensor db({o});
        for (int64_t oi = 0; oi < o; ++oi) {
          float acc = 0.0f;
          for (int64_t ni = 0; ni < n; ++ni) {
            const float* b = dy.data() + (ni * o + oi) * spatial;
            for (int64_t s = 0; s < spatial; ++s) acc += b[s];
          }
          db[oi] = acc;
        }
        grads.by_node[static_cast<size_t>(i)] = {std::move(dk), std::move(db)};
        if (i != start || need_input_error) {
          const WeightView wv = weight_view(node);
          Tensor dx = conv2d_input_grad(dy, *wv.w, node.stride, node.padding,
                                        batched(dy.dim(0), node.in_shape));
          accumulate(below, std::move(dx));
        }
        break;
      }
      case NodeKind::Activation: {
        Tensor dz;
        switch (node.act) {
          case ActKind::Tanh:
            dz = zip(dy, nt.main, [](float g, float y) { return g * (1.0f - y * y); });
            break;
          case ActKind::Relu:
            dz = zip(dy, nt.main, [](float g, float z) { return z > 0.0f ? g : 0.0f; });
            break;
          case ActKind::Sign:
            dz = ste_backward(node.ste, dy, nt.main);
            ++result.ste_crossings;
            break;
        }
        accumulate(below, std::move(dz));
        break;
      }
      case NodeKind::BatchNorm: {
        std::vector<Tensor> pg;
        Tensor dx = batchnorm_backward(node, nt, dy, pg);
        grads.by_node[static_cast<size_t>(i)] = std::move(pg);
        accumulate(below, std::move(dx));
        break;
      }
      case NodeKind::MaxPool: {
        const Tensor& arg = nt.aux;
        Tensor dx(batched(dy.dim(0), node.in_shape));
        const int64_t n = dy.dim(0), c = dy.dim(1), spatial_out = dy.dim(2) * dy.dim(3);
        const int64_t spatial_in = node.in_shape[1] * node.in_shape[2];
        for (int64_t ni = 0; ni < n; ++ni)
          for (int64_t ci = 0; ci < c; ++ci) {
            const float* gb = dy.data() + (ni * c + ci) * spatial_out;
            const float* ab = arg.data() + (ni * c + ci) * spatial_out;
            float* xb = dx.data() + (ni * c + ci) * spatial_in;
            for (int64_t s = 0; s < spatial_out; ++s)
              xb[static_cast<int64_t>(ab[s])] += gb[s];
          }
        accumulate(below, std::move(dx));
        break;
      }
      case NodeKind::AvgPool: {
        Tensor dx(batched(dy.dim(0), node.in_shape));
        if (node.in_shape.size() == 2) {
          const int64_t n = dy.dim(0), p = node.in_shape[0], c = node.in_shape[1];
          const float inv = 1.0f / static_cast<float>(p);
          for (int64_t ni = 0; ni < n; ++ni)
            for (int64_t pi = 0; pi < p; ++pi)
              for (int64_t ci = 0; ci < c; ++ci)
                dx[(ni * p + pi) * c + ci] = dy[ni * c + ci] * inv;
        } else {
          const int64_t n = dy.dim(0), c = node.in_shape[0],
                        spatial = node.in_shape[1] * node.in_shape[2];
          const float inv = 1.0f / static_cast<float>(spatial);
          for (int64_t ni = 0; ni < n; ++ni)
            for (int64_t ci = 0; ci < c; ++ci) {
              float* b = dx.data() + (ni * c + ci) * spatial;
              const float g = dy[ni * c + ci] * inv;
              for (int64_t s = 0; s < spatial; ++s) b[s] = g;
            }
        }
        accumulate(below, std::move(dx));
        break;
      }
      case NodeKind::Flatten:
      case NodeKind::Reshape:
      {
        const int64_t batch_n = dy.dim(0);
        accumulate(below, std::move(dy).reshaped(batched(batch_n, node.in_shape)));
      }
        break;
      case NodeKind::Transpose:
        accumulate(below, transpose_last2(dy));
        break;
      case NodeKind::SkipAdd: {
        // gradient of addition: identity on each operand
        if (node.skip_source >= start)
          accumulate(err[static_cast<size_t>(node.skip_source - start + 1)], dy);
        else
          accumulate(err[0], dy);  // source is the segment input
        accumulate(below, dy);
        break;
      }
    }
  }

  result.input_error = std::move(err[0]);
  return result;
}

}  // namespace bnn
