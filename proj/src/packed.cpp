#include "bnn/packed.hpp"

#include <bit>
#include <immintrin.h>
#include <cstring>
#include <fstream>

static_assert(std::endian::native == std::endian::little,
              "packed container i/o assumes a little-endian host");

namespace bnn {

namespace {

int64_t words_for(int64_t bits) { return (bits + 63) / 64; }

uint64_t tail_mask_for(int64_t bits) {
  const int64_t rem = bits % 64;
  return rem == 0 ? ~0ULL : ((1ULL << rem) - 1);
}

}  // namespace

PackedBitTensor pack(const Tensor& x) {
  PackedBitTensor p;
  p.shape = x.shape();
  p.row_bits = x.last_dim();
  p.rows = p.row_bits == 0 ? 0 : x.size() / p.row_bits;
  p.words_per_row = words_for(p.row_bits);
  p.tail_mask = tail_mask_for(p.row_bits);
  p.words.assign(static_cast<size_t>(p.rows * p.words_per_row), 0);
  const float* src = x.data();
  for (int64_t r = 0; r < p.rows; ++r) {
    uint64_t* row = p.words.data() + r * p.words_per_row;
    for (int64_t b = 0; b < p.row_bits; ++b) {
      const float v = src[r * p.row_bits + b];
      if (v == 1.0f)
        row[b >> 6] |= 1ULL << (b & 63);
      else if (v != -1.0f)
        throw std::invalid_argument("pack: element is not +/-1");
    }
  }
  return p;
}

Tensor unpack(const PackedBitTensor& p) {
  Tensor x = Tensor::uninitialized(p.shape);
  float* dst = x.data();
  for (int64_t r = 0; r < p.rows; ++r) {
    const uint64_t* row = p.words.data() + r * p.words_per_row;
    for (int64_t b = 0; b < p.row_bits; ++b)
      dst[r * p.row_bits + b] = (row[b >> 6] >> (b & 63)) & 1 ? 1.0f : -1.0f;
  }
  return x;
}

namespace {

// Popcount of XNOR over a full row pair, padding included. Padding bits are
// zero in both rows, so they always count as matches: the caller subtracts the
// constant wpr*64 - k overcount once.
#if defined(__AVX512VPOPCNTDQ__) && defined(__AVX512F__)
inline int64_t xnor_popcount_row(const uint64_t* a, const uint64_t* b, int64_t words) {
  __m512i acc = _mm512_setzero_si512();
  int64_t t = 0;
  for (; t + 8 <= words; t += 8) {
    const __m512i va = _mm512_loadu_si512(a + t);
    const __m512i vb = _mm512_loadu_si512(b + t);
    const __m512i x = _mm512_ternarylogic_epi64(va, vb, vb, 0x99);  // ~(a ^ b)
    acc = _mm512_add_epi64(acc, _mm512_popcnt_epi64(x));
  }
  int64_t pc = _mm512_reduce_add_epi64(acc);
  for (; t < words; ++t) pc += std::popcount(~(a[t] ^ b[t]));
  return pc;
}

inline int64_t xnor_popcount_row_masked(const uint64_t* a, const uint64_t* b,
                                        const uint64_t* mask, int64_t words) {
  __m512i acc = _mm512_setzero_si512();
  int64_t t = 0;
  for (; t + 8 <= words; t += 8) {
    const __m512i va = _mm512_loadu_si512(a + t);
    const __m512i vb = _mm512_loadu_si512(b + t);
    const __m512i vm = _mm512_loadu_si512(mask + t);
    const __m512i x =
        _mm512_and_si512(_mm512_ternarylogic_epi64(va, vb, vb, 0x99), vm);
    acc = _mm512_add_epi64(acc, _mm512_popcnt_epi64(x));
  }
  int64_t pc = _mm512_reduce_add_epi64(acc);
  for (; t < words; ++t) pc += std::popcount(~(a[t] ^ b[t]) & mask[t]);
  return pc;
}
#else
inline int64_t xnor_popcount_row(const uint64_t* a, const uint64_t* b, int64_t words) {
  int64_t pc = 0;
  int64_t t = 0;
  for (; t + 4 <= words; t += 4)
    pc += std::popcount(~(a[t] ^ b[t])) + std::popcount(~(a[t + 1] ^ b[t + 1])) +
          std::popcount(~(a[t + 2] ^ b[t + 2])) + std::popcount(~(a[t + 3] ^ b[t + 3]));
  for (; t < words; ++t) pc += std::popcount(~(a[t] ^ b[t]));
  return pc;
}

inline int64_t xnor_popcount_row_masked(const uint64_t* a, const uint64_t* b,
                                        const uint64_t* mask, int64_t words) {
  int64_t pc = 0;
  for (int64_t t = 0; t < words; ++t) pc += std::popcount(~(a[t] ^ b[t]) & mask[t]);
  return pc;
}
#endif

}  // namespace

Tensor xnor_popcount_matmul(const PackedBitTensor& a, const PackedBitTensor& w) {
  if (a.row_bits != w.row_bits)
    throw std::invalid_argument("xnor_popcount_matmul: shared dimension mismatch");
  const int64_t m = a.rows, n = w.rows, wpr = a.words_per_row;
  const int64_t k = a.row_bits;
  const int64_t pad_bits = wpr * 64 - k;  // zero in both operands, always match
  const float offset = static_cast<float>(2 * pad_bits + k);
  Tensor out = Tensor::uninitialized({m, n});
  float* dst = out.data();
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < m; ++i) {
    const uint64_t* arow = a.words.data() + i * wpr;
    for (int64_t j = 0; j < n; ++j) {
      const int64_t pc = xnor_popcount_row(arow, w.words.data() + j * wpr, wpr);
      dst[i * n + j] = static_cast<float>(2 * pc) - offset;
    }
  }
  return out;
}

Tensor xnor_popcount_matmul_masked(const MaskedPackedRows& a, const PackedBitTensor& w) {
  if (a.row_bits != w.row_bits)
    throw std::invalid_argument("xnor_popcount_matmul_masked: dimension mismatch");
  const int64_t m = a.rows, n = w.rows, wpr = a.words_per_row;
  Tensor out = Tensor::uninitialized({m, n});
  float* dst = out.data();
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < m; ++i) {
    const uint64_t* arow = a.words.data() + i * wpr;
    const uint64_t* mrow = a.masks.data() + i * wpr;
    const int32_t valid = a.valid_counts[static_cast<size_t>(i)];
    for (int64_t j = 0; j < n; ++j) {
      const int64_t pc =
          xnor_popcount_row_masked(arow, w.words.data() + j * wpr, mrow, wpr);
      dst[i * n + j] = static_cast<float>(2 * pc - valid);
    }
  }
  return out;
}

Tensor xnor_conv2d(const Tensor& input, const PackedBitTensor& kernels, int64_t c,
                   int64_t kh, int64_t kw, int stride, int padding) {
  const int64_t n = input.dim(0), h = input.dim(2), w = input.dim(3);
  if (input.dim(1) != c)
    throw std::invalid_argument("xnor_conv2d: channel mismatch");
  const int64_t o = kernels.rows;
  const int64_t oh = (h + 2 * padding - kh) / stride + 1;
  const int64_t ow = (w + 2 * padding - kw) / stride + 1;
  const int64_t row_bits = c * kh * kw;

  MaskedPackedRows rows;
  rows.rows = n * oh * ow;
  rows.row_bits = row_bits;
  rows.words_per_row = words_for(row_bits);
  rows.words.assign(static_cast<size_t>(rows.rows * rows.words_per_row), 0);
  rows.masks.assign(rows.words.size(), 0);
  rows.valid_counts.assign(static_cast<size_t>(rows.rows), 0);

  const float* src = input.data();
  for (int64_t ni = 0; ni < n; ++ni)
    for (int64_t y = 0; y < oh; ++y)
      for (int64_t x = 0; x < ow; ++x) {
        const int64_t r = (ni * oh + y) * ow + x;
        uint64_t* wrow = rows.words.data() + r * rows.words_per_row;
        uint64_t* mrow = rows.masks.data() + r * rows.words_per_row;
        int32_t valid = 0;
        int64_t bit = 0;
        for (int64_t ci = 0; ci < c; ++ci) {
          const float* ib = src + (ni * c + ci) * h * w;
          for (int64_t ky = 0; ky < kh; ++ky) {
            const int64_t iy = y * stride - padding + ky;
            for (int64_t kx = 0; kx < kw; ++kx, ++bit) {
              const int64_t ix = x * stride - padding + kx;
              if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
              const float v = ib[iy * w + ix];
              if (v == 1.0f)
                wrow[bit >> 6] |= 1ULL << (bit & 63);
              else if (v != -1.0f)
                throw std::invalid_argument("xnor_conv2d: input element is not +/-1");
              mrow[bit >> 6] |= 1ULL << (bit & 63);
              ++valid;
            }
          }
        }
        rows.valid_counts[static_cast<size_t>(r)] = valid;
      }

  const Tensor flat = xnor_popcount_matmul_masked(rows, kernels);  // (n*oh*ow, o)
  Tensor out = Tensor::uninitialized({n, o, oh, ow});
  for (int64_t ni = 0; ni < n; ++ni)
    for (int64_t oi = 0; oi < o; ++oi)
      for (int64_t y = 0; y < oh; ++y)
        for (int64_t x = 0; x < ow; ++x)
          out[((ni * o + oi) * oh + y) * ow + x] =
              flat[((ni * oh + y) * ow + x) * o + oi];
  return out;
}

// ---- export ----------------------------------------------------------------------

namespace {

// The xnor kernel applies when every input element is +/-1 by construction:
// the producer chain back to a sign activation crosses only value-preserving
// reshapes and max pooling.
bool inputs_are_binary(const ModelGraph& model, int node_index) {
  int i = node_index - 1;
  while (i >= 0) {
    const LayerNode& node = model.nodes[static_cast<size_t>(i)];
    switch (node.kind) {
      case NodeKind::Activation:
        return node.act == ActKind::Sign;
      case NodeKind::MaxPool:
      case NodeKind::Flatten:
      case NodeKind::Reshape:
      case NodeKind::Transpose:
        --i;
        continue;
      default:
        return false;
    }
  }
  return false;
}

}  // namespace

int64_t PackedModel::packed_payload_bytes() const {
  int64_t bytes = 0;
  for (const auto& layer : layers)
    if (layer.packed) bytes += layer.weights.payload_bytes();
  return bytes;
}

PackedModel export_packed(const ModelGraph& model) {
  PackedModel pm;
  pm.arch = model.arch;
  pm.spec = model.spec;
  pm.options = model.options;
  for (const auto& node : model.nodes) {
    if (node.params.empty()) continue;
    PackedLayer layer;
    layer.node_index = node.index;
    layer.kind = node.kind;
    if (node.binarize_weights) {
      layer.packed = true;
      layer.xnor_eligible = inputs_are_binary(model, node.index);
      pm.has_binarized_layers = true;
      if (node.kind == NodeKind::Dense) {
        // store transposed (out x in) so each output neuron is one row scan
        layer.weights = pack(transpose2d(binarize_weights(node.params[0])));
      } else {
        const Tensor& k = node.params[0];
        layer.weights = pack(binarize_weights(
            k.reshaped({k.dim(0), k.dim(1) * k.dim(2) * k.dim(3)})));
        layer.weights.shape = k.shape();
      }
      layer.float_params = {node.params[1]};  // bias stays float
    } else {
      layer.float_params = node.params;
    }
    pm.layers.push_back(std::move(layer));
  }
  return pm;
}

// ---- packed forward ----------------------------------------------------------------

Tensor packed_forward(const PackedModel& pm, const Tensor& input) {
  // Rebuild the topology, then execute it with packed kernels where eligible.
  Rng rng(0);
  ModelGraph model = build_model(pm.arch, pm.spec, pm.options, rng);
  std::vector<const PackedLayer*> by_node(model.nodes.size(), nullptr);
  for (const auto& layer : pm.layers) {
    if (layer.node_index < 0 || layer.node_index >= static_cast<int>(model.nodes.size()))
      throw std::invalid_argument("packed_forward: layer index outside the graph");
    by_node[static_cast<size_t>(layer.node_index)] = &layer;
    LayerNode& node = model.nodes[static_cast<size_t>(layer.node_index)];
    if (layer.packed) {
      node.params[1] = layer.float_params[0];
    } else {
      if (layer.float_params.size() != node.params.size())
        throw std::invalid_argument("packed_forward: parameter count mismatch");
      node.params = layer.float_params;
    }
  }

  std::vector<Tensor> outputs(model.nodes.size());
  const Tensor* current = &input;
  for (size_t i = 0; i < model.nodes.size(); ++i) {
    const LayerNode& node = model.nodes[i];
    const PackedLayer* layer = by_node[i];
    Tensor out;
    if (layer && layer->packed) {
      const Tensor& bias = layer->float_params[0];
      if (node.kind == NodeKind::Dense) {
        const Tensor x2 = current->reshaped({current->rows_flat(), current->last_dim()});
        Tensor z = layer->xnor_eligible
                       ? xnor_popcount_matmul(pack(x2), layer->weights)
                       : matmul(x2, transpose2d(unpack(layer->weights)));
        float* p = z.data();
        const int64_t rows = z.dim(0), cols = z.dim(1);
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t j = 0; j < cols; ++j) p[r * cols + j] += bias[j];
        std::vector<int64_t> shape{current->dim(0)};
        shape.insert(shape.end(), node.out_shape.begin(), node.out_shape.end());
        out = z.reshaped(shape);
      } else {
        const auto& ks = layer->weights.shape;  // o x c x kh x kw
        Tensor z = layer->xnor_eligible
                       ? xnor_conv2d(*current, layer->weights, ks[1], ks[2], ks[3],
                                     node.stride, node.padding)
                       : conv2d(*current,
                                unpack(layer->weights).reshaped(ks), node.stride,
                                node.padding);
        const int64_t n = z.dim(0), o = z.dim(1), spatial = z.dim(2) * z.dim(3);
        float* p = z.data();
        for (int64_t ni = 0; ni < n; ++ni)
          for (int64_t oi = 0; oi < o; ++oi) {
            const float b = bias[oi];
            float* base = p + (ni * o + oi) * spatial;
            for (int64_t s = 0; s < spatial; ++s) base[s] += b;
          }
        out = std::move(z);
      }
    } else {
      const Tensor* skip_src =
          node.kind == NodeKind::SkipAdd
              ? &outputs[static_cast<size_t>(node.skip_source)]
              : nullptr;
      out = node_forward_eval(node, *current, skip_src);
    }
    outputs[i] = std::move(out);
    current = &outputs[i];
  }
  return outputs.back();
}

// ---- container i/o -----------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'B', 'G', 'R', 'P'};
constexpr uint8_t kVersion = 1;

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("packed file: truncated");
  return v;
}

void put_tensor(std::ostream& os, uint16_t node, uint8_t kind, uint8_t slot,
                const Tensor& t) {
  put<uint16_t>(os, node);
  put<uint8_t>(os, kind);
  put<uint8_t>(os, slot);
  put<uint8_t>(os, 0);  // payload: f32
  put<uint8_t>(os, static_cast<uint8_t>(t.rank()));
  for (int64_t d : t.shape()) put<uint32_t>(os, static_cast<uint32_t>(d));
  os.write(reinterpret_cast<const char*>(t.data()),
           static_cast<std::streamsize>(t.size()) * 4);
}

}  // namespace

void save_packed(const PackedModel& pm, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  os.write(kMagic, 4);
  put<uint8_t>(os, kVersion);
  put<uint8_t>(os, static_cast<uint8_t>(pm.arch));
  uint8_t flags = 0;
  if (pm.options.binarize_weights) flags |= 1;
  if (pm.options.binary_activations) flags |= 2;
  if (pm.options.skip_connections) flags |= 4;
  if (pm.options.activation_override) {
    flags |= 8;
    flags |= static_cast<uint8_t>(*pm.options.activation_override) << 4;
  }
  put<uint8_t>(os, flags);
  put<uint16_t>(os, static_cast<uint16_t>(pm.spec.layers));
  put<uint16_t>(os, static_cast<uint16_t>(pm.spec.width));
  put<uint16_t>(os, static_cast<uint16_t>(pm.spec.patch));
  put<uint16_t>(os, static_cast<uint16_t>(pm.spec.num_classes));
  put<uint8_t>(os, static_cast<uint8_t>(pm.spec.input_shape.size()));
  for (int64_t d : pm.spec.input_shape) put<uint32_t>(os, static_cast<uint32_t>(d));

  uint32_t count = 0;
  for (const auto& layer : pm.layers)
    count += static_cast<uint32_t>(layer.float_params.size()) + (layer.packed ? 1 : 0);
  put<uint32_t>(os, count);

  for (const auto& layer : pm.layers) {
    if (layer.packed) {
      const PackedBitTensor& w = layer.weights;
      put<uint16_t>(os, static_cast<uint16_t>(layer.node_index));
      put<uint8_t>(os, static_cast<uint8_t>(layer.kind));
      put<uint8_t>(os, 0);  // slot 0: weights
      put<uint8_t>(os, 1);  // payload: packed words
      put<uint8_t>(os, static_cast<uint8_t>(w.shape.size()));
      for (int64_t d : w.shape) put<uint32_t>(os, static_cast<uint32_t>(d));
      put<uint32_t>(os, static_cast<uint32_t>(w.words_per_row));
      os.write(reinterpret_cast<const char*>(w.words.data()),
               static_cast<std::streamsize>(w.words.size()) * 8);
      put_tensor(os, static_cast<uint16_t>(layer.node_index),
                 static_cast<uint8_t>(layer.kind), 1, layer.float_params[0]);
    } else {
      for (size_t s = 0; s < layer.float_params.size(); ++s)
        put_tensor(os, static_cast<uint16_t>(layer.node_index),
                   static_cast<uint8_t>(layer.kind), static_cast<uint8_t>(s),
                   layer.float_params[s]);
    }
  }
  if (!os) throw std::runtime_error("write failed: " + path);
}

PackedModel load_packed(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("packed file: bad magic");
  if (get<uint8_t>(is) != kVersion)
    throw std::runtime_error("packed file: unknown version");

  PackedModel pm;
  pm.arch = static_cast<ArchId>(get<uint8_t>(is));
  const uint8_t flags = get<uint8_t>(is);
  pm.options.binarize_weights = flags & 1;
  pm.options.binary_activations = flags & 2;
  pm.options.skip_connections = flags & 4;
  if (flags & 8) pm.options.activation_override = static_cast<ActKind>((flags >> 4) & 3);
  pm.spec.layers = get<uint16_t>(is);
  pm.spec.width = get<uint16_t>(is);
  pm.spec.patch = get<uint16_t>(is);
  pm.spec.num_classes = get<uint16_t>(is);
  const int rank = get<uint8_t>(is);
  pm.spec.input_shape.resize(static_cast<size_t>(rank));
  for (auto& d : pm.spec.input_shape) d = get<uint32_t>(is);

  // reconstruct eligibility flags from the topology
  Rng rng(0);
  const ModelGraph model = build_model(pm.arch, pm.spec, pm.options, rng);

  const uint32_t count = get<uint32_t>(is);
  PackedLayer* open = nullptr;
  for (uint32_t e = 0; e < count; ++e) {
    const uint16_t node_index = get<uint16_t>(is);
    const auto kind = static_cast<NodeKind>(get<uint8_t>(is));
    const uint8_t slot = get<uint8_t>(is);
    const uint8_t payload = get<uint8_t>(is);
    const uint8_t trank = get<uint8_t>(is);
    std::vector<int64_t> shape(trank);
    for (auto& d : shape) d = get<uint32_t>(is);

    if (!open || open->node_index != node_index) {
      pm.layers.emplace_back();
      open = &pm.layers.back();
      open->node_index = node_index;
      open->kind = kind;
    }
    if (payload == 1) {
      open->packed = true;
      pm.has_binarized_layers = true;
      open->xnor_eligible = inputs_are_binary(model, node_index);
      PackedBitTensor& w = open->weights;
      w.shape = shape;
      w.row_bits = kind == NodeKind::Dense ? shape[1] : shape[1] * shape[2] * shape[3];
      w.rows = shape[0];
      w.words_per_row = get<uint32_t>(is);
      if (w.words_per_row != words_for(w.row_bits))
        throw std::runtime_error("packed file: word count mismatch");
      w.tail_mask = tail_mask_for(w.row_bits);
      w.words.resize(static_cast<size_t>(w.rows * w.words_per_row));
      is.read(reinterpret_cast<char*>(w.words.data()),
              static_cast<std::streamsize>(w.words.size()) * 8);
      if (!is) throw std::runtime_error("packed file: truncated");
    } else {
      (void)slot;
      Tensor t(shape);
      is.read(reinterpret_cast<char*>(t.data()),
              static_cast<std::streamsize>(t.size()) * 4);
      if (!is) throw std::runtime_error("packed file: truncated");
      open->float_params.push_back(std::move(t));
    }
  }
  return pm;
}

}  // namespace bnn
