#pragma once

#include <cstdint>
#include <string>

#include "bnn/graph.hpp"

namespace bnn {

/// Rows of a +/-1 tensor packed one element per bit into 64-bit words
/// (bit 1 = +1, bit 0 = -1). Rows are padded to a word boundary; padding bits
/// are zero and excluded from popcounts via the tail mask.
struct PackedBitTensor {
  std::vector<int64_t> shape;      // logical shape; last dim is the row length
  int64_t rows = 0;
  int64_t row_bits = 0;            // valid bits per row
  int64_t words_per_row = 0;
  uint64_t tail_mask = ~0ULL;      // mask for the last word of each row
  std::vector<uint64_t> words;

  int64_t payload_bytes() const {
    return static_cast<int64_t>(words.size()) * 8;
  }
};

/// Packs a tensor whose elements are exactly -1 or +1; throws otherwise.
PackedBitTensor pack(const Tensor& x);
Tensor unpack(const PackedBitTensor& p);

/// out[i][j] = 2 * popcount(XNOR(a_i, w_j) & valid) - k: the exact +/-1 dot
/// product of row i of a with row j of w, as float-valued integers.
Tensor xnor_popcount_matmul(const PackedBitTensor& a, const PackedBitTensor& w);

/// Packed rows with per-row validity masks, for convolution windows that
/// overlap the zero padding: invalid positions contribute nothing.
struct MaskedPackedRows {
  int64_t rows = 0;
  int64_t row_bits = 0;
  int64_t words_per_row = 0;
  std::vector<uint64_t> words;
  std::vector<uint64_t> masks;         // same layout as words
  std::vector<int32_t> valid_counts;   // per row
};

/// out[i][j] = 2 * popcount(XNOR(a_i, w_j) & mask_i) - valid_i.
Tensor xnor_popcount_matmul_masked(const MaskedPackedRows& a, const PackedBitTensor& w);

/// Binary convolution via packed receptive-field rows (im2col layout):
/// input n x c x h x w with +/-1 entries, kernels packed as o rows of
/// c*kh*kw bits. Returns n x o x h' x w' in float (exact integers).
Tensor xnor_conv2d(const Tensor& input, const PackedBitTensor& kernels, int64_t c,
                   int64_t kh, int64_t kw, int stride, int padding);

// ---- deployment model ----------------------------------------------------------

struct PackedLayer {
  int node_index = -1;
  NodeKind kind = NodeKind::Dense;
  bool packed = false;       // slot-0 weights stored packed (binarized layer)
  bool xnor_eligible = false;  // inputs are provably +/-1: run the xnor kernel
  PackedBitTensor weights;   // Dense: out x in rows; Conv2d: o rows of c*kh*kw
  std::vector<Tensor> float_params;  // bias and, for float layers, all params
};

/// Deployment form of a trained model: binarized layers keep one bit per
/// weight, everything else (first/last layers, biases, batchnorm) stays float.
struct PackedModel {
  ArchId arch = ArchId::MlpPlain;
  ModelSpec spec;
  ModelOptions options;
  std::vector<PackedLayer> layers;  // one per node with parameters
  bool has_binarized_layers = false;

  int64_t packed_payload_bytes() const;
};

/// Binarizes and packs the model's flagged layers. A model with no binarized
/// layers exports as a float-only passthrough with `has_binarized_layers`
/// false (callers may warn).
PackedModel export_packed(const ModelGraph& model);

/// Eval forward on the packed model. Bit-exact equal to eval forward on the
/// source model: binary segments accumulate in integers, float segments run
/// the same code as the graph executor.
Tensor packed_forward(const PackedModel& pm, const Tensor& input);

/// Packed model container, magic "BGRP", little-endian:
///   magic[4], u8 version, arch block as in the "BGR1" format,
///   u32 entry count, then per parameter tensor:
///     u16 node index, u8 node kind, u8 slot, u8 payload (0 = f32, 1 = packed
///     words), u8 rank, u32 dims..., payload bytes
///   (packed payload: u32 words per row, then rows * wpr u64 words).
void save_packed(const PackedModel& pm, const std::string& path);
PackedModel load_packed(const std::string& path);

}  // namespace bnn
