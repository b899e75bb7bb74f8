#pragma once

#include <string>

#include "bnn/graph.hpp"

namespace bnn {

/// Binary model container, magic "BGR1", little-endian throughout:
///   magic[4] "BGR1", u8 version,
///   u8 arch, u8 flags (bit0 binary weights, bit1 binary activations,
///   bit2 skip connections, bit3 activation override present, bits4-5 override kind),
///   u16 layers, u16 width, u16 patch, u16 num_classes,
///   u8 input rank, u32 input dims...,
///   u32 tensor count, then per tensor:
///     u16 node index, u8 param slot, u8 rank, u32 dims..., f32 data.
/// Every parameter tensor is stored, including batchnorm running statistics,
/// so a loaded model reproduces eval forward (and hence the binarized model)
/// exactly.
void save_model(const ModelGraph& model, const std::string& path);
ModelGraph load_model(const std::string& path);

}  // namespace bnn
