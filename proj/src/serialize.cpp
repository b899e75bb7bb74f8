#include "bnn/serialize.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

static_assert(std::endian::native == std::endian::little,
              "model container i/o assumes a little-endian host");

namespace bnn {

namespace {

constexpr char kMagic[4] = {'B', 'G', 'R', '1'};
constexpr uint8_t kVersion = 1;

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("model file: truncated");
  return v;
}

}  // namespace

void save_model(const ModelGraph& model, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  os.write(kMagic, 4);
  put<uint8_t>(os, kVersion);
  put<uint8_t>(os, static_cast<uint8_t>(model.arch));
  uint8_t flags = 0;
  if (model.options.binarize_weights) flags |= 1;
  if (model.options.binary_activations) flags |= 2;
  if (model.options.skip_connections) flags |= 4;
  if (model.options.activation_override) {
    flags |= 8;
    flags |= static_cast<uint8_t>(*model.options.activation_override) << 4;
  }
  put<uint8_t>(os, flags);
  put<uint16_t>(os, static_cast<uint16_t>(model.spec.layers));
  put<uint16_t>(os, static_cast<uint16_t>(model.spec.width));
  put<uint16_t>(os, static_cast<uint16_t>(model.spec.patch));
  put<uint16_t>(os, static_cast<uint16_t>(model.spec.num_classes));
  put<uint8_t>(os, static_cast<uint8_t>(model.input_shape.size()));
  for (int64_t d : model.input_shape) put<uint32_t>(os, static_cast<uint32_t>(d));

  uint32_t count = 0;
  for (const auto& node : model.nodes) count += static_cast<uint32_t>(node.params.size());
  put<uint32_t>(os, count);
  for (const auto& node : model.nodes)
    for (size_t slot = 0; slot < node.params.size(); ++slot) {
      const Tensor& t = node.params[slot];
      put<uint16_t>(os, static_cast<uint16_t>(node.index));
      put<uint8_t>(os, static_cast<uint8_t>(slot));
      put<uint8_t>(os, static_cast<uint8_t>(t.rank()));
      for (int64_t d : t.shape()) put<uint32_t>(os, static_cast<uint32_t>(d));
      os.write(reinterpret_cast<const char*>(t.data()),
               static_cast<std::streamsize>(t.size()) * 4);
    }
  if (!os) throw std::runtime_error("write failed: " + path);
}

ModelGraph load_model(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("model file: bad magic");
  if (get<uint8_t>(is) != kVersion) throw std::runtime_error("model file: unknown version");

  const auto arch = static_cast<ArchId>(get<uint8_t>(is));
  const uint8_t flags = get<uint8_t>(is);
  ModelSpec spec;
  spec.layers = get<uint16_t>(is);
  spec.width = get<uint16_t>(is);
  spec.patch = get<uint16_t>(is);
  spec.num_classes = get<uint16_t>(is);
  const int rank = get<uint8_t>(is);
  spec.input_shape.resize(static_cast<size_t>(rank));
  for (auto& d : spec.input_shape) d = get<uint32_t>(is);

  ModelOptions options;
  options.binarize_weights = flags & 1;
  options.binary_activations = flags & 2;
  options.skip_connections = flags & 4;
  if (flags & 8) options.activation_override = static_cast<ActKind>((flags >> 4) & 3);

  Rng rng(0);  // structure only; every parameter is overwritten below
  ModelGraph model = build_model(arch, spec, options, rng);

  const uint32_t count = get<uint32_t>(is);
  for (uint32_t i = 0; i < count; ++i) {
    const uint16_t node_index = get<uint16_t>(is);
    const uint8_t slot = get<uint8_t>(is);
    const uint8_t trank = get<uint8_t>(is);
    std::vector<int64_t> shape(trank);
    for (auto& d : shape) d = get<uint32_t>(is);
    if (node_index >= model.nodes.size() ||
        slot >= model.nodes[node_index].params.size())
      throw std::runtime_error("model file: parameter outside the graph");
    Tensor& dst = model.nodes[node_index].params[slot];
    if (dst.shape() != shape)
      throw std::runtime_error("model file: parameter shape mismatch at node " +
                               std::to_string(node_index));
    is.read(reinterpret_cast<char*>(dst.data()),
            static_cast<std::streamsize>(dst.size()) * 4);
    if (!is) throw std::runtime_error("model file: truncated");
  }
  return model;
}

}  // namespace bnn
