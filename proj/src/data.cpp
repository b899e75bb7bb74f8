#include "bnn/data.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>

namespace bnn {

namespace {

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary | std::ios::ate);
  if (!is) throw std::runtime_error("cannot open: " + path);
  const auto size = is.tellg();
  is.seekg(0);
  std::vector<unsigned char> bytes(static_cast<size_t>(size));
  is.read(reinterpret_cast<char*>(bytes.data()), size);
  if (!is) throw std::runtime_error("read failed: " + path);
  return bytes;
}

uint32_t be32(const unsigned char* p) {
  return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
         (static_cast<uint32_t>(p[2]) << 8) | p[3];
}

struct IdxPayload {
  std::vector<int64_t> dims;
  const unsigned char* data;
  size_t bytes;
};

IdxPayload parse_idx(const std::vector<unsigned char>& file, const std::string& path) {
  if (file.size() < 4 || file[0] != 0 || file[1] != 0)
    throw std::runtime_error(path + ": bad IDX magic");
  if (file[2] != 0x08)
    throw std::runtime_error(path + ": unsupported IDX type (expected unsigned byte)");
  const int ndim = file[3];
  if (file.size() < 4 + 4 * static_cast<size_t>(ndim))
    throw std::runtime_error(path + ": truncated IDX header");
  IdxPayload p;
  size_t expected = 1;
  for (int d = 0; d < ndim; ++d) {
    const uint32_t v = be32(file.data() + 4 + 4 * d);
    p.dims.push_back(v);
    expected *= v;
  }
  const size_t offset = 4 + 4 * static_cast<size_t>(ndim);
  if (file.size() - offset != expected)
    throw std::runtime_error(path + ": truncated IDX payload, expected " +
                             std::to_string(expected) + " bytes, found " +
                             std::to_string(file.size() - offset));
  p.data = file.data() + offset;
  p.bytes = expected;
  return p;
}

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  const auto image_file = read_file(images_path);
  const auto label_file = read_file(labels_path);
  const IdxPayload images = parse_idx(image_file, images_path);
  const IdxPayload labels = parse_idx(label_file, labels_path);
  if (images.dims.size() != 3)
    throw std::runtime_error(images_path + ": expected 3 dimensions (n,h,w)");
  if (labels.dims.size() != 1)
    throw std::runtime_error(labels_path + ": expected 1 dimension");
  if (images.dims[0] != labels.dims[0])
    throw std::runtime_error("image/label count mismatch: " +
                             std::to_string(images.dims[0]) + " vs " +
                             std::to_string(labels.dims[0]));

  Dataset ds;
  const int64_t n = images.dims[0], h = images.dims[1], w = images.dims[2];
  ds.images = Tensor({n, 1, h, w});
  float* dst = ds.images.data();
  for (size_t i = 0; i < images.bytes; ++i)
    dst[i] = static_cast<float>(images.data[i]) / 255.0f;
  ds.labels.resize(static_cast<size_t>(n));
  int max_label = 0;
  for (int64_t i = 0; i < n; ++i) {
    ds.labels[static_cast<size_t>(i)] = labels.data[i];
    max_label = std::max(max_label, static_cast<int>(labels.data[i]));
  }
  ds.num_classes = max_label + 1;
  ds.split = "train";
  return ds;
}

Dataset load_cifar10_bin(const std::vector<std::string>& paths) {
  constexpr int64_t kRecord = 3073;  // 1 label byte + 3*32*32 pixels
  constexpr int64_t kPixels = 3072;
  std::vector<std::vector<unsigned char>> files;
  int64_t total = 0;
  for (const auto& path : paths) {
    files.push_back(read_file(path));
    if (files.back().size() % kRecord != 0)
      throw std::runtime_error(path + ": size " + std::to_string(files.back().size()) +
                               " is not a multiple of 3073");
    total += static_cast<int64_t>(files.back().size()) / kRecord;
  }
  Dataset ds;
  ds.images = Tensor({total, 3, 32, 32});
  ds.labels.resize(static_cast<size_t>(total));
  ds.num_classes = 10;
  ds.split = "train";
  float* dst = ds.images.data();
  int64_t rec = 0;
  for (const auto& file : files) {
    const int64_t count = static_cast<int64_t>(file.size()) / kRecord;
    for (int64_t r = 0; r < count; ++r, ++rec) {
      const unsigned char* p = file.data() + r * kRecord;
      const int label = p[0];
      if (label > 9) throw std::runtime_error("cifar record label out of range");
      ds.labels[static_cast<size_t>(rec)] = label;
      float* out = dst + rec * kPixels;
      for (int64_t t = 0; t < kPixels; ++t)
        out[t] = static_cast<float>(p[1 + t]) / 255.0f;
    }
  }
  return ds;
}

std::pair<Dataset, Dataset> split_train_val(const Dataset& ds, float fraction, Rng& rng) {
  if (!(fraction > 0.0f && fraction < 1.0f))
    throw std::invalid_argument("split_train_val: fraction must be in (0,1)");
  const int64_t n = ds.size();
  std::vector<int64_t> perm(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) perm[static_cast<size_t>(i)] = i;
  for (int64_t i = n - 1; i > 0; --i) {
    const int64_t j = static_cast<int64_t>(rng.next_u64() % static_cast<uint64_t>(i + 1));
    std::swap(perm[static_cast<size_t>(i)], perm[static_cast<size_t>(j)]);
  }
  const int64_t n_train = static_cast<int64_t>(std::lround(
      static_cast<double>(fraction) * static_cast<double>(n)));

  auto take = [&](int64_t from, int64_t count, const char* split) {
    Dataset out;
    const int64_t sample = ds.images.size() / n;
    out.images = Tensor({count, ds.images.dim(1), ds.images.dim(2), ds.images.dim(3)});
    out.labels.resize(static_cast<size_t>(count));
    out.num_classes = ds.num_classes;
    out.split = split;
    for (int64_t i = 0; i < count; ++i) {
      const int64_t src = perm[static_cast<size_t>(from + i)];
      std::memcpy(out.images.data() + i * sample, ds.images.data() + src * sample,
                  static_cast<size_t>(sample) * 4);
      out.labels[static_cast<size_t>(i)] = ds.labels[static_cast<size_t>(src)];
    }
    return out;
  };
  return {take(0, n_train, "train"), take(n_train, n - n_train, "val")};
}

namespace {

void hflip_image(float* img, int64_t c, int64_t h, int64_t w) {
  for (int64_t ci = 0; ci < c; ++ci)
    for (int64_t y = 0; y < h; ++y) {
      float* row = img + (ci * h + y) * w;
      for (int64_t x = 0; x < w / 2; ++x) std::swap(row[x], row[w - 1 - x]);
    }
}

void rotate_image(const float* src, float* dst, int64_t c, int64_t h, int64_t w,
                  float degrees) {
  const double rad = static_cast<double>(degrees) * 3.14159265358979323846 / 180.0;
  const double cs = std::cos(rad), sn = std::sin(rad);
  const double cy = (static_cast<double>(h) - 1.0) / 2.0;
  const double cx = (static_cast<double>(w) - 1.0) / 2.0;
  for (int64_t ci = 0; ci < c; ++ci) {
    const float* in = src + ci * h * w;
    float* out = dst + ci * h * w;
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        // inverse rotation of the destination coordinate, zero fill outside
        const double dy = static_cast<double>(y) - cy;
        const double dx = static_cast<double>(x) - cx;
        const double sy = cy + sn * dx + cs * dy;
        const double sx = cx + cs * dx - sn * dy;
        const int64_t y0 = static_cast<int64_t>(std::floor(sy));
        const int64_t x0 = static_cast<int64_t>(std::floor(sx));
        const double fy = sy - static_cast<double>(y0);
        const double fx = sx - static_cast<double>(x0);
        double acc = 0.0;
        for (int oy = 0; oy <= 1; ++oy)
          for (int ox = 0; ox <= 1; ++ox) {
            const int64_t yy = y0 + oy, xx = x0 + ox;
            if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
            const double wgt = (oy ? fy : 1.0 - fy) * (ox ? fx : 1.0 - fx);
            acc += wgt * in[yy * w + xx];
          }
        out[y * w + x] = static_cast<float>(acc);
      }
  }
}

void crop_image(const float* src, float* dst, int64_t c, int64_t h, int64_t w, int pad,
                int64_t off_y, int64_t off_x) {
  // reads from a virtual zero-padded image at the given offset
  for (int64_t ci = 0; ci < c; ++ci)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        const int64_t sy = y + off_y - pad;
        const int64_t sx = x + off_x - pad;
        dst[(ci * h + y) * w + x] =
            (sy < 0 || sy >= h || sx < 0 || sx >= w) ? 0.0f
                                                     : src[(ci * h + sy) * w + sx];
      }
}

}  // namespace

Tensor augment(const Tensor& batch, const AugmentConfig& cfg, Rng& rng) {
  if (batch.rank() != 4) throw std::invalid_argument("augment: expects n,c,h,w");
  if (cfg.hflip_prob < 0.0f || cfg.hflip_prob > 1.0f || cfg.crop_padding < 0)
    throw std::invalid_argument("augment: invalid config");
  const int64_t n = batch.dim(0), c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  const int64_t sample = c * h * w;
  Tensor out = batch;

  // all randomness is drawn sequentially so the transforms can run in
  // parallel without changing the rng consumption order
  struct Draw {
    bool flip;
    float angle;
    int64_t off_y, off_x;
  };
  std::vector<Draw> draws(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    Draw& d = draws[static_cast<size_t>(i)];
    d.flip = cfg.hflip_prob > 0.0f && rng.uniform(0.0f, 1.0f) < cfg.hflip_prob;
    d.angle = cfg.max_rotation_deg > 0.0f
                  ? rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg)
                  : 0.0f;
    if (cfg.crop_padding > 0) {
      const uint64_t range = 2 * static_cast<uint64_t>(cfg.crop_padding) + 1;
      d.off_y = static_cast<int64_t>(rng.next_u64() % range);
      d.off_x = static_cast<int64_t>(rng.next_u64() % range);
    } else {
      d.off_y = d.off_x = 0;
    }
  }

#pragma omp parallel
  {
    std::vector<float> scratch(static_cast<size_t>(sample));
#pragma omp for schedule(static)
    for (int64_t i = 0; i < n; ++i) {
      const Draw& d = draws[static_cast<size_t>(i)];
      float* img = out.data() + i * sample;
      if (d.flip) hflip_image(img, c, h, w);
      if (cfg.max_rotation_deg > 0.0f) {
        rotate_image(img, scratch.data(), c, h, w, d.angle);
        std::memcpy(img, scratch.data(), static_cast<size_t>(sample) * 4);
      }
      if (cfg.crop_padding > 0) {
        crop_image(img, scratch.data(), c, h, w, cfg.crop_padding, d.off_y, d.off_x);
        std::memcpy(img, scratch.data(), static_cast<size_t>(sample) * 4);
      }
    }
  }
  return out;
}

Normalizer Normalizer::fit(const Dataset& train) {
  const int64_t n = train.images.dim(0), c = train.images.dim(1),
                spatial = train.images.dim(2) * train.images.dim(3);
  Normalizer norm;
  norm.mean.resize(static_cast<size_t>(c));
  norm.std.resize(static_cast<size_t>(c));
  for (int64_t ci = 0; ci < c; ++ci) {
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      const float* p = train.images.data() + (i * c + ci) * spatial;
      for (int64_t s = 0; s < spatial; ++s) acc += p[s];
    }
    const double m = acc / static_cast<double>(n * spatial);
    double var = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      const float* p = train.images.data() + (i * c + ci) * spatial;
      for (int64_t s = 0; s < spatial; ++s) var += (p[s] - m) * (p[s] - m);
    }
    var /= static_cast<double>(n * spatial);
    norm.mean[static_cast<size_t>(ci)] = static_cast<float>(m);
    norm.std[static_cast<size_t>(ci)] = static_cast<float>(std::max(std::sqrt(var), 1e-6));
  }
  return norm;
}

Tensor Normalizer::apply(const Tensor& batch) const {
  const int64_t n = batch.dim(0), c = batch.dim(1), spatial = batch.dim(2) * batch.dim(3);
  if (static_cast<size_t>(c) != mean.size())
    throw std::invalid_argument("Normalizer: channel count mismatch");
  Tensor out = batch;
  for (int64_t i = 0; i < n; ++i)
    for (int64_t ci = 0; ci < c; ++ci) {
      float* p = out.data() + (i * c + ci) * spatial;
      const float m = mean[static_cast<size_t>(ci)], s = std[static_cast<size_t>(ci)];
      for (int64_t t = 0; t < spatial; ++t) p[t] = (p[t] - m) / s;
    }
  return out;
}

}  // namespace bnn
