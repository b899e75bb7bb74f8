#include <doctest.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <omp.h>

#include "bnn/packed.hpp"
#include "bnn/serialize.hpp"
#include "test_util.hpp"

using namespace bnn;
using testutil::bit_equal;

namespace {

Tensor random_pm1(Rng& rng, std::vector<int64_t> shape) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.size(); ++i)
    t[i] = (rng.next_u64() & 1) ? 1.0f : -1.0f;
  return t;
}

}  // namespace

TEST_CASE("pack/unpack: hand cases and round trips") {
  const Tensor v = Tensor({1, 3}, {1.0f, -1.0f, 1.0f});
  const PackedBitTensor p = pack(v);
  CHECK(p.rows == 1);
  CHECK(p.words_per_row == 1);
  CHECK((p.words[0] & 0b111) == 0b101);  // bits 101 for +1,-1,+1
  CHECK((p.words[0] >> 3) == 0);         // padding stays zero
  CHECK(bit_equal(unpack(p), v));

  const Tensor ones = Tensor::full({1, 64}, 1.0f);
  const PackedBitTensor p64 = pack(ones);
  CHECK(p64.words_per_row == 1);
  CHECK(p64.words[0] == ~0ULL);

  Rng rng(1);
  const Tensor r = random_pm1(rng, {7, 130});
  CHECK(bit_equal(unpack(pack(r)), r));
}

TEST_CASE("pack: non +/-1 input rejected") {
  CHECK_THROWS_AS(pack(Tensor({2}, {1.0f, 0.5f})), std::invalid_argument);
  CHECK_THROWS_AS(pack(Tensor({1}, {0.0f})), std::invalid_argument);
}

TEST_CASE("xnor_popcount_matmul: hand case and identical vectors") {
  const Tensor a = Tensor({1, 4}, {1, -1, 1, 1});
  const Tensor w = Tensor({1, 4}, {1, 1, -1, 1});
  const Tensor out = xnor_popcount_matmul(pack(a), pack(w));
  CHECK(out[0] == 0.0f);  // matches at {0,3}: 2*2-4 = 0

  Rng rng(2);
  for (int64_t k : {1, 63, 64, 65, 100}) {
    const Tensor v = random_pm1(rng, {1, k});
    const Tensor self = xnor_popcount_matmul(pack(v), pack(v));
    CHECK(self[0] == static_cast<float>(k));
  }
}

TEST_CASE("xnor_popcount_matmul: equals the float matmul of +/-1 tensors exactly") {
  Rng rng(3);
  const Tensor a = random_pm1(rng, {16, 100});
  const Tensor w = random_pm1(rng, {8, 100});
  const Tensor expected = matmul(a, transpose2d(w));
  const Tensor got = xnor_popcount_matmul(pack(a), pack(w));
  CHECK(bit_equal(got, expected));

  CHECK_THROWS_AS(xnor_popcount_matmul(pack(a), pack(random_pm1(rng, {8, 99}))),
                  std::invalid_argument);
}

TEST_CASE("xnor kernels: 100 random dense layers match the float path bit-exactly") {
  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const int64_t m = 1 + static_cast<int64_t>(rng.next_u64() % 16);
    const int64_t k = 1 + static_cast<int64_t>(rng.next_u64() % 200);
    const int64_t n = 1 + static_cast<int64_t>(rng.next_u64() % 16);
    const Tensor a = random_pm1(rng, {m, k});
    const Tensor w = random_pm1(rng, {n, k});
    REQUIRE(bit_equal(xnor_popcount_matmul(pack(a), pack(w)),
                      matmul(a, transpose2d(w))));
  }
}

TEST_CASE("xnor_conv2d: 100 random binary convolutions match float conv exactly") {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const int64_t n = 1 + static_cast<int64_t>(rng.next_u64() % 3);
    const int64_t c = 1 + static_cast<int64_t>(rng.next_u64() % 4);
    const int64_t h = 4 + static_cast<int64_t>(rng.next_u64() % 6);
    const int64_t w = 4 + static_cast<int64_t>(rng.next_u64() % 6);
    const int64_t o = 1 + static_cast<int64_t>(rng.next_u64() % 6);
    const int64_t kk = 1 + 2 * static_cast<int64_t>(rng.next_u64() % 2);  // 1 or 3
    const int stride = 1 + static_cast<int>(rng.next_u64() % 2);
    const int pad = static_cast<int>(rng.next_u64() % 2);
    const Tensor x = random_pm1(rng, {n, c, h, w});
    const Tensor kr = random_pm1(rng, {o, c, kk, kk});
    const Tensor expected = conv2d(x, kr, stride, pad);
    const PackedBitTensor pk = pack(kr.reshaped({o, c * kk * kk}));
    const Tensor got = xnor_conv2d(x, pk, c, kk, kk, stride, pad);
    REQUIRE(bit_equal(got, expected));
  }
}

TEST_CASE("export_packed: storage of a 512x512 binary dense layer is 32768 bytes") {
  Rng rng(6);
  ModelSpec s;
  s.layers = 3;
  s.width = 512;
  s.input_shape = {512};
  s.num_classes = 10;
  ModelOptions opt;
  opt.binarize_weights = true;
  opt.binary_activations = true;
  ModelGraph m = build_model(ArchId::MlpPlain, s, opt, rng);
  const PackedModel pm = export_packed(m);
  CHECK(pm.has_binarized_layers);
  int packed_count = 0;
  for (const auto& layer : pm.layers)
    if (layer.packed) {
      ++packed_count;
      CHECK(layer.weights.payload_bytes() == 512 * 512 / 8);  // 32 KiB vs 1 MiB float
    }
  CHECK(packed_count == 2);  // hidden layers 2 and 3; first/last stay float
}

TEST_CASE("export_packed: model without binarized layers is a passthrough") {
  Rng rng(7);
  ModelSpec s;
  s.layers = 1;
  s.width = 16;
  s.input_shape = {8};
  s.num_classes = 3;
  ModelGraph m = build_model(ArchId::MlpPlain, s, {}, rng);
  const PackedModel pm = export_packed(m);
  CHECK_FALSE(pm.has_binarized_layers);
  const Tensor x = rng_normal(rng, {4, 8}, 0.0f, 1.0f);
  const Tensor a = forward(m, x, Mode::Eval, RetentionPolicy::None, nullptr);
  const Tensor b = packed_forward(pm, x);
  CHECK(bit_equal(a, b));
}

TEST_CASE("packed_forward: binary MLP equals the float eval forward bit-exactly") {
  Rng rng(8);
  ModelSpec s;
  s.layers = 3;
  s.width = 96;  // not a multiple of 64: exercises tail masks
  s.input_shape = {20};
  s.num_classes = 5;
  ModelOptions opt;
  opt.binarize_weights = true;
  opt.binary_activations = true;
  ModelGraph m = build_model(ArchId::MlpPlain, s, opt, rng);
  // move batchnorm state off init so eval is nontrivial
  forward(m, rng_normal(rng, {32, 20}, 0.0f, 1.0f), Mode::Train, RetentionPolicy::None,
          nullptr);
  const PackedModel pm = export_packed(m);
  bool any_xnor = false;
  for (const auto& layer : pm.layers) any_xnor |= layer.xnor_eligible;
  CHECK(any_xnor);

  for (int trial = 0; trial < 10; ++trial) {
    const Tensor x = rng_normal(rng, {9, 20}, 0.0f, 1.0f);
    const Tensor a = forward(m, x, Mode::Eval, RetentionPolicy::None, nullptr);
    const Tensor b = packed_forward(pm, x);
    REQUIRE(bit_equal(a, b));
  }
}

TEST_CASE("packed_forward: binary conv model equals the float eval forward bit-exactly") {
  Rng rng(9);
  ModelSpec s;
  s.layers = 4;
  s.width = 8;
  s.input_shape = {1, 12, 12};
  s.num_classes = 4;
  ModelOptions opt;
  opt.binarize_weights = true;
  opt.binary_activations = true;
  ModelGraph m = build_model(ArchId::ConvPlain, s, opt, rng);
  forward(m, rng_uniform(rng, {8, 1, 12, 12}, 0.0f, 1.0f), Mode::Train,
          RetentionPolicy::None, nullptr);
  const PackedModel pm = export_packed(m);
  bool any_xnor = false;
  for (const auto& layer : pm.layers) any_xnor |= layer.xnor_eligible;
  CHECK(any_xnor);
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor x = rng_uniform(rng, {4, 1, 12, 12}, 0.0f, 1.0f);
    const Tensor a = forward(m, x, Mode::Eval, RetentionPolicy::None, nullptr);
    const Tensor b = packed_forward(pm, x);
    REQUIRE(bit_equal(a, b));
  }
}

TEST_CASE("packed_forward: mixer with skips keeps the float sum path and stays exact") {
  Rng rng(10);
  ModelSpec s;
  s.layers = 2;
  s.width = 16;
  s.patch = 4;
  s.input_shape = {1, 8, 8};
  s.num_classes = 4;
  ModelOptions opt;
  opt.binarize_weights = true;
  opt.binary_activations = true;
  ModelGraph m = build_model(ArchId::MiniMixer, s, opt, rng);
  forward(m, rng_uniform(rng, {8, 1, 8, 8}, 0.0f, 1.0f), Mode::Train,
          RetentionPolicy::None, nullptr);
  const PackedModel pm = export_packed(m);
  // the sum injects float values, so layers fed by SkipAdd cannot use xnor
  for (const auto& layer : pm.layers)
    if (layer.packed && layer.xnor_eligible) {
      // eligible layers must be directly behind a sign activation chain
      CHECK(layer.kind == NodeKind::Dense);
    }
  const Tensor x = rng_uniform(rng, {3, 1, 8, 8}, 0.0f, 1.0f);
  CHECK(bit_equal(forward(m, x, Mode::Eval, RetentionPolicy::None, nullptr),
                  packed_forward(pm, x)));
}

TEST_CASE("packed container: BGRP file round-trips and keeps forward exact") {
  Rng rng(11);
  ModelSpec s;
  s.layers = 2;
  s.width = 40;
  s.input_shape = {10};
  s.num_classes = 3;
  ModelOptions opt;
  opt.binarize_weights = true;
  opt.binary_activations = true;
  ModelGraph m = build_model(ArchId::MlpPlain, s, opt, rng);
  forward(m, rng_normal(rng, {16, 10}, 0.0f, 1.0f), Mode::Train, RetentionPolicy::None,
          nullptr);
  const PackedModel pm = export_packed(m);
  const std::string path = "/tmp/bitgrad_test_packed.bgrp";
  save_packed(pm, path);
  const PackedModel loaded = load_packed(path);
  CHECK(loaded.has_binarized_layers);
  CHECK(loaded.layers.size() == pm.layers.size());
  const Tensor x = rng_normal(rng, {6, 10}, 0.0f, 1.0f);
  CHECK(bit_equal(packed_forward(pm, x), packed_forward(loaded, x)));
  CHECK(bit_equal(packed_forward(loaded, x),
                  forward(m, x, Mode::Eval, RetentionPolicy::None, nullptr)));
  std::remove(path.c_str());
}

TEST_CASE("property: random binary models keep packed and float paths identical") {
  Rng rng(12);
  for (int trial = 0; trial < 12; ++trial) {
    ModelSpec s;
    s.layers = 2 + static_cast<int>(rng.next_u64() % 3);
    s.width = 16 + static_cast<int>(rng.next_u64() % 7) * 16;
    s.input_shape = {6 + static_cast<int64_t>(rng.next_u64() % 30)};
    s.num_classes = 2 + static_cast<int>(rng.next_u64() % 8);
    ModelOptions opt;
    opt.binarize_weights = true;
    opt.binary_activations = true;
    const ArchId arch = (rng.next_u64() & 1) ? ArchId::MlpPlain : ArchId::MlpResidual;
    ModelGraph m = build_model(arch, s, opt, rng);
    forward(m, rng_normal(rng, {8, s.input_shape[0]}, 0.0f, 1.0f), Mode::Train,
            RetentionPolicy::None, nullptr);
    const PackedModel pm = export_packed(m);
    const Tensor x = rng_normal(rng, {5, s.input_shape[0]}, 0.0f, 1.0f);
    REQUIRE(bit_equal(forward(m, x, Mode::Eval, RetentionPolicy::None, nullptr),
                      packed_forward(pm, x)));
  }
}

TEST_CASE("microbenchmark: single-thread xnor matmul vs float matmul at k=1024") {
  Rng rng(13);
  const int64_t m = 64, k = 1024, n = 64;
  const Tensor a = random_pm1(rng, {m, k});
  const Tensor w = random_pm1(rng, {n, k});
  const Tensor wt = transpose2d(w);
  const PackedBitTensor pa = pack(a), pw = pack(w);

  const int old_threads = omp_get_max_threads();
  omp_set_num_threads(1);
  auto time_of = [](auto fn) {
    fn();  // warm
    int iters = 1;
    double elapsed = 0.0;
    for (;;) {
      const auto t0 = std::chrono::steady_clock::now();
      for (int i = 0; i < iters; ++i) fn();
      elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      if (elapsed > 0.2) break;
      iters *= 4;
    }
    return elapsed / iters;
  };
  const double t_float = time_of([&] { (void)matmul(a, wt); });
  const double t_xnor = time_of([&] { (void)xnor_popcount_matmul(pa, pw); });
  omp_set_num_threads(old_threads);

  const double ratio = t_float / t_xnor;
  MESSAGE("xnor vs float matmul (single thread, k=1024): ", ratio, "x");
  CHECK(ratio >= 2.0);
}
