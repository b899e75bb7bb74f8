#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "bnn/graph.hpp"
#include "bnn/serialize.hpp"
#include "test_util.hpp"

using namespace bnn;
using testutil::bit_equal;

namespace {

ModelSpec mlp_spec(int layers, int width, std::vector<int64_t> input, int classes) {
  ModelSpec s;
  s.layers = layers;
  s.width = width;
  s.input_shape = std::move(input);
  s.num_classes = classes;
  return s;
}

int count_kind(const ModelGraph& m, NodeKind kind) {
  int n = 0;
  for (const auto& node : m.nodes)
    if (node.kind == kind) ++n;
  return n;
}

}  // namespace

TEST_CASE("build_model: MlpPlain structure, K = layers + 1") {
  Rng rng(1);
  ModelGraph m = build_model(ArchId::MlpPlain, mlp_spec(3, 512, {1, 28, 28}, 10), {}, rng);
  CHECK(m.num_segments() == 4);
  CHECK(m.injection_points.size() == 4);
  // each injection point but the last is a hidden activation output
  for (int k = 0; k + 1 < 4; ++k) {
    const LayerNode& node = m.nodes[static_cast<size_t>(m.injection_points[static_cast<size_t>(k)])];
    CHECK(node.kind == NodeKind::Activation);
    CHECK(m.segment_output_size(k) == 512);
  }
  CHECK(m.injection_points.back() == static_cast<int>(m.nodes.size()) - 1);
  CHECK(m.segment_output_size(3) == 10);
}

TEST_CASE("build_model: skip flag controls SkipAdd nodes") {
  Rng rng(2);
  ModelOptions with, without;
  without.skip_connections = false;
  ModelGraph a =
      build_model(ArchId::MlpResidual, mlp_spec(3, 64, {64}, 10), with, rng);
  ModelGraph b =
      build_model(ArchId::MlpResidual, mlp_spec(3, 64, {64}, 10), without, rng);
  CHECK(count_kind(a, NodeKind::SkipAdd) == 3);  // width == input: every block skips
  CHECK(count_kind(b, NodeKind::SkipAdd) == 0);

  ModelGraph c =
      build_model(ArchId::MlpResidual, mlp_spec(3, 64, {32}, 10), with, rng);
  CHECK(count_kind(c, NodeKind::SkipAdd) == 2);  // first block reshapes 32 -> 64
}

TEST_CASE("build_model: first and last trainable layers stay float") {
  Rng rng(3);
  ModelOptions opt;
  opt.binarize_weights = true;
  for (ArchId arch : {ArchId::MlpPlain, ArchId::MlpResidual}) {
    ModelGraph m = build_model(arch, mlp_spec(3, 32, {32}, 10), opt, rng);
    std::vector<int> trainables;
    for (const auto& node : m.nodes)
      if (node.trainable()) trainables.push_back(node.index);
    CHECK_FALSE(m.nodes[static_cast<size_t>(trainables.front())].binarize_weights);
    CHECK_FALSE(m.nodes[static_cast<size_t>(trainables.back())].binarize_weights);
    for (size_t i = 1; i + 1 < trainables.size(); ++i)
      CHECK(m.nodes[static_cast<size_t>(trainables[i])].binarize_weights);
  }
  ModelGraph conv = build_model(
      ArchId::ConvPlain, mlp_spec(4, 8, {1, 16, 16}, 10), opt, rng);
  const LayerNode& first = conv.nodes[0];
  CHECK(first.kind == NodeKind::Conv2d);
  CHECK_FALSE(first.binarize_weights);
}

TEST_CASE("build_model: conv and mixer graphs validate and forward") {
  Rng rng(4);
  ModelGraph conv = build_model(ArchId::ConvPlain, mlp_spec(4, 8, {3, 16, 16}, 10), {}, rng);
  Tensor x = rng_uniform(rng, {2, 3, 16, 16}, 0.0f, 1.0f);
  Tensor logits = forward(conv, x, Mode::Eval, RetentionPolicy::None, nullptr);
  CHECK(logits.shape() == std::vector<int64_t>{2, 10});

  ModelSpec ms = mlp_spec(2, 16, {1, 28, 28}, 10);
  ms.patch = 7;
  ModelGraph mixer = build_model(ArchId::MiniMixer, ms, {}, rng);
  Tensor xi = rng_uniform(rng, {2, 1, 28, 28}, 0.0f, 1.0f);
  Tensor lm = forward(mixer, xi, Mode::Eval, RetentionPolicy::None, nullptr);
  CHECK(lm.shape() == std::vector<int64_t>{2, 10});
  CHECK(count_kind(mixer, NodeKind::SkipAdd) == 4);

  ms.patch = 5;  // 28 % 5 != 0
  CHECK_THROWS_AS(build_model(ArchId::MiniMixer, ms, {}, rng), std::invalid_argument);
}

TEST_CASE("forward: all-zero input, zero biases, sign activations give all +1") {
  Rng rng(5);
  ModelOptions opt;
  opt.binarize_weights = true;
  opt.binary_activations = true;
  ModelGraph m = build_model(ArchId::MlpPlain, mlp_spec(3, 16, {8}, 4), opt, rng);
  // biases are zero-initialized; batch of identical zero inputs keeps every
  // batchnorm output at zero, so every sign fires the +1 tie rule
  Tensor x({4, 8});
  ForwardTrace trace(m.nodes.size());
  forward(m, x, Mode::Train, RetentionPolicy::All, &trace);
  for (const auto& node : m.nodes) {
    if (node.kind != NodeKind::Activation) continue;
    // trace holds the sign pre-activation; recompute the output
    const Tensor& z = trace.nodes[static_cast<size_t>(node.index)].main;
    const Tensor y = sign_forward(z);
    for (int64_t i = 0; i < y.size(); ++i) REQUIRE(y[i] == 1.0f);
  }
}

TEST_CASE("forward: eval mode is deterministic") {
  Rng rng(6);
  ModelGraph m = build_model(ArchId::MlpPlain, mlp_spec(2, 32, {16}, 5), {}, rng);
  const Tensor x = rng_normal(rng, {3, 16}, 0.0f, 1.0f);
  const Tensor a = forward(m, x, Mode::Eval, RetentionPolicy::None, nullptr);
  const Tensor b = forward(m, x, Mode::Eval, RetentionPolicy::None, nullptr);
  CHECK(bit_equal(a, b));
}

TEST_CASE("forward: binary toy model matches a hand-emulated computation") {
  // 2-2-2 network: Dense(2->2, binarized) -> sign -> Dense(2->2, binarized)
  ModelGraph m;
  LayerNode d1;
  d1.kind = NodeKind::Dense;
  d1.params = {Tensor::matrix({{0.3f, -0.2f}, {-0.4f, 0.6f}}), Tensor({2}, {0.1f, -0.1f})};
  d1.binarize_weights = true;
  LayerNode act;
  act.kind = NodeKind::Activation;
  act.act = ActKind::Sign;
  LayerNode d2;
  d2.kind = NodeKind::Dense;
  d2.params = {Tensor::matrix({{-0.5f, 0.7f}, {0.8f, -0.1f}}), Tensor({2}, {0.0f, 0.2f})};
  d2.binarize_weights = true;
  m.nodes = {d1, act, d2};
  m.input_shape = {2};
  m.num_classes = 2;
  finalize_model(m);
  CHECK(m.num_segments() == 2);

  const Tensor x = Tensor::matrix({{0.9f, -1.3f}});
  const Tensor logits = forward(m, x, Mode::Eval, RetentionPolicy::None, nullptr);

  // by hand: W1b = [[1,-1],[-1,1]], z1 = x W1b + b1 = (0.9+1.3)+0.1, (-0.9-1.3)-0.1
  //          y1 = sign(z1) = [1,-1]
  //          W2b = [[-1,1],[1,-1]], z2 = y1 W2b + b2 = (-1-1)+0, (1+1)+0.2
  CHECK(logits[0] == doctest::Approx(-2.0f));
  CHECK(logits[1] == doctest::Approx(2.2f));
}

TEST_CASE("segment_backward: dense input error is W_b^T delta-z") {
  ModelGraph m;
  LayerNode d;
  d.kind = NodeKind::Dense;
  // column-convention W_b [[1,-1],[1,1]] corresponds to row-layout transpose
  d.params = {Tensor::matrix({{1.0f, 1.0f}, {-1.0f, 1.0f}}), Tensor({2})};
  m.nodes = {d};
  m.input_shape = {2};
  m.num_classes = 2;
  finalize_model(m);

  ForwardTrace trace(1);
  const Tensor x = Tensor::matrix({{0.5f, -0.5f}});
  forward(m, x, Mode::Eval, RetentionPolicy::All, &trace);
  Gradients g = Gradients::sized_for(m);
  auto sb = segment_backward(m, trace, 0, Tensor::matrix({{1.0f, 0.0f}}), g);
  CHECK(sb.input_error[0] == doctest::Approx(1.0f));
  CHECK(sb.input_error[1] == doctest::Approx(-1.0f));
}

TEST_CASE("segment_backward: fully saturated sign activation blocks the gradient") {
  ModelGraph m;
  LayerNode d;
  d.kind = NodeKind::Dense;
  d.params = {Tensor::matrix({{3.0f, -3.0f}, {-3.0f, 3.0f}}), Tensor({2})};
  LayerNode act;
  act.kind = NodeKind::Activation;
  act.act = ActKind::Sign;
  LayerNode out;
  out.kind = NodeKind::Dense;
  out.params = {Tensor::matrix({{1.0f, 0.0f}, {0.0f, 1.0f}}), Tensor({2})};
  m.nodes = {d, act, out};
  m.input_shape = {2};
  m.num_classes = 2;
  finalize_model(m);

  ForwardTrace trace(m.nodes.size());
  const Tensor x = Tensor::matrix({{1.0f, -1.0f}});  // |z| = 6 > 1 everywhere
  forward(m, x, Mode::Eval, RetentionPolicy::All, &trace);
  Gradients g = Gradients::sized_for(m);
  auto sb = segment_backward(m, trace, 0, Tensor::matrix({{0.7f, -0.3f}}), g);
  CHECK(sb.ste_crossings == 1);
  for (const Tensor& t : g.by_node[0])
    for (int64_t i = 0; i < t.size(); ++i) REQUIRE(t[i] == 0.0f);
  for (int64_t i = 0; i < sb.input_error.size(); ++i) REQUIRE(sb.input_error[i] == 0.0f);
}

TEST_CASE("segment_backward: chained gradients match finite differences (tanh MLP)") {
  Rng rng(7);
  ModelOptions opt;
  opt.activation_override = ActKind::Tanh;
  ModelGraph m = build_model(ArchId::MlpPlain, mlp_spec(3, 12, {10}, 4), opt, rng);
  const Tensor x = rng_normal(rng, {6, 10}, 0.0f, 1.0f);
  const Tensor y = one_hot({0, 1, 2, 3, 0, 1}, 4);
  Gradients grads = testutil::bp_grads_chained(m, x, y);
  const double err = testutil::fd_max_rel_error(m, x, y, grads);
  CHECK(err < 1e-3);
}

TEST_CASE("segment_backward: missing trace buffers is an error") {
  Rng rng(8);
  ModelGraph m = build_model(ArchId::MlpPlain, mlp_spec(1, 8, {8}, 3), {}, rng);
  ForwardTrace trace(m.nodes.size());
  const Tensor x = rng_normal(rng, {2, 8}, 0.0f, 1.0f);
  forward(m, x, Mode::Eval, RetentionPolicy::None, &trace);
  Gradients g = Gradients::sized_for(m);
  CHECK_THROWS_AS(segment_backward(m, trace, 0, Tensor({2, 8}), g),
                  std::invalid_argument);
}

TEST_CASE("forward: residual blocks pass the identity when their dense branch is zero") {
  Rng rng(9);
  ModelOptions opt;
  opt.activation_override = ActKind::Tanh;
  ModelGraph m = build_model(ArchId::MlpResidual, mlp_spec(3, 16, {16}, 4), opt, rng);
  for (auto& node : m.nodes) {
    if (node.kind != NodeKind::Dense || node.index == static_cast<int>(m.nodes.size()) - 1)
      continue;
    for (auto& p : node.params)
      for (int64_t i = 0; i < p.size(); ++i) p[i] = 0.0f;
  }
  // eval mode: batchnorm of the zero branch stays zero, so each hidden segment
  // computes act(identity(input))
  const Tensor x = rng_normal(rng, {4, 16}, 0.0f, 1.0f);
  Tensor act_in = x;
  for (int k = 0; k + 1 < m.num_segments(); ++k) {
    const Tensor out = forward_segment(m, k, act_in, Mode::Eval, false, nullptr);
    const Tensor expect = tanh(act_in);
    REQUIRE(out.same_shape(expect));
    for (int64_t i = 0; i < out.size(); ++i)
      REQUIRE(out[i] == doctest::Approx(expect[i]).epsilon(1e-5));
    act_in = out;
  }
}

TEST_CASE("trace: eval retains nothing, accountant reports zero") {
  Rng rng(10);
  ModelGraph m = build_model(ArchId::MlpPlain, mlp_spec(2, 16, {8}, 3), {}, rng);
  BufferAccountant acct;
  ForwardTrace trace(m.nodes.size(), &acct);
  const Tensor x = rng_normal(rng, {4, 8}, 0.0f, 1.0f);
  forward(m, x, Mode::Eval, RetentionPolicy::None, &trace);
  CHECK(acct.peak_bytes() == 0);
  CHECK(trace.retained_bytes == 0);

  forward(m, x, Mode::Train, RetentionPolicy::All, &trace);
  CHECK(acct.peak_bytes() > 0);
  CHECK(acct.peak_segments() == m.num_segments());
  trace.release_all(m);
  CHECK(acct.current_bytes() == 0);
}

TEST_CASE("batchnorm: train-mode output has mean shift and std scale per channel") {
  Rng rng(11);
  ModelGraph m;
  LayerNode bn;
  bn.kind = NodeKind::BatchNorm;
  bn.params = {Tensor({6}), Tensor({6}), Tensor({6}), Tensor::full({6}, 1.0f)};
  for (int64_t c = 0; c < 6; ++c) {
    bn.params[0][c] = 0.5f + 0.3f * static_cast<float>(c);  // scale
    bn.params[1][c] = -1.0f + 0.4f * static_cast<float>(c); // shift
  }
  LayerNode d;
  d.kind = NodeKind::Dense;
  d.params = {Tensor::full({6, 2}, 1.0f), Tensor({2})};
  m.nodes = {bn, d};
  m.input_shape = {6};
  m.num_classes = 2;
  finalize_model(m);

  const Tensor x = rng_normal(rng, {64, 6}, 2.0f, 3.0f);
  ForwardTrace trace(m.nodes.size());
  forward(m, x, Mode::Train, RetentionPolicy::All, &trace);
  // recompute the normalized output from the trace
  const Tensor& xhat = trace.nodes[0].main;
  for (int64_t c = 0; c < 6; ++c) {
    double mean_out = 0.0, var_out = 0.0;
    for (int64_t r = 0; r < 64; ++r) {
      const double v = xhat[r * 6 + c] * m.nodes[0].params[0][c] + m.nodes[0].params[1][c];
      mean_out += v;
    }
    mean_out /= 64.0;
    for (int64_t r = 0; r < 64; ++r) {
      const double v = xhat[r * 6 + c] * m.nodes[0].params[0][c] + m.nodes[0].params[1][c];
      var_out += (v - mean_out) * (v - mean_out);
    }
    var_out /= 64.0;
    CHECK(std::fabs(mean_out - m.nodes[0].params[1][c]) < 1e-4);
    CHECK(std::fabs(std::sqrt(var_out) - m.nodes[0].params[0][c]) < 1e-4);
  }
}

TEST_CASE("forward: shape mismatch names the node") {
  Rng rng(12);
  ModelGraph m = build_model(ArchId::MlpPlain, mlp_spec(1, 8, {8}, 3), {}, rng);
  const Tensor bad = rng_normal(rng, {2, 9}, 0.0f, 1.0f);
  CHECK_THROWS_AS(forward(m, bad, Mode::Eval, RetentionPolicy::None, nullptr),
                  std::invalid_argument);
}

TEST_CASE("finalize_model: invalid skip source rejected with node index") {
  ModelGraph m;
  LayerNode d;
  d.kind = NodeKind::Dense;
  d.params = {Tensor::matrix({{1.0f, 0.0f}, {0.0f, 1.0f}}), Tensor({2})};
  LayerNode skip;
  skip.kind = NodeKind::SkipAdd;
  skip.skip_source = 5;  // out of range
  m.nodes = {d, skip};
  m.input_shape = {2};
  m.num_classes = 2;
  CHECK_THROWS_WITH_AS(finalize_model(m), doctest::Contains("node 1"),
                       std::invalid_argument);
}

TEST_CASE("save/load: model container round-trips forward bit-exactly") {
  Rng rng(13);
  ModelOptions opt;
  opt.binarize_weights = true;
  opt.binary_activations = true;
  ModelGraph m = build_model(ArchId::MlpPlain, mlp_spec(2, 24, {12}, 5), opt, rng);
  // move batchnorm state off its initialization values
  const Tensor warm = rng_normal(rng, {16, 12}, 0.0f, 1.0f);
  forward(m, warm, Mode::Train, RetentionPolicy::None, nullptr);

  const std::string path = "/tmp/bitgrad_test_model.bgr";
  save_model(m, path);
  ModelGraph loaded = load_model(path);
  CHECK(loaded.nodes.size() == m.nodes.size());

  const Tensor x = rng_normal(rng, {8, 12}, 0.0f, 1.0f);
  const Tensor a = forward(m, x, Mode::Eval, RetentionPolicy::None, nullptr);
  const Tensor b = forward(loaded, x, Mode::Eval, RetentionPolicy::None, nullptr);
  CHECK(bit_equal(a, b));
  // binarizing the loaded latent weights reproduces the binary model
  for (size_t i = 0; i < m.nodes.size(); ++i)
    for (size_t s = 0; s < m.nodes[i].params.size(); ++s)
      REQUIRE(bit_equal(m.nodes[i].params[s], loaded.nodes[i].params[s]));
  std::remove(path.c_str());
}
