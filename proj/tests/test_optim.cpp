#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "bnn/optim.hpp"

using namespace bnn;

namespace {

// Minimal model: one Dense 1->1 with no bias use; gives a single scalar weight.
ModelGraph scalar_model(float w0) {
  ModelGraph model;
  LayerNode dense;
  dense.kind = NodeKind::Dense;
  dense.params = {Tensor({1, 1}, {w0}), Tensor({1})};
  model.nodes.push_back(dense);
  model.input_shape = {1};
  model.num_classes = 1;
  finalize_model(model);
  return model;
}

Gradients grad_for(const ModelGraph& model, float gw, float gb = 0.0f) {
  Gradients g = Gradients::sized_for(model);
  g.by_node[0] = {Tensor({1, 1}, {gw}), Tensor({1}, {gb})};
  return g;
}

// Scalar reference implementation of one Adam step with coupled decay.
struct ScalarAdam {
  float m = 0, v = 0;
  int t = 0;
  float step(float& p, float g, float lr, float b1, float b2, float eps, float wd) {
    ++t;
    g += wd * p;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const float mhat = m / (1 - std::pow(b1, static_cast<float>(t)));
    const float vhat = v / (1 - std::pow(b2, static_cast<float>(t)));
    p -= lr * mhat / (std::sqrt(vhat) + eps);
    return p;
  }
};

}  // namespace

TEST_CASE("adam: zero gradient leaves parameters unchanged, step counter advances") {
  ModelGraph model = scalar_model(0.7f);
  AdamState state(model, AdamConfig{});
  state.step(model, grad_for(model, 0.0f));
  CHECK(model.nodes[0].params[0][0] == 0.7f);
  CHECK(state.steps_taken() == 1);
}

TEST_CASE("adam: first step moves by about the learning rate per coordinate") {
  for (float g : {1e-4f, 0.5f, 40.0f}) {
    ModelGraph model = scalar_model(0.0f);
    AdamConfig cfg;
    cfg.lr = 1e-2f;
    AdamState state(model, cfg);
    state.step(model, grad_for(model, g));
    // bias correction at t=1 makes mhat/sqrt(vhat) = sign(g) up to eps effects
    CHECK(model.nodes[0].params[0][0] == doctest::Approx(-cfg.lr).epsilon(1e-3));
  }
}

TEST_CASE("adam: first-step direction is invariant to gradient scale") {
  ModelGraph a = scalar_model(0.0f);
  ModelGraph b = scalar_model(0.0f);
  AdamState sa(a, AdamConfig{});
  AdamState sb(b, AdamConfig{});
  sa.step(a, grad_for(a, 0.017f));
  sb.step(b, grad_for(b, 17.0f));  // x1000
  CHECK(a.nodes[0].params[0][0] ==
        doctest::Approx(b.nodes[0].params[0][0]).epsilon(1e-3));
}

TEST_CASE("adam: trajectory on a 1-D quadratic matches the scalar reference") {
  // d/dw (w - 3)^2 / 2 = w - 3
  ModelGraph model = scalar_model(10.0f);
  AdamConfig cfg;
  cfg.lr = 0.1f;
  cfg.weight_decay = 1e-3f;
  AdamState state(model, cfg);

  ScalarAdam ref;
  float wr = 10.0f;
  for (int i = 0; i < 10; ++i) {
    const float w = model.nodes[0].params[0][0];
    state.step(model, grad_for(model, w - 3.0f));
    ref.step(wr, wr - 3.0f, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);
    CHECK(model.nodes[0].params[0][0] == doctest::Approx(wr).epsilon(1e-6));
  }
}

TEST_CASE("adam: weight decay with zero gradients shrinks parameters monotonically") {
  ModelGraph model = scalar_model(1.0f);
  AdamConfig cfg;
  cfg.weight_decay = 0.1f;
  AdamState state(model, cfg);
  float prev = 1.0f;
  for (int i = 0; i < 20; ++i) {
    state.step(model, grad_for(model, 0.0f));
    const float w = model.nodes[0].params[0][0];
    CHECK(w < prev);
    CHECK(w >= 0.0f);
    prev = w;
  }
}

TEST_CASE("adam: identical seeds and data give bitwise identical parameters") {
  auto run = [] {
    ModelGraph model = scalar_model(2.0f);
    AdamState state(model, AdamConfig{});
    Rng rng(99);
    for (int i = 0; i < 25; ++i)
      state.step(model, grad_for(model, rng.normal(0.0f, 1.0f)));
    return model.nodes[0].params[0][0];
  };
  const float a = run();
  const float b = run();
  CHECK(std::memcmp(&a, &b, sizeof(float)) == 0);
}

TEST_CASE("adam: non-finite gradient aborts the step naming the segment") {
  ModelGraph model = scalar_model(1.0f);
  AdamState state(model, AdamConfig{});
  Gradients g = grad_for(model, std::numeric_limits<float>::quiet_NaN());
  CHECK_THROWS_WITH_AS(state.step(model, g),
                       doctest::Contains("segment 0"), std::runtime_error);
}

TEST_CASE("adam: clip_latent clamps binarized weights to [-1,1]") {
  ModelGraph model = scalar_model(0.999f);
  model.nodes[0].binarize_weights = false;  // latent clip applies to binarized slots only
  AdamConfig cfg;
  cfg.lr = 0.5f;
  cfg.clip_latent = true;
  AdamState state(model, cfg);
  state.step(model, grad_for(model, -1.0f));
  CHECK(model.nodes[0].params[0][0] > 1.0f);  // not binarized: no clamp

  ModelGraph model2 = scalar_model(0.999f);
  model2.nodes[0].binarize_weights = true;
  AdamState state2(model2, cfg);
  state2.step(model2, grad_for(model2, -1.0f));
  CHECK(model2.nodes[0].params[0][0] == 1.0f);
}
