#pragma once

#include "rebirth/graph.hpp"
#include "rebirth/trainer.hpp"

namespace rebirth::fixtures {

namespace detail {

inline ConvParams make_conv(int out_c, int in_c, int k, int stride, int pad,
                            std::uint64_t seed, float bias = 0.1f) {
  ConvParams p;
  p.out_channels = out_c;
  p.in_channels = in_c;
  p.kh = p.kw = k;
  p.stride_h = p.stride_w = stride;
  p.pad_h = p.pad_w = pad;
  p.weights = xavier_init(out_c, in_c, k, k, seed);
  p.bias.assign(out_c, bias);
  return p;
}

inline BnParams make_bn(int c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> mean_d(-0.1f, 0.1f), var_d(0.5f, 1.5f);
  BnParams p;
  for (int i = 0; i < c; ++i) {
    p.mean.push_back(mean_d(rng));
    p.var.push_back(var_d(rng));
  }
  p.eps = 1e-5f;
  return p;
}

inline ScaleParams make_scale(int c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> g_d(0.8f, 1.2f), b_d(-0.1f, 0.1f);
  ScaleParams p;
  for (int i = 0; i < c; ++i) {
    p.gamma.push_back(g_d(rng));
    p.beta.push_back(b_d(rng));
  }
  return p;
}

inline InnerProductParams make_ip(int out_f, int in_f, std::uint64_t seed) {
  InnerProductParams p;
  p.out_features = out_f;
  p.in_features = in_f;
  p.weights = xavier_init(out_f, in_f, 1, 1, seed);
  p.bias.assign(out_f, 0.0f);
  return p;
}

}  // namespace detail

// conv/relu/lrn/pool stacks in the classical style; exercises streamline
// slimming and the LRN-heavy latency profile.
inline ModelGraph make_alexnet_mini(std::uint64_t seed = 1) {
  using namespace detail;
  ModelGraph g;
  g.add({"input", InputSpec{3, 32, 32}, {}});
  g.add({"conv1", make_conv(12, 3, 3, 1, 1, seed + 1), {"input"}});
  g.add({"relu1", ReluKind{}, {"conv1"}});
  g.add({"norm1", LrnParams{5, 1e-3f, 0.75f, 1.0f}, {"relu1"}});
  g.add({"pool1", PoolParams{PoolMode::Max, 2, 2, 2, 2, 0, 0}, {"norm1"}});
  g.add({"conv2", make_conv(24, 12, 3, 1, 1, seed + 2), {"pool1"}});
  g.add({"relu2", ReluKind{}, {"conv2"}});
  g.add({"norm2", LrnParams{5, 1e-3f, 0.75f, 1.0f}, {"relu2"}});
  g.add({"pool2", PoolParams{PoolMode::Max, 2, 2, 2, 2, 0, 0}, {"norm2"}});
  g.add({"conv3", make_conv(32, 24, 3, 1, 1, seed + 3), {"pool2"}});
  g.add({"relu3", ReluKind{}, {"conv3"}});
  g.add({"fc", make_ip(10, 32 * 8 * 8, seed + 4), {"relu3"}});
  g.add({"prob", SoftmaxKind{}, {"fc"}});
  g.output_ids = {"prob"};
  return g;
}

namespace detail {

// One inception-style module. Branch order in the concat is chosen so that
// branch slimming appends absorbed channels without reordering the layout:
// [3x3 branch, 1x1 branch, 5x5 branch, pool branch]. Reducers are linear
// (no ReLU) with as many outputs as inputs.
inline std::string add_inception(ModelGraph& g, const std::string& name,
                                 const std::string& bottom, int in_c, int o3, int o1,
                                 int o5, int opool, std::uint64_t seed) {
  g.add({name + "_3x3_reduce", make_conv(in_c, in_c, 1, 1, 0, seed + 1, 0.0f), {bottom}});
  g.add({name + "_3x3", make_conv(o3, in_c, 3, 1, 1, seed + 2), {name + "_3x3_reduce"}});
  g.add({name + "_3x3_relu", ReluKind{}, {name + "_3x3"}});

  g.add({name + "_1x1", make_conv(o1, in_c, 1, 1, 0, seed + 3), {bottom}});
  g.add({name + "_1x1_relu", ReluKind{}, {name + "_1x1"}});

  g.add({name + "_5x5_reduce", make_conv(in_c, in_c, 1, 1, 0, seed + 4, 0.0f), {bottom}});
  g.add({name + "_5x5", make_conv(o5, in_c, 5, 1, 2, seed + 5), {name + "_5x5_reduce"}});
  g.add({name + "_5x5_relu", ReluKind{}, {name + "_5x5"}});

  g.add({name + "_pool", PoolParams{PoolMode::Average, 3, 3, 1, 1, 1, 1}, {bottom}});
  g.add({name + "_proj", make_conv(opool, in_c, 1, 1, 0, seed + 6), {name + "_pool"}});
  g.add({name + "_proj_relu", ReluKind{}, {name + "_proj"}});

  g.add({name + "_concat", ConcatKind{},
         {name + "_3x3_relu", name + "_1x1_relu", name + "_5x5_relu",
          name + "_proj_relu"}});
  return name + "_concat";
}

}  // namespace detail

// Three inception-style modules behind a conv/bn/scale/relu/lrn/pool front.
// The front conv keeps its last kernel row and column at zero so pooling
// absorption stays representable by the slim layer's 3x3 footprint.
inline ModelGraph make_googlenet_mini(std::uint64_t seed = 2) {
  using namespace detail;
  ModelGraph g;
  g.add({"input", InputSpec{3, 32, 32}, {}});

  ConvParams conv1 = make_conv(16, 3, 3, 1, 1, seed + 1, 0.3f);
  for (int o = 0; o < conv1.out_channels; ++o)
    for (int i = 0; i < conv1.in_channels; ++i)
      for (int k = 0; k < 3; ++k) {
        conv1.weight(o, i, 2, k) = 0.0f;
        conv1.weight(o, i, k, 2) = 0.0f;
      }
  g.add({"conv1", std::move(conv1), {"input"}});
  g.add({"conv1_bn", make_bn(16, seed + 2), {"conv1"}});
  g.add({"conv1_scale", make_scale(16, seed + 3), {"conv1_bn"}});
  g.add({"relu1", ReluKind{}, {"conv1_scale"}});
  g.add({"norm1", LrnParams{5, 1e-3f, 0.75f, 1.0f}, {"relu1"}});
  g.add({"pool1", PoolParams{PoolMode::Average, 2, 2, 2, 2, 0, 0}, {"norm1"}});

  std::string top = add_inception(g, "i3a", "pool1", 16, 24, 8, 12, 8, seed + 10);
  g.add({"pool3", PoolParams{PoolMode::Average, 2, 2, 2, 2, 0, 0}, {top}});
  top = add_inception(g, "i4a", "pool3", 52, 32, 12, 16, 12, seed + 20);
  top = add_inception(g, "i4b", top, 72, 40, 12, 16, 12, seed + 30);

  g.add({"pool_global", PoolParams{PoolMode::Average, 8, 8, 1, 1, 0, 0}, {top}});
  g.add({"fc", make_ip(10, 80, seed + 40), {"pool_global"}});
  g.add({"prob", SoftmaxKind{}, {"fc"}});
  g.output_ids = {"prob"};
  return g;
}

}  // namespace rebirth::fixtures
