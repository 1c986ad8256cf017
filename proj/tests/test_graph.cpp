#include <catch2/catch_amalgamated.hpp>

#include "rebirth/fixtures.hpp"
#include "rebirth/graph.hpp"

using namespace rebirth;

namespace {

ModelGraph chain_graph() {
  ModelGraph g;
  g.add({"input", InputSpec{3, 32, 32}, {}});
  ConvParams conv;
  conv.out_channels = 8;
  conv.in_channels = 3;
  conv.kh = conv.kw = 3;
  conv.stride_h = conv.stride_w = 1;
  conv.pad_h = conv.pad_w = 1;
  conv.weights = xavier_init(8, 3, 3, 3, 1);
  conv.bias.assign(8, 0.0f);
  g.add({"conv", std::move(conv), {"input"}});
  g.output_ids = {"conv"};
  return g;
}

}  // namespace

TEST_CASE("validate accepts a simple chain") {
  REQUIRE(validate(chain_graph()).empty());
}

TEST_CASE("validate reports missing ids by name") {
  ModelGraph g = chain_graph();
  g.at("conv").inputs = {"ghost"};
  auto diags = validate(g);
  REQUIRE_FALSE(diags.empty());
  REQUIRE(diags.front().find("ghost") != std::string::npos);
}

TEST_CASE("validate detects a two-node cycle and lists members") {
  ModelGraph g;
  g.add({"a", ReluKind{}, {"b"}});
  g.add({"b", ReluKind{}, {"a"}});
  auto diags = validate(g);
  bool found = false;
  for (const auto& d : diags)
    if (d.find("cycle") != std::string::npos && d.find("a") != std::string::npos &&
        d.find("b") != std::string::npos)
      found = true;
  REQUIRE(found);
}

TEST_CASE("validate flags concat arity") {
  ModelGraph g = chain_graph();
  g.add({"cat", ConcatKind{}, {"conv"}});
  auto diags = validate(g);
  REQUIRE_FALSE(diags.empty());
}

TEST_CASE("infer_shapes applies the floor rule") {
  ModelGraph g = chain_graph();
  auto shapes = infer_shapes(g);
  REQUIRE(shapes.at("conv") == Shape{8, 32, 32});

  g.add({"pool", PoolParams{PoolMode::Max, 2, 2, 2, 2, 0, 0}, {"conv"}});
  g.output_ids = {"pool"};
  REQUIRE(infer_shapes(g).at("pool") == Shape{8, 16, 16});
}

TEST_CASE("infer_shapes adds concat channels") {
  ModelGraph g;
  g.add({"input", InputSpec{4, 28, 28}, {}});
  ConvParams a, b;
  a.out_channels = 64, a.in_channels = 4, a.kh = a.kw = 1;
  a.weights.assign(64 * 4, 0.0f), a.bias.assign(64, 0.0f);
  b = a;
  b.out_channels = 32;
  b.weights.assign(32 * 4, 0.0f), b.bias.assign(32, 0.0f);
  g.add({"a", std::move(a), {"input"}});
  g.add({"b", std::move(b), {"input"}});
  g.add({"cat", ConcatKind{}, {"a", "b"}});
  g.output_ids = {"cat"};
  REQUIRE(infer_shapes(g).at("cat") == Shape{96, 28, 28});
}

TEST_CASE("infer_shapes names the offending node on a bad extent") {
  ModelGraph g = chain_graph();
  g.add({"pool", PoolParams{PoolMode::Max, 64, 64, 1, 1, 0, 0}, {"conv"}});
  g.output_ids = {"pool"};
  try {
    infer_shapes(g);
    FAIL("expected shape_error");
  } catch (const shape_error& e) {
    REQUIRE(std::string(e.what()).find("pool") != std::string::npos);
  }
}

TEST_CASE("topo_order is deterministic and respects dependencies") {
  ModelGraph g;
  g.add({"a", InputSpec{1, 2, 2}, {}});
  g.add({"b", ReluKind{}, {"a"}});
  g.add({"c", ReluKind{}, {"a"}});
  g.add({"d", ConcatKind{}, {"b", "c"}});
  g.output_ids = {"d"};
  auto order = topo_order(g);
  auto pos = [&](const std::string& id) {
    return std::find(order.begin(), order.end(), id) - order.begin();
  };
  REQUIRE(pos("a") < pos("b"));
  REQUIRE(pos("b") < pos("d"));
  REQUIRE(pos("c") < pos("d"));
  REQUIRE(topo_order(g) == order);
}

TEST_CASE("run_forward applies kernels along the graph") {
  ModelGraph g;
  g.add({"input", InputSpec{2, 3, 3}, {}});
  g.add({"r", ReluKind{}, {"input"}});
  g.output_ids = {"r"};
  Tensor4 x(1, 2, 3, 3, -1.0f);
  auto acts = run_forward(g, x);
  for (float v : acts.at("r").data) REQUIRE(v == 0.0f);
}

TEST_CASE("run_forward chain equals manual kernel composition") {
  ModelGraph g;
  g.add({"input", InputSpec{3, 8, 8}, {}});
  ConvParams conv;
  conv.out_channels = 4, conv.in_channels = 3, conv.kh = conv.kw = 3;
  conv.stride_h = conv.stride_w = 1, conv.pad_h = conv.pad_w = 1;
  conv.weights = xavier_init(4, 3, 3, 3, 5);
  conv.bias.assign(4, 0.25f);
  BnParams bn{{0.1f, -0.2f, 0.0f, 0.3f}, {1.0f, 0.5f, 2.0f, 1.5f}, 1e-5f};
  ScaleParams sl{{1.5f, 0.5f, 1.0f, 2.0f}, {0.1f, 0.0f, -0.1f, 0.2f}};
  g.add({"conv", conv, {"input"}});
  g.add({"bn", bn, {"conv"}});
  g.add({"sl", sl, {"bn"}});
  g.output_ids = {"sl"};

  Tensor4 x = random_tensor(2, 3, 8, 8, 99);
  auto acts = run_forward(g, x);
  Tensor4 want = scale(batch_norm(conv2d(x, conv), bn), sl);
  REQUIRE(acts.at("sl").data == want.data);
}

TEST_CASE("run_forward is deterministic") {
  ModelGraph g = fixtures::make_alexnet_mini(3);
  Tensor4 x = random_tensor(1, 3, 32, 32, 4);
  REQUIRE(run_forward(g, x).at("prob").data == run_forward(g, x).at("prob").data);
}

TEST_CASE("infer_shapes agrees with tensors actually produced") {
  for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
    ModelGraph g = fixtures::make_googlenet_mini(seed);
    auto shapes = infer_shapes(g);
    Tensor4 x = random_tensor(1, 3, 32, 32, seed + 10);
    auto acts = run_forward(g, x);
    for (const auto& [id, t] : acts) {
      REQUIRE(t.c == shapes.at(id).c);
      REQUIRE(t.h == shapes.at(id).h);
      REQUIRE(t.w == shapes.at(id).w);
    }
  }
}

TEST_CASE("dropout is the identity at inference") {
  ModelGraph g;
  g.add({"input", InputSpec{2, 4, 4}, {}});
  g.add({"drop", DropoutKind{}, {"input"}});
  g.output_ids = {"drop"};
  Tensor4 x = random_tensor(1, 2, 4, 4, 8);
  REQUIRE(run_forward(g, x).at("drop").data == x.data);
}

TEST_CASE("run_segment equals run_forward on the whole graph") {
  ModelGraph g = fixtures::make_alexnet_mini(5);
  Tensor4 x = random_tensor(1, 3, 32, 32, 6);
  // entry conv1 takes the net input directly
  Tensor4 seg = run_segment(g, "conv1", "prob", x);
  REQUIRE(seg.data == run_forward(g, x).at("prob").data);
}

TEST_CASE("run_segment on conv-lrn-pool equals kernel composition") {
  ModelGraph g = fixtures::make_alexnet_mini(7);
  Tensor4 x = random_tensor(1, 12, 16, 16, 8);
  Tensor4 seg = run_segment(g, "conv2", "pool2", x);
  const auto& conv = std::get<ConvParams>(g.at("conv2").kind);
  const auto& l = std::get<LrnParams>(g.at("norm2").kind);
  const auto& pool = std::get<PoolParams>(g.at("pool2").kind);
  Tensor4 want = pool2d(lrn(relu(conv2d(x, conv)), l), pool);
  REQUIRE(seg.data == want.data);
}

TEST_CASE("run_segment of a single node applies that kernel") {
  ModelGraph g = fixtures::make_alexnet_mini(9);
  Tensor4 x = random_tensor(1, 12, 16, 16, 10);
  Tensor4 seg = run_segment(g, "conv2", "conv2", x);
  REQUIRE(seg.data == conv2d(x, std::get<ConvParams>(g.at("conv2").kind)).data);
}

TEST_CASE("run_segment rejects multi-entry segments") {
  ModelGraph g = fixtures::make_googlenet_mini(1);
  Tensor4 x = random_tensor(1, 16, 16, 16, 2);
  // i3a_3x3 hangs off the reducer; the concat needs the other branches too
  REQUIRE_THROWS_AS(run_segment(g, "i3a_3x3", "i3a_concat", x), graph_error);
}

TEST_CASE("compare_models of a model against itself") {
  ModelGraph g = fixtures::make_alexnet_mini(11);
  auto rep = compare_models(g, g, 5, 1, 1e-9);
  REQUIRE(rep.max_abs_diff == 0.0);
  REQUIRE(rep.agreement == 1.0);
  REQUIRE(rep.within_tol);
}

TEST_CASE("count_flops conv formula") {
  ModelGraph g;
  g.add({"input", InputSpec{1, 1, 1}, {}});
  ConvParams p;
  p.out_channels = p.in_channels = 1, p.kh = p.kw = 1;
  p.weights = {1.0f}, p.bias = {0.0f};
  g.add({"conv", std::move(p), {"input"}});
  g.output_ids = {"conv"};
  REQUIRE(count_flops(g).at("conv") == 1);
}

TEST_CASE("count_flops quarter under stride doubling, half under channel halving") {
  auto build = [](int stride, int out_c) {
    ModelGraph g;
    g.add({"input", InputSpec{4, 32, 32}, {}});
    ConvParams p;
    p.out_channels = out_c, p.in_channels = 4, p.kh = p.kw = 3;
    p.stride_h = p.stride_w = stride, p.pad_h = p.pad_w = 1;
    p.weights.assign(size_t(out_c) * 4 * 9, 0.0f);
    p.bias.assign(out_c, 0.0f);
    g.add({"conv", std::move(p), {"input"}});
    g.output_ids = {"conv"};
    return count_flops(g).at("conv");
  };
  // 32x32 with pad 1 k3: stride 1 -> 32x32, stride 2 -> 16x16
  REQUIRE(build(1, 8) == 4 * build(2, 8));
  REQUIRE(build(1, 8) == 2 * build(1, 4));
}
