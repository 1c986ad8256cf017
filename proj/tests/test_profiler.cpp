#include <catch2/catch_amalgamated.hpp>

#include "rebirth/fixtures.hpp"
#include "rebirth/profiler.hpp"

using namespace rebirth;

TEST_CASE("time_forward reports every non-input layer once, in topo order") {
  ModelGraph g = fixtures::make_alexnet_mini(1);
  auto rep = time_forward(g, 1, 3);
  REQUIRE(rep.runs == 1);
  REQUIRE(rep.layers.size() == g.nodes.size() - 1);  // Input excluded
  const auto order = topo_order(g);
  size_t li = 0;
  for (const auto& id : order) {
    if (std::holds_alternative<InputSpec>(g.at(id).kind)) continue;
    REQUIRE(rep.layers[li].id == id);
    REQUIRE(rep.layers[li].best_ms >= 0.0);
    ++li;
  }
}

TEST_CASE("total equals the sum of the per-layer times") {
  ModelGraph g = fixtures::make_googlenet_mini(2);
  auto rep = time_forward(g, 3, 4);
  double sum = 0.0;
  for (const auto& l : rep.layers) sum += l.best_ms;
  REQUIRE_THAT(rep.total_ms, Catch::Matchers::WithinRel(sum, 1e-9));
}

TEST_CASE("layer classification: conv and inner_product are tensor layers") {
  ModelGraph g = fixtures::make_alexnet_mini(1);
  auto rep = time_forward(g, 1, 5);
  for (const auto& l : rep.layers) {
    const bool expect = l.kind == std::string("conv") ||
                        l.kind == std::string("inner_product");
    REQUIRE(l.is_tensor == expect);
  }
}

TEST_CASE("nontensor_fraction is the non-tensor share of the total") {
  LatencyReport r;
  r.layers = {{"a", "conv", true, 70.0},
              {"b", "lrn", false, 20.0},
              {"c", "pool", false, 10.0}};
  r.total_ms = 100.0;
  REQUIRE_THAT(nontensor_fraction(r), Catch::Matchers::WithinAbs(0.30, 1e-12));
}

TEST_CASE("nontensor_fraction is zero without non-tensor layers") {
  LatencyReport r;
  r.layers = {{"a", "conv", true, 5.0}};
  r.total_ms = 5.0;
  REQUIRE(nontensor_fraction(r) == 0.0);
}

TEST_CASE("nontensor_fraction rejects a zero total") {
  LatencyReport r;
  r.total_ms = 0.0;
  REQUIRE_THROWS_AS(nontensor_fraction(r), std::domain_error);
}

TEST_CASE("the classical stack spends measurable time in non-tensor layers") {
  ModelGraph g = fixtures::make_alexnet_mini(1);
  auto rep = time_forward(g, 3, 6);
  const double f = nontensor_fraction(rep);
  REQUIRE(f > 0.0);
  REQUIRE(f < 1.0);
}

TEST_CASE("text and csv reports carry every layer") {
  ModelGraph g = fixtures::make_alexnet_mini(1);
  auto rep = time_forward(g, 1, 7);
  const std::string text = report_to_text(rep);
  const std::string csv = report_to_csv(rep);
  for (const auto& l : rep.layers) {
    REQUIRE(text.find(l.id) != std::string::npos);
    REQUIRE(csv.find(l.id + ",") != std::string::npos);
  }
  REQUIRE(text.find("total") != std::string::npos);
  REQUIRE(csv.rfind("id,kind,is_tensor,best_ms\n", 0) == 0);
}

TEST_CASE("speedup report marks removed, new and matched layers") {
  LatencyReport before, after;
  before.layers = {{"conv1", "conv", true, 4.0}, {"norm1", "lrn", false, 6.0}};
  before.total_ms = 10.0;
  after.layers = {{"conv1", "conv", true, 2.0}, {"conv9", "conv", true, 3.0}};
  after.total_ms = 5.0;
  const std::string rep = speedup_report(before, after);
  REQUIRE(rep.find("removed") != std::string::npos);
  REQUIRE(rep.find("new") != std::string::npos);
  REQUIRE(rep.find("2.000x") != std::string::npos);  // conv1 and the total
  REQUIRE(rep.find("Total") != std::string::npos);
}
