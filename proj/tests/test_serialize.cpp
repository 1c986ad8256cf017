#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "rebirth/fixtures.hpp"
#include "rebirth/serialize.hpp"

using namespace rebirth;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("rebirth_test_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

bool graphs_equal(const ModelGraph& a, const ModelGraph& b) {
  if (a.output_ids != b.output_ids) return false;
  if (a.nodes.size() != b.nodes.size()) return false;
  for (const auto& [id, na] : a.nodes) {
    if (!b.nodes.count(id)) return false;
    const auto& nb = b.at(id);
    if (na.inputs != nb.inputs) return false;
    if (std::string(kind_name(na.kind)) != kind_name(nb.kind)) return false;
    if (const auto* ca = std::get_if<ConvParams>(&na.kind)) {
      const auto& cb = std::get<ConvParams>(nb.kind);
      if (ca->weights != cb.weights || ca->bias != cb.bias) return false;
      if (ca->stride_h != cb.stride_h || ca->pad_h != cb.pad_h) return false;
    }
    if (const auto* ba = std::get_if<BnParams>(&na.kind)) {
      const auto& bb = std::get<BnParams>(nb.kind);
      if (ba->mean != bb.mean || ba->var != bb.var || ba->eps != bb.eps) return false;
    }
  }
  return true;
}

}  // namespace

TEST_CASE("save/load round-trip is lossless for both fixtures") {
  TempDir tmp;
  for (int which = 0; which < 2; ++which) {
    ModelGraph g = which ? fixtures::make_googlenet_mini(21)
                         : fixtures::make_alexnet_mini(20);
    const auto mp = (tmp.path / "m.json").string();
    const auto wp = (tmp.path / "w.bin").string();
    save_model(g, mp, wp);
    ModelGraph back = load_model(mp, wp);
    REQUIRE(graphs_equal(g, back));

    // loaded model computes identically
    Tensor4 x = random_tensor(1, 3, 32, 32, 40 + which);
    REQUIRE(run_forward(g, x).at("prob").data ==
            run_forward(back, x).at("prob").data);
  }
}

TEST_CASE("saving twice produces byte-identical files") {
  TempDir tmp;
  ModelGraph g = fixtures::make_alexnet_mini(22);
  save_model(g, (tmp.path / "a.json").string(), (tmp.path / "a.bin").string());
  save_model(g, (tmp.path / "b.json").string(), (tmp.path / "b.bin").string());
  auto slurp = [](const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(f), {});
  };
  REQUIRE(slurp(tmp.path / "a.json") == slurp(tmp.path / "b.json"));
  REQUIRE(slurp(tmp.path / "a.bin") == slurp(tmp.path / "b.bin"));
}

TEST_CASE("truncated weight blob names the offending layer") {
  TempDir tmp;
  ModelGraph g = fixtures::make_alexnet_mini(23);
  const auto mp = (tmp.path / "m.json").string();
  const auto wp = (tmp.path / "w.bin").string();
  save_model(g, mp, wp);
  const auto bytes = fs::file_size(wp);
  fs::resize_file(wp, bytes - 64);
  try {
    load_model(mp, wp);
    FAIL("expected parse_error");
  } catch (const parse_error& e) {
    // the truncation lands in the last blob written: the fc layer
    REQUIRE(std::string(e.what()).find("fc") != std::string::npos);
  }
}

TEST_CASE("unknown kind is a parse error") {
  TempDir tmp;
  std::ofstream mf(tmp.path / "m.json");
  mf << R"({"format":"rebirth-model-v1","outputs":["a"],
           "layers":[{"id":"a","kind":"teleport","inputs":[]}]})";
  mf.close();
  std::ofstream wf(tmp.path / "w.bin", std::ios::binary);
  wf.close();
  REQUIRE_THROWS_AS(
      load_model((tmp.path / "m.json").string(), (tmp.path / "w.bin").string()),
      parse_error);
}

TEST_CASE("malformed manifest reports position info") {
  TempDir tmp;
  std::ofstream mf(tmp.path / "m.json");
  mf << "{ not json";
  mf.close();
  std::ofstream wf(tmp.path / "w.bin", std::ios::binary);
  wf.close();
  REQUIRE_THROWS_AS(
      load_model((tmp.path / "m.json").string(), (tmp.path / "w.bin").string()),
      parse_error);
}
