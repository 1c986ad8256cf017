#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "rebirth/graph.hpp"

namespace rebirth {

struct parse_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using json = nlohmann::ordered_json;

namespace detail {

inline void write_blob(std::vector<float>& blob, json& blobs, const std::string& name,
                       const std::vector<float>& values) {
  blobs[name] = {{"offset", blob.size()}, {"count", values.size()}};
  blob.insert(blob.end(), values.begin(), values.end());
}

inline std::vector<float> read_blob(const std::vector<float>& blob, const json& blobs,
                                    const std::string& name, const std::string& layer_id) {
  if (!blobs.contains(name))
    throw parse_error("layer '" + layer_id + "': missing blob entry '" + name + "'");
  const size_t offset = blobs[name]["offset"].get<size_t>();
  const size_t count = blobs[name]["count"].get<size_t>();
  if (offset + count > blob.size())
    throw parse_error("layer '" + layer_id + "': blob '" + name +
                      "' exceeds weight file length (offset " + std::to_string(offset) +
                      ", count " + std::to_string(count) + ", file holds " +
                      std::to_string(blob.size()) + " floats)");
  return {blob.begin() + offset, blob.begin() + offset + count};
}

}  // namespace detail

inline void save_model(const ModelGraph& g, const std::string& manifest_path,
                       const std::string& weights_path) {
  json manifest;
  manifest["format"] = "rebirth-model-v1";
  manifest["outputs"] = g.output_ids;
  manifest["layers"] = json::array();
  std::vector<float> blob;

  for (const auto& id : topo_order(g)) {
    const auto& node = g.at(id);
    json rec;
    rec["id"] = id;
    rec["kind"] = kind_name(node.kind);
    rec["inputs"] = node.inputs;
    if (const auto* s = std::get_if<InputSpec>(&node.kind)) {
      rec["shape"] = {{"c", s->c}, {"h", s->h}, {"w", s->w}};
    } else if (const auto* p = std::get_if<ConvParams>(&node.kind)) {
      rec["out_channels"] = p->out_channels;
      rec["in_channels"] = p->in_channels;
      rec["kernel"] = {p->kh, p->kw};
      rec["stride"] = {p->stride_h, p->stride_w};
      rec["pad"] = {p->pad_h, p->pad_w};
      json blobs;
      detail::write_blob(blob, blobs, "weights", p->weights);
      detail::write_blob(blob, blobs, "bias", p->bias);
      rec["blobs"] = blobs;
    } else if (const auto* p = std::get_if<PoolParams>(&node.kind)) {
      rec["mode"] = (p->mode == PoolMode::Max) ? "max" : "average";
      rec["kernel"] = {p->kh, p->kw};
      rec["stride"] = {p->stride_h, p->stride_w};
      rec["pad"] = {p->pad_h, p->pad_w};
    } else if (const auto* p = std::get_if<LrnParams>(&node.kind)) {
      rec["local_size"] = p->local_size;
      rec["alpha"] = p->alpha;
      rec["beta_exp"] = p->beta_exp;
      rec["k"] = p->k;
    } else if (const auto* p = std::get_if<BnParams>(&node.kind)) {
      rec["eps"] = p->eps;
      json blobs;
      detail::write_blob(blob, blobs, "mean", p->mean);
      detail::write_blob(blob, blobs, "var", p->var);
      rec["blobs"] = blobs;
    } else if (const auto* p = std::get_if<ScaleParams>(&node.kind)) {
      json blobs;
      detail::write_blob(blob, blobs, "gamma", p->gamma);
      detail::write_blob(blob, blobs, "beta", p->beta);
      rec["blobs"] = blobs;
    } else if (const auto* p = std::get_if<InnerProductParams>(&node.kind)) {
      rec["out_features"] = p->out_features;
      rec["in_features"] = p->in_features;
      json blobs;
      detail::write_blob(blob, blobs, "weights", p->weights);
      detail::write_blob(blob, blobs, "bias", p->bias);
      rec["blobs"] = blobs;
    }
    manifest["layers"].push_back(std::move(rec));
  }

  std::ofstream mf(manifest_path);
  if (!mf) throw parse_error("cannot open manifest for writing: " + manifest_path);
  mf << manifest.dump(2) << "\n";

  std::ofstream wf(weights_path, std::ios::binary);
  if (!wf) throw parse_error("cannot open weights for writing: " + weights_path);
  // little-endian IEEE-754 32-bit floats in manifest order
  wf.write(reinterpret_cast<const char*>(blob.data()),
           static_cast<std::streamsize>(blob.size() * sizeof(float)));
}

inline ModelGraph load_model(const std::string& manifest_path,
                             const std::string& weights_path) {
  std::ifstream mf(manifest_path);
  if (!mf) throw parse_error("cannot open manifest: " + manifest_path);
  json manifest;
  try {
    manifest = json::parse(mf);
  } catch (const nlohmann::json::parse_error& e) {
    throw parse_error("manifest '" + manifest_path + "': " + e.what());
  }
  if (!manifest.contains("format") || manifest["format"] != "rebirth-model-v1")
    throw parse_error("manifest '" + manifest_path + "': unknown format tag");

  std::ifstream wf(weights_path, std::ios::binary | std::ios::ate);
  if (!wf) throw parse_error("cannot open weights: " + weights_path);
  const auto bytes = static_cast<size_t>(wf.tellg());
  if (bytes % sizeof(float) != 0)
    throw parse_error("weights '" + weights_path + "': size is not a multiple of 4");
  std::vector<float> blob(bytes / sizeof(float));
  wf.seekg(0);
  wf.read(reinterpret_cast<char*>(blob.data()), static_cast<std::streamsize>(bytes));

  ModelGraph g;
  for (const auto& rec : manifest["layers"]) {
    LayerNode node;
    node.id = rec["id"].get<std::string>();
    node.inputs = rec["inputs"].get<std::vector<std::string>>();
    const std::string kind = rec["kind"].get<std::string>();
    if (kind == "input") {
      InputSpec s{rec["shape"]["c"], rec["shape"]["h"], rec["shape"]["w"]};
      node.kind = s;
    } else if (kind == "conv") {
      ConvParams p;
      p.out_channels = rec["out_channels"];
      p.in_channels = rec["in_channels"];
      p.kh = rec["kernel"][0], p.kw = rec["kernel"][1];
      p.stride_h = rec["stride"][0], p.stride_w = rec["stride"][1];
      p.pad_h = rec["pad"][0], p.pad_w = rec["pad"][1];
      p.weights = detail::read_blob(blob, rec["blobs"], "weights", node.id);
      p.bias = detail::read_blob(blob, rec["blobs"], "bias", node.id);
      node.kind = std::move(p);
    } else if (kind == "pool") {
      PoolParams p;
      p.mode = (rec["mode"] == "max") ? PoolMode::Max : PoolMode::Average;
      p.kh = rec["kernel"][0], p.kw = rec["kernel"][1];
      p.stride_h = rec["stride"][0], p.stride_w = rec["stride"][1];
      p.pad_h = rec["pad"][0], p.pad_w = rec["pad"][1];
      node.kind = p;
    } else if (kind == "lrn") {
      LrnParams p;
      p.local_size = rec["local_size"];
      p.alpha = rec["alpha"];
      p.beta_exp = rec["beta_exp"];
      p.k = rec["k"];
      node.kind = p;
    } else if (kind == "batch_norm") {
      BnParams p;
      p.eps = rec["eps"];
      p.mean = detail::read_blob(blob, rec["blobs"], "mean", node.id);
      p.var = detail::read_blob(blob, rec["blobs"], "var", node.id);
      node.kind = std::move(p);
    } else if (kind == "scale") {
      ScaleParams p;
      p.gamma = detail::read_blob(blob, rec["blobs"], "gamma", node.id);
      p.beta = detail::read_blob(blob, rec["blobs"], "beta", node.id);
      node.kind = std::move(p);
    } else if (kind == "inner_product") {
      InnerProductParams p;
      p.out_features = rec["out_features"];
      p.in_features = rec["in_features"];
      p.weights = detail::read_blob(blob, rec["blobs"], "weights", node.id);
      p.bias = detail::read_blob(blob, rec["blobs"], "bias", node.id);
      node.kind = std::move(p);
    } else if (kind == "relu") {
      node.kind = ReluKind{};
    } else if (kind == "softmax") {
      node.kind = SoftmaxKind{};
    } else if (kind == "concat") {
      node.kind = ConcatKind{};
    } else if (kind == "dropout") {
      node.kind = DropoutKind{};
    } else {
      throw parse_error("layer '" + node.id + "': unknown kind '" + kind + "'");
    }
    g.add(std::move(node));
  }
  g.output_ids = manifest["outputs"].get<std::vector<std::string>>();
  auto diags = validate(g);
  if (!diags.empty())
    throw parse_error("manifest '" + manifest_path + "': " + diags.front());
  return g;
}

}  // namespace rebirth
