#pragma once

#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "rebirth/tensor.hpp"

namespace rebirth {

struct graph_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct InputSpec {
  int c = 0, h = 0, w = 0;
};
struct ReluKind {};
struct SoftmaxKind {};
struct ConcatKind {};
struct DropoutKind {};  // identity at inference

using LayerKind = std::variant<InputSpec, ConvParams, PoolParams, LrnParams,
                               BnParams, ScaleParams, ReluKind, SoftmaxKind,
                               InnerProductParams, ConcatKind, DropoutKind>;

inline const char* kind_name(const LayerKind& k) {
  struct V {
    const char* operator()(const InputSpec&) const { return "input"; }
    const char* operator()(const ConvParams&) const { return "conv"; }
    const char* operator()(const PoolParams&) const { return "pool"; }
    const char* operator()(const LrnParams&) const { return "lrn"; }
    const char* operator()(const BnParams&) const { return "batch_norm"; }
    const char* operator()(const ScaleParams&) const { return "scale"; }
    const char* operator()(const ReluKind&) const { return "relu"; }
    const char* operator()(const SoftmaxKind&) const { return "softmax"; }
    const char* operator()(const InnerProductParams&) const { return "inner_product"; }
    const char* operator()(const ConcatKind&) const { return "concat"; }
    const char* operator()(const DropoutKind&) const { return "dropout"; }
  };
  return std::visit(V{}, k);
}

// Tensor layers carry trainable high-order weight arrays; everything else
// is a non-tensor layer.
inline bool is_tensor_layer(const LayerKind& k) {
  return std::holds_alternative<ConvParams>(k) ||
         std::holds_alternative<InnerProductParams>(k);
}

struct LayerNode {
  std::string id;
  LayerKind kind;
  std::vector<std::string> inputs;  // producer ids, ordered
};

struct ModelGraph {
  std::map<std::string, LayerNode> nodes;
  std::vector<std::string> output_ids;

  LayerNode& add(LayerNode node) {
    auto [it, fresh] = nodes.emplace(node.id, std::move(node));
    if (!fresh) throw graph_error("duplicate node id: " + it->first);
    return it->second;
  }

  const LayerNode& at(const std::string& id) const {
    auto it = nodes.find(id);
    if (it == nodes.end()) throw graph_error("unknown node id: " + id);
    return it->second;
  }
  LayerNode& at(const std::string& id) {
    auto it = nodes.find(id);
    if (it == nodes.end()) throw graph_error("unknown node id: " + id);
    return it->second;
  }

  std::string input_id() const {
    for (const auto& [id, node] : nodes)
      if (std::holds_alternative<InputSpec>(node.kind)) return id;
    throw graph_error("graph has no input node");
  }

  // id -> list of consumer ids, deterministic order.
  std::map<std::string, std::vector<std::string>> consumers() const {
    std::map<std::string, std::vector<std::string>> out;
    for (const auto& [id, node] : nodes)
      for (const auto& in : node.inputs) out[in].push_back(id);
    return out;
  }
};

inline std::vector<std::string> validate(const ModelGraph& g) {
  std::vector<std::string> diags;
  for (const auto& [id, node] : g.nodes) {
    for (const auto& in : node.inputs)
      if (!g.nodes.count(in))
        diags.push_back("node '" + id + "' references missing id '" + in + "'");
    const size_t arity = node.inputs.size();
    if (std::holds_alternative<InputSpec>(node.kind)) {
      if (arity != 0) diags.push_back("input node '" + id + "' must have 0 inputs");
    } else if (std::holds_alternative<ConcatKind>(node.kind)) {
      if (arity < 2) diags.push_back("concat node '" + id + "' needs >= 2 inputs");
    } else if (arity != 1) {
      diags.push_back("node '" + id + "' must have exactly 1 input, has " +
                      std::to_string(arity));
    }
  }
  for (const auto& out : g.output_ids)
    if (!g.nodes.count(out)) diags.push_back("output id '" + out + "' missing");

  // Cycle detection by DFS over well-formed edges.
  std::map<std::string, int> state;  // 0 unvisited, 1 on stack, 2 done
  std::vector<std::string> path;
  auto dfs = [&](auto&& self, const std::string& id) -> void {
    state[id] = 1;
    path.push_back(id);
    for (const auto& in : g.nodes.at(id).inputs) {
      if (!g.nodes.count(in)) continue;
      if (state[in] == 1) {
        std::string members = in;
        for (auto it = path.rbegin(); it != path.rend() && *it != in; ++it)
          members += ", " + *it;
        diags.push_back("cycle detected: " + members);
      } else if (state[in] == 0) {
        self(self, in);
      }
    }
    path.pop_back();
    state[id] = 2;
  };
  for (const auto& [id, node] : g.nodes)
    if (state[id] == 0) dfs(dfs, id);
  return diags;
}

// Topological order, ties broken by id string order (std::map iteration).
inline std::vector<std::string> topo_order(const ModelGraph& g) {
  std::map<std::string, int> indeg;
  for (const auto& [id, node] : g.nodes) {
    indeg[id];
    for (const auto& in : node.inputs) (void)in, ++indeg[id];
  }
  auto cons = g.consumers();
  std::set<std::string> ready;
  for (const auto& [id, d] : indeg)
    if (d == 0) ready.insert(id);
  std::vector<std::string> order;
  while (!ready.empty()) {
    std::string id = *ready.begin();
    ready.erase(ready.begin());
    order.push_back(id);
    for (const auto& c : cons[id])
      if (--indeg[c] == 0) ready.insert(c);
  }
  if (order.size() != g.nodes.size()) throw graph_error("topo_order: graph has a cycle");
  return order;
}

struct Shape {
  int c = 0, h = 0, w = 0;
  bool operator==(const Shape&) const = default;
};

using ShapeMap = std::map<std::string, Shape>;

inline Shape infer_node_shape(const LayerNode& node,
                              const std::vector<Shape>& in_shapes) {
  struct V {
    const LayerNode& node;
    const std::vector<Shape>& in;

    Shape operator()(const InputSpec& s) const { return {s.c, s.h, s.w}; }
    Shape operator()(const ConvParams& p) const {
      if (in[0].c != p.in_channels)
        throw shape_error("node '" + node.id + "': conv expects " +
                          std::to_string(p.in_channels) + " channels, got " +
                          std::to_string(in[0].c));
      const int oh = conv_out_extent(in[0].h, p.pad_h, p.kh, p.stride_h);
      const int ow = conv_out_extent(in[0].w, p.pad_w, p.kw, p.stride_w);
      if (oh < 1 || ow < 1)
        throw shape_error("node '" + node.id + "': non-positive conv output extent");
      return {p.out_channels, oh, ow};
    }
    Shape operator()(const PoolParams& p) const {
      const int oh = conv_out_extent(in[0].h, p.pad_h, p.kh, p.stride_h);
      const int ow = conv_out_extent(in[0].w, p.pad_w, p.kw, p.stride_w);
      if (oh < 1 || ow < 1)
        throw shape_error("node '" + node.id + "': non-positive pool output extent");
      return {in[0].c, oh, ow};
    }
    Shape operator()(const LrnParams&) const { return in[0]; }
    Shape operator()(const BnParams& p) const {
      if (static_cast<size_t>(in[0].c) != p.mean.size())
        throw shape_error("node '" + node.id + "': batch_norm channel mismatch");
      return in[0];
    }
    Shape operator()(const ScaleParams& p) const {
      if (static_cast<size_t>(in[0].c) != p.gamma.size())
        throw shape_error("node '" + node.id + "': scale channel mismatch");
      return in[0];
    }
    Shape operator()(const ReluKind&) const { return in[0]; }
    Shape operator()(const SoftmaxKind&) const { return in[0]; }
    Shape operator()(const InnerProductParams& p) const {
      if (in[0].c * in[0].h * in[0].w != p.in_features)
        throw shape_error("node '" + node.id + "': inner_product feature mismatch");
      return {p.out_features, 1, 1};
    }
    Shape operator()(const ConcatKind&) const {
      Shape s = in[0];
      for (size_t i = 1; i < in.size(); ++i) {
        if (in[i].h != s.h || in[i].w != s.w)
          throw shape_error("node '" + node.id + "': concat spatial mismatch");
        s.c += in[i].c;
      }
      return s;
    }
    Shape operator()(const DropoutKind&) const { return in[0]; }
  };
  return std::visit(V{node, in_shapes}, node.kind);
}

inline ShapeMap infer_shapes(const ModelGraph& g) {
  ShapeMap shapes;
  for (const auto& id : topo_order(g)) {
    const auto& node = g.at(id);
    std::vector<Shape> in;
    for (const auto& pid : node.inputs) in.push_back(shapes.at(pid));
    shapes[id] = infer_node_shape(node, in);
  }
  return shapes;
}

inline Tensor4 apply_kind(const LayerNode& node, const std::vector<Tensor4>& in) {
  struct V {
    const LayerNode& node;
    const std::vector<Tensor4>& in;

    Tensor4 operator()(const InputSpec& s) const {
      if (in.empty())
        throw graph_error("input node '" + node.id + "' has no bound tensor");
      if (in[0].c != s.c || in[0].h != s.h || in[0].w != s.w)
        throw shape_error("input tensor does not match declared shape of '" +
                          node.id + "'");
      return in[0];
    }
    Tensor4 operator()(const ConvParams& p) const { return conv2d(in[0], p); }
    Tensor4 operator()(const PoolParams& p) const { return pool2d(in[0], p); }
    Tensor4 operator()(const LrnParams& p) const { return lrn(in[0], p); }
    Tensor4 operator()(const BnParams& p) const { return batch_norm(in[0], p); }
    Tensor4 operator()(const ScaleParams& p) const { return scale(in[0], p); }
    Tensor4 operator()(const ReluKind&) const { return relu(in[0]); }
    Tensor4 operator()(const SoftmaxKind&) const { return softmax_channels(in[0]); }
    Tensor4 operator()(const InnerProductParams& p) const {
      return inner_product(in[0], p);
    }
    Tensor4 operator()(const ConcatKind&) const { return concat_channels(in); }
    Tensor4 operator()(const DropoutKind&) const { return in[0]; }
  };
  try {
    return std::visit(V{node, in}, node.kind);
  } catch (const shape_error& e) {
    throw shape_error("at node '" + node.id + "': " + e.what());
  }
}

// Full forward pass; returns every node's activation keyed by id.
inline std::map<std::string, Tensor4> run_forward(const ModelGraph& g,
                                                  const Tensor4& x) {
  std::map<std::string, Tensor4> acts;
  for (const auto& id : topo_order(g)) {
    const auto& node = g.at(id);
    std::vector<Tensor4> in;
    if (std::holds_alternative<InputSpec>(node.kind)) {
      in.push_back(x);
    } else {
      for (const auto& pid : node.inputs) in.push_back(acts.at(pid));
    }
    acts[id] = apply_kind(node, in);
  }
  return acts;
}

// Nodes between the entry's producer (exclusive) and exit (inclusive):
// descendants of the producer that are ancestors of exit.
inline std::vector<std::string> segment_nodes(const ModelGraph& g,
                                              const std::string& entry,
                                              const std::string& exit_id,
                                              std::string* producer_out = nullptr) {
  const auto& entry_node = g.at(entry);
  if (entry_node.inputs.size() != 1)
    throw graph_error("segment entry '" + entry + "' must have exactly one input");
  const std::string producer = entry_node.inputs[0];
  if (producer_out) *producer_out = producer;

  // ancestors of exit (inclusive)
  std::set<std::string> anc;
  std::vector<std::string> stack{exit_id};
  while (!stack.empty()) {
    std::string id = stack.back();
    stack.pop_back();
    if (!anc.insert(id).second) continue;
    for (const auto& in : g.at(id).inputs) stack.push_back(in);
  }
  // descendants of producer (exclusive)
  auto cons = g.consumers();
  std::set<std::string> desc;
  stack = cons[producer];
  while (!stack.empty()) {
    std::string id = stack.back();
    stack.pop_back();
    if (!desc.insert(id).second) continue;
    for (const auto& c : cons[id]) stack.push_back(c);
  }

  std::vector<std::string> members;
  for (const auto& id : topo_order(g))
    if (anc.count(id) && desc.count(id)) members.push_back(id);
  if (members.empty() || members.back() != exit_id)
    throw graph_error("segment (" + entry + ", " + exit_id + ") is empty or disconnected");

  std::set<std::string> member_set(members.begin(), members.end());
  for (const auto& id : members)
    for (const auto& in : g.at(id).inputs)
      if (!member_set.count(in) && in != producer)
        throw graph_error("segment (" + entry + ", " + exit_id +
                          ") has a second entry through node '" + id + "'");
  return members;
}

// Runs the sub-graph with x standing in for the entry's input; returns all
// segment activations.
inline std::map<std::string, Tensor4> run_segment_all(const ModelGraph& g,
                                                      const std::string& entry,
                                                      const std::string& exit_id,
                                                      const Tensor4& x) {
  std::string producer;
  auto members = segment_nodes(g, entry, exit_id, &producer);
  std::map<std::string, Tensor4> acts;
  acts[producer] = x;
  for (const auto& id : members) {
    const auto& node = g.at(id);
    std::vector<Tensor4> in;
    for (const auto& pid : node.inputs) in.push_back(acts.at(pid));
    acts[id] = apply_kind(node, in);
  }
  return acts;
}

inline Tensor4 run_segment(const ModelGraph& g, const std::string& entry,
                           const std::string& exit_id, const Tensor4& x) {
  return run_segment_all(g, entry, exit_id, x).at(exit_id);
}

struct DivergenceReport {
  double max_abs_diff = 0.0;
  double agreement = 1.0;  // top-1 argmax agreement rate over the first output
  int n_inputs = 0;
  bool within_tol = true;
};

inline int argmax_channel(const Tensor4& t, int sample) {
  int best = 0;
  float bv = t.at(sample, 0, 0, 0);
  for (int c = 1; c < t.c; ++c) {
    const float v = t.at(sample, c, 0, 0);
    if (v > bv) bv = v, best = c;
  }
  return best;
}

inline Tensor4 random_tensor(int n, int c, int h, int w, std::uint64_t seed,
                             float lo = -1.0f, float hi = 1.0f) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> dist(lo, hi);
  Tensor4 t(n, c, h, w);
  for (float& v : t.data) v = dist(rng);
  return t;
}

inline DivergenceReport compare_models(const ModelGraph& a, const ModelGraph& b,
                                       int n_inputs, std::uint64_t seed,
                                       double tol) {
  const auto& in_a = std::get<InputSpec>(a.at(a.input_id()).kind);
  const auto& in_b = std::get<InputSpec>(b.at(b.input_id()).kind);
  if (in_a.c != in_b.c || in_a.h != in_b.h || in_a.w != in_b.w)
    throw shape_error("compare_models: input shapes differ");
  if (a.output_ids.empty() || b.output_ids.empty())
    throw graph_error("compare_models: model has no outputs");

  DivergenceReport rep;
  rep.n_inputs = n_inputs;
  int agree = 0;
  for (int i = 0; i < n_inputs; ++i) {
    Tensor4 x = random_tensor(1, in_a.c, in_a.h, in_a.w, seed + i);
    const Tensor4 ya = run_forward(a, x).at(a.output_ids.front());
    const Tensor4 yb = run_forward(b, x).at(b.output_ids.front());
    if (!ya.same_shape(yb)) throw shape_error("compare_models: output shapes differ");
    for (size_t j = 0; j < ya.data.size(); ++j)
      rep.max_abs_diff =
          std::max(rep.max_abs_diff, std::abs((double)ya.data[j] - yb.data[j]));
    if (argmax_channel(ya, 0) == argmax_channel(yb, 0)) ++agree;
  }
  rep.agreement = n_inputs ? static_cast<double>(agree) / n_inputs : 1.0;
  rep.within_tol = rep.max_abs_diff <= tol;
  return rep;
}

// Analytic cost model: multiply-accumulates per sample for tensor layers,
// per-element ops for the rest.
inline std::map<std::string, std::uint64_t> count_flops(const ModelGraph& g) {
  auto shapes = infer_shapes(g);
  std::map<std::string, std::uint64_t> macs;
  for (const auto& [id, node] : g.nodes) {
    const Shape s = shapes.at(id);
    const std::uint64_t elems =
        static_cast<std::uint64_t>(s.c) * s.h * s.w;
    if (const auto* p = std::get_if<ConvParams>(&node.kind)) {
      macs[id] = static_cast<std::uint64_t>(p->out_channels) * p->in_channels *
                 p->kh * p->kw * s.h * s.w;
    } else if (const auto* ip = std::get_if<InnerProductParams>(&node.kind)) {
      macs[id] = static_cast<std::uint64_t>(ip->out_features) * ip->in_features;
    } else if (const auto* pp = std::get_if<PoolParams>(&node.kind)) {
      macs[id] = elems * pp->kh * pp->kw;
    } else if (const auto* lp = std::get_if<LrnParams>(&node.kind)) {
      macs[id] = elems * lp->local_size;
    } else if (std::holds_alternative<InputSpec>(node.kind)) {
      macs[id] = 0;
    } else {
      macs[id] = elems;
    }
  }
  return macs;
}

inline std::uint64_t total_flops(const ModelGraph& g) {
  std::uint64_t t = 0;
  for (const auto& [id, v] : count_flops(g)) t += v;
  return t;
}

}  // namespace rebirth
