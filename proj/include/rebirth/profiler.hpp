#pragma once

#include <chrono>
#include <iomanip>
#include <sstream>

#include "rebirth/graph.hpp"

namespace rebirth {

struct LayerTiming {
  std::string id;
  std::string kind;
  bool is_tensor = false;
  double best_ms = 0.0;
};

struct LatencyReport {
  std::vector<LayerTiming> layers;  // topo order, Input excluded
  double total_ms = 0.0;            // sum of per-layer times of the selected run
  int runs = 0;
  std::uint64_t seed = 0;
};

// Executes `runs` full forwards on one seeded random input and keeps the
// per-layer times of the run with the minimal total, so the accounting
// identity total = sum(layers) holds.
inline LatencyReport time_forward(const ModelGraph& g, int runs, std::uint64_t seed) {
  using clock = std::chrono::steady_clock;
  const auto& spec = std::get<InputSpec>(g.at(g.input_id()).kind);
  const Tensor4 x = random_tensor(1, spec.c, spec.h, spec.w, seed);
  const auto order = topo_order(g);

  run_forward(g, x);  // warm-up, untimed

  LatencyReport rep;
  rep.runs = runs;
  rep.seed = seed;
  std::vector<double> best_layer_ms;
  double best_total = std::numeric_limits<double>::infinity();

  for (int r = 0; r < runs; ++r) {
    std::map<std::string, Tensor4> acts;
    std::vector<double> layer_ms;
    double total = 0.0;
    for (const auto& id : order) {
      const auto& node = g.at(id);
      std::vector<Tensor4> in;
      if (std::holds_alternative<InputSpec>(node.kind))
        in.push_back(x);
      else
        for (const auto& pid : node.inputs) in.push_back(acts.at(pid));
      const auto t0 = clock::now();
      acts[id] = apply_kind(node, in);
      const auto t1 = clock::now();
      if (std::holds_alternative<InputSpec>(node.kind)) continue;
      const double ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
      layer_ms.push_back(ms);
      total += ms;
    }
    if (total < best_total) {
      best_total = total;
      best_layer_ms = std::move(layer_ms);
    }
  }

  size_t li = 0;
  for (const auto& id : order) {
    const auto& node = g.at(id);
    if (std::holds_alternative<InputSpec>(node.kind)) continue;
    rep.layers.push_back({id, kind_name(node.kind), is_tensor_layer(node.kind),
                          best_layer_ms[li++]});
  }
  rep.total_ms = best_total;
  return rep;
}

inline double nontensor_fraction(const LatencyReport& r) {
  if (r.total_ms <= 0.0)
    throw std::domain_error("nontensor_fraction: total time is zero");
  double nt = 0.0;
  for (const auto& l : r.layers)
    if (!l.is_tensor) nt += l.best_ms;
  return nt / r.total_ms;
}

inline std::string report_to_text(const LatencyReport& r) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(3);
  os << std::left << std::setw(24) << "layer" << std::setw(16) << "kind"
     << std::setw(12) << "class" << std::right << std::setw(12) << "best_ms" << "\n";
  for (const auto& l : r.layers)
    os << std::left << std::setw(24) << l.id << std::setw(16) << l.kind
       << std::setw(12) << (l.is_tensor ? "tensor" : "non-tensor") << std::right
       << std::setw(12) << l.best_ms << "\n";
  os << std::left << std::setw(52) << "total" << std::right << std::setw(12)
     << r.total_ms << "\n";
  os << "runs: " << r.runs << "  seed: " << r.seed << "\n";
  return os.str();
}

inline std::string report_to_csv(const LatencyReport& r) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(3);
  os << "id,kind,is_tensor,best_ms\n";
  for (const auto& l : r.layers)
    os << l.id << "," << l.kind << "," << (l.is_tensor ? 1 : 0) << "," << l.best_ms
       << "\n";
  return os.str();
}

// Layer-breakdown comparison; layers present on only one side are shown as
// merged or removed.
inline std::string speedup_report(const LatencyReport& before,
                                  const LatencyReport& after) {
  std::map<std::string, const LayerTiming*> after_by_id;
  for (const auto& l : after.layers) after_by_id[l.id] = &l;
  std::set<std::string> matched;

  std::ostringstream os;
  os << std::fixed << std::setprecision(3);
  os << std::left << std::setw(24) << "layer" << std::right << std::setw(12)
     << "before_ms" << std::setw(12) << "after_ms" << std::setw(10) << "ratio" << "\n";
  for (const auto& l : before.layers) {
    os << std::left << std::setw(24) << l.id << std::right << std::setw(12) << l.best_ms;
    auto it = after_by_id.find(l.id);
    if (it == after_by_id.end()) {
      os << std::setw(12) << "-" << std::setw(10) << "removed" << "\n";
      continue;
    }
    matched.insert(l.id);
    os << std::setw(12) << it->second->best_ms;
    if (it->second->best_ms > 0.0)
      os << std::setw(8) << l.best_ms / it->second->best_ms << "x";
    else
      os << std::setw(10) << "-";
    os << "\n";
  }
  for (const auto& l : after.layers)
    if (!matched.count(l.id))
      os << std::left << std::setw(24) << l.id << std::right << std::setw(12) << "-"
         << std::setw(12) << l.best_ms << std::setw(10) << "new" << "\n";
  os << std::left << std::setw(24) << "Total" << std::right << std::setw(12)
     << before.total_ms << std::setw(12) << after.total_ms;
  if (after.total_ms > 0.0)
    os << std::setw(8) << before.total_ms / after.total_ms << "x";
  os << "\n";
  return os.str();
}

}  // namespace rebirth
