#pragma once

#include <cmath>
#include <optional>
#include <sstream>

#include "rebirth/graph.hpp"

namespace rebirth {

struct pass_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Warning-level refusal; callers may retry with force.
struct pass_refused : pass_error {
  using pass_error::pass_error;
};

enum class PassKind {
  FoldBnScale,
  PruneLrn,
  AbsorbPool,
  MergeParallelConv,
  SlimNonTensorBranch,
  SlimTensorBranch,
  ReduceBottleneck,
};

inline const char* pass_name(PassKind p) {
  switch (p) {
    case PassKind::FoldBnScale: return "FoldBnScale";
    case PassKind::PruneLrn: return "PruneLrn";
    case PassKind::AbsorbPool: return "AbsorbPool";
    case PassKind::MergeParallelConv: return "MergeParallelConv";
    case PassKind::SlimNonTensorBranch: return "SlimNonTensorBranch";
    case PassKind::SlimTensorBranch: return "SlimTensorBranch";
    case PassKind::ReduceBottleneck: return "ReduceBottleneck";
  }
  return "?";
}

inline PassKind pass_from_name(const std::string& s) {
  for (PassKind p : {PassKind::FoldBnScale, PassKind::PruneLrn, PassKind::AbsorbPool,
                     PassKind::MergeParallelConv, PassKind::SlimNonTensorBranch,
                     PassKind::SlimTensorBranch, PassKind::ReduceBottleneck})
    if (s == pass_name(p)) return p;
  throw pass_error("unknown pass name: " + s);
}

// One channel range of the retraining target, taken from the named node's
// activation within the record's segment.
struct TargetSpan {
  std::string source;
  int offset = 0;
  int count = 0;
};

struct RewriteRecord {
  PassKind pass;
  std::vector<std::string> removed_ids;
  std::string new_id;
  bool needs_retrain = false;
  std::string segment_entry, segment_exit;  // resolvable in the pre-rewrite graph
  std::vector<TargetSpan> target_channels;  // empty -> whole segment_exit output
  std::string aux_id;                       // resized companion (ReduceBottleneck)
  double ratio = 1.0;                       // ReduceBottleneck only
};

struct SlimPlan {
  std::vector<RewriteRecord> records;
  std::vector<std::string> skipped;  // unmatchable structures, human-readable
};

// Per-channel fold multiplier eta_j = gamma_j / sqrt(var_j + eps).
struct FoldCoefficients {
  std::vector<float> eta;
};

inline FoldCoefficients fold_coefficients(const BnParams& bn, const ScaleParams* sl) {
  FoldCoefficients fc;
  fc.eta.resize(bn.var.size());
  for (size_t j = 0; j < bn.var.size(); ++j) {
    const float gamma = sl ? sl->gamma[j] : 1.0f;
    const double denom = std::sqrt(static_cast<double>(bn.var[j]) + bn.eps);
    const double eta = gamma / denom;
    if (!std::isfinite(eta))
      throw pass_error("fold coefficient not finite at channel " + std::to_string(j));
    fc.eta[j] = static_cast<float>(eta);
  }
  return fc;
}

namespace detail {

inline std::optional<std::string> sole_consumer(const ModelGraph& g,
                                                const std::string& id) {
  auto cons = g.consumers();
  auto it = cons.find(id);
  if (it == cons.end() || it->second.size() != 1) return std::nullopt;
  return it->second.front();
}

inline void replace_uses(ModelGraph& g, const std::string& old_id,
                         const std::string& new_id) {
  for (auto& [id, node] : g.nodes)
    for (auto& in : node.inputs)
      if (in == old_id) in = new_id;
  for (auto& out : g.output_ids)
    if (out == old_id) out = new_id;
}

// Walks single-input producers until a conv is reached.
inline std::string conv_ancestor(const ModelGraph& g, const std::string& id) {
  std::string cur = id;
  while (true) {
    const auto& node = g.at(cur);
    if (node.inputs.size() != 1)
      throw pass_error("no convolution ancestor above '" + id + "'");
    cur = node.inputs[0];
    if (std::holds_alternative<ConvParams>(g.at(cur).kind)) return cur;
    if (g.at(cur).inputs.size() != 1)
      throw pass_error("no convolution ancestor above '" + id + "'");
  }
}

}  // namespace detail

// Exact fold: absorbs a batch-norm (and optional scale) that
// immediately follows a convolution into the convolution's weights and bias.
inline RewriteRecord fold_bn_scale(ModelGraph& g, const std::string& conv_id,
                                   const std::string& bn_id,
                                   const std::optional<std::string>& scale_id = {}) {
  auto& conv = std::get<ConvParams>(g.at(conv_id).kind);
  const auto* bn = std::get_if<BnParams>(&g.at(bn_id).kind);
  if (!bn) throw pass_error("'" + bn_id + "' is not a batch_norm node");
  if (g.at(bn_id).inputs != std::vector<std::string>{conv_id})
    throw pass_error("'" + bn_id + "' does not directly follow '" + conv_id + "'");
  if (detail::sole_consumer(g, conv_id) != bn_id)
    throw pass_error("fold refused: '" + conv_id + "' output has another consumer");

  const ScaleParams* sl = nullptr;
  std::string tail = bn_id;
  if (scale_id) {
    sl = std::get_if<ScaleParams>(&g.at(*scale_id).kind);
    if (!sl) throw pass_error("'" + *scale_id + "' is not a scale node");
    if (g.at(*scale_id).inputs != std::vector<std::string>{bn_id})
      throw pass_error("'" + *scale_id + "' does not directly follow '" + bn_id + "'");
    if (detail::sole_consumer(g, bn_id) != *scale_id)
      throw pass_error("fold refused: '" + bn_id + "' output has another consumer");
    tail = *scale_id;
  }

  const auto fc = fold_coefficients(*bn, sl);
  if (fc.eta.size() != static_cast<size_t>(conv.out_channels))
    throw pass_error("fold: channel count mismatch between '" + conv_id + "' and '" +
                     bn_id + "'");
  const size_t per_out = static_cast<size_t>(conv.in_channels) * conv.kh * conv.kw;
  for (int o = 0; o < conv.out_channels; ++o) {
    for (size_t i = 0; i < per_out; ++i) conv.weights[o * per_out + i] *= fc.eta[o];
    const float beta = sl ? sl->beta[o] : 0.0f;
    conv.bias[o] = fc.eta[o] * conv.bias[o] + beta - fc.eta[o] * bn->mean[o];
  }

  RewriteRecord rec{PassKind::FoldBnScale, {bn_id}, conv_id, false, conv_id, tail, {}, "", 1.0};
  if (scale_id) rec.removed_ids.push_back(*scale_id);
  detail::replace_uses(g, tail, conv_id);
  g.nodes.erase(bn_id);
  if (scale_id) g.nodes.erase(*scale_id);
  return rec;
}

inline RewriteRecord prune_lrn(ModelGraph& g, const std::string& lrn_id) {
  if (!std::holds_alternative<LrnParams>(g.at(lrn_id).kind))
    throw pass_error("'" + lrn_id + "' is not an lrn node");
  const std::string conv = detail::conv_ancestor(g, lrn_id);
  const std::string producer = g.at(lrn_id).inputs[0];
  RewriteRecord rec{PassKind::PruneLrn, {lrn_id}, conv, true, conv, lrn_id, {}, "", 1.0};
  detail::replace_uses(g, lrn_id, producer);
  g.nodes.erase(lrn_id);
  return rec;
}

// Removes the pooling layer and transfers its stride onto the convolution
// (stride product rule), adjusting padding so the slim output shape matches
// the original post-pool shape. An intervening ReLU is retained.
inline RewriteRecord absorb_pool(ModelGraph& g, const std::string& conv_id,
                                 const std::string& pool_id) {
  auto& conv = std::get<ConvParams>(g.at(conv_id).kind);
  const auto* pool = std::get_if<PoolParams>(&g.at(pool_id).kind);
  if (!pool) throw pass_error("'" + pool_id + "' is not a pool node");

  // conv -> (relu)* -> pool, every link a sole consumer
  std::string cur = conv_id;
  while (cur != pool_id) {
    auto next = detail::sole_consumer(g, cur);
    if (!next) throw pass_error("absorb_pool: '" + cur + "' has multiple consumers");
    if (*next != pool_id && !std::holds_alternative<ReluKind>(g.at(*next).kind))
      throw pass_error("absorb_pool: non-ReLU layer '" + *next +
                       "' between convolution and pool");
    cur = *next;
  }

  const auto shapes = infer_shapes(g);
  const Shape in = shapes.at(g.at(conv_id).inputs[0]);
  const Shape target = shapes.at(pool_id);
  const int new_sh = conv.stride_h * pool->stride_h;
  const int new_sw = conv.stride_w * pool->stride_w;

  auto find_pad = [](int extent, int kernel, int stride, int want) -> int {
    for (int pad = 0; pad < kernel; ++pad)
      if (conv_out_extent(extent, pad, kernel, stride) == want) return pad;
    return -1;
  };
  const int ph = find_pad(in.h, conv.kh, new_sh, target.h);
  const int pw = find_pad(in.w, conv.kw, new_sw, target.w);
  if (ph < 0 || pw < 0)
    throw pass_error("absorb_pool: no padding adjustment reproduces the pooled "
                     "output shape of '" + pool_id + "'");

  conv.stride_h = new_sh;
  conv.stride_w = new_sw;
  conv.pad_h = ph;
  conv.pad_w = pw;

  RewriteRecord rec{PassKind::AbsorbPool, {pool_id}, conv_id, true, conv_id, pool_id, {}, "", 1.0};
  detail::replace_uses(g, pool_id, g.at(pool_id).inputs[0]);
  g.nodes.erase(pool_id);
  return rec;
}

// Output-exact merge of parallel same-geometry convolutions feeding one
// concat: weights stacked along the output-channel axis in concat order.
inline RewriteRecord merge_parallel_convs(ModelGraph& g,
                                          const std::vector<std::string>& conv_ids,
                                          const std::string& concat_id) {
  if (conv_ids.size() < 2) throw pass_error("merge needs at least two convolutions");
  auto& concat = g.at(concat_id);
  if (!std::holds_alternative<ConcatKind>(concat.kind))
    throw pass_error("'" + concat_id + "' is not a concat node");

  const auto& first = std::get<ConvParams>(g.at(conv_ids[0]).kind);
  const std::string bottom = g.at(conv_ids[0]).inputs[0];
  for (const auto& id : conv_ids) {
    const auto* p = std::get_if<ConvParams>(&g.at(id).kind);
    if (!p) throw pass_error("'" + id + "' is not a conv node");
    if (g.at(id).inputs[0] != bottom)
      throw pass_error("merge: '" + id + "' reads a different input");
    if (p->kh != first.kh || p->kw != first.kw || p->stride_h != first.stride_h ||
        p->stride_w != first.stride_w || p->pad_h != first.pad_h ||
        p->pad_w != first.pad_w)
      throw pass_error("merge: kernel/stride/pad mismatch on '" + id + "'");
    if (detail::sole_consumer(g, id) != concat_id)
      throw pass_error("merge: '" + id + "' does not feed only '" + concat_id + "'");
  }

  // the convs must appear as a contiguous run of the concat inputs, in order
  size_t pos = 0;
  while (pos < concat.inputs.size() && concat.inputs[pos] != conv_ids[0]) ++pos;
  if (pos + conv_ids.size() > concat.inputs.size())
    throw pass_error("merge: convolutions are not contiguous in concat order");
  for (size_t i = 0; i < conv_ids.size(); ++i)
    if (concat.inputs[pos + i] != conv_ids[i])
      throw pass_error("merge: convolutions are not contiguous in concat order");

  ConvParams merged = first;
  merged.out_channels = 0;
  merged.weights.clear();
  merged.bias.clear();
  for (const auto& id : conv_ids) {
    const auto& p = std::get<ConvParams>(g.at(id).kind);
    merged.out_channels += p.out_channels;
    merged.weights.insert(merged.weights.end(), p.weights.begin(), p.weights.end());
    merged.bias.insert(merged.bias.end(), p.bias.begin(), p.bias.end());
  }

  std::string new_id = conv_ids[0] + "_merged";
  while (g.nodes.count(new_id)) new_id += "_";

  RewriteRecord rec{PassKind::MergeParallelConv, conv_ids, new_id, false,
                    conv_ids[0], concat_id, {}, "", 1.0};

  concat.inputs.erase(concat.inputs.begin() + pos,
                      concat.inputs.begin() + pos + conv_ids.size());
  concat.inputs.insert(concat.inputs.begin() + pos, new_id);
  g.add(LayerNode{new_id, std::move(merged), {bottom}});
  for (const auto& id : conv_ids) g.nodes.erase(id);

  if (concat.inputs.size() == 1) {
    rec.removed_ids.push_back(concat_id);
    detail::replace_uses(g, concat_id, new_id);
    g.nodes.erase(concat_id);
  }
  return rec;
}

namespace detail {

// Rebuilds the input-channel axis of every consumer of `concat_id` according
// to `old_of_new` (new input channel -> old input channel, -1 for a fresh
// zero channel). Keeps the model functionally unchanged when branch slimming
// reorders the concat channel layout.
inline void remap_concat_consumers(ModelGraph& g, const std::string& concat_id,
                                   const std::vector<int>& old_of_new, int plane) {
  bool identity = true;
  for (size_t i = 0; i < old_of_new.size(); ++i)
    if (old_of_new[i] != static_cast<int>(i)) identity = false;
  if (identity) return;

  auto cons = g.consumers();
  for (const auto& cid : cons[concat_id]) {
    auto& node = g.at(cid);
    if (auto* p = std::get_if<ConvParams>(&node.kind)) {
      const int new_i = static_cast<int>(old_of_new.size());
      std::vector<float> w(static_cast<size_t>(p->out_channels) * new_i * p->kh * p->kw,
                           0.0f);
      const size_t ksz = static_cast<size_t>(p->kh) * p->kw;
      for (int o = 0; o < p->out_channels; ++o)
        for (int i = 0; i < new_i; ++i) {
          if (old_of_new[i] < 0) continue;
          const size_t dst = (static_cast<size_t>(o) * new_i + i) * ksz;
          const size_t src =
              (static_cast<size_t>(o) * p->in_channels + old_of_new[i]) * ksz;
          std::copy_n(p->weights.begin() + src, ksz, w.begin() + dst);
        }
      p->in_channels = new_i;
      p->weights = std::move(w);
    } else if (auto* ip = std::get_if<InnerProductParams>(&node.kind)) {
      const int new_in = static_cast<int>(old_of_new.size()) * plane;
      std::vector<float> w(static_cast<size_t>(ip->out_features) * new_in, 0.0f);
      for (int o = 0; o < ip->out_features; ++o)
        for (size_t i = 0; i < old_of_new.size(); ++i) {
          if (old_of_new[i] < 0) continue;
          std::copy_n(ip->weights.begin() +
                          static_cast<size_t>(o) * ip->in_features +
                          static_cast<size_t>(old_of_new[i]) * plane,
                      plane,
                      w.begin() + static_cast<size_t>(o) * new_in + i * plane);
        }
      ip->in_features = new_in;
      ip->weights = std::move(w);
    } else {
      throw pass_error("branch slimming would reorder channels consumed by '" + cid +
                       "', which is not a conv or inner_product");
    }
  }
}

struct BranchInfo {
  std::vector<std::string> nodes;  // head (consumer of bottom) .. tail (concat input)
  std::string bottom;
  std::string tail_conv;  // last conv in the branch, empty for a bare pool branch
  bool has_tail_relu = false;
};

// Walks one concat input back to the shared bottom node.
inline BranchInfo trace_branch(const ModelGraph& g, const std::string& tail,
                               const std::string& bottom) {
  BranchInfo b;
  b.bottom = bottom;
  std::string cur = tail;
  while (cur != bottom) {
    b.nodes.insert(b.nodes.begin(), cur);
    const auto& node = g.at(cur);
    if (node.inputs.size() != 1)
      throw pass_error("branch through '" + cur + "' is not a single-input chain");
    cur = node.inputs[0];
  }
  for (auto it = b.nodes.rbegin(); it != b.nodes.rend(); ++it)
    if (std::holds_alternative<ConvParams>(g.at(*it).kind)) {
      b.tail_conv = *it;
      break;
    }
  b.has_tail_relu =
      !b.nodes.empty() && std::holds_alternative<ReluKind>(g.at(b.nodes.back()).kind);
  return b;
}

// Channel offsets of each concat input in the concat output.
inline std::vector<std::pair<int, int>> concat_spans(const ModelGraph& g,
                                                     const std::string& concat_id) {
  const auto shapes = infer_shapes(g);
  std::vector<std::pair<int, int>> spans;
  int off = 0;
  for (const auto& in : g.at(concat_id).inputs) {
    const int c = shapes.at(in).c;
    spans.emplace_back(off, c);
    off += c;
  }
  return spans;
}

// Shared body of the two branch-slimming passes: removes `branch`, grows the
// host conv by `growth` output channels, and fixes up concat consumers.
inline RewriteRecord slim_branch(ModelGraph& g, PassKind pass,
                                 const std::vector<std::string>& branch_ids,
                                 const std::string& host_conv_id, int growth) {
  if (branch_ids.empty()) throw pass_error("slim: empty branch");
  const std::string tail = branch_ids.back();
  auto cons = g.consumers();
  if (cons[tail].size() != 1)
    throw pass_error("slim: branch tail '" + tail + "' has multiple consumers");
  const std::string concat_id = cons[tail].front();
  if (!std::holds_alternative<ConcatKind>(g.at(concat_id).kind))
    throw pass_error("slim: branch tail does not feed a concat");

  const std::string bottom = g.at(branch_ids.front()).inputs[0];
  BranchInfo removed = trace_branch(g, tail, bottom);
  if (removed.nodes != branch_ids)
    throw pass_error("slim: branch ids do not form the chain feeding '" + concat_id + "'");

  // host branch: walk up from the host conv to the node consuming the bottom
  std::string host_head = host_conv_id;
  while (g.at(host_head).inputs[0] != bottom) {
    host_head = g.at(host_head).inputs[0];
    if (g.at(host_head).inputs.size() != 1)
      throw pass_error("slim: host branch of '" + host_conv_id +
                       "' does not reach the shared bottom '" + bottom + "'");
  }
  std::string host_tail = host_conv_id;
  while (detail::sole_consumer(g, host_tail) != concat_id) {
    auto next = detail::sole_consumer(g, host_tail);
    if (!next) throw pass_error("slim: host conv does not feed '" + concat_id + "'");
    host_tail = *next;
  }
  BranchInfo host = trace_branch(g, host_tail, bottom);

  auto& host_conv = std::get<ConvParams>(g.at(host_conv_id).kind);
  const auto shapes = infer_shapes(g);

  // removed branch channel count at the concat
  auto& concat = g.at(concat_id);
  const auto spans = concat_spans(g, concat_id);
  size_t host_pos = 0, removed_pos = 0;
  for (size_t i = 0; i < concat.inputs.size(); ++i) {
    if (concat.inputs[i] == host_tail) host_pos = i;
    if (concat.inputs[i] == tail) removed_pos = i;
  }
  const int removed_c = spans[removed_pos].second;
  if (growth <= 0) growth = removed_c;

  // retraining targets: pre-ReLU conv outputs when both tails carry a ReLU,
  // otherwise the concat inputs as-is
  RewriteRecord rec{pass, branch_ids, host_conv_id, true, host.nodes.front(),
                    concat_id, {}, "", 1.0};
  const bool pre_relu = host.has_tail_relu && removed.has_tail_relu &&
                        !host.tail_conv.empty() && !removed.tail_conv.empty();
  const std::string host_src = pre_relu ? host.tail_conv : host_tail;
  const std::string removed_src =
      pre_relu ? removed.tail_conv
               : (removed.tail_conv.empty() ? tail : removed.tail_conv);
  rec.target_channels.push_back({host_src, 0, host_conv.out_channels});
  rec.target_channels.push_back({removed_src, 0, removed_c});

  // grow the host conv with zero-initialized channels (retraining
  // re-initializes the whole layer)
  host_conv.out_channels += growth;
  host_conv.weights.resize(static_cast<size_t>(host_conv.out_channels) *
                               host_conv.in_channels * host_conv.kh * host_conv.kw,
                           0.0f);
  host_conv.bias.resize(host_conv.out_channels, 0.0f);

  // new concat layout: removed branch gone, absorbed channels appended to the
  // host block; consumers are remapped to the matching old channels
  std::vector<int> old_of_new;
  for (size_t i = 0; i < concat.inputs.size(); ++i) {
    if (i == removed_pos) continue;
    for (int c = 0; c < spans[i].second; ++c) old_of_new.push_back(spans[i].first + c);
    if (i == host_pos) {
      for (int c = 0; c < growth; ++c)
        old_of_new.push_back(c < removed_c ? spans[removed_pos].first + c : -1);
    }
  }
  const int plane = shapes.at(concat_id).h * shapes.at(concat_id).w;
  concat.inputs.erase(concat.inputs.begin() + removed_pos);
  for (const auto& id : branch_ids) g.nodes.erase(id);
  remap_concat_consumers(g, concat_id, old_of_new, plane);
  if (concat.inputs.size() == 1) {
    const std::string sole = concat.inputs.front();
    rec.removed_ids.push_back(concat_id);
    replace_uses(g, concat_id, sole);
    g.nodes.erase(concat_id);
  }
  return rec;
}

}  // namespace detail

// Absorbs a pooling branch of an inception-style module into a convolution
// branch whose kernel is at least as large.
inline RewriteRecord slim_nontensor_branch(ModelGraph& g,
                                           const std::vector<std::string>& pool_branch_ids,
                                           const std::string& host_conv_id) {
  const auto& host = std::get<ConvParams>(g.at(host_conv_id).kind);
  const PoolParams* pool = nullptr;
  for (const auto& id : pool_branch_ids)
    if (const auto* p = std::get_if<PoolParams>(&g.at(id).kind)) pool = p;
  if (!pool) throw pass_error("slim_nontensor_branch: branch has no pool node");
  if (host.kh < pool->kh || host.kw < pool->kw)
    throw pass_error("slim_nontensor_branch: host kernel " + std::to_string(host.kh) +
                     "x" + std::to_string(host.kw) + " smaller than pool kernel " +
                     std::to_string(pool->kh) + "x" + std::to_string(pool->kw));
  return detail::slim_branch(g, PassKind::SlimNonTensorBranch, pool_branch_ids,
                             host_conv_id, 0);
}

// Absorbs a small-kernel convolution branch into a larger-kernel one. The
// host grows by the removed branch's channel count unless an explicit
// override is given.
inline RewriteRecord slim_tensor_branch(ModelGraph& g,
                                        const std::vector<std::string>& branch_ids,
                                        const std::string& host_conv_id,
                                        bool force = false,
                                        std::optional<int> growth_override = {}) {
  const auto& host = std::get<ConvParams>(g.at(host_conv_id).kind);
  std::string tail_conv;
  for (const auto& id : branch_ids)
    if (std::holds_alternative<ConvParams>(g.at(id).kind)) tail_conv = id;
  if (tail_conv.empty())
    throw pass_error("slim_tensor_branch: branch has no conv node");
  const auto& small = std::get<ConvParams>(g.at(tail_conv).kind);
  if (small.kh > host.kh || small.kw > host.kw)
    throw pass_error("slim_tensor_branch: branch kernel exceeds host kernel");

  auto cons = g.consumers();
  if (branch_ids.empty() || cons[branch_ids.back()].size() != 1)
    throw pass_error("slim_tensor_branch: branch tail must feed exactly one concat");
  const std::string concat_id = cons[branch_ids.back()].front();
  if (g.at(concat_id).inputs.size() <= 2 && !force)
    throw pass_refused("slim_tensor_branch: only 2 branches remain at '" + concat_id +
                       "'; slimming would affect the model (use force to override)");
  return detail::slim_branch(g, PassKind::SlimTensorBranch, branch_ids, host_conv_id,
                             growth_override.value_or(0));
}

// Shrinks a 1x1 reducer's output channels by `ratio`; the reducer and its
// downstream convolution are re-initialized and flagged for retraining.
inline std::optional<RewriteRecord> reduce_bottleneck(ModelGraph& g,
                                                      const std::string& reducer_id,
                                                      double ratio) {
  if (ratio <= 0.0 || ratio > 1.0)
    throw pass_error("reduce_bottleneck: ratio must be in (0, 1]");
  auto& reducer = std::get<ConvParams>(g.at(reducer_id).kind);
  if (reducer.kh != 1 || reducer.kw != 1)
    throw pass_error("reduce_bottleneck: '" + reducer_id + "' is not a 1x1 conv");
  auto next = detail::sole_consumer(g, reducer_id);
  if (!next) throw pass_error("reduce_bottleneck: reducer has multiple consumers");
  auto* down = std::get_if<ConvParams>(&g.at(*next).kind);
  if (!down || (down->kh <= 1 && down->kw <= 1))
    throw pass_error("reduce_bottleneck: reducer does not feed a larger-kernel conv");
  if (ratio == 1.0) return std::nullopt;

  const int new_o = std::max(1, static_cast<int>(std::llround(reducer.out_channels * ratio)));
  reducer.out_channels = new_o;
  reducer.weights.assign(static_cast<size_t>(new_o) * reducer.in_channels, 0.0f);
  reducer.bias.assign(new_o, 0.0f);
  down->in_channels = new_o;
  down->weights.assign(static_cast<size_t>(down->out_channels) * new_o * down->kh *
                           down->kw, 0.0f);
  down->bias.assign(down->out_channels, 0.0f);

  RewriteRecord rec{PassKind::ReduceBottleneck, {}, *next, true, reducer_id, *next,
                    {}, reducer_id, ratio};
  return rec;
}

struct PlanOptions {
  bool fold_bn_scale = true;
  bool prune_lrn = true;
  bool absorb_pool = true;
  bool merge_parallel = true;
  bool slim_nontensor = true;
  bool slim_tensor = true;
  bool exact_only = false;  // restrict to FoldBnScale / MergeParallelConv
  double bottleneck_ratio = 1.0;
};

// Detects the rewritable substructures and emits records in bottom-to-top
// order along the original graph.
inline SlimPlan build_slim_plan(const ModelGraph& g, const PlanOptions& opt = {}) {
  SlimPlan plan;
  const auto diags = validate(g);
  if (!diags.empty()) throw graph_error("build_slim_plan: " + diags.front());
  const auto order = topo_order(g);
  std::map<std::string, size_t> topo_pos;
  for (size_t i = 0; i < order.size(); ++i) topo_pos[order[i]] = i;
  const auto shapes = infer_shapes(g);
  auto cons = g.consumers();

  std::vector<std::pair<size_t, RewriteRecord>> found;  // (sort key, record)

  // --- streamline substructures: conv -> (bn) -> (scale) -> (relu) -> (lrn) -> (pool)
  for (const auto& id : order) {
    if (!std::holds_alternative<ConvParams>(g.at(id).kind)) continue;
    std::string cur = id;
    std::optional<std::string> bn_id, scale_id, lrn_id, pool_id;
    auto step = [&]() -> const LayerKind* {
      auto next = detail::sole_consumer(g, cur);
      if (!next) return nullptr;
      cur = *next;
      return &g.at(cur).kind;
    };
    const LayerKind* k = step();
    if (k && std::holds_alternative<BnParams>(*k)) {
      bn_id = cur;
      k = step();
      if (k && std::holds_alternative<ScaleParams>(*k)) {
        scale_id = cur;
        k = step();
      }
    }
    if (k && std::holds_alternative<ReluKind>(*k)) k = step();
    if (k && std::holds_alternative<LrnParams>(*k)) {
      lrn_id = cur;
      k = step();
    }
    if (k && std::holds_alternative<PoolParams>(*k)) pool_id = cur;

    if (bn_id && opt.fold_bn_scale) {
      RewriteRecord rec{PassKind::FoldBnScale, {*bn_id}, id, false, id,
                        scale_id.value_or(*bn_id), {}, "", 1.0};
      if (scale_id) rec.removed_ids.push_back(*scale_id);
      found.emplace_back(topo_pos[rec.segment_exit] * 8 + 0, rec);
    }
    if (bn_id && !opt.fold_bn_scale) {
      // lrn/pool behind an unfolded bn would not be adjacent at apply time
      if (lrn_id || pool_id)
        plan.skipped.push_back("'" + id + "': lrn/pool behind unfolded batch_norm");
      continue;
    }
    if (lrn_id && opt.prune_lrn) {
      RewriteRecord rec{PassKind::PruneLrn, {*lrn_id}, id, true, id, *lrn_id, {}, "", 1.0};
      found.emplace_back(topo_pos[*lrn_id] * 8 + 1, rec);
    }
    if (pool_id && opt.absorb_pool && (!lrn_id || opt.prune_lrn)) {
      const auto& conv = std::get<ConvParams>(g.at(id).kind);
      const auto& pool = std::get<PoolParams>(g.at(*pool_id).kind);
      const Shape in = shapes.at(g.at(id).inputs[0]);
      const Shape target = shapes.at(*pool_id);
      auto fits = [&](int extent, int kernel, int stride, int want) {
        for (int pad = 0; pad < kernel; ++pad)
          if (conv_out_extent(extent, pad, kernel, stride) == want) return true;
        return false;
      };
      if (fits(in.h, conv.kh, conv.stride_h * pool.stride_h, target.h) &&
          fits(in.w, conv.kw, conv.stride_w * pool.stride_w, target.w)) {
        RewriteRecord rec{PassKind::AbsorbPool, {*pool_id}, id, true, id, *pool_id,
                          {}, "", 1.0};
        found.emplace_back(topo_pos[*pool_id] * 8 + 2, rec);
      } else {
        plan.skipped.push_back("'" + id + "' + '" + *pool_id +
                               "': no padding adjustment reproduces the pooled shape");
      }
    }
  }

  // --- branch modules rooted at each concat
  for (const auto& id : order) {
    if (!std::holds_alternative<ConcatKind>(g.at(id).kind)) continue;
    const auto& concat = g.at(id);
    std::vector<detail::BranchInfo> branches;
    std::string bottom;
    bool ok = true;
    try {
      // shared bottom: walk the first branch up to a multi-consumer node
      std::string cur = concat.inputs[0];
      while (g.at(cur).inputs.size() == 1 && cons[g.at(cur).inputs[0]].size() == 1)
        cur = g.at(cur).inputs[0];
      bottom = g.at(cur).inputs.empty() ? cur : g.at(cur).inputs[0];
      for (const auto& tail : concat.inputs)
        branches.push_back(detail::trace_branch(g, tail, bottom));
    } catch (const pass_error&) {
      ok = false;
    }
    if (!ok || branches.empty()) {
      plan.skipped.push_back("'" + id + "': not a recognizable branch module");
      continue;
    }
    for (const auto& b : branches)
      for (const auto& nid : b.nodes)
        if (cons[nid].size() > 1) ok = false;
    if (!ok) {
      plan.skipped.push_back("'" + id + "': branch nodes have outside consumers");
      continue;
    }

    std::vector<size_t> pool_branches, tensor_branches;
    for (size_t i = 0; i < branches.size(); ++i) {
      bool has_pool = false;
      for (const auto& nid : branches[i].nodes)
        if (std::holds_alternative<PoolParams>(g.at(nid).kind)) has_pool = true;
      (has_pool ? pool_branches : tensor_branches).push_back(i);
    }
    auto kernel_of = [&](size_t bi) {
      return branches[bi].tail_conv.empty()
                 ? 0
                 : std::get<ConvParams>(g.at(branches[bi].tail_conv).kind).kh;
    };
    std::sort(tensor_branches.begin(), tensor_branches.end(),
              [&](size_t a, size_t b) { return kernel_of(a) < kernel_of(b); });

    // all-single-conv identical-geometry modules: exact parallel merge
    if (opt.merge_parallel && pool_branches.empty() && branches.size() >= 2) {
      bool mergeable = true;
      std::vector<std::string> conv_ids;
      for (const auto& b : branches) {
        if (b.nodes.size() != 1 ||
            !std::holds_alternative<ConvParams>(g.at(b.nodes[0]).kind))
          mergeable = false;
        else
          conv_ids.push_back(b.nodes[0]);
      }
      if (mergeable) {
        const auto& first = std::get<ConvParams>(g.at(conv_ids[0]).kind);
        for (const auto& cid : conv_ids) {
          const auto& p = std::get<ConvParams>(g.at(cid).kind);
          if (p.kh != first.kh || p.kw != first.kw || p.stride_h != first.stride_h ||
              p.stride_w != first.stride_w || p.pad_h != first.pad_h ||
              p.pad_w != first.pad_w)
            mergeable = false;
        }
        if (mergeable) {
          RewriteRecord rec{PassKind::MergeParallelConv, conv_ids,
                            conv_ids[0] + "_merged", false, conv_ids[0], id, {}, "", 1.0};
          found.emplace_back(topo_pos[id] * 8 + 3, rec);
          continue;
        }
      }
    }

    size_t remaining = branches.size();
    if (opt.slim_nontensor && !pool_branches.empty() && !tensor_branches.empty() &&
        remaining > 2) {
      const size_t pb = pool_branches.front();
      const PoolParams* pool = nullptr;
      for (const auto& nid : branches[pb].nodes)
        if (const auto* p = std::get_if<PoolParams>(&g.at(nid).kind)) pool = p;
      const size_t host = tensor_branches.back();
      const ConvParams* host_conv =
          branches[host].tail_conv.empty()
              ? nullptr
              : &std::get<ConvParams>(g.at(branches[host].tail_conv).kind);
      if (host_conv && host_conv->kh >= pool->kh && host_conv->kw >= pool->kw) {
        RewriteRecord rec{PassKind::SlimNonTensorBranch, branches[pb].nodes,
                          branches[host].tail_conv, true, "", id, {}, "", 1.0};
        found.emplace_back(topo_pos[id] * 8 + 4, rec);
        --remaining;
      } else {
        plan.skipped.push_back("'" + id + "': no tensor branch can host the pool branch");
      }
    }
    if (opt.slim_tensor && tensor_branches.size() >= 2 && remaining > 2) {
      const size_t small = tensor_branches.front();
      const size_t host = tensor_branches[1];
      if (!branches[small].nodes.empty() && !branches[small].tail_conv.empty() &&
          !branches[host].tail_conv.empty() && kernel_of(small) <= kernel_of(host)) {
        RewriteRecord rec{PassKind::SlimTensorBranch, branches[small].nodes,
                          branches[host].tail_conv, true, "", id, {}, "", 1.0};
        found.emplace_back(topo_pos[id] * 8 + 5, rec);
        --remaining;
      }
    }
  }

  // --- bottleneck reducers
  if (opt.bottleneck_ratio < 1.0) {
    for (const auto& id : order) {
      const auto* p = std::get_if<ConvParams>(&g.at(id).kind);
      if (!p || p->kh != 1 || p->kw != 1) continue;
      auto next = detail::sole_consumer(g, id);
      if (!next) continue;
      const auto* down = std::get_if<ConvParams>(&g.at(*next).kind);
      if (!down || (down->kh <= 1 && down->kw <= 1)) continue;
      RewriteRecord rec{PassKind::ReduceBottleneck, {}, *next, true, id, *next,
                        {}, id, opt.bottleneck_ratio};
      found.emplace_back(topo_pos[*next] * 8 + 6, rec);
    }
  }

  std::stable_sort(found.begin(), found.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });
  for (auto& [key, rec] : found) {
    if (opt.exact_only && rec.pass != PassKind::FoldBnScale &&
        rec.pass != PassKind::MergeParallelConv)
      continue;
    plan.records.push_back(std::move(rec));
  }
  return plan;
}

struct ApplyResult {
  ModelGraph graph;
  std::vector<RewriteRecord> applied;
  std::string error;  // empty on full success
};

// Applies the plan in order; on any pass error the result carries the
// partially rewritten graph and the failure description.
inline ApplyResult apply_plan(const ModelGraph& g, const SlimPlan& plan) {
  ApplyResult res{g, {}, ""};
  for (const auto& rec : plan.records) {
    try {
      switch (rec.pass) {
        case PassKind::FoldBnScale: {
          std::optional<std::string> scale_id;
          if (rec.removed_ids.size() > 1) scale_id = rec.removed_ids[1];
          res.applied.push_back(
              fold_bn_scale(res.graph, rec.new_id, rec.removed_ids[0], scale_id));
          break;
        }
        case PassKind::PruneLrn:
          res.applied.push_back(prune_lrn(res.graph, rec.removed_ids[0]));
          break;
        case PassKind::AbsorbPool:
          res.applied.push_back(absorb_pool(res.graph, rec.new_id, rec.removed_ids[0]));
          break;
        case PassKind::MergeParallelConv:
          res.applied.push_back(
              merge_parallel_convs(res.graph, rec.removed_ids, rec.segment_exit));
          break;
        case PassKind::SlimNonTensorBranch:
          res.applied.push_back(
              slim_nontensor_branch(res.graph, rec.removed_ids, rec.new_id));
          break;
        case PassKind::SlimTensorBranch:
          res.applied.push_back(
              slim_tensor_branch(res.graph, rec.removed_ids, rec.new_id));
          break;
        case PassKind::ReduceBottleneck: {
          auto r = reduce_bottleneck(res.graph, rec.aux_id, rec.ratio);
          if (r) res.applied.push_back(*r);
          break;
        }
      }
    } catch (const std::exception& e) {
      res.error = std::string(pass_name(rec.pass)) + " on '" + rec.new_id +
                  "' failed: " + e.what();
      return res;
    }
    auto diags = validate(res.graph);
    if (!diags.empty()) {
      res.error = std::string(pass_name(rec.pass)) + " on '" + rec.new_id +
                  "' left an invalid graph: " + diags.front();
      return res;
    }
  }
  return res;
}

// One line per record; consumed by the CLI and golden-file tests.
inline std::string plan_to_text(const SlimPlan& plan) {
  std::ostringstream os;
  for (const auto& r : plan.records) {
    os << pass_name(r.pass) << " new=" << r.new_id << " removed=";
    for (size_t i = 0; i < r.removed_ids.size(); ++i)
      os << (i ? "," : "") << r.removed_ids[i];
    if (r.removed_ids.empty()) os << "-";
    os << " segment=" << (r.segment_entry.empty() ? "-" : r.segment_entry) << ".."
       << r.segment_exit << " retrain=" << (r.needs_retrain ? 1 : 0);
    if (!r.target_channels.empty()) {
      os << " targets=";
      for (size_t i = 0; i < r.target_channels.size(); ++i) {
        const auto& t = r.target_channels[i];
        os << (i ? "," : "") << t.source << ":" << t.offset << ":" << t.count;
      }
    }
    if (!r.aux_id.empty()) os << " aux=" << r.aux_id << " ratio=" << r.ratio;
    os << "\n";
  }
  for (const auto& s : plan.skipped) os << "# skipped: " << s << "\n";
  return os.str();
}

inline SlimPlan plan_from_text(const std::string& text) {
  SlimPlan plan;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (line.rfind("# skipped: ", 0) == 0) {
      plan.skipped.push_back(line.substr(11));
      continue;
    }
    std::istringstream ls(line);
    std::string tok;
    ls >> tok;
    RewriteRecord rec;
    rec.pass = pass_from_name(tok);
    while (ls >> tok) {
      const auto eq = tok.find('=');
      if (eq == std::string::npos) throw pass_error("bad plan token: " + tok);
      const std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
      if (key == "new") {
        rec.new_id = val;
      } else if (key == "removed") {
        if (val != "-") {
          std::istringstream vs(val);
          std::string part;
          while (std::getline(vs, part, ',')) rec.removed_ids.push_back(part);
        }
      } else if (key == "segment") {
        const auto dots = val.find("..");
        if (dots == std::string::npos) throw pass_error("bad segment: " + val);
        rec.segment_entry = val.substr(0, dots);
        if (rec.segment_entry == "-") rec.segment_entry.clear();
        rec.segment_exit = val.substr(dots + 2);
      } else if (key == "retrain") {
        rec.needs_retrain = (val == "1");
      } else if (key == "targets") {
        std::istringstream vs(val);
        std::string part;
        while (std::getline(vs, part, ',')) {
          const auto c1 = part.find(':');
          const auto c2 = part.find(':', c1 + 1);
          if (c1 == std::string::npos || c2 == std::string::npos)
            throw pass_error("bad target span: " + part);
          rec.target_channels.push_back({part.substr(0, c1),
                                         std::stoi(part.substr(c1 + 1, c2 - c1 - 1)),
                                         std::stoi(part.substr(c2 + 1))});
        }
      } else if (key == "aux") {
        rec.aux_id = val;
      } else if (key == "ratio") {
        rec.ratio = std::stod(val);
      } else {
        throw pass_error("unknown plan key: " + key);
      }
    }
    plan.records.push_back(std::move(rec));
  }
  return plan;
}

}  // namespace rebirth
