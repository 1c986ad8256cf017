#pragma once

#include <random>

#include "rebirth/graph.hpp"
#include "rebirth/passes.hpp"

namespace rebirth {

struct train_error : std::runtime_error {
  int iteration = -1;
  train_error(const std::string& msg, int iter) : std::runtime_error(msg), iteration(iter) {}
};

enum class InputSource {
  RecordedActivations,  // segment-entry activations from full-net traffic
  UniformNoise,         // seeded uniform noise in [-1, 1]
};

struct PairDataset {
  std::vector<std::pair<Tensor4, Tensor4>> pairs;  // (X, Y)
  std::string entry, exit;
  std::uint64_t seed = 0;
};

struct TrainConfig {
  double base_lr = 0.01;
  double lr_multiplier_new_layer = 10.0;
  double momentum = 0.9;
  int batch_size = 32;
  double gamma = 0.1;   // lr decay factor
  int step_size = 1000; // iterations between decays
  int max_iters = 3000;
  std::uint64_t seed = 0;
  double weight_decay = 0.0;
  int sample_count = 64;  // pairs sampled per retrained record
  int eval_interval = 25; // full-dataset loss checks for best-seen selection
};

struct FitReport {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::vector<double> loss_curve;  // per-iteration mini-batch loss
  std::vector<double> lr_curve;
  std::optional<double> grad_check_max_rel_error;

  std::string to_text() const {
    std::ostringstream os;
    os << "iteration\tlr\tloss\n";
    os << "init\t-\t" << initial_loss << "\n";
    for (size_t i = 0; i < loss_curve.size(); ++i)
      os << i << "\t" << lr_curve[i] << "\t" << loss_curve[i] << "\n";
    os << "final\t-\t" << final_loss << "\n";
    return os.str();
  }
};

inline PairDataset sample_pairs(const ModelGraph& g, const std::string& entry,
                                const std::string& exit_id, int n,
                                InputSource source, std::uint64_t seed) {
  std::string producer;
  segment_nodes(g, entry, exit_id, &producer);
  PairDataset ds;
  ds.entry = entry;
  ds.exit = exit_id;
  ds.seed = seed;
  if (source == InputSource::RecordedActivations) {
    const std::string in_id = g.input_id();
    const auto& spec = std::get<InputSpec>(g.at(in_id).kind);
    for (int i = 0; i < n; ++i) {
      Tensor4 net_in = random_tensor(1, spec.c, spec.h, spec.w, seed + i);
      auto acts = run_forward(g, net_in);
      ds.pairs.emplace_back(acts.at(producer), acts.at(exit_id));
    }
  } else {
    const Shape s = infer_shapes(g).at(producer);
    for (int i = 0; i < n; ++i) {
      Tensor4 x = random_tensor(1, s.c, s.h, s.w, seed + i);
      ds.pairs.emplace_back(x, run_segment(g, entry, exit_id, x));
    }
  }
  return ds;
}

// Uniform in [-a, a], a = sqrt(6 / (fan_in + fan_out)).
inline std::vector<float> xavier_init(int out_c, int in_c, int kh, int kw,
                                      std::uint64_t seed) {
  const double fan_in = static_cast<double>(in_c) * kh * kw;
  const double fan_out = static_cast<double>(out_c) * kh * kw;
  const float a = static_cast<float>(std::sqrt(6.0 / (fan_in + fan_out)));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> dist(-a, a);
  std::vector<float> w(static_cast<size_t>(out_c) * in_c * kh * kw);
  for (float& v : w) v = dist(rng);
  return w;
}

inline void xavier_init_conv(ConvParams& p, std::uint64_t seed) {
  p.weights = xavier_init(p.out_channels, p.in_channels, p.kh, p.kw, seed);
  p.bias.assign(p.out_channels, 0.0f);
}

namespace detail {

// Mean-over-batch, sum-over-elements Frobenius loss with gradients by the
// convolution adjoint. Real = float for fits, double for gradient checks;
// accumulation is always 64-bit.
template <typename Real>
double conv_loss_and_grads(const ConvParams& geom, const std::vector<Real>& weights,
                           const std::vector<Real>& bias,
                           const std::vector<const std::pair<Tensor4, Tensor4>*>& batch,
                           std::vector<double>* dw, std::vector<double>* db) {
  if (batch.empty()) throw train_error("empty batch", -1);
  if (dw) dw->assign(weights.size(), 0.0);
  if (db) db->assign(bias.size(), 0.0);
  double loss = 0.0;
  const double inv_b = 1.0 / batch.size();
  const size_t ksz = static_cast<size_t>(geom.kh) * geom.kw;

  for (const auto* pr : batch) {
    const Tensor4& x = pr->first;
    const Tensor4& y = pr->second;
    if (x.c != geom.in_channels)
      throw shape_error("loss_and_grads: input channel mismatch");
    const int oh = conv_out_extent(x.h, geom.pad_h, geom.kh, geom.stride_h);
    const int ow = conv_out_extent(x.w, geom.pad_w, geom.kw, geom.stride_w);
    if (y.c != geom.out_channels || y.h != oh || y.w != ow || y.n != x.n)
      throw shape_error("loss_and_grads: target shape mismatch");

    for (int in = 0; in < x.n; ++in)
      for (int o = 0; o < geom.out_channels; ++o)
        for (int yy = 0; yy < oh; ++yy)
          for (int xx = 0; xx < ow; ++xx) {
            double acc = static_cast<double>(bias[o]);
            for (int i = 0; i < geom.in_channels; ++i)
              for (int ky = 0; ky < geom.kh; ++ky) {
                const int sy = yy * geom.stride_h + ky - geom.pad_h;
                if (sy < 0 || sy >= x.h) continue;
                for (int kx = 0; kx < geom.kw; ++kx) {
                  const int sx = xx * geom.stride_w + kx - geom.pad_w;
                  if (sx < 0 || sx >= x.w) continue;
                  acc += static_cast<double>(
                             weights[(static_cast<size_t>(o) * geom.in_channels + i) *
                                         ksz + ky * geom.kw + kx]) *
                         x.at(in, i, sy, sx);
                }
              }
            const double r = acc - y.at(in, o, yy, xx);
            loss += r * r * inv_b;
            if (!dw && !db) continue;
            const double go = 2.0 * r * inv_b;
            if (db) (*db)[o] += go;
            if (dw)
              for (int i = 0; i < geom.in_channels; ++i)
                for (int ky = 0; ky < geom.kh; ++ky) {
                  const int sy = yy * geom.stride_h + ky - geom.pad_h;
                  if (sy < 0 || sy >= x.h) continue;
                  for (int kx = 0; kx < geom.kw; ++kx) {
                    const int sx = xx * geom.stride_w + kx - geom.pad_w;
                    if (sx < 0 || sx >= x.w) continue;
                    (*dw)[(static_cast<size_t>(o) * geom.in_channels + i) * ksz +
                          ky * geom.kw + kx] += go * x.at(in, i, sy, sx);
                  }
                }
          }
  }
  return loss;
}

}  // namespace detail

struct ConvGrads {
  double loss = 0.0;
  std::vector<double> dw, db;
};

inline ConvGrads loss_and_grads(const ConvParams& conv,
                                const std::vector<std::pair<Tensor4, Tensor4>>& batch) {
  std::vector<const std::pair<Tensor4, Tensor4>*> ptrs;
  for (const auto& p : batch) ptrs.push_back(&p);
  ConvGrads g;
  g.loss = detail::conv_loss_and_grads(conv, conv.weights, conv.bias, ptrs, &g.dw, &g.db);
  return g;
}

// 64-bit weight path for finite-difference oracles.
inline double loss_value_f64(const ConvParams& geom, const std::vector<double>& w,
                             const std::vector<double>& b,
                             const std::vector<std::pair<Tensor4, Tensor4>>& batch) {
  std::vector<const std::pair<Tensor4, Tensor4>*> ptrs;
  for (const auto& p : batch) ptrs.push_back(&p);
  return detail::conv_loss_and_grads(geom, w, b, ptrs, nullptr, nullptr);
}

inline ConvGrads loss_and_grads_f64(const ConvParams& geom, const std::vector<double>& w,
                                    const std::vector<double>& b,
                                    const std::vector<std::pair<Tensor4, Tensor4>>& batch) {
  std::vector<const std::pair<Tensor4, Tensor4>*> ptrs;
  for (const auto& p : batch) ptrs.push_back(&p);
  ConvGrads g;
  g.loss = detail::conv_loss_and_grads(geom, w, b, ptrs, &g.dw, &g.db);
  return g;
}

// Momentum SGD with the stepped learning-rate schedule; mini-batches by
// seeded shuffle; returns the best-loss parameters seen.
inline std::pair<ConvParams, FitReport> sgd_fit(const PairDataset& dataset,
                                                const ConvParams& init_conv,
                                                const TrainConfig& cfg) {
  if (dataset.pairs.empty()) throw train_error("sgd_fit: empty dataset", -1);
  ConvParams conv = init_conv;
  FitReport rep;

  auto full_loss = [&](const ConvParams& p) {
    std::vector<const std::pair<Tensor4, Tensor4>*> all;
    for (const auto& pr : dataset.pairs) all.push_back(&pr);
    return detail::conv_loss_and_grads(p, p.weights, p.bias, all, nullptr, nullptr);
  };
  rep.initial_loss = full_loss(conv);

  ConvParams best = conv;
  double best_loss = rep.initial_loss;

  std::vector<double> vw(conv.weights.size(), 0.0), vb(conv.bias.size(), 0.0);
  std::mt19937_64 rng(cfg.seed);
  std::vector<size_t> order(dataset.pairs.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  size_t cursor = order.size();  // triggers an initial shuffle

  for (int iter = 0; iter < cfg.max_iters; ++iter) {
    std::vector<const std::pair<Tensor4, Tensor4>*> batch;
    for (int b = 0; b < cfg.batch_size; ++b) {
      if (cursor >= order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch.push_back(&dataset.pairs[order[cursor++]]);
    }

    std::vector<double> dw, db;
    const double loss =
        detail::conv_loss_and_grads(conv, conv.weights, conv.bias, batch, &dw, &db);
    if (!std::isfinite(loss))
      throw train_error("sgd_fit: loss diverged at iteration " + std::to_string(iter),
                        iter);
    const double lr = cfg.base_lr * cfg.lr_multiplier_new_layer *
                      std::pow(cfg.gamma, iter / cfg.step_size);
    rep.loss_curve.push_back(loss);
    rep.lr_curve.push_back(lr);

    for (size_t i = 0; i < conv.weights.size(); ++i) {
      const double g = dw[i] + cfg.weight_decay * conv.weights[i];
      vw[i] = cfg.momentum * vw[i] - lr * g;
      conv.weights[i] = static_cast<float>(conv.weights[i] + vw[i]);
    }
    for (size_t i = 0; i < conv.bias.size(); ++i) {
      vb[i] = cfg.momentum * vb[i] - lr * db[i];
      conv.bias[i] = static_cast<float>(conv.bias[i] + vb[i]);
    }

    if ((iter + 1) % cfg.eval_interval == 0 || iter + 1 == cfg.max_iters) {
      const double fl = full_loss(conv);
      if (std::isfinite(fl) && fl < best_loss) {
        best_loss = fl;
        best = conv;
      }
    }
  }
  rep.final_loss = best_loss;
  return {std::move(best), std::move(rep)};
}

struct FinetuneResult {
  std::vector<std::pair<std::string, FitReport>> reports;  // (new layer id, report)
  std::string error;  // empty on full success
};

namespace detail {

inline Tensor4 gather_targets(const std::map<std::string, Tensor4>& acts,
                              const RewriteRecord& rec) {
  if (rec.target_channels.empty()) return acts.at(rec.segment_exit);
  std::vector<Tensor4> parts;
  for (const auto& span : rec.target_channels)
    parts.push_back(gather_channels(acts.at(span.source),
                                    {{span.offset, span.count}}));
  return concat_channels(parts);
}

}  // namespace detail

// Regenerates the slim layers record by record, bottom to top: sample pairs
// from the original substructure, Xavier-init the new layer, fit, install.
// Consecutive records that regenerate the same layer are trained once, over
// the widest segment.
inline FinetuneResult finetune_records(const ModelGraph& original_g, ModelGraph& slim_g,
                                       const std::vector<RewriteRecord>& records,
                                       const TrainConfig& cfg) {
  FinetuneResult result;

  // Records that regenerate the same layer are fitted once. The non-bottleneck
  // record spans the widest substructure and defines the fit; a grouped
  // bottleneck record contributes only its resized reducer.
  struct WorkItem {
    RewriteRecord rec;
    std::string reducer_id;  // re-initialize before fitting, if set
  };
  std::vector<WorkItem> work;
  std::map<std::string, size_t> by_layer;
  for (const auto& rec : records) {
    if (!rec.needs_retrain) continue;
    const std::string reducer =
        rec.pass == PassKind::ReduceBottleneck ? rec.aux_id : std::string();
    auto it = by_layer.find(rec.new_id);
    if (it == by_layer.end()) {
      by_layer[rec.new_id] = work.size();
      work.push_back({rec, reducer});
    } else {
      WorkItem& item = work[it->second];
      if (!reducer.empty())
        item.reducer_id = reducer;
      else
        item.rec = rec;  // later, wider record wins over earlier ones
    }
  }

  const std::string in_id = original_g.input_id();
  const auto& in_spec = std::get<InputSpec>(original_g.at(in_id).kind);
  const auto original_shapes = infer_shapes(original_g);

  for (size_t ri = 0; ri < work.size(); ++ri) {
    const auto& rec = work[ri].rec;
    try {
      auto& slim_conv = std::get<ConvParams>(slim_g.at(rec.new_id).kind);
      const std::uint64_t rec_seed = cfg.seed + 1000003ull * (ri + 1);

      if (!work[ri].reducer_id.empty()) {
        auto& reducer = std::get<ConvParams>(slim_g.at(work[ri].reducer_id).kind);
        xavier_init_conv(reducer, rec_seed + 7);
      }
      xavier_init_conv(slim_conv, rec_seed);

      // X is the slim layer's input activation; Y the original substructure's
      // output, gathered per the record's channel bookkeeping. Original-graph
      // activations serve as X only while the producer still exists unchanged;
      // otherwise X comes from the (already refitted) slim graph.
      const std::string slim_producer = slim_g.at(rec.new_id).inputs[0];
      bool use_slim_acts = !work[ri].reducer_id.empty() ||
                           !original_g.nodes.count(slim_producer);
      if (!use_slim_acts) {
        const Shape orig_s = original_shapes.at(slim_producer);
        const Shape slim_s = infer_shapes(slim_g).at(slim_producer);
        use_slim_acts = !(orig_s.c == slim_s.c && orig_s.h == slim_s.h &&
                          orig_s.w == slim_s.w);
      }

      PairDataset ds;
      ds.entry = rec.segment_entry;
      ds.exit = rec.segment_exit;
      ds.seed = rec_seed;
      for (int i = 0; i < cfg.sample_count; ++i) {
        Tensor4 net_in = random_tensor(1, in_spec.c, in_spec.h, in_spec.w,
                                       rec_seed + 17 * i);
        auto acts = run_forward(original_g, net_in);
        Tensor4 y = detail::gather_targets(acts, rec);
        Tensor4 x = use_slim_acts ? run_forward(slim_g, net_in).at(slim_producer)
                                  : acts.at(slim_producer);
        ds.pairs.emplace_back(std::move(x), std::move(y));
      }

      auto [fitted, report] = sgd_fit(ds, slim_conv, cfg);
      slim_conv = std::move(fitted);
      result.reports.emplace_back(rec.new_id, std::move(report));
    } catch (const std::exception& e) {
      result.error = std::string("finetune of '") + rec.new_id + "' failed: " + e.what();
      return result;
    }
  }
  return result;
}

}  // namespace rebirth
