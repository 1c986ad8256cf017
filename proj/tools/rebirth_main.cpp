// Command-line pipeline: profile, slim, finetune, verify a model, plus a
// demo-model generator for trying the tool without external files.

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "rebirth/fixtures.hpp"
#include "rebirth/passes.hpp"
#include "rebirth/profiler.hpp"
#include "rebirth/serialize.hpp"
#include "rebirth/trainer.hpp"

namespace fs = std::filesystem;
using namespace rebirth;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitVerifyFailed = 1;
constexpr int kExitInputError = 2;
constexpr int kExitPassError = 3;
constexpr int kExitTrainError = 4;

ModelGraph load_or_exit(const std::string& manifest, const std::string& weights) {
  try {
    return load_model(manifest, weights);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    std::exit(kExitInputError);
  }
}

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream f(path);
  if (!f) {
    std::cerr << "error: cannot write " << path << "\n";
    std::exit(kExitInputError);
  }
  f << content;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rebirth - CNN graph slimming toolkit"};
  app.require_subcommand(1);

  std::string manifest, weights, outdir = ".";
  std::uint64_t seed = 0;

  auto add_model_opts = [&](CLI::App* cmd, bool need_out) {
    cmd->add_option("--manifest", manifest, "model manifest (.json)")->required();
    cmd->add_option("--weights", weights, "weight blob (.bin)")->required();
    cmd->add_option("--seed", seed, "seed for all randomness");
    if (need_out) cmd->add_option("--out", outdir, "output directory");
  };

  // profile
  auto* profile = app.add_subcommand("profile", "per-layer latency report");
  int runs = 50;
  add_model_opts(profile, true);
  profile->add_option("--runs", runs, "forward passes per test (best run reported)");

  // slim
  auto* slim = app.add_subcommand("slim", "build and apply the slimming plan");
  bool exact_only = false;
  double bottleneck_ratio = 1.0;
  add_model_opts(slim, true);
  slim->add_flag("--exact-only", exact_only,
                 "apply only output-exact passes (fold, parallel merge)");
  slim->add_option("--bottleneck-ratio", bottleneck_ratio,
                   "shrink 1x1 reducer channels by this factor");

  // finetune
  auto* finetune = app.add_subcommand("finetune", "regenerate slim layer parameters");
  std::string orig_manifest, orig_weights, plan_path;
  TrainConfig tc;
  add_model_opts(finetune, true);
  finetune->add_option("--original-manifest", orig_manifest, "pre-slim manifest")
      ->required();
  finetune->add_option("--original-weights", orig_weights, "pre-slim weights")
      ->required();
  finetune->add_option("--plan", plan_path, "plan file written by slim")->required();
  finetune->add_option("--lr", tc.base_lr, "base learning rate");
  finetune->add_option("--iters", tc.max_iters, "SGD iterations per layer");
  finetune->add_option("--step-size", tc.step_size, "iterations between lr decays");
  finetune->add_option("--batch-size", tc.batch_size, "mini-batch size");
  finetune->add_option("--pairs", tc.sample_count, "sampled pairs per layer");

  // verify
  auto* verify = app.add_subcommand("verify", "compare two models on random inputs");
  std::string other_manifest, other_weights;
  int n_inputs = 20;
  double tolerance = 1e-4;
  double agreement = -1.0;
  add_model_opts(verify, false);
  verify->add_option("--against-manifest", other_manifest, "second model manifest")
      ->required();
  verify->add_option("--against-weights", other_weights, "second model weights")
      ->required();
  verify->add_option("--inputs", n_inputs, "number of random inputs");
  verify->add_option("--tolerance", tolerance, "max abs output difference")
      ->check(CLI::PositiveNumber);
  verify->add_option("--agreement", agreement,
                     "pass if top-1 agreement meets this rate instead");

  // make-demo
  auto* demo = app.add_subcommand("make-demo", "write a demo model to disk");
  std::string which = "googlenet-mini";
  demo->add_option("--which", which, "alexnet-mini or googlenet-mini");
  demo->add_option("--out", outdir, "output directory");
  demo->add_option("--seed", seed, "weight seed");

  CLI11_PARSE(app, argc, argv);

  try {
    fs::create_directories(outdir);

    if (*profile) {
      ModelGraph g = load_or_exit(manifest, weights);
      LatencyReport rep = time_forward(g, runs, seed);
      write_file(fs::path(outdir) / "latency.txt", report_to_text(rep));
      write_file(fs::path(outdir) / "latency.csv", report_to_csv(rep));
      std::cout << "runs: " << runs << "\n"
                << "total_ms: " << rep.total_ms << "\n"
                << "nontensor_fraction: " << nontensor_fraction(rep) << "\n";
      return kExitOk;
    }

    if (*slim) {
      ModelGraph g = load_or_exit(manifest, weights);
      PlanOptions opt;
      opt.exact_only = exact_only;
      opt.bottleneck_ratio = bottleneck_ratio;
      SlimPlan plan = build_slim_plan(g, opt);
      if (plan.records.empty())
        std::cout << "plan is empty: no rewritable substructures found\n";
      ApplyResult res = apply_plan(g, plan);
      SlimPlan applied{res.applied, plan.skipped};
      write_file(fs::path(outdir) / "plan.txt", plan_to_text(applied));
      if (!res.error.empty()) {
        std::cerr << "error: " << res.error << "\n";
        return kExitPassError;
      }
      save_model(res.graph, (fs::path(outdir) / "slim.json").string(),
                 (fs::path(outdir) / "slim.bin").string());
      std::cout << "applied " << res.applied.size() << " passes; nodes "
                << g.nodes.size() << " -> " << res.graph.nodes.size() << "\n";
      return kExitOk;
    }

    if (*finetune) {
      ModelGraph slim_g = load_or_exit(manifest, weights);
      ModelGraph orig_g = load_or_exit(orig_manifest, orig_weights);
      std::ifstream pf(plan_path);
      if (!pf) {
        std::cerr << "error: cannot open plan " << plan_path << "\n";
        return kExitInputError;
      }
      std::stringstream buf;
      buf << pf.rdbuf();
      SlimPlan plan = plan_from_text(buf.str());
      tc.seed = seed;
      FinetuneResult res = finetune_records(orig_g, slim_g, plan.records, tc);
      for (size_t i = 0; i < res.reports.size(); ++i) {
        const auto& [id, rep] = res.reports[i];
        write_file(fs::path(outdir) / ("fit_" + id + ".txt"), rep.to_text());
        std::cout << "fit " << id << ": loss " << rep.initial_loss << " -> "
                  << rep.final_loss << "\n";
      }
      if (!res.error.empty()) {
        std::cerr << "error: " << res.error << "\n";
        return kExitTrainError;
      }
      save_model(slim_g, (fs::path(outdir) / "finetuned.json").string(),
                 (fs::path(outdir) / "finetuned.bin").string());
      if (res.reports.empty()) std::cout << "no layers needed retraining\n";
      return kExitOk;
    }

    if (*verify) {
      ModelGraph a = load_or_exit(manifest, weights);
      ModelGraph b = load_or_exit(other_manifest, other_weights);
      DivergenceReport rep;
      try {
        rep = compare_models(a, b, n_inputs, seed, tolerance);
      } catch (const shape_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitInputError;
      }
      std::cout << "max_abs_diff: " << rep.max_abs_diff << "\n"
                << "top1_agreement: " << rep.agreement << "\n";
      const bool ok =
          agreement >= 0.0 ? rep.agreement >= agreement : rep.within_tol;
      std::cout << (ok ? "VERIFIED" : "DIVERGED") << "\n";
      return ok ? kExitOk : kExitVerifyFailed;
    }

    if (*demo) {
      ModelGraph g = (which == "alexnet-mini")
                         ? fixtures::make_alexnet_mini(seed ? seed : 1)
                         : fixtures::make_googlenet_mini(seed ? seed : 2);
      save_model(g, (fs::path(outdir) / "model.json").string(),
                 (fs::path(outdir) / "model.bin").string());
      std::cout << "wrote " << which << " to " << outdir << "\n";
      return kExitOk;
    }
  } catch (const parse_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInputError;
  } catch (const pass_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitPassError;
  } catch (const train_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitTrainError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInputError;
  }
  return kExitOk;
}
