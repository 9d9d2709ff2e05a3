// mole-lab: train, ablate, inspect routing and check gradients.
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "mole/ablation.hpp"
#include "mole/analysis.hpp"
#include "mole/config.hpp"
#include "mole/training.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kOk = 0;
constexpr int kRuntime = 1;
constexpr int kUsage = 2;

int cmd_train(const fs::path& config_path, bool dry_run, const std::string& out, bool verbose) {
  mole::ExperimentConfig config = mole::load_config(config_path);
  mole::apply_env_overrides(config);
  config.validate();
  if (dry_run) {
    mole::Model model(config);
    std::cout << "config ok: " << config.layers << " layers, N=" << config.n_experts
              << " k=" << config.top_k << " r=" << config.rank << ", " << model.store().trainable_count()
              << " trainable scalars, seed " << config.seed << "\n";
    return kOk;
  }
  const fs::path run_dir = out.empty() ? fs::path("runs") / config_path.stem() : fs::path(out);
  mole::RunOptions options;
  options.quiet = !verbose;
  const auto s = mole::run_experiment(config, run_dir, options);
  std::cout << "run " << run_dir.string() << ": eval task loss " << s.initial_eval_task << " -> "
            << s.final_eval_task << ", gram off-diagonal " << s.gram_offdiag_mean << ", "
            << s.seconds << " s\n";
  return kOk;
}

int cmd_ablate(const fs::path& matrix, bool force, bool verbose) {
  const auto plan = mole::load_ablation(matrix);
  mole::RunOptions options;
  options.quiet = !verbose;
  const auto results = mole::run_ablation(plan, force, options);
  std::cout << results.size() << " runs; comparison written to "
            << (plan.out_dir / "comparison.csv").string() << "\n";
  return kOk;
}

int cmd_report(const fs::path& run, std::size_t step, std::optional<std::size_t> layer) {
  std::cout << mole::format_report(mole::load_report(run, step, layer));
  return kOk;
}

int cmd_gradcheck(const std::string& size) {
  bool ok = true;
  for (const auto& r : mole::model_grad_check(size == "full")) {
    std::cout << r.policy << ": max rel error " << r.report.max_rel_error << " over "
              << r.report.coords_checked << " coords (worst " << r.report.worst_param << "["
              << r.report.worst_index << "]), frozen grad " << r.report.frozen_grad_max << " -> "
              << (r.report.passed ? "ok" : "FAIL") << "\n";
    ok = ok && r.report.passed;
  }
  return ok ? kOk : kRuntime;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mixture of low-rank experts lab"};
  app.require_subcommand(1);
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Progress on stderr");

  auto* train = app.add_subcommand("train", "Train one configuration");
  std::string config_path, out;
  bool dry_run = false;
  train->add_option("config", config_path, "Experiment config (JSON)")->required();
  train->add_flag("--dry-run", dry_run, "Validate and build the model only");
  train->add_option("-o,--out", out, "Run directory (default runs/<config stem>)");

  auto* ablate = app.add_subcommand("ablate", "Run an ablation matrix");
  std::string matrix;
  bool force = false;
  ablate->add_option("matrix", matrix, "Ablation matrix (JSON)")->required();
  ablate->add_flag("--force", force, "Overwrite existing run directories");

  auto* report = app.add_subcommand("report", "Print routing snapshots of a run");
  std::string run;
  std::size_t step = 0;
  std::optional<std::size_t> layer;
  report->add_option("run", run, "Run directory")->required();
  report->add_option("--step", step, "Snapshot step")->required();
  report->add_option("--layer", layer, "Only this layer");

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check on the micro-model");
  std::string size = "small";
  gradcheck->add_option("--size", size, "small or full")->check(CLI::IsMember({"small", "full"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*train) return cmd_train(config_path, dry_run, out, verbose);
    if (*ablate) return cmd_ablate(matrix, force, verbose);
    if (*report) return cmd_report(run, step, layer);
    if (*gradcheck) return cmd_gradcheck(size);
  } catch (const mole::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const mole::ReportError& e) {
    std::cerr << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    const std::string msg = e.what();
    std::cerr << "error: " << msg << "\n";
    return msg.rfind("config not found", 0) == 0 ? kUsage : kRuntime;
  }
  return kUsage;
}
