// Command-line front end: dataset generation, training, baselines,
// evaluation, ablation, plotting and full experiments.
//
// Exit codes: 0 success, 2 invalid input (validation, shape or format
// errors), 3 training divergence, 1 anything else.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "mthu/harness.hpp"

using namespace mthu;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

harness::ExperimentConfig load_config(const std::string& path) {
  return path.empty() ? harness::parse_experiment(json::object()) : harness::load_experiment(path);
}

void print_report(const metrics::MetricsReport& r) {
  std::printf("nrmse_a %s  nrmse_m %s  sam_m %s  nrmse_y %s  runtime_s %s\n", metrics::format_value(r.nrmse_a).c_str(),
              metrics::format_value(r.nrmse_m).c_str(), metrics::format_value(r.sam_m).c_str(),
              metrics::format_value(r.nrmse_y).c_str(), metrics::format_value(r.runtime_s).c_str());
}

void write_metrics(const fs::path& dir, const std::vector<metrics::MetricsRow>& rows) {
  fs::create_directories(dir);
  io::write_text(dir / "metrics.csv", metrics::metrics_csv(rows));
}

std::vector<double> read_loss_curve(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open " + path.string());
  std::string line;
  std::getline(is, line);
  if (line != "epoch,loss") throw FormatError(path.string() + ": expected header 'epoch,loss'");
  std::vector<double> v;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw FormatError(path.string() + ": malformed row '" + line + "'");
    try {
      v.push_back(std::stod(line.substr(comma + 1)));
    } catch (const std::exception&) {
      throw FormatError(path.string() + ": malformed row '" + line + "'");
    }
  }
  return v;
}

int run(int argc, char** argv) {
  CLI::App app{"Multitemporal hyperspectral unmixing laboratory"};
  app.require_subcommand(1);

  // generate
  auto* gen = app.add_subcommand("generate", "Generate a synthetic dataset directory");
  std::string recipe = "synth1", gen_out, gen_bank, gen_config;
  std::uint64_t gen_seed = 1;
  gen->add_option("--recipe", recipe, "synth1 or synth2")->check(CLI::IsMember({"synth1", "synth2"}));
  gen->add_option("--seed", gen_seed, "Generation seed");
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--bank", gen_bank, "Spectra bank JSON");
  gen->add_option("--config", gen_config, "Experiment config whose dataset keys override the recipe");

  // train
  auto* tr = app.add_subcommand("train", "Train the network on one dataset");
  std::string tr_config, tr_in, tr_out = "run";
  std::optional<std::uint64_t> tr_seed;
  std::optional<int> tr_epochs;
  tr->add_option("--config", tr_config, "Experiment config (dataset, arch, train, loss, output)");
  tr->add_option("--in", tr_in, "Dataset directory (overrides the config dataset)");
  tr->add_option("--seed", tr_seed, "Seed for data generation and training");
  tr->add_option("--epochs", tr_epochs, "Override train.epochs");
  tr->add_option("--out", tr_out, "Run directory");

  // baseline
  auto* bl = app.add_subcommand("baseline", "Run the FCLS baseline on a dataset directory");
  std::string bl_in, bl_out, bl_method = "fcls", bl_em = "vca";
  std::uint64_t bl_seed = 1;
  int bl_P = 0;
  bl->add_option("--in", bl_in, "Dataset directory")->required();
  bl->add_option("--out", bl_out, "Output directory")->required();
  bl->add_option("--method", bl_method, "Baseline method")->check(CLI::IsMember({"fcls"}));
  bl->add_option("--endmembers", bl_em, "Endmember source")->check(CLI::IsMember({"vca", "gt"}));
  bl->add_option("--seed", bl_seed, "VCA seed");
  bl->add_option("--P", bl_P, "Endmember count when the dataset has no ground truth");

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "Score an estimate directory against a dataset's ground truth");
  std::string ev_in, ev_est, ev_out, ev_method;
  std::uint64_t ev_seed = 0;
  ev->add_option("--in", ev_in, "Dataset directory")->required();
  ev->add_option("--estimate", ev_est, "Estimate directory")->required();
  ev->add_option("--out", ev_out, "Directory for metrics.csv");
  ev->add_option("--method", ev_method, "Method label (default: from the estimate)");
  ev->add_option("--seed", ev_seed, "Seed label");

  // ablate
  auto* ab = app.add_subcommand("ablate", "Module and CEM-mode ablation tables");
  std::string ab_config, ab_out;
  std::optional<std::uint64_t> ab_seed;
  ab->add_option("--config", ab_config, "Experiment config")->required();
  ab->add_option("--seed", ab_seed, "Run a single seed instead of the config's list");
  ab->add_option("--out", ab_out, "Output directory (default: output.dir)");

  // plot
  auto* pl = app.add_subcommand("plot", "Render abundance maps, endmember curves or a loss curve");
  std::string pl_est, pl_loss, pl_out;
  pl->add_option("--estimate", pl_est, "Estimate directory");
  pl->add_option("--loss", pl_loss, "loss_curve.csv");
  pl->add_option("--out", pl_out, "Output directory")->required();

  // experiment
  auto* ex = app.add_subcommand("experiment", "FCLS and network over the config's seeds");
  std::string ex_config, ex_out;
  std::optional<std::uint64_t> ex_seed;
  ex->add_option("--config", ex_config, "Experiment config")->required();
  ex->add_option("--seed", ex_seed, "Run a single seed instead of the config's list");
  ex->add_option("--out", ex_out, "Output directory (default: output.dir)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  if (*gen) {
    harness::DatasetSpec spec{recipe, "", "", json::object()};
    if (!gen_config.empty()) {
      const auto cfg = harness::load_experiment(gen_config);
      if (cfg.dataset.kind == recipe) spec.overrides = cfg.dataset.overrides;
    }
    if (!gen_bank.empty()) spec.overrides["bank"] = gen_bank;
    const auto b = harness::make_dataset(spec, gen_seed);
    save_bundle(b, gen_out);
    std::printf("wrote %s: T=%d L=%d H=%d W=%d\n", gen_out.c_str(), b.observed.T, b.observed.L, b.observed.H,
                b.observed.W);
    return 0;
  }

  if (*tr) {
    auto cfg = load_config(tr_config);
    if (!tr_in.empty()) cfg.dataset = {"dir", "", tr_in, json::object()};
    if (tr_epochs) cfg.train.epochs = *tr_epochs;
    if (tr_seed) cfg.train.seed = *tr_seed;
    else if (!cfg.seeds.empty()) cfg.train.seed = cfg.seeds.front();
    cfg.train.validate();
    const auto bundle = harness::make_dataset(cfg.dataset, cfg.train.seed);
    if (!bundle.gt_endmembers && !bundle.gt_abundances && cfg.arch.P < 1)
      throw ValidationError("train: arch.P must be set when the dataset has no ground truth");
    const auto rec = harness::train(bundle, cfg.arch, cfg.train);
    harness::write_run(rec, tr_out, cfg.output);
    write_metrics(tr_out, {{"muformer", cfg.dataset.label(), cfg.train.seed, rec.report}});
    print_report(rec.report);
    return 0;
  }

  if (*bl) {
    const auto bundle = load_bundle(bl_in);
    const auto t0 = std::chrono::steady_clock::now();
    EndmemberSet e;
    if (bl_em == "gt") {
      if (!bundle.gt_endmembers) throw ValidationError("baseline: --endmembers gt needs ground-truth endmembers");
      e = *bundle.gt_endmembers;
      e.per_pixel.clear();
      e.N = 0;
    } else {
      const int P = bundle.gt_endmembers ? bundle.gt_endmembers->P : bl_P;
      if (P < 1) throw ValidationError("baseline: pass --P when the dataset has no ground-truth endmembers");
      e = harness::consistent_vca(bundle.observed, P, bl_seed);
    }
    const auto a = geom::fcls_sequence(bundle.observed, e);
    const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const auto report = metrics::evaluate(bundle, a, e, dt);
    harness::write_estimate(fs::path(bl_out) / "estimate", "fcls", a, e);
    harness::render_maps(a, fs::path(bl_out) / "maps");
    harness::render_endmembers(e, fs::path(bl_out) / "maps");
    write_metrics(bl_out, {{"fcls", fs::path(bl_in).filename().string(), bl_seed, report}});
    print_report(report);
    return 0;
  }

  if (*ev) {
    const auto bundle = load_bundle(ev_in);
    const auto est = harness::read_estimate(ev_est);
    const auto report = metrics::evaluate(bundle, est.abundances, est.endmembers, 0.0);
    if (!ev_out.empty())
      write_metrics(ev_out, {{ev_method.empty() ? est.method : ev_method, fs::path(ev_in).filename().string(), ev_seed, report}});
    print_report(report);
    return 0;
  }

  if (*ab) {
    auto cfg = harness::load_experiment(ab_config);
    if (ab_seed) cfg.seeds = {*ab_seed};
    const auto rows = harness::ablate(cfg, ab_out.empty() ? cfg.out_dir : ab_out);
    std::fputs(harness::ablation_csv(rows).c_str(), stdout);
    return 0;
  }

  if (*pl) {
    if (pl_est.empty() && pl_loss.empty()) throw ValidationError("plot: pass --estimate and/or --loss");
    if (!pl_est.empty()) {
      const auto est = harness::read_estimate(pl_est);
      harness::render_maps(est.abundances, pl_out);
      harness::render_endmembers(est.endmembers, pl_out);
    }
    if (!pl_loss.empty()) {
      fs::create_directories(pl_out);
      image::write_png(fs::path(pl_out) / "loss_curve.png", image::line_plot({read_loss_curve(pl_loss)}));
    }
    return 0;
  }

  if (*ex) {
    auto cfg = harness::load_experiment(ex_config);
    if (ex_seed) cfg.seeds = {*ex_seed};
    const auto rows = harness::run_experiment(cfg, ex_out.empty() ? cfg.out_dir : ex_out);
    std::fputs(metrics::metrics_csv(rows).c_str(), stdout);
    return 0;
  }
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const DivergenceError& e) {
    std::fprintf(stderr, "error: training diverged at epoch %d: %s\n", e.epoch(), e.what());
    return 3;
  } catch (const ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const ShapeError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const FormatError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
