#pragma once

// Training loop, baselines, experiment and ablation runners, estimate I/O
// and figure output.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "mthu/datamodel.hpp"
#include "mthu/errors.hpp"
#include "mthu/evalmetrics.hpp"
#include "mthu/geom.hpp"
#include "mthu/image.hpp"
#include "mthu/network.hpp"
#include "mthu/objective.hpp"
#include "mthu/rng.hpp"
#include "mthu/synthgen.hpp"

namespace mthu::harness {

namespace fs = std::filesystem;
using nlohmann::json;

struct TrainConfig {
  int epochs = 1000;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int lr_step = 300;
  double lr_decay = 0.5;
  double clip_norm = 5.0;
  double decoder_lr_scale = 1.0;  // step-size multiplier for the decoder weights
  std::uint64_t seed = 0;
  objective::LossWeights loss;
  net::Switches switches;
  int log_every = 0;  // progress lines on stderr every n epochs, 0 = quiet

  void validate() const {
    if (epochs < 1) throw ValidationError("TrainConfig: epochs must be >= 1");
    if (!(lr > 0) || !(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1) || !(eps > 0))
      throw ValidationError("TrainConfig: invalid optimizer settings");
    if (lr_step < 1 || !(lr_decay > 0)) throw ValidationError("TrainConfig: invalid schedule");
    if (!(clip_norm > 0)) throw ValidationError("TrainConfig: clip_norm must be > 0");
    if (!(decoder_lr_scale >= 0)) throw ValidationError("TrainConfig: decoder_lr_scale must be >= 0");
    loss.validate();
  }
};

inline json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"lr", c.lr},
          {"betas", {c.beta1, c.beta2}},
          {"eps", c.eps},
          {"lr_step", c.lr_step},
          {"lr_decay", c.lr_decay},
          {"clip_norm", c.clip_norm},
          {"decoder_lr_scale", c.decoder_lr_scale},
          {"seed", c.seed},
          {"use_gam", c.switches.use_gam},
          {"use_cem", c.switches.use_cem},
          {"cem_mode", net::to_string(c.switches.cem_mode)},
          {"loss", {{"beta", c.loss.beta}, {"gamma", c.loss.gamma}, {"lambda", c.loss.lambda}}}};
}

// Reads the "train" and "loss" sections of an experiment config.
inline void apply_train_json(const json& train, const json& loss, TrainConfig& c) {
  if (!train.is_null()) {
    c.epochs = train.value("epochs", c.epochs);
    c.lr = train.value("lr", c.lr);
    if (train.contains("betas")) {
      c.beta1 = train["betas"].at(0).get<double>();
      c.beta2 = train["betas"].at(1).get<double>();
    }
    c.eps = train.value("eps", c.eps);
    c.lr_step = train.value("lr_step", c.lr_step);
    c.lr_decay = train.value("lr_decay", c.lr_decay);
    c.clip_norm = train.value("clip_norm", c.clip_norm);
    c.decoder_lr_scale = train.value("decoder_lr_scale", c.decoder_lr_scale);
    c.seed = train.value("seed", c.seed);
    c.switches.use_gam = train.value("use_gam", c.switches.use_gam);
    c.switches.use_cem = train.value("use_cem", c.switches.use_cem);
    if (train.contains("cem_mode")) c.switches.cem_mode = net::parse_cem_mode(train["cem_mode"].get<std::string>());
    c.log_every = train.value("log_every", c.log_every);
  }
  if (!loss.is_null()) {
    c.loss.beta = loss.value("beta", c.loss.beta);
    c.loss.gamma = loss.value("gamma", c.loss.gamma);
    c.loss.lambda = loss.value("lambda", c.loss.lambda);
  }
}

// ---------------------------------------------------------------------------
// Endmember initialization and the FCLS baseline

// Per-phase VCA with the columns of every phase reordered to match phase 0
// (minimum total spectral angle), so column p denotes one material
// throughout the sequence.
inline EndmemberSet consistent_vca(const HyperCubeSequence& y, int P, std::uint64_t seed) {
  EndmemberSet e = geom::vca_sequence(y, P, derive_seed(seed, stream::kVca));
  const int L = e.L;
  std::vector<float> ref(e.per_phase.begin(), e.per_phase.begin() + static_cast<std::ptrdiff_t>(L) * P);
  for (int t = 1; t < e.T; ++t) {
    std::vector<float> cur(e.per_phase.begin() + static_cast<std::ptrdiff_t>(t) * L * P,
                           e.per_phase.begin() + static_cast<std::ptrdiff_t>(t + 1) * L * P);
    // assignment[ref column] = current column
    const auto assign = metrics::solve_assignment(metrics::sad_cost(ref, cur, L, P), P);
    for (int p = 0; p < P; ++p)
      for (int l = 0; l < L; ++l) e.at(t, l, p) = cur[static_cast<std::size_t>(l) * P + assign[p]];
  }
  return e;
}

struct MethodResult {
  AbundanceSequence abundances;
  EndmemberSet endmembers;
  std::optional<HyperCubeSequence> reconstruction;
  metrics::MetricsReport report;
};

inline MethodResult run_fcls(const DatasetBundle& bundle, std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  const int P = bundle.gt_endmembers ? bundle.gt_endmembers->P : 0;
  if (P < 1) throw ValidationError("run_fcls: endmember count unknown (no ground truth); pass P explicitly");
  MethodResult r;
  r.endmembers = consistent_vca(bundle.observed, P, seed);
  r.abundances = geom::fcls_sequence(bundle.observed, r.endmembers);
  const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  r.report = metrics::evaluate(bundle, r.abundances, r.endmembers, dt);
  return r;
}

inline MethodResult run_fcls(const DatasetBundle& bundle, int P, std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  MethodResult r;
  r.endmembers = consistent_vca(bundle.observed, P, seed);
  r.abundances = geom::fcls_sequence(bundle.observed, r.endmembers);
  const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  r.report = metrics::evaluate(bundle, r.abundances, r.endmembers, dt);
  return r;
}

// ---------------------------------------------------------------------------
// Training

class Adam {
 public:
  Adam(double beta1, double beta2, double eps) : b1_(beta1), b2_(beta2), eps_(eps) {}

  // One update; grads maps parameter names to gradients (absent = zero) and
  // lr_scale per-parameter step multipliers (absent = 1).
  void step(net::ModelParameters& p, const std::map<std::string, const std::vector<float>*>& grads, double base_lr,
            double grad_scale, const std::map<std::string, double>& lr_scale = {}) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, t_), c2 = 1.0 - std::pow(b2_, t_);
    for (auto& [name, value] : p.values) {
      auto& m = m_[name];
      auto& v = v_[name];
      if (m.empty()) {
        m.assign(value.data.size(), 0.0f);
        v.assign(value.data.size(), 0.0f);
      }
      auto it = grads.find(name);
      const std::vector<float>* g = it == grads.end() ? nullptr : it->second;
      const auto ls = lr_scale.find(name);
      const double lr = ls == lr_scale.end() ? base_lr : base_lr * ls->second;
      for (std::size_t i = 0; i < value.data.size(); ++i) {
        const double gi = g ? double((*g)[i]) * grad_scale : 0.0;
        m[i] = float(b1_ * m[i] + (1.0 - b1_) * gi);
        v[i] = float(b2_ * v[i] + (1.0 - b2_) * gi * gi);
        value.data[i] -= float(lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_));
      }
    }
  }

 private:
  double b1_, b2_, eps_;
  int t_ = 0;
  std::map<std::string, std::vector<float>> m_, v_;
};

struct RunRecord {
  TrainConfig config;
  net::ArchitectureConfig arch;
  std::vector<double> loss_trace;
  metrics::MetricsReport report;
  std::string checkpoint_path;
  net::ModelParameters params;
  net::Estimate estimate;
};

// Learning rate at a zero-based epoch.
inline double scheduled_lr(const TrainConfig& tc, int epoch) {
  return tc.lr * std::pow(tc.lr_decay, epoch / tc.lr_step);
}

// Trains on the full sequence. arch.P is taken from the ground truth when
// present and must otherwise be set by the caller.
inline RunRecord train(const DatasetBundle& bundle, net::ArchitectureConfig arch, const TrainConfig& tc) {
  tc.validate();
  bundle.validate();
  if (bundle.gt_endmembers) arch.P = bundle.gt_endmembers->P;
  const auto& y = bundle.observed;
  const auto t0 = std::chrono::steady_clock::now();
  RunRecord rec;
  rec.config = tc;
  rec.arch = arch;
  const net::ModelDims dims{y.T, y.L, y.H, y.W};
  rec.params = net::init_parameters<float>(arch, dims, tc.seed);
  net::set_decoder(rec.params, consistent_vca(y, arch.P, tc.seed));

  const auto y_pm = objective::pixel_major<float>(y);
  const auto anchors = objective::phase_means<float>(y);
  Rng dropout_rng(derive_seed(tc.seed, stream::kDropout));
  Adam adam(tc.beta1, tc.beta2, tc.eps);
  rec.loss_trace.reserve(tc.epochs);

  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    nn::Tape<float> tp;
    net::Context<float> ctx(tp, rec.params);
    ctx.train = true;
    ctx.dropout_rng = &dropout_rng;
    const auto g = net::forward(ctx, net::input_cube(tp, y), tc.switches);
    objective::LossBreakdown parts;
    const nn::Var loss = objective::total_loss_node<float>(tp, y_pm, g.reconstruction, g.decoder, anchors, tc.loss, &parts);
    if (!std::isfinite(parts.total)) throw DivergenceError(epoch, "non-finite loss");
    rec.loss_trace.push_back(parts.total);
    tp.backward(loss);

    std::map<std::string, const std::vector<float>*> grads;
    double sq = 0.0;
    for (const auto& [name, var] : ctx.bound) {
      if (!tp.has_grad(var)) continue;
      const auto& gv = tp.grad(var);
      for (float v : gv) sq += double(v) * v;
      grads.emplace(name, &gv);
    }
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw DivergenceError(epoch, "non-finite gradient");
    const double scale = norm > tc.clip_norm ? tc.clip_norm / norm : 1.0;
    adam.step(rec.params, grads, scheduled_lr(tc, epoch), scale, {{"dec.w", tc.decoder_lr_scale}});

    if (tc.log_every > 0 && (epoch % tc.log_every == 0 || epoch + 1 == tc.epochs))
      std::fprintf(stderr, "epoch %d loss %.6f (re %.6f sad %.6f simplex %.4f) |g| %.3f\n", epoch, parts.total, parts.re,
                   parts.sad, parts.simplex, norm);
  }

  rec.estimate = net::infer(y, rec.params, tc.switches);
  const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  rec.report = metrics::evaluate(bundle, rec.estimate.abundances, rec.estimate.endmembers, dt);
  return rec;
}

// ---------------------------------------------------------------------------
// Estimate directories: meta.json, est_abundance_tt.f32 [P][H][W] and
// est_endmembers_tt.f32 [L][P] per phase.

inline void write_estimate(const fs::path& dir, const std::string& method, const AbundanceSequence& a,
                           const EndmemberSet& e) {
  fs::create_directories(dir);
  const json meta = {{"method", method}, {"T", a.T}, {"P", a.P}, {"H", a.H}, {"W", a.W}, {"L", e.L}};
  io::write_text(dir / "meta.json", meta.dump(2) + "\n");
  const std::size_t na = static_cast<std::size_t>(a.P) * a.pixels();
  const std::size_t ne = static_cast<std::size_t>(e.L) * e.P;
  for (int t = 0; t < a.T; ++t) {
    io::write_f32(dir / io::phase_file("est_abundance", t), std::span<const float>(&a.data[t * na], na));
    io::write_f32(dir / io::phase_file("est_endmembers", t), std::span<const float>(&e.per_phase[t * ne], ne));
  }
}

struct EstimateFiles {
  std::string method;
  AbundanceSequence abundances;
  EndmemberSet endmembers;
};

inline EstimateFiles read_estimate(const fs::path& dir) {
  const json meta = io::read_json(dir / "meta.json");
  EstimateFiles r;
  try {
    r.method = meta.value("method", std::string("unknown"));
    r.abundances.T = r.endmembers.T = meta.at("T").get<int>();
    r.abundances.P = r.endmembers.P = meta.at("P").get<int>();
    r.abundances.H = meta.at("H").get<int>();
    r.abundances.W = meta.at("W").get<int>();
    r.endmembers.L = meta.at("L").get<int>();
  } catch (const json::exception& ex) {
    throw FormatError((dir / "meta.json").string() + ": " + ex.what());
  }
  auto& a = r.abundances;
  auto& e = r.endmembers;
  if (a.T < 1 || a.P < 1 || a.H < 1 || a.W < 1 || e.L < 1) throw FormatError("estimate meta.json: invalid dimensions");
  a.data.resize(static_cast<std::size_t>(a.T) * a.P * a.pixels());
  e.per_phase.resize(static_cast<std::size_t>(e.T) * e.L * e.P);
  const std::size_t na = static_cast<std::size_t>(a.P) * a.pixels();
  const std::size_t ne = static_cast<std::size_t>(e.L) * e.P;
  for (int t = 0; t < a.T; ++t) {
    io::read_f32(dir / io::phase_file("est_abundance", t), std::span<float>(&a.data[t * na], na));
    io::read_f32(dir / io::phase_file("est_endmembers", t), std::span<float>(&e.per_phase[t * ne], ne));
  }
  e.validate();
  return r;
}

// ---------------------------------------------------------------------------
// Figures

// abundance_tXX_eY.png per phase and endmember, composite_tXX.png per phase
// (endmembers 0..2 on R, G, B). Returns the written paths.
inline std::vector<fs::path> render_maps(const AbundanceSequence& a, const fs::path& dir) {
  a.validate_shape();
  fs::create_directories(dir);
  std::vector<fs::path> out;
  char name[64];
  for (int t = 0; t < a.T; ++t) {
    for (int p = 0; p < a.P; ++p) {
      image::Image img(a.W, a.H, 1);
      for (int n = 0; n < a.pixels(); ++n) img.pixels[n] = image::to_byte(a.at(t, p, n));
      std::snprintf(name, sizeof name, "abundance_t%02d_e%d.png", t, p);
      image::write_png(dir / name, img);
      out.push_back(dir / name);
    }
    image::Image rgb(a.W, a.H, 3);
    for (int n = 0; n < a.pixels(); ++n)
      for (int c = 0; c < std::min(3, a.P); ++c) rgb.pixels[static_cast<std::size_t>(n) * 3 + c] = image::to_byte(a.at(t, c, n));
    std::snprintf(name, sizeof name, "composite_t%02d.png", t);
    image::write_png(dir / name, rgb);
    out.push_back(dir / name);
  }
  return out;
}

// endmembers_tXX.png: one curve per endmember.
inline std::vector<fs::path> render_endmembers(const EndmemberSet& e, const fs::path& dir) {
  fs::create_directories(dir);
  std::vector<fs::path> out;
  char name[64];
  for (int t = 0; t < e.T; ++t) {
    std::vector<std::vector<double>> series(e.P, std::vector<double>(e.L));
    for (int p = 0; p < e.P; ++p)
      for (int l = 0; l < e.L; ++l) series[p][l] = e.at(t, l, p);
    std::snprintf(name, sizeof name, "endmembers_t%02d.png", t);
    image::write_png(dir / name, image::line_plot(series));
    out.push_back(dir / name);
  }
  return out;
}

inline void write_loss_curve(const fs::path& path, const std::vector<double>& trace) {
  std::ostringstream os;
  os << "epoch,loss\n";
  char buf[64];
  for (std::size_t i = 0; i < trace.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g\n", i, trace[i]);
    os << buf;
  }
  io::write_text(path, os.str());
}

// ---------------------------------------------------------------------------
// Experiment configuration

struct DatasetSpec {
  std::string kind = "synth1";  // synth1, synth2 or dir
  std::string name;             // label in metrics.csv; defaults to kind or directory name
  std::string path;             // bundle directory for kind == dir
  json overrides = json::object();

  std::string label() const {
    if (!name.empty()) return name;
    if (kind == "dir") return fs::path(path).filename().string();
    return kind;
  }
};

inline synth::AbundanceFieldConfig field_from_json(const json& j, synth::AbundanceFieldConfig f) {
  if (j.is_null()) return f;
  f.smoothing_px = j.value("smoothing_px", f.smoothing_px);
  f.contrast = j.value("contrast", f.contrast);
  f.temperature = j.value("temperature", f.temperature);
  return f;
}

inline synth::Synth1Config synth1_from_json(const json& j) {
  synth::Synth1Config c;
  c.T = j.value("T", c.T);
  c.H = j.value("H", c.H);
  c.W = j.value("W", c.W);
  c.P = j.value("P", c.P);
  c.L = j.value("L", c.L);
  if (j.contains("scale_amplitude"))
    c.scale_amplitude = {j["scale_amplitude"].at(0).get<double>(), j["scale_amplitude"].at(1).get<double>()};
  c.scale_knots = j.value("scale_knots", c.scale_knots);
  c.mutation_phases = j.value("mutation_phases", c.mutation_phases);
  c.mutation_radius_px = j.value("mutation_radius_px", c.mutation_radius_px);
  c.mutation_abundance = j.value("mutation_abundance", c.mutation_abundance);
  if (j.contains("snr_db")) c.snr_db = j["snr_db"].is_null() ? synth::kNoiseDisabled : j["snr_db"].get<double>();
  c.field = field_from_json(j.value("field", json()), c.field);
  if (j.contains("bank")) c.bank = synth::load_bank(j["bank"].get<std::string>());
  return c;
}

inline synth::Synth2Config synth2_from_json(const json& j) {
  synth::Synth2Config c;
  c.T = j.value("T", c.T);
  c.H = j.value("H", c.H);
  c.W = j.value("W", c.W);
  c.P = j.value("P", c.P);
  c.L = j.value("L", c.L);
  if (j.contains("snr_db")) c.snr_db = j["snr_db"].is_null() ? synth::kNoiseDisabled : j["snr_db"].get<double>();
  c.field = field_from_json(j.value("field", json()), c.field);
  if (j.contains("bank")) c.bank = synth::load_bank(j["bank"].get<std::string>());
  return c;
}

inline DatasetBundle make_dataset(const DatasetSpec& spec, std::uint64_t seed) {
  if (spec.kind == "synth1") {
    auto c = synth1_from_json(spec.overrides);
    c.seed = seed;
    return synth::generate_synthetic1(c);
  }
  if (spec.kind == "synth2") {
    auto c = synth2_from_json(spec.overrides);
    c.seed = seed;
    return synth::generate_synthetic2(c);
  }
  if (spec.kind == "dir") return load_bundle(spec.path);
  throw ValidationError("dataset.kind must be synth1, synth2 or dir (got '" + spec.kind + "')");
}

struct OutputOptions {
  bool images = true;
  bool checkpoints = true;
  bool estimates = true;
};

struct ExperimentConfig {
  DatasetSpec dataset;
  net::ArchitectureConfig arch;
  TrainConfig train;
  std::vector<std::uint64_t> seeds{1};
  std::vector<std::string> methods{"fcls", "muformer"};
  std::string out_dir = "results";
  OutputOptions output;
};

inline ExperimentConfig parse_experiment(const json& j) {
  ExperimentConfig c;
  try {
    if (j.contains("dataset")) {
      const auto& d = j["dataset"];
      c.dataset.kind = d.value("kind", d.contains("path") ? std::string("dir") : c.dataset.kind);
      c.dataset.name = d.value("name", std::string());
      c.dataset.path = d.value("path", std::string());
      for (auto it = d.begin(); it != d.end(); ++it)
        if (it.key() != "kind" && it.key() != "name" && it.key() != "path") c.dataset.overrides[it.key()] = it.value();
    }
    if (j.contains("arch")) c.arch = j["arch"].get<net::ArchitectureConfig>();
    apply_train_json(j.value("train", json()), j.value("loss", json()), c.train);
    if (j.contains("seeds")) c.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
    if (j.contains("methods")) c.methods = j["methods"].get<std::vector<std::string>>();
    if (j.contains("output")) {
      const auto& o = j["output"];
      c.out_dir = o.value("dir", c.out_dir);
      c.output.images = o.value("images", c.output.images);
      c.output.checkpoints = o.value("checkpoints", c.output.checkpoints);
      c.output.estimates = o.value("estimates", c.output.estimates);
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  c.arch.validate();
  c.train.validate();
  if (c.seeds.empty()) throw ValidationError("config: seeds must not be empty");
  for (const auto& m : c.methods)
    if (m != "fcls" && m != "muformer") throw ValidationError("config: unknown method '" + m + "'");
  return c;
}

inline ExperimentConfig load_experiment(const fs::path& path) { return parse_experiment(io::read_json(path)); }

// Writes the artifacts of one MUFormer run into dir.
inline void write_run(const RunRecord& rec, const fs::path& dir, const OutputOptions& out) {
  fs::create_directories(dir);
  write_loss_curve(dir / "loss_curve.csv", rec.loss_trace);
  if (out.checkpoints) {
    net::save_checkpoint(rec.params, dir / "checkpoint.bin");
    io::write_text(dir / "arch.json", json(rec.arch).dump(2) + "\n");
    io::write_text(dir / "train.json", to_json(rec.config).dump(2) + "\n");
  }
  if (out.estimates) write_estimate(dir / "estimate", "muformer", rec.estimate.abundances, rec.estimate.endmembers);
  if (out.images) {
    render_maps(rec.estimate.abundances, dir / "maps");
    render_endmembers(rec.estimate.endmembers, dir / "maps");
  }
}

inline std::string seed_dir(std::uint64_t s) { return "seed_" + std::to_string(s); }

// {fcls, muformer} x seeds on the configured dataset. Each seed generates
// the dataset once and every method sees the same bytes. metrics.csv is
// rewritten after every run so partial results survive a failure.
inline std::vector<metrics::MetricsRow> run_experiment(const ExperimentConfig& cfg, const fs::path& out) {
  fs::create_directories(out);
  std::vector<metrics::MetricsRow> rows;
  const std::string label = cfg.dataset.label();
  auto flush = [&] { io::write_text(out / "metrics.csv", metrics::metrics_csv(rows)); };
  for (std::uint64_t s : cfg.seeds) {
    const DatasetBundle bundle = make_dataset(cfg.dataset, s);
    for (const auto& m : cfg.methods) {
      const fs::path dir = out / seed_dir(s) / m;
      if (m == "fcls") {
        const auto r = bundle.gt_endmembers ? run_fcls(bundle, s) : run_fcls(bundle, cfg.arch.P, s);
        if (cfg.output.estimates) write_estimate(dir / "estimate", "fcls", r.abundances, r.endmembers);
        if (cfg.output.images) {
          render_maps(r.abundances, dir / "maps");
          render_endmembers(r.endmembers, dir / "maps");
        }
        rows.push_back({m, label, s, r.report});
      } else {
        TrainConfig tc = cfg.train;
        tc.seed = s;
        const auto rec = train(bundle, cfg.arch, tc);
        write_run(rec, dir, cfg.output);
        rows.push_back({m, label, s, rec.report});
      }
      flush();
    }
  }
  flush();
  return rows;
}

// ---------------------------------------------------------------------------
// Ablation

struct AblationSetting {
  std::string table;  // "modules" or "cem_mode"
  std::string name;
  net::Switches switches;
};

// Module table then CEM-mode table, in reporting order.
inline std::vector<AblationSetting> default_ablation_settings() {
  using net::CemMode;
  return {
      {"modules", "baseline", {false, false, CemMode::a1_times_a2}},
      {"modules", "+CEM", {false, true, CemMode::a1_times_a2}},
      {"modules", "+GAM", {true, false, CemMode::a1_times_a2}},
      {"modules", "MUFormer", {true, true, CemMode::a1_times_a2}},
      {"cem_mode", "baseline", {true, false, CemMode::a1_times_a2}},
      {"cem_mode", "a1", {true, true, CemMode::a1}},
      {"cem_mode", "a2", {true, true, CemMode::a2}},
      {"cem_mode", "a1_plus_a2", {true, true, CemMode::a1_plus_a2}},
      {"cem_mode", "a1_times_a2", {true, true, CemMode::a1_times_a2}},
  };
}

struct AblationRow {
  AblationSetting setting;
  std::vector<metrics::MetricsReport> runs;  // one per seed, config order
  metrics::MetricsReport median;
};

inline double median_of(std::vector<double> v) {
  if (v.empty()) return metrics::kMissing;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline metrics::MetricsReport median_report(const std::vector<metrics::MetricsReport>& runs) {
  auto field = [&](double metrics::MetricsReport::*f) {
    std::vector<double> v;
    for (const auto& r : runs) v.push_back(r.*f);
    return median_of(v);
  };
  metrics::MetricsReport m;
  m.nrmse_a = field(&metrics::MetricsReport::nrmse_a);
  m.nrmse_m = field(&metrics::MetricsReport::nrmse_m);
  m.sam_m = field(&metrics::MetricsReport::sam_m);
  m.nrmse_y = field(&metrics::MetricsReport::nrmse_y);
  m.runtime_s = field(&metrics::MetricsReport::runtime_s);
  return m;
}

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "table,setting,use_gam,use_cem,cem_mode,seeds,nrmse_a,nrmse_m,sam_m,nrmse_y,runtime_s\n";
  for (const auto& r : rows) {
    const auto& s = r.setting.switches;
    os << r.setting.table << ',' << r.setting.name << ',' << s.use_gam << ',' << s.use_cem << ','
       << (s.use_cem ? net::to_string(s.cem_mode) : "none") << ',' << r.runs.size() << ','
       << metrics::format_value(r.median.nrmse_a) << ',' << metrics::format_value(r.median.nrmse_m) << ','
       << metrics::format_value(r.median.sam_m) << ',' << metrics::format_value(r.median.nrmse_y) << ','
       << metrics::format_value(r.median.runtime_s) << '\n';
  }
  return os.str();
}

// Runs every setting on every seed (settings with identical switches share
// one training run per seed), writes ablation.csv (medians) and
// ablation_runs.csv (one row per setting and seed) and returns the table.
inline std::vector<AblationRow> ablate(const ExperimentConfig& cfg, const fs::path& out,
                                       std::vector<AblationSetting> settings = default_ablation_settings()) {
  fs::create_directories(out);
  auto key = [](const net::Switches& s) {
    return std::to_string(s.use_gam) + std::to_string(s.use_cem) + (s.use_cem ? net::to_string(s.cem_mode) : "");
  };
  std::vector<AblationRow> rows;
  for (auto& s : settings) rows.push_back({s, {}, {}});
  std::vector<metrics::MetricsRow> per_run;
  for (std::uint64_t seed : cfg.seeds) {
    const DatasetBundle bundle = make_dataset(cfg.dataset, seed);
    std::map<std::string, metrics::MetricsReport> done;
    for (auto& row : rows) {
      const std::string k = key(row.setting.switches);
      if (!done.count(k)) {
        TrainConfig tc = cfg.train;
        tc.seed = seed;
        tc.switches = row.setting.switches;
        const auto rec = train(bundle, cfg.arch, tc);
        const auto viol = validate_abundance(rec.estimate.abundances, kAscTolerance);
        if (!viol.empty()) throw ValidationError("ablation run produced abundances violating the simplex constraints");
        OutputOptions o = cfg.output;
        o.images = false;
        write_run(rec, out / seed_dir(seed) / ("run_" + k), o);
        done.emplace(k, rec.report);
      }
      row.runs.push_back(done.at(k));
      per_run.push_back({row.setting.table + ":" + row.setting.name, cfg.dataset.label(), seed, done.at(k)});
      io::write_text(out / "ablation_runs.csv", metrics::metrics_csv(per_run));
    }
  }
  for (auto& row : rows) row.median = median_report(row.runs);
  io::write_text(out / "ablation.csv", ablation_csv(rows));
  return rows;
}

}  // namespace mthu::harness
