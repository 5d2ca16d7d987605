#include <fstream>

#include "mthu/harness.hpp"
#include "test_util.hpp"

using namespace mthu;
using namespace mthu::harness;

namespace {

json tiny_dataset() {
  return {{"kind", "synth1"}, {"T", 2}, {"H", 6}, {"W", 6}, {"L", 10}, {"mutation_phases", {2}}, {"mutation_radius_px", 1}};
}

json tiny_config(const std::filesystem::path& out) {
  return {{"dataset", tiny_dataset()},
          {"arch", {{"C", 4}, {"embed_dim", 8}, {"heads", 2}, {"depth", 1}, {"dropout", 0.1}}},
          {"train", {{"epochs", 4}, {"lr", 1e-3}}},
          {"seeds", {1, 2}},
          {"output", {{"dir", out.string()}, {"images", false}}}};
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

}  // namespace

TEST(TrainConfig, JsonRoundTripAndValidation) {
  TrainConfig c;
  c.epochs = 17;
  c.lr = 2e-4;
  c.beta1 = 0.8;
  c.decoder_lr_scale = 0.25;
  c.seed = 9;
  c.switches = {false, true, net::CemMode::a2};
  c.loss.lambda = 0.5;
  const json j = to_json(c);
  TrainConfig r;
  apply_train_json(j, j["loss"], r);
  EXPECT_EQ(r.epochs, 17);
  EXPECT_DOUBLE_EQ(r.lr, 2e-4);
  EXPECT_DOUBLE_EQ(r.beta1, 0.8);
  EXPECT_DOUBLE_EQ(r.decoder_lr_scale, 0.25);
  EXPECT_EQ(r.seed, 9u);
  EXPECT_EQ(r.switches, c.switches);
  EXPECT_DOUBLE_EQ(r.loss.lambda, 0.5);

  for (const std::function<void(TrainConfig&)>& bad : std::vector<std::function<void(TrainConfig&)>>{[](TrainConfig& t) { t.epochs = 0; }, [](TrainConfig& t) { t.lr = 0; },
                   [](TrainConfig& t) { t.beta2 = 1.0; }, [](TrainConfig& t) { t.clip_norm = -1; },
                   [](TrainConfig& t) { t.decoder_lr_scale = -0.1; }, [](TrainConfig& t) { t.lr_step = 0; }}) {
    TrainConfig t;
    bad(t);
    EXPECT_THROW(t.validate(), ValidationError);
  }
}

TEST(Training, StepScheduleHalvesEveryStep) {
  TrainConfig c;
  c.lr = 1e-3;
  c.lr_step = 300;
  c.lr_decay = 0.5;
  EXPECT_DOUBLE_EQ(scheduled_lr(c, 0), 1e-3);
  EXPECT_DOUBLE_EQ(scheduled_lr(c, 299), 1e-3);
  EXPECT_DOUBLE_EQ(scheduled_lr(c, 300), 5e-4);
  EXPECT_DOUBLE_EQ(scheduled_lr(c, 999), 1.25e-4);
}

TEST(Training, AdamMatchesReferenceRecursion) {
  net::ModelParameters p;
  p.values.emplace("a", nn::Tensor<float>({2}, std::vector<float>{1.0f, -1.0f}));
  p.values.emplace("dec.w", nn::Tensor<float>({1}, std::vector<float>{0.5f}));
  Adam adam(0.9, 0.999, 1e-8);
  const std::vector<std::vector<float>> ga{{0.2f, -0.4f}, {0.1f, 0.3f}, {-0.5f, 0.0f}};
  const std::vector<float> gd{0.3f};
  double m[3] = {0, 0, 0}, v[3] = {0, 0, 0}, x[3] = {1.0, -1.0, 0.5};
  for (int t = 1; t <= 3; ++t) {
    adam.step(p, {{"a", &ga[t - 1]}, {"dec.w", &gd}}, 0.01, 0.5, {{"dec.w", 0.1}});
    const double g[3] = {0.5 * ga[t - 1][0], 0.5 * ga[t - 1][1], 0.5 * gd[0]};
    for (int i = 0; i < 3; ++i) {
      m[i] = 0.9 * m[i] + 0.1 * g[i];
      v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
      const double lr = i == 2 ? 0.001 : 0.01;
      x[i] -= lr * (m[i] / (1 - std::pow(0.9, t))) / (std::sqrt(v[i] / (1 - std::pow(0.999, t))) + 1e-8);
    }
  }
  EXPECT_NEAR(p.at("a").data[0], x[0], 1e-6);
  EXPECT_NEAR(p.at("a").data[1], x[1], 1e-6);
  EXPECT_NEAR(p.at("dec.w").data[0], x[2], 1e-6);
}

TEST(Baseline, ConsistentVcaAlignsColumnsAcrossPhases) {
  synth::Synth1Config c;
  c.T = 4;
  c.H = c.W = 12;
  c.L = 20;
  c.mutation_phases = {};
  c.seed = 3;
  const auto b = synth::generate_synthetic1(c);
  const auto e = consistent_vca(b.observed, 3, 3);
  ASSERT_EQ(e.T, 4);
  const auto perm0 = metrics::align_endmembers(e, *b.gt_endmembers);
  // Every phase maps to the truth through the same permutation.
  for (int t = 1; t < 4; ++t) {
    EndmemberSet one = e, truth = *b.gt_endmembers;
    one.T = truth.T = 1;
    truth.per_pixel.clear();
    truth.N = 0;
    const std::size_t n = static_cast<std::size_t>(e.L) * e.P;
    one.per_phase.assign(e.per_phase.begin() + t * n, e.per_phase.begin() + (t + 1) * n);
    truth.per_phase.assign(b.gt_endmembers->per_phase.begin() + t * n, b.gt_endmembers->per_phase.begin() + (t + 1) * n);
    EXPECT_EQ(metrics::align_endmembers(one, truth), perm0) << "phase " << t;
  }
}

TEST(Baseline, FclsRunProducesValidEstimate) {
  auto b = make_dataset({"synth1", "", "", tiny_dataset()}, 4);
  const auto r = run_fcls(b, 4);
  EXPECT_TRUE(validate_abundance(r.abundances, kAscTolerance).empty());
  EXPECT_TRUE(std::isfinite(r.report.nrmse_a));
  EXPECT_TRUE(std::isfinite(r.report.sam_m));
  b.gt_abundances.reset();
  b.gt_endmembers.reset();
  const auto r2 = run_fcls(b, 3, 4);
  EXPECT_EQ(r2.abundances.P, 3);
  EXPECT_TRUE(std::isnan(r2.report.nrmse_a));
}

TEST(Training, ShortRunIsDeterministicAndValid) {
  const auto b = make_dataset({"synth1", "", "", tiny_dataset()}, 5);
  auto cfg = parse_experiment(tiny_config("unused"));
  cfg.train.seed = 5;
  const auto r1 = train(b, cfg.arch, cfg.train);
  const auto r2 = train(b, cfg.arch, cfg.train);
  ASSERT_EQ(r1.loss_trace.size(), 4u);
  EXPECT_EQ(r1.loss_trace, r2.loss_trace);
  EXPECT_EQ(r1.estimate.abundances.data, r2.estimate.abundances.data);
  EXPECT_TRUE(validate_abundance(r1.estimate.abundances, kAscTolerance).empty());
  for (float v : r1.estimate.endmembers.per_phase) EXPECT_GE(v, 0.0f);
  EXPECT_EQ(r1.arch.P, 3);
  cfg.train.seed = 6;
  EXPECT_NE(train(b, cfg.arch, cfg.train).loss_trace, r1.loss_trace);
}

TEST(Training, DecoderFrozenWithZeroScale) {
  const auto b = make_dataset({"synth1", "", "", tiny_dataset()}, 6);
  auto cfg = parse_experiment(tiny_config("unused"));
  cfg.train.decoder_lr_scale = 0.0;
  cfg.train.seed = 6;
  const auto r = train(b, cfg.arch, cfg.train);
  const auto init = consistent_vca(b.observed, 3, 6);
  for (std::size_t i = 0; i < init.per_phase.size(); ++i)
    EXPECT_EQ(r.params.at("dec.w").data[i], init.per_phase[i]);
}

TEST(EstimateIo, RoundTripAndMissingFiles) {
  const auto b = make_dataset({"synth1", "", "", tiny_dataset()}, 7);
  EndmemberSet e = *b.gt_endmembers;
  e.per_pixel.clear();
  e.N = 0;
  const auto dir = testutil::temp_dir("estimate_io");
  write_estimate(dir, "x", *b.gt_abundances, e);
  const auto r = read_estimate(dir);
  EXPECT_EQ(r.method, "x");
  EXPECT_EQ(r.abundances.data, b.gt_abundances->data);
  EXPECT_EQ(r.endmembers.per_phase, e.per_phase);
  std::filesystem::remove(dir / io::phase_file("est_abundance", 1));
  EXPECT_THROW(read_estimate(dir), FormatError);
  EXPECT_THROW(read_estimate(dir / "nothing"), FormatError);
}

TEST(Figures, MapsEndmembersAndLossCurve) {
  const auto b = make_dataset({"synth1", "", "", tiny_dataset()}, 8);
  const auto dir = testutil::temp_dir("figures");
  const auto maps = render_maps(*b.gt_abundances, dir);
  EXPECT_EQ(maps.size(), 2u * (3 + 1));
  const auto curves = render_endmembers(*b.gt_endmembers, dir);
  EXPECT_EQ(curves.size(), 2u);
  for (const auto& p : maps) EXPECT_EQ(slurp(p).substr(1, 3), "PNG");
  write_loss_curve(dir / "loss.csv", {1.5, 0.25});
  EXPECT_EQ(slurp(dir / "loss.csv"), "epoch,loss\n0,1.5\n1,0.25\n");
}

TEST(ExperimentConfig, ParsesOverridesAndRejectsBadInput) {
  const auto c = parse_experiment(tiny_config("somewhere"));
  EXPECT_EQ(c.dataset.kind, "synth1");
  EXPECT_EQ(c.dataset.overrides["H"], 6);
  EXPECT_FALSE(c.dataset.overrides.contains("kind"));
  EXPECT_EQ(c.arch.D, 8);
  EXPECT_EQ(c.train.epochs, 4);
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{1, 2}));
  EXPECT_EQ(c.out_dir, "somewhere");
  EXPECT_FALSE(c.output.images);

  auto bad = tiny_config("x");
  bad["methods"] = {"fcls", "nmf"};
  EXPECT_THROW(parse_experiment(bad), ValidationError);
  bad = tiny_config("x");
  bad["seeds"] = json::array();
  EXPECT_THROW(parse_experiment(bad), ValidationError);
  bad = tiny_config("x");
  bad["train"]["epochs"] = "many";
  EXPECT_THROW(parse_experiment(bad), ValidationError);
  bad = tiny_config("x");
  bad["arch"]["heads"] = 3;
  EXPECT_THROW(parse_experiment(bad), ValidationError);
  EXPECT_THROW(make_dataset({"hyperion", "", "", json::object()}, 1), ValidationError);
  EXPECT_EQ((DatasetSpec{"dir", "", "/data/urban", {}}.label()), "urban");
}

TEST(Ablation, MedianHelpers) {
  EXPECT_DOUBLE_EQ(median_of({3, 1, 2}), 2.0);
  EXPECT_DOUBLE_EQ(median_of({4, 1, 2, 3}), 2.5);
  EXPECT_TRUE(std::isnan(median_of({})));
  metrics::MetricsReport a, b, c;
  a.nrmse_a = 0.3;
  b.nrmse_a = 0.1;
  c.nrmse_a = 0.2;
  EXPECT_DOUBLE_EQ(median_report({a, b, c}).nrmse_a, 0.2);
  EXPECT_EQ(default_ablation_settings().size(), 9u);
}

TEST(Experiment, RunWritesMetricsAndIsReproducible) {
  const auto out = testutil::temp_dir("experiment");
  const auto cfg = parse_experiment(tiny_config(out));
  const auto rows = run_experiment(cfg, out / "a");
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0].method, "fcls");
  EXPECT_EQ(rows[1].method, "muformer");
  EXPECT_EQ(rows[3].seed, 2u);
  EXPECT_TRUE(std::filesystem::exists(out / "a" / "seed_1" / "muformer" / "checkpoint.bin"));
  EXPECT_TRUE(std::filesystem::exists(out / "a" / "seed_2" / "fcls" / "estimate" / "meta.json"));
  EXPECT_FALSE(std::filesystem::exists(out / "a" / "seed_1" / "muformer" / "maps"));
  const auto back = metrics::read_metrics_csv(out / "a" / "metrics.csv");
  ASSERT_EQ(back.size(), 4u);
  run_experiment(cfg, out / "b");
  const auto again = metrics::read_metrics_csv(out / "b" / "metrics.csv");
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_NEAR(back[i].report.nrmse_a, again[i].report.nrmse_a, 1e-6);
    EXPECT_NEAR(back[i].report.sam_m, again[i].report.sam_m, 1e-6);
    EXPECT_NEAR(back[i].report.nrmse_y, again[i].report.nrmse_y, 1e-6);
  }
}

TEST(Ablation, SharesRunsBetweenIdenticalSwitches) {
  const auto out = testutil::temp_dir("ablation");
  auto j = tiny_config(out);
  j["seeds"] = {1};
  j["train"]["epochs"] = 2;
  const auto cfg = parse_experiment(j);
  const auto settings = default_ablation_settings();
  const auto rows = ablate(cfg, out, {settings[0], settings[3], settings[8]});
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[1].median.nrmse_a, rows[2].median.nrmse_a);
  std::size_t run_dirs = 0;
  for (const auto& d : std::filesystem::directory_iterator(out / "seed_1")) run_dirs += d.is_directory();
  EXPECT_EQ(run_dirs, 2u);
  const auto csv = slurp(out / "ablation.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "table,setting,use_gam,use_cem,cem_mode,seeds,nrmse_a,nrmse_m,sam_m,nrmse_y,runtime_s");
  EXPECT_NE(csv.find("modules,baseline,0,0,none,1,"), std::string::npos);
}
