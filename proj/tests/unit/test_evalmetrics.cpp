#include <numeric>

#include "mthu/evalmetrics.hpp"
#include "mthu/synthgen.hpp"
#include "test_util.hpp"

using namespace mthu;
using namespace mthu::metrics;

namespace {

DatasetBundle small_synth(std::uint64_t seed) {
  synth::Synth1Config c;
  c.T = 2;
  c.H = c.W = 6;
  c.L = 10;
  c.mutation_phases = {2};
  c.mutation_radius_px = 1;
  c.seed = seed;
  return synth::generate_synthetic1(c);
}

// Relabels estimate column e as truth column perm[e].
AbundanceSequence permute_abundances(const AbundanceSequence& a, const std::vector<int>& perm) {
  AbundanceSequence out = a;
  for (int t = 0; t < a.T; ++t)
    for (int e = 0; e < a.P; ++e)
      for (int n = 0; n < a.pixels(); ++n) out.at(t, e, n) = a.at(t, perm[e], n);
  return out;
}

EndmemberSet permute_endmembers(const EndmemberSet& m, const std::vector<int>& perm) {
  EndmemberSet out = m;
  for (int t = 0; t < m.T; ++t)
    for (int l = 0; l < m.L; ++l)
      for (int e = 0; e < m.P; ++e) out.at(t, l, e) = m.at(t, l, perm[e]);
  if (m.has_per_pixel())
    for (int t = 0; t < m.T; ++t)
      for (int n = 0; n < m.N; ++n)
        for (int l = 0; l < m.L; ++l)
          for (int e = 0; e < m.P; ++e)
            out.per_pixel[((static_cast<std::size_t>(t) * m.N + n) * m.L + l) * m.P + e] = m.pixel_at(t, n, l, perm[e]);
  return out;
}

double brute_force_cost(const std::vector<double>& cost, int n, std::vector<int>* best_perm = nullptr) {
  std::vector<int> p(n);
  std::iota(p.begin(), p.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double c = 0;
    for (int i = 0; i < n; ++i) c += cost[i * n + p[i]];
    if (c < best) {
      best = c;
      if (best_perm) *best_perm = p;
    }
  } while (std::next_permutation(p.begin(), p.end()));
  return best;
}

}  // namespace

TEST(Assignment, MatchesExhaustiveSearch) {
  std::mt19937_64 g(1);
  for (int k = 0; k < 100; ++k) {
    const int n = 1 + k % 5;
    const auto cost = testutil::random_vector(n * n, g, 0.0, 3.0);
    const auto perm = solve_assignment(cost, n);
    check_perm(perm, n);
    double c = 0;
    for (int i = 0; i < n; ++i) c += cost[i * n + perm[i]];
    EXPECT_NEAR(c, brute_force_cost(cost, n), 1e-12) << "case " << k;
  }
}

TEST(Assignment, RecoversPlantedPermutationFromSpectra) {
  std::mt19937_64 g(2);
  for (int k = 0; k < 20; ++k) {
    const int P = 2 + k % 4, L = 12;
    EndmemberSet truth;
    truth.T = 1;
    truth.L = L;
    truth.P = P;
    for (double v : testutil::random_vector(L * P, g, 0.05, 1.0)) truth.per_phase.push_back(float(v));
    std::vector<int> planted(P);
    std::iota(planted.begin(), planted.end(), 0);
    std::shuffle(planted.begin(), planted.end(), g);
    const auto est = permute_endmembers(truth, planted);
    EXPECT_EQ(align_endmembers(est, truth), planted);
  }
}

TEST(Evaluate, TruthAgainstItselfIsZero) {
  const auto b = small_synth(3);
  const auto r = evaluate(b, *b.gt_abundances, *b.gt_endmembers, 0.0);
  EXPECT_EQ(r.permutation, identity_perm(3));
  EXPECT_EQ(r.nrmse_a, 0.0);
  EXPECT_EQ(r.nrmse_m, 0.0);
  EXPECT_NEAR(r.sam_m, 0.0, 1e-3);  // float acos near 1
  EXPECT_EQ(r.endmember_truth, "per_pixel");
  EXPECT_TRUE(r.abundance_truth);
}

TEST(Evaluate, InvariantToEstimateLabelPermutation) {
  const auto b = small_synth(4);
  EndmemberSet est = *b.gt_endmembers;
  est.per_pixel.clear();
  est.N = 0;
  for (auto& v : est.per_phase) v *= 1.05f;
  auto a = *b.gt_abundances;
  for (auto& v : a.data) v = 0.9f * v + 0.1f / 3;
  const auto r0 = evaluate(b, a, est, 0.0);
  const std::vector<int> perm{2, 0, 1};
  const auto r1 = evaluate(b, permute_abundances(a, perm), permute_endmembers(est, perm), 0.0);
  EXPECT_NEAR(r0.nrmse_a, r1.nrmse_a, 1e-12);
  EXPECT_NEAR(r0.nrmse_m, r1.nrmse_m, 1e-12);
  EXPECT_NEAR(r0.sam_m, r1.sam_m, 1e-12);
  EXPECT_NEAR(r0.nrmse_y, r1.nrmse_y, 1e-6);
  EXPECT_EQ(r1.permutation, perm);
}

TEST(Metrics, NrmseAMatchesDirectFormula) {
  auto truth = testutil::uniform_abundances(2, 2, 2, 2);
  auto est = truth;
  truth.at(0, 0, 0) = 0.8f;
  truth.at(0, 1, 0) = 0.2f;
  est.at(1, 0, 3) = 0.0f;
  est.at(1, 1, 3) = 1.0f;
  // phase 0: ((0.3^2)*2) / (0.8^2 + 0.2^2 + 6*0.25); phase 1: (0.25*2) / (8*0.25)
  const double p0 = 0.18 / (0.64 + 0.04 + 1.5), p1 = 0.5 / 2.0;
  EXPECT_NEAR(nrmse_a(est, truth, identity_perm(2)), std::sqrt((p0 + p1) / 2), 1e-7);
}

TEST(Metrics, SamOfScaledEndmembersIsZeroButNrmseIsNot) {
  const auto b = small_synth(5);
  EndmemberSet mean = *b.gt_endmembers;
  mean.per_pixel.clear();
  mean.N = 0;
  EndmemberSet scaled = mean;
  for (auto& v : scaled.per_phase) v *= 2.0f;
  EXPECT_NEAR(sam_m(scaled, mean, identity_perm(3)), 0.0, 1e-3);
  EXPECT_NEAR(nrmse_m(scaled, mean, identity_perm(3)), 1.0, 1e-6);
}

TEST(Metrics, NrmseYZeroForExactReconstruction) {
  synth::Synth1Config c;
  c.T = 2;
  c.H = c.W = 5;
  c.L = 8;
  c.mutation_phases = {};
  c.snr_db = synth::kNoiseDisabled;
  c.seed = 6;
  const auto b = synth::generate_synthetic1(c);
  EXPECT_LT(nrmse_y(b.observed, *b.gt_endmembers, *b.gt_abundances), 1e-6);
}

TEST(Metrics, BadPermutationRejected) {
  const auto a = testutil::uniform_abundances(1, 3, 2, 2);
  EXPECT_THROW(nrmse_a(a, a, {0, 0, 1}), ValidationError);
  EXPECT_THROW(nrmse_a(a, a, {0, 1}), ShapeError);
}

TEST(Evaluate, MissingTruthLeavesNan) {
  auto b = small_synth(7);
  const auto a = *b.gt_abundances;
  const auto e = *b.gt_endmembers;
  b.gt_abundances.reset();
  b.gt_endmembers.reset();
  const auto r = evaluate(b, a, e, 1.5);
  EXPECT_TRUE(std::isnan(r.nrmse_a));
  EXPECT_TRUE(std::isnan(r.nrmse_m));
  EXPECT_TRUE(std::isnan(r.sam_m));
  EXPECT_FALSE(std::isnan(r.nrmse_y));
  EXPECT_EQ(r.endmember_truth, "none");
}

TEST(MetricsCsv, RoundTripWithNan) {
  MetricsRow r1{"fcls", "synth1", 3, {}};
  r1.report.nrmse_a = 0.123456789012;
  r1.report.nrmse_y = 1e-7;
  r1.report.runtime_s = 2.5;
  MetricsRow r2{"muformer", "synth1", 4, {}};
  r2.report.sam_m = 0.25;
  const auto dir = testutil::temp_dir("metrics_csv");
  io::write_text(dir / "metrics.csv", metrics_csv({r1, r2}));
  const auto rows = read_metrics_csv(dir / "metrics.csv");
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].method, "fcls");
  EXPECT_EQ(rows[1].seed, 4u);
  EXPECT_NEAR(rows[0].report.nrmse_a, 0.123456789, 1e-9);
  EXPECT_TRUE(std::isnan(rows[0].report.nrmse_m));
  EXPECT_DOUBLE_EQ(rows[1].report.sam_m, 0.25);
  EXPECT_EQ(format_value(kMissing), "nan");
  io::write_text(dir / "bad.csv", "a,b\n");
  EXPECT_THROW(read_metrics_csv(dir / "bad.csv"), FormatError);
}
