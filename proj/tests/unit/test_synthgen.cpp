#include <set>

#include "mthu/synthgen.hpp"
#include "test_util.hpp"

using namespace mthu;
using namespace mthu::synth;

namespace {

Synth1Config tiny1(std::uint64_t seed) {
  Synth1Config c;
  c.T = 3;
  c.H = 12;
  c.W = 10;
  c.L = 16;
  c.mutation_phases = {2, 3};
  c.mutation_radius_px = 2;
  c.seed = seed;
  return c;
}

Synth2Config tiny2(std::uint64_t seed) {
  Synth2Config c;
  c.T = 4;
  c.H = 6;
  c.W = 7;
  c.L = 12;
  c.seed = seed;
  return c;
}

double max_mixture_error(const DatasetBundle& b) {
  const auto& e = *b.gt_endmembers;
  const auto& a = *b.gt_abundances;
  double worst = 0;
  for (int t = 0; t < b.observed.T; ++t)
    for (int n = 0; n < b.observed.pixels(); ++n)
      for (int l = 0; l < b.observed.L; ++l) {
        double r = 0;
        for (int p = 0; p < e.P; ++p) r += double(e.pixel_at(t, n, l, p)) * a.at(t, p, n);
        worst = std::max(worst, std::abs(r - b.observed.at(t, l, n)));
      }
  return worst;
}

}  // namespace

TEST(PiecewiseScaling, DegenerateIntervalIsOnes) {
  Rng rng(1);
  for (double v : piecewise_scaling(50, {1.0, 1.0}, 5, rng)) EXPECT_EQ(v, 1.0);
}

TEST(PiecewiseScaling, StaysInsideInterval) {
  for (std::uint64_t s = 0; s < 50; ++s) {
    Rng rng(s);
    const auto v = piecewise_scaling(224, {0.85, 1.15}, 5, rng);
    EXPECT_GE(*std::min_element(v.begin(), v.end()), 0.85);
    EXPECT_LE(*std::max_element(v.begin(), v.end()), 1.15);
  }
}

TEST(PiecewiseScaling, TwoKnotsIsLinearInterpolation) {
  const int L = 37;
  Rng rng(99);
  const auto v = piecewise_scaling(L, {0.85, 1.15}, 2, rng);
  Rng oracle(99);
  const double v0 = oracle.uniform(0.85, 1.15);
  const double v1 = oracle.uniform(0.85, 1.15);
  for (int i = 0; i < L; ++i) EXPECT_NEAR(v[i], v0 + (v1 - v0) * i / (L - 1), 1e-12);
}

TEST(PiecewiseScaling, RejectsSingleKnot) {
  Rng rng(1);
  EXPECT_THROW(piecewise_scaling(10, {0.9, 1.1}, 1, rng), ValidationError);
}

TEST(Noise, InfiniteSnrIsIdentity) {
  const auto b = generate_synthetic1(tiny1(1));
  Rng rng(2);
  EXPECT_EQ(add_noise_snr(b.observed, kNoiseDisabled, rng).data, b.observed.data);
}

TEST(Noise, MeasuredSnrWithinTolerance) {
  Synth1Config c;
  c.snr_db = kNoiseDisabled;
  c.seed = 8;
  const auto clean = generate_synthetic1(c).observed;
  Rng rng(17);
  const auto noisy = add_noise_snr(clean, 30.0, rng);
  EXPECT_NEAR(measured_snr_db(clean, noisy), 30.0, 0.2);
}

TEST(Noise, SeededDeterminism) {
  const auto b = generate_synthetic1(tiny1(1));
  Rng r1(5), r2(5);
  EXPECT_EQ(add_noise_snr(b.observed, 20.0, r1).data, add_noise_snr(b.observed, 20.0, r2).data);
}

TEST(Noise, ZeroCubeRejected) {
  auto y = generate_synthetic1(tiny1(1)).observed;
  std::fill(y.data.begin(), y.data.end(), 0.0f);
  Rng rng(1);
  EXPECT_THROW(add_noise_snr(y, 30.0, rng), ValidationError);
}

TEST(Synth1, AbundancesSatisfyConstraints) {
  for (std::uint64_t s : {1, 2, 3}) {
    const auto b = generate_synthetic1(tiny1(s));
    EXPECT_TRUE(validate_abundance(*b.gt_abundances, kAscTolerance).empty());
  }
}

TEST(Synth1, NoiselessMixtureIsExact) {
  auto c = tiny1(4);
  c.snr_db = kNoiseDisabled;
  EXPECT_LE(max_mixture_error(generate_synthetic1(c)), 1e-6);
}

TEST(Synth1, SameSeedIsBitIdentical) {
  EXPECT_TRUE(generate_synthetic1(tiny1(6)) == generate_synthetic1(tiny1(6)));
  EXPECT_FALSE(generate_synthetic1(tiny1(6)) == generate_synthetic1(tiny1(7)));
}

TEST(Synth1, MutationDiskIsDominated) {
  auto c = tiny1(12);
  c.H = c.W = 30;
  c.mutation_phases = {2};
  c.mutation_radius_px = 4;
  const auto b = generate_synthetic1(c);
  const auto& a = *b.gt_abundances;
  int dominated = 0;
  for (int n = 0; n < a.pixels(); ++n)
    for (int p = 0; p < a.P; ++p)
      if (std::abs(a.at(1, p, n) - 0.9f) < 1e-6f) ++dominated;
  EXPECT_GE(dominated, 20);  // at least part of a radius-4 disk
}

TEST(Synth1, ScalingStaysInInterval) {
  auto c = tiny1(3);
  const auto b = generate_synthetic1(c);
  const auto& e = *b.gt_endmembers;
  // Per-pixel spectra divided by the phase-0 pixel-0 spectrum's reference are
  // bounded by the amplitude ratio.
  for (int p = 0; p < e.P; ++p)
    for (int l = 0; l < e.L; ++l) {
      float lo = 1e30f, hi = 0;
      for (int t = 0; t < e.T; ++t)
        for (int n = 0; n < e.N; ++n) {
          lo = std::min(lo, e.pixel_at(t, n, l, p));
          hi = std::max(hi, e.pixel_at(t, n, l, p));
        }
      if (lo > 0) EXPECT_LE(hi / lo, 1.15 / 0.85 + 1e-5);
    }
}

TEST(Synth1, NoiseMeetsRequestedSnr) {
  auto c = tiny1(5);
  c.H = c.W = 50;
  c.L = 224;
  c.T = 6;
  const auto noisy = generate_synthetic1(c);
  c.snr_db = kNoiseDisabled;
  const auto clean = generate_synthetic1(c);
  EXPECT_NEAR(measured_snr_db(clean.observed, noisy.observed), 30.0, 0.2);
}

TEST(Synth2, ShapesMatchDefaults) {
  Synth2Config c;
  c.H = c.W = 8;
  c.seed = 1;
  const auto b = generate_synthetic2(c);
  EXPECT_EQ(b.observed.T, 15);
  EXPECT_EQ(b.observed.L, 198);
  EXPECT_EQ(b.gt_endmembers->P, 4);
}

TEST(Synth2, PerPixelSpectraComeFromBank) {
  const auto c = tiny2(3);
  const auto bank = builtin_bank(c.L);
  const auto classes = synth2_classes(bank, c.P);
  const auto b = generate_synthetic2(c);
  const auto& e = *b.gt_endmembers;
  for (int t = 0; t < e.T; ++t)
    for (int n = 0; n < e.N; ++n)
      for (int p = 0; p < e.P; ++p) {
        bool found = false;
        for (const auto& s : bank.classes.at(classes[p])) {
          bool same = true;
          for (int l = 0; l < e.L && same; ++l) same = e.pixel_at(t, n, l, p) == static_cast<float>(s[l]);
          found = found || same;
        }
        ASSERT_TRUE(found) << "t=" << t << " n=" << n << " p=" << p;
      }
}

TEST(Synth2, NoiselessMixtureIsExact) {
  auto c = tiny2(4);
  c.snr_db = kNoiseDisabled;
  EXPECT_LE(max_mixture_error(generate_synthetic2(c)), 1e-6);
}

TEST(Synth2, EmptyClassRejected) {
  auto c = tiny2(1);
  SpectraBank bank = builtin_bank(c.L);
  bank.classes["road"].clear();
  c.bank = bank;
  EXPECT_ANY_THROW(generate_synthetic2(c));
}

TEST(Synth2, Deterministic) { EXPECT_TRUE(generate_synthetic2(tiny2(9)) == generate_synthetic2(tiny2(9))); }

TEST(SpectraBank, BuiltinHasFourClassesOfTwentyPlus) {
  const auto bank = builtin_bank(198);
  EXPECT_NO_THROW(bank.validate());
  for (const char* name : {"water", "vegetation", "soil", "road"}) {
    ASSERT_TRUE(bank.classes.count(name)) << name;
    EXPECT_GE(bank.classes.at(name).size(), 20u);
  }
}

TEST(SpectraBank, FileRoundTrip) {
  const auto dir = testutil::temp_dir("bank");
  const auto bank = builtin_bank(10, 3);
  save_bank(bank, dir / "bank.json");
  const auto back = load_bank(dir / "bank.json");
  ASSERT_EQ(back.classes.size(), bank.classes.size());
  for (const auto& [k, v] : bank.classes) {
    ASSERT_EQ(back.classes.at(k).size(), v.size());
    for (std::size_t i = 0; i < v.size(); ++i)
      for (std::size_t l = 0; l < v[i].size(); ++l) EXPECT_DOUBLE_EQ(back.classes.at(k)[i][l], v[i][l]);
  }
}

TEST(AbundanceFields, EvolveOverTime) {
  const auto a = generate_abundance_fields(4, 3, 20, 20, {}, 5);
  EXPECT_TRUE(validate_abundance(a, kAscTolerance).empty());
  double diff = 0;
  for (int p = 0; p < 3; ++p)
    for (int n = 0; n < a.pixels(); ++n) diff += std::abs(a.at(3, p, n) - a.at(0, p, n));
  EXPECT_GT(diff / a.pixels(), 0.01);
}
