#pragma once

// Seeded generators for the two synthetic multitemporal benchmarks:
//   synth1: 3 reference spectra with per-pixel piecewise-linear scaling,
//           local abrupt changes at selected phases, additive noise.
//   synth2: 4 classes whose per-pixel spectra are drawn from a bank of
//           pure-pixel signatures, 15 phases, additive noise.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "mthu/datamodel.hpp"
#include "mthu/errors.hpp"
#include "mthu/rng.hpp"

namespace mthu::synth {

inline constexpr double kNoiseDisabled = std::numeric_limits<double>::infinity();

struct SpectraBank {
  int L = 0;
  std::map<std::string, std::vector<std::vector<double>>> classes;

  void validate() const {
    if (L < 2) throw ValidationError("SpectraBank: L must be >= 2");
    if (classes.empty()) throw ValidationError("SpectraBank: no classes");
    for (const auto& [name, spectra] : classes) {
      if (spectra.empty()) throw ValidationError("SpectraBank: class '" + name + "' is empty");
      for (const auto& s : spectra) {
        if (s.size() != static_cast<std::size_t>(L))
          throw ValidationError("SpectraBank: spectrum length differs from L in class '" + name + "'");
        for (double v : s)
          if (!std::isfinite(v) || v < 0.0)
            throw ValidationError("SpectraBank: negative or non-finite value in class '" + name + "'");
      }
    }
  }
};

namespace detail {

struct Bump {
  double amplitude;
  double center;  // on the normalized band axis [0, 1]
  double width;
};

struct ClassShape {
  const char* name;
  double base;
  std::vector<Bump> bumps;
};

inline const std::vector<ClassShape>& builtin_shapes() {
  static const std::vector<ClassShape> shapes = {
      {"water", 0.03, {{0.16, 0.10, 0.07}, {0.07, 0.28, 0.09}, {0.025, 0.55, 0.15}}},
      {"vegetation", 0.04, {{0.07, 0.20, 0.035}, {0.42, 0.50, 0.09}, {0.33, 0.68, 0.08}, {0.22, 0.86, 0.07}}},
      {"soil", 0.08, {{0.10, 0.22, 0.12}, {0.26, 0.58, 0.20}, {0.20, 0.88, 0.10}}},
      {"road", 0.17, {{0.07, 0.10, 0.10}, {0.09, 0.40, 0.18}, {0.05, 0.72, 0.12}, {0.03, 0.95, 0.06}}},
  };
  return shapes;
}

inline std::vector<double> render(int L, double base, const std::vector<Bump>& bumps) {
  std::vector<double> s(L);
  for (int i = 0; i < L; ++i) {
    const double u = L > 1 ? double(i) / (L - 1) : 0.0;
    double v = base;
    for (const auto& b : bumps) {
      const double z = (u - b.center) / b.width;
      v += b.amplitude * std::exp(-0.5 * z * z);
    }
    s[i] = v;
  }
  return s;
}

}  // namespace detail

inline constexpr std::uint64_t kBuiltinBankSeed = 0x5EC7A1B4;

// Smooth synthetic signatures: each class is a base level plus 3-4 Gaussian
// bumps; members jitter bump amplitude, position and width.
inline SpectraBank builtin_bank(int L, int per_class = 24) {
  SpectraBank bank;
  bank.L = L;
  std::uint64_t class_index = 0;
  for (const auto& shape : detail::builtin_shapes()) {
    Rng rng(derive_seed(kBuiltinBankSeed, stream::kBank, class_index++));
    auto& members = bank.classes[shape.name];
    for (int m = 0; m < per_class; ++m) {
      std::vector<detail::Bump> bumps = shape.bumps;
      for (auto& b : bumps) {
        b.amplitude *= rng.uniform(0.85, 1.15);
        b.center += rng.uniform(-0.015, 0.015);
        b.width *= rng.uniform(0.9, 1.1);
      }
      members.push_back(detail::render(L, shape.base * rng.uniform(0.9, 1.1), bumps));
    }
  }
  return bank;
}

inline SpectraBank load_bank(const std::filesystem::path& path) {
  const auto j = io::read_json(path);
  if (!j.contains("classes") || !j["classes"].is_object())
    throw FormatError("bank file " + path.string() + ": missing 'classes' object");
  SpectraBank bank;
  for (const auto& [name, list] : j["classes"].items())
    bank.classes[name] = list.get<std::vector<std::vector<double>>>();
  if (!bank.classes.empty() && !bank.classes.begin()->second.empty())
    bank.L = static_cast<int>(bank.classes.begin()->second.front().size());
  bank.validate();
  return bank;
}

inline void save_bank(const SpectraBank& bank, const std::filesystem::path& path) {
  nlohmann::json j;
  j["classes"] = nlohmann::json::object();
  for (const auto& [name, spectra] : bank.classes) j["classes"][name] = spectra;
  io::write_text(path, j.dump() + "\n");
}

struct AmplitudeInterval {
  double lo = 0.85;
  double hi = 1.15;
};

// Piecewise-linear curve over `knots` evenly spaced breakpoints whose values
// are i.i.d. uniform in `amp`.
inline std::vector<double> piecewise_scaling(int L, AmplitudeInterval amp, int knots, Rng& rng) {
  if (knots < 2) throw ValidationError("piecewise_scaling: knots must be >= 2");
  if (!(amp.lo > 0.0) || amp.hi < amp.lo) throw ValidationError("piecewise_scaling: invalid amplitude interval");
  if (L < 1) throw ValidationError("piecewise_scaling: L must be >= 1");
  std::vector<double> values(knots);
  for (auto& v : values) v = rng.uniform(amp.lo, amp.hi);
  std::vector<double> out(L);
  if (L == 1) {
    out[0] = values[0];
    return out;
  }
  const double segment = double(L - 1) / (knots - 1);
  for (int i = 0; i < L; ++i) {
    const double x = i / segment;
    const int k = std::min(static_cast<int>(x), knots - 2);
    const double f = x - k;
    out[i] = std::clamp(values[k] + (values[k + 1] - values[k]) * f, amp.lo, amp.hi);
  }
  return out;
}

inline double mean_square(const std::vector<float>& v) {
  double acc = 0.0;
  for (float x : v) acc += double(x) * x;
  return v.empty() ? 0.0 : acc / v.size();
}

// Adds i.i.d. Gaussian noise with variance mean(x^2) / 10^(snr_db/10), the
// signal power taken over the whole sequence. snr_db = +inf returns a copy.
inline HyperCubeSequence add_noise_snr(const HyperCubeSequence& cube, double snr_db, Rng& rng) {
  HyperCubeSequence out = cube;
  if (std::isinf(snr_db) && snr_db > 0) return out;
  if (std::isnan(snr_db)) throw ValidationError("add_noise_snr: snr_db is NaN");
  const double power = mean_square(cube.data);
  if (!(power > 0.0)) throw ValidationError("add_noise_snr: cube has zero signal power");
  const double sigma = std::sqrt(power / std::pow(10.0, snr_db / 10.0));
  for (auto& v : out.data) v = static_cast<float>(v + sigma * rng.normal());
  return out;
}

// 10 log10(P_signal / P_noise) where noise = noisy - clean.
inline double measured_snr_db(const HyperCubeSequence& clean, const HyperCubeSequence& noisy) {
  if (clean.data.size() != noisy.data.size()) throw ShapeError("measured_snr_db: size mismatch");
  double ps = 0.0;
  double pn = 0.0;
  for (std::size_t i = 0; i < clean.data.size(); ++i) {
    ps += double(clean.data[i]) * clean.data[i];
    const double e = double(noisy.data[i]) - clean.data[i];
    pn += e * e;
  }
  if (pn == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(ps / pn);
}

struct AbundanceFieldConfig {
  double smoothing_px = 5.0;  // Gaussian kernel standard deviation
  double contrast = 1.0;      // logit scale applied to unit-variance fields
  double temperature = 1.0;
};

namespace detail {

inline void gaussian_blur(std::vector<double>& img, int H, int W, double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(2 * radius + 1);
  double ksum = 0.0;
  for (int i = -radius; i <= radius; ++i) ksum += kernel[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& k : kernel) k /= ksum;
  auto reflect = [](int i, int n) {
    while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
    return i;
  };
  std::vector<double> tmp(img.size());
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double acc = 0.0;
      for (int k = -radius; k <= radius; ++k) acc += kernel[k + radius] * img[y * W + reflect(x + k, W)];
      tmp[y * W + x] = acc;
    }
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double acc = 0.0;
      for (int k = -radius; k <= radius; ++k) acc += kernel[k + radius] * tmp[reflect(y + k, H) * W + x];
      img[y * W + x] = acc;
    }
}

inline std::vector<double> random_field(int H, int W, double sigma, Rng& rng) {
  std::vector<double> f(static_cast<std::size_t>(H) * W);
  for (auto& v : f) v = rng.normal();
  gaussian_blur(f, H, W, sigma);
  const double mean = std::accumulate(f.begin(), f.end(), 0.0) / f.size();
  double var = 0.0;
  for (double v : f) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / f.size());
  for (auto& v : f) v = sd > 0 ? (v - mean) / sd : 0.0;
  return f;
}

}  // namespace detail

// Smooth, slowly drifting abundance maps: per endmember, two independent
// Gaussian random fields are blended linearly across phases and a softmax
// over endmembers yields ANC/ASC-valid fractions.
inline AbundanceSequence generate_abundance_fields(int T, int P, int H, int W, const AbundanceFieldConfig& cfg,
                                                   std::uint64_t seed) {
  AbundanceSequence a;
  a.T = T;
  a.P = P;
  a.H = H;
  a.W = W;
  a.data.assign(static_cast<std::size_t>(T) * P * H * W, 0.0f);
  const int N = H * W;
  std::vector<std::vector<double>> start(P), end(P);
  for (int p = 0; p < P; ++p) {
    Rng r0(derive_seed(seed, stream::kField, 2 * p));
    Rng r1(derive_seed(seed, stream::kField, 2 * p + 1));
    start[p] = detail::random_field(H, W, cfg.smoothing_px, r0);
    end[p] = detail::random_field(H, W, cfg.smoothing_px, r1);
  }
  std::vector<double> logits(P);
  for (int t = 0; t < T; ++t) {
    const double tau = T > 1 ? double(t) / (T - 1) : 0.0;
    for (int n = 0; n < N; ++n) {
      double mx = -std::numeric_limits<double>::infinity();
      for (int p = 0; p < P; ++p) {
        logits[p] = cfg.contrast * ((1.0 - tau) * start[p][n] + tau * end[p][n]) / cfg.temperature;
        mx = std::max(mx, logits[p]);
      }
      double z = 0.0;
      for (int p = 0; p < P; ++p) z += logits[p] = std::exp(logits[p] - mx);
      // Normalize in float so the stored fractions meet ASC at float precision.
      for (int p = 0; p < P; ++p) a.at(t, p, n) = static_cast<float>(logits[p] / z);
    }
  }
  return a;
}

struct Synth1Config {
  int T = 6;
  int H = 50;
  int W = 50;
  int P = 3;
  int L = 224;
  AmplitudeInterval scale_amplitude{0.85, 1.15};
  int scale_knots = 5;
  std::vector<int> mutation_phases{2, 3, 4, 5};  // 1-based
  int mutation_radius_px = 6;
  double mutation_abundance = 0.9;
  double snr_db = 30.0;
  AbundanceFieldConfig field;
  std::uint64_t seed = 0;
  std::optional<SpectraBank> bank;  // built-in bank when absent

  void validate() const {
    if (T < 1 || H < 1 || W < 1 || P < 2 || L < 2) throw ValidationError("Synth1Config: invalid dimensions");
    if (!(scale_amplitude.lo > 0.0) || scale_amplitude.lo > 1.0 || scale_amplitude.hi < 1.0)
      throw ValidationError("Synth1Config: amplitude interval must be positive and contain 1");
    if (scale_knots < 2) throw ValidationError("Synth1Config: scale_knots must be >= 2");
    for (int t : mutation_phases)
      if (t < 1 || t > T) throw ValidationError("Synth1Config: mutation phase outside 1..T");
    if (mutation_radius_px < 0) throw ValidationError("Synth1Config: negative mutation radius");
    if (!(mutation_abundance >= 0.8 && mutation_abundance <= 1.0))
      throw ValidationError("Synth1Config: mutation abundance must lie in [0.8, 1]");
    if (std::isnan(snr_db)) throw ValidationError("Synth1Config: snr_db is NaN");
    if (bank) {
      bank->validate();
      if (bank->L != L) throw ValidationError("Synth1Config: bank spectra length differs from L");
      if (static_cast<int>(bank->classes.size()) < P)
        throw ValidationError("Synth1Config: bank has fewer classes than P");
    }
  }
};

struct Synth2Config {
  int T = 15;
  int H = 50;
  int W = 50;
  int L = 198;
  int P = 4;
  double snr_db = 30.0;
  AbundanceFieldConfig field;
  std::uint64_t seed = 0;
  std::optional<SpectraBank> bank;  // pure-pixel bank; built-in when absent

  void validate() const {
    if (T < 1 || H < 1 || W < 1 || P < 2 || L < 2) throw ValidationError("Synth2Config: invalid dimensions");
    if (std::isnan(snr_db)) throw ValidationError("Synth2Config: snr_db is NaN");
    if (bank) {
      bank->validate();
      if (bank->L != L) throw ValidationError("Synth2Config: bank spectra length differs from L");
    }
  }
};

namespace detail {

inline std::vector<double> default_wavelengths(int L) {
  std::vector<double> w(L);
  for (int i = 0; i < L; ++i) w[i] = 400.0 + (L > 1 ? 2100.0 * i / (L - 1) : 0.0);
  return w;
}

// Observed[t][l][n] = sum_p m[t][n][l][p] * a[t][p][n], from the stored
// float values so the mixture identity holds at float rounding.
inline HyperCubeSequence mix(const EndmemberSet& e, const AbundanceSequence& a) {
  HyperCubeSequence y;
  y.T = a.T;
  y.L = e.L;
  y.H = a.H;
  y.W = a.W;
  y.data.assign(static_cast<std::size_t>(y.T) * y.phase_size(), 0.0f);
  const int N = a.pixels();
  for (int t = 0; t < a.T; ++t)
    for (int n = 0; n < N; ++n)
      for (int l = 0; l < e.L; ++l) {
        double acc = 0.0;
        for (int p = 0; p < e.P; ++p) acc += double(e.pixel_at(t, n, l, p)) * a.at(t, p, n);
        y.at(t, l, n) = static_cast<float>(acc);
      }
  return y;
}

inline void fill_phase_means(EndmemberSet& e) {
  e.per_phase.assign(static_cast<std::size_t>(e.T) * e.L * e.P, 0.0f);
  for (int t = 0; t < e.T; ++t)
    for (int l = 0; l < e.L; ++l)
      for (int p = 0; p < e.P; ++p) {
        double acc = 0.0;
        for (int n = 0; n < e.N; ++n) acc += e.pixel_at(t, n, l, p);
        e.at(t, l, p) = static_cast<float>(acc / e.N);
      }
}

inline DatasetBundle finish(EndmemberSet e, AbundanceSequence a, double snr_db, std::uint64_t seed) {
  fill_phase_means(e);
  DatasetBundle b;
  b.observed = mix(e, a);
  b.observed.wavelengths = default_wavelengths(e.L);
  if (!(std::isinf(snr_db) && snr_db > 0)) {
    Rng noise(derive_seed(seed, stream::kNoise));
    b.observed = add_noise_snr(b.observed, snr_db, noise);
    b.noise_snr_db = snr_db;
  }
  b.gt_endmembers = std::move(e);
  b.gt_abundances = std::move(a);
  b.seed = seed;
  b.validate();
  return b;
}

}  // namespace detail

inline DatasetBundle generate_synthetic1(const Synth1Config& cfg) {
  cfg.validate();
  const SpectraBank bank = cfg.bank ? *cfg.bank : builtin_bank(cfg.L);
  const int N = cfg.H * cfg.W;

  // Reference signatures: P distinct classes, one random member each.
  std::vector<std::string> names;
  for (const auto& kv : bank.classes) names.push_back(kv.first);
  Rng pick(derive_seed(cfg.seed, stream::kReference));
  std::shuffle(names.begin(), names.end(), pick.engine());
  std::vector<std::vector<double>> reference(cfg.P);
  for (int p = 0; p < cfg.P; ++p) {
    const auto& members = bank.classes.at(names[p]);
    reference[p] = members[pick.index(members.size())];
  }

  EndmemberSet e;
  e.T = cfg.T;
  e.L = cfg.L;
  e.P = cfg.P;
  e.N = N;
  e.per_pixel.assign(static_cast<std::size_t>(cfg.T) * N * cfg.L * cfg.P, 0.0f);
  for (int t = 0; t < cfg.T; ++t) {
    Rng rng(derive_seed(cfg.seed, stream::kScaling, t));
    for (int n = 0; n < N; ++n)
      for (int p = 0; p < cfg.P; ++p) {
        const auto s = piecewise_scaling(cfg.L, cfg.scale_amplitude, cfg.scale_knots, rng);
        float* dst = &e.per_pixel[(static_cast<std::size_t>(t) * N + n) * cfg.L * cfg.P];
        for (int l = 0; l < cfg.L; ++l) dst[l * cfg.P + p] = static_cast<float>(reference[p][l] * s[l]);
      }
  }

  AbundanceSequence a = generate_abundance_fields(cfg.T, cfg.P, cfg.H, cfg.W, cfg.field, cfg.seed);

  // Local abrupt change: a disk where one endmember dominates.
  const float rest = static_cast<float>((1.0 - cfg.mutation_abundance) / (cfg.P - 1));
  for (int t1 : cfg.mutation_phases) {
    const int t = t1 - 1;
    Rng rng(derive_seed(cfg.seed, stream::kMutation, t));
    const double cy = rng.uniform(0.0, cfg.H - 1);
    const double cx = rng.uniform(0.0, cfg.W - 1);
    const int dominant = static_cast<int>(rng.index(cfg.P));
    const double r2 = double(cfg.mutation_radius_px) * cfg.mutation_radius_px;
    for (int y = 0; y < cfg.H; ++y)
      for (int x = 0; x < cfg.W; ++x) {
        if ((y - cy) * (y - cy) + (x - cx) * (x - cx) > r2) continue;
        const int n = y * cfg.W + x;
        for (int p = 0; p < cfg.P; ++p)
          a.at(t, p, n) = p == dominant ? static_cast<float>(cfg.mutation_abundance) : rest;
      }
  }

  return detail::finish(std::move(e), std::move(a), cfg.snr_db, cfg.seed);
}

// Class names used for synth2: the canonical four roles when the bank has
// them, otherwise the first P classes in name order.
inline std::vector<std::string> synth2_classes(const SpectraBank& bank, int P) {
  static const std::vector<std::string> roles = {"water", "vegetation", "soil", "road"};
  std::vector<std::string> out;
  if (P <= static_cast<int>(roles.size())) {
    bool all = true;
    for (int p = 0; p < P; ++p) all = all && bank.classes.count(roles[p]) > 0;
    if (all) return {roles.begin(), roles.begin() + P};
  }
  for (const auto& kv : bank.classes) {
    if (static_cast<int>(out.size()) == P) break;
    out.push_back(kv.first);
  }
  if (static_cast<int>(out.size()) < P) throw ValidationError("synth2: bank has fewer classes than P");
  return out;
}

inline DatasetBundle generate_synthetic2(const Synth2Config& cfg) {
  cfg.validate();
  const SpectraBank bank = cfg.bank ? *cfg.bank : builtin_bank(cfg.L);
  const auto classes = synth2_classes(bank, cfg.P);
  for (const auto& c : classes)
    if (bank.classes.at(c).empty()) throw ValidationError("synth2: empty class bank '" + c + "'");
  const int N = cfg.H * cfg.W;

  EndmemberSet e;
  e.T = cfg.T;
  e.L = cfg.L;
  e.P = cfg.P;
  e.N = N;
  e.per_pixel.assign(static_cast<std::size_t>(cfg.T) * N * cfg.L * cfg.P, 0.0f);
  for (int t = 0; t < cfg.T; ++t) {
    Rng rng(derive_seed(cfg.seed, stream::kSelection, t));
    for (int n = 0; n < N; ++n)
      for (int p = 0; p < cfg.P; ++p) {
        const auto& members = bank.classes.at(classes[p]);
        const auto& s = members[rng.index(members.size())];
        float* dst = &e.per_pixel[(static_cast<std::size_t>(t) * N + n) * cfg.L * cfg.P];
        for (int l = 0; l < cfg.L; ++l) dst[l * cfg.P + p] = static_cast<float>(s[l]);
      }
  }
  AbundanceSequence a = generate_abundance_fields(cfg.T, cfg.P, cfg.H, cfg.W, cfg.field, cfg.seed);
  return detail::finish(std::move(e), std::move(a), cfg.snr_db, cfg.seed);
}

}  // namespace mthu::synth
