#pragma once

// Value types for multitemporal hyperspectral data and the on-disk dataset
// directory format.
//
// Layouts (all row-major, pixel index n = row * W + col):
//   HyperCubeSequence::data   [T][L][H][W]
//   EndmemberSet::per_phase   [T][L][P]
//   EndmemberSet::per_pixel   [T][N][L][P]   (optional)
//   AbundanceSequence::data   [T][P][H][W]

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "mthu/errors.hpp"

namespace mthu {

inline constexpr double kAscTolerance = 1e-5;
inline constexpr double kAncSlack = 1e-7;

struct HyperCubeSequence {
  int T = 0;
  int L = 0;
  int H = 0;
  int W = 0;
  std::vector<float> data;
  std::vector<double> wavelengths;         // optional, length L
  std::vector<std::string> phase_labels;   // optional, length T

  int pixels() const { return H * W; }
  std::size_t phase_size() const { return static_cast<std::size_t>(L) * H * W; }

  float& at(int t, int l, int n) { return data[(static_cast<std::size_t>(t) * L + l) * pixels() + n]; }
  float at(int t, int l, int n) const { return data[(static_cast<std::size_t>(t) * L + l) * pixels() + n]; }

  std::span<const float> phase(int t) const {
    return {data.data() + static_cast<std::size_t>(t) * phase_size(), phase_size()};
  }
  std::span<float> phase(int t) {
    return {data.data() + static_cast<std::size_t>(t) * phase_size(), phase_size()};
  }

  void validate() const {
    if (T < 1 || L < 2 || H < 1 || W < 1)
      throw ValidationError("HyperCubeSequence: invalid dimensions T=" + std::to_string(T) +
                            " L=" + std::to_string(L) + " H=" + std::to_string(H) +
                            " W=" + std::to_string(W));
    if (data.size() != static_cast<std::size_t>(T) * phase_size())
      throw ValidationError("HyperCubeSequence: data size does not match T*L*H*W");
    if (!wavelengths.empty() && wavelengths.size() != static_cast<std::size_t>(L))
      throw ValidationError("HyperCubeSequence: wavelengths length differs from L");
    if (!phase_labels.empty() && phase_labels.size() != static_cast<std::size_t>(T))
      throw ValidationError("HyperCubeSequence: phase_labels length differs from T");
    for (float v : data)
      if (!std::isfinite(v)) throw ValidationError("HyperCubeSequence: non-finite value");
  }

  bool operator==(const HyperCubeSequence&) const = default;
};

struct EndmemberSet {
  int T = 0;
  int L = 0;
  int P = 0;
  std::vector<float> per_phase;   // [T][L][P]
  int N = 0;                      // pixel count of per_pixel, 0 when absent
  std::vector<float> per_pixel;   // [T][N][L][P]

  bool has_per_pixel() const { return !per_pixel.empty(); }

  float& at(int t, int l, int p) { return per_phase[(static_cast<std::size_t>(t) * L + l) * P + p]; }
  float at(int t, int l, int p) const { return per_phase[(static_cast<std::size_t>(t) * L + l) * P + p]; }

  float pixel_at(int t, int n, int l, int p) const {
    return per_pixel[((static_cast<std::size_t>(t) * N + n) * L + l) * P + p];
  }

  std::span<const float> phase(int t) const {
    return {per_phase.data() + static_cast<std::size_t>(t) * L * P, static_cast<std::size_t>(L) * P};
  }

  void validate() const {
    if (T < 1 || L < 1 || P < 1) throw ValidationError("EndmemberSet: invalid dimensions");
    if (per_phase.size() != static_cast<std::size_t>(T) * L * P)
      throw ValidationError("EndmemberSet: per_phase size does not match T*L*P");
    if (has_per_pixel() && per_pixel.size() != static_cast<std::size_t>(T) * N * L * P)
      throw ValidationError("EndmemberSet: per_pixel size does not match T*N*L*P");
    for (float v : per_phase)
      if (!std::isfinite(v) || v < 0.0f)
        throw ValidationError("EndmemberSet: entries must be finite and nonnegative");
    for (float v : per_pixel)
      if (!std::isfinite(v) || v < 0.0f)
        throw ValidationError("EndmemberSet: per-pixel entries must be finite and nonnegative");
    for (int t = 0; t < T; ++t)
      for (int p = 0; p < P; ++p) {
        double norm = 0.0;
        for (int l = 0; l < L; ++l) norm += double(at(t, l, p)) * at(t, l, p);
        if (norm <= 0.0) throw ValidationError("EndmemberSet: zero-norm endmember column");
      }
  }

  bool operator==(const EndmemberSet&) const = default;
};

struct AbundanceSequence {
  int T = 0;
  int P = 0;
  int H = 0;
  int W = 0;
  std::vector<float> data;  // [T][P][H][W]

  int pixels() const { return H * W; }
  float& at(int t, int p, int n) { return data[(static_cast<std::size_t>(t) * P + p) * pixels() + n]; }
  float at(int t, int p, int n) const { return data[(static_cast<std::size_t>(t) * P + p) * pixels() + n]; }

  void validate_shape() const {
    if (T < 1 || P < 1 || H < 1 || W < 1) throw ValidationError("AbundanceSequence: invalid dimensions");
    if (data.size() != static_cast<std::size_t>(T) * P * H * W)
      throw ValidationError("AbundanceSequence: data size does not match T*P*H*W");
  }

  bool operator==(const AbundanceSequence&) const = default;
};

struct DatasetBundle {
  HyperCubeSequence observed;
  std::optional<EndmemberSet> gt_endmembers;
  std::optional<AbundanceSequence> gt_abundances;
  std::optional<double> noise_snr_db;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const DatasetBundle&) const = default;
};

enum class ViolationKind { kNonnegativity, kSumToOne };

struct AbundanceViolation {
  int t = 0;
  int pixel = 0;
  ViolationKind kind = ViolationKind::kSumToOne;
  double magnitude = 0.0;
};

// Every (phase, pixel) where an abundance drops below -tol (ANC) or the
// abundance vector sums outside [1 - tol, 1 + tol] (ASC). ANC reports the
// most negative entry of the pixel.
inline std::vector<AbundanceViolation> validate_abundance(const AbundanceSequence& a, double tol) {
  std::vector<AbundanceViolation> out;
  const int n_px = a.pixels();
  for (int t = 0; t < a.T; ++t) {
    for (int n = 0; n < n_px; ++n) {
      double sum = 0.0;
      double most_negative = 0.0;
      bool finite = true;
      for (int p = 0; p < a.P; ++p) {
        const double v = a.at(t, p, n);
        if (!std::isfinite(v)) finite = false;
        sum += v;
        most_negative = std::min(most_negative, v);
      }
      if (!finite) {
        out.push_back({t, n, ViolationKind::kSumToOne, std::numeric_limits<double>::infinity()});
        continue;
      }
      if (most_negative < -tol) out.push_back({t, n, ViolationKind::kNonnegativity, -most_negative});
      if (std::abs(sum - 1.0) > tol) out.push_back({t, n, ViolationKind::kSumToOne, std::abs(sum - 1.0)});
    }
  }
  return out;
}

inline void DatasetBundle::validate() const {
  observed.validate();
  const auto& y = observed;
  if (gt_endmembers) {
    gt_endmembers->validate();
    if (gt_endmembers->T != y.T || gt_endmembers->L != y.L)
      throw ValidationError("DatasetBundle: gt endmembers disagree with observed T/L");
    if (gt_endmembers->has_per_pixel() && gt_endmembers->N != y.pixels())
      throw ValidationError("DatasetBundle: per-pixel endmembers disagree with observed N");
  }
  if (gt_abundances) {
    gt_abundances->validate_shape();
    if (gt_abundances->T != y.T || gt_abundances->H != y.H || gt_abundances->W != y.W)
      throw ValidationError("DatasetBundle: gt abundances disagree with observed dimensions");
    if (gt_endmembers && gt_endmembers->P != gt_abundances->P)
      throw ValidationError("DatasetBundle: gt endmember and abundance P disagree");
    if (!validate_abundance(*gt_abundances, kAscTolerance).empty())
      throw ValidationError("DatasetBundle: gt abundances violate ANC/ASC");
  }
}

// ---------------------------------------------------------------------------
// Raw little-endian float32 files.

namespace io {

inline std::string phase_file(const char* stem, int t) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s_%02d.f32", stem, t);
  return buf;
}

inline void write_f32(const std::filesystem::path& path, std::span<const float> values) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open for writing: " + path.string());
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(values.data()),
             static_cast<std::streamsize>(values.size() * sizeof(float)));
  } else {
    for (float v : values) {
      auto bits = std::bit_cast<std::uint32_t>(v);
      unsigned char b[4] = {static_cast<unsigned char>(bits), static_cast<unsigned char>(bits >> 8),
                            static_cast<unsigned char>(bits >> 16), static_cast<unsigned char>(bits >> 24)};
      os.write(reinterpret_cast<const char*>(b), 4);
    }
  }
  if (!os) throw FormatError("write failed: " + path.string());
}

inline void read_f32(const std::filesystem::path& path, std::span<float> out) {
  std::error_code ec;
  if (!std::filesystem::exists(path, ec)) throw FormatError("missing file: " + path.string());
  const auto bytes = std::filesystem::file_size(path, ec);
  if (ec || bytes != out.size() * sizeof(float))
    throw FormatError("size mismatch in " + path.string() + ": expected " +
                      std::to_string(out.size() * sizeof(float)) + " bytes, found " +
                      std::to_string(ec ? 0 : bytes));
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open: " + path.string());
  is.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(bytes));
  if (!is) throw FormatError("read failed: " + path.string());
  if constexpr (std::endian::native != std::endian::little) {
    for (float& v : out) {
      auto bits = std::bit_cast<std::uint32_t>(v);
      bits = (bits >> 24) | ((bits >> 8) & 0xFF00u) | ((bits << 8) & 0xFF0000u) | (bits << 24);
      v = std::bit_cast<float>(bits);
    }
  }
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("missing file: " + path.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("invalid JSON in " + path.string() + ": " + e.what());
  }
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open for writing: " + path.string());
  os << text;
  if (!os) throw FormatError("write failed: " + path.string());
}

}  // namespace io

// ---------------------------------------------------------------------------
// Dataset directory.

inline void save_bundle(const DatasetBundle& b, const std::filesystem::path& dir) {
  b.validate();
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw FormatError("cannot create directory " + dir.string() + ": " + ec.message());

  const auto& y = b.observed;
  nlohmann::json meta;
  meta["T"] = y.T;
  meta["L"] = y.L;
  meta["H"] = y.H;
  meta["W"] = y.W;
  if (b.gt_endmembers) meta["P"] = b.gt_endmembers->P;
  else if (b.gt_abundances) meta["P"] = b.gt_abundances->P;
  if (b.noise_snr_db) {
    meta["noise_snr_db"] = *b.noise_snr_db;
    meta["snr_definition"] = "global";
  }
  meta["seed"] = b.seed;
  // Ground-truth flags are written only when the corresponding files exist.
  if (b.gt_endmembers) meta["has_gt_endmembers"] = true;
  if (b.gt_abundances) meta["has_gt_abundances"] = true;
  if (b.gt_endmembers && b.gt_endmembers->has_per_pixel()) meta["has_per_pixel_endmembers"] = true;
  if (!y.wavelengths.empty()) meta["wavelengths"] = y.wavelengths;
  if (!y.phase_labels.empty()) meta["phase_labels"] = y.phase_labels;
  io::write_text(dir / "meta.json", meta.dump(2) + "\n");

  for (int t = 0; t < y.T; ++t) io::write_f32(dir / io::phase_file("phase", t), y.phase(t));

  if (b.gt_endmembers) {
    const auto& e = *b.gt_endmembers;
    for (int t = 0; t < e.T; ++t) io::write_f32(dir / io::phase_file("gt_endmembers", t), e.phase(t));
    if (e.has_per_pixel()) {
      const std::size_t stride = static_cast<std::size_t>(e.N) * e.L * e.P;
      for (int t = 0; t < e.T; ++t)
        io::write_f32(dir / io::phase_file("gt_endmembers_px", t),
                      std::span<const float>(e.per_pixel.data() + t * stride, stride));
    }
  }
  if (b.gt_abundances) {
    const auto& a = *b.gt_abundances;
    const std::size_t stride = static_cast<std::size_t>(a.P) * a.pixels();
    for (int t = 0; t < a.T; ++t)
      io::write_f32(dir / io::phase_file("gt_abundance", t),
                    std::span<const float>(a.data.data() + t * stride, stride));
  }
}

inline DatasetBundle load_bundle(const std::filesystem::path& dir) {
  const auto meta_path = dir / "meta.json";
  const nlohmann::json meta = io::read_json(meta_path);

  auto need_int = [&](const char* key) {
    if (!meta.contains(key) || !meta[key].is_number_integer())
      throw FormatError("meta.json: missing integer key '" + std::string(key) + "'");
    return meta[key].get<int>();
  };
  auto flag = [&](const char* key) { return meta.contains(key) && meta[key].get<bool>(); };

  DatasetBundle b;
  auto& y = b.observed;
  y.T = need_int("T");
  y.L = need_int("L");
  y.H = need_int("H");
  y.W = need_int("W");
  if (y.T < 1 || y.L < 2 || y.H < 1 || y.W < 1) throw FormatError("meta.json: invalid dimensions");
  if (meta.contains("wavelengths")) y.wavelengths = meta["wavelengths"].get<std::vector<double>>();
  if (meta.contains("phase_labels")) y.phase_labels = meta["phase_labels"].get<std::vector<std::string>>();
  if (meta.contains("noise_snr_db")) b.noise_snr_db = meta["noise_snr_db"].get<double>();
  if (meta.contains("seed")) b.seed = meta["seed"].get<std::uint64_t>();

  y.data.resize(static_cast<std::size_t>(y.T) * y.phase_size());
  for (int t = 0; t < y.T; ++t) io::read_f32(dir / io::phase_file("phase", t), y.phase(t));

  const bool has_e = flag("has_gt_endmembers");
  const bool has_a = flag("has_gt_abundances");
  const bool has_px = flag("has_per_pixel_endmembers");
  if (has_e || has_a || has_px) {
    const int P = need_int("P");
    if (P < 1) throw FormatError("meta.json: invalid P");
    if (has_e || has_px) {
      EndmemberSet e;
      e.T = y.T;
      e.L = y.L;
      e.P = P;
      e.per_phase.resize(static_cast<std::size_t>(e.T) * e.L * e.P);
      if (!has_e) throw FormatError("meta.json: per-pixel endmembers require gt endmembers");
      for (int t = 0; t < e.T; ++t)
        io::read_f32(dir / io::phase_file("gt_endmembers", t),
                     std::span<float>(e.per_phase.data() + static_cast<std::size_t>(t) * e.L * e.P,
                                      static_cast<std::size_t>(e.L) * e.P));
      if (has_px) {
        e.N = y.pixels();
        const std::size_t stride = static_cast<std::size_t>(e.N) * e.L * e.P;
        e.per_pixel.resize(stride * e.T);
        for (int t = 0; t < e.T; ++t)
          io::read_f32(dir / io::phase_file("gt_endmembers_px", t),
                       std::span<float>(e.per_pixel.data() + t * stride, stride));
      }
      b.gt_endmembers = std::move(e);
    }
    if (has_a) {
      AbundanceSequence a;
      a.T = y.T;
      a.P = P;
      a.H = y.H;
      a.W = y.W;
      const std::size_t stride = static_cast<std::size_t>(P) * a.pixels();
      a.data.resize(stride * a.T);
      for (int t = 0; t < a.T; ++t)
        io::read_f32(dir / io::phase_file("gt_abundance", t), std::span<float>(a.data.data() + t * stride, stride));
      b.gt_abundances = std::move(a);
    }
  }
  b.validate();
  return b;
}

}  // namespace mthu
