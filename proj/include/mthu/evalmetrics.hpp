#pragma once

// Evaluation metrics with permutation alignment of estimated endmembers.
//
// Permutations map estimate index -> truth index: perm[e] = j means estimated
// endmember e is compared with true endmember j.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mthu/datamodel.hpp"
#include "mthu/errors.hpp"

namespace mthu::metrics {

inline constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();

// Minimum-cost perfect matching of a square cost matrix (row-major n x n),
// Hungarian algorithm with potentials. Returns assignment[row] = column.
inline std::vector<int> solve_assignment(const std::vector<double>& cost, int n) {
  if (n < 0 || cost.size() != static_cast<std::size_t>(n) * n) throw ShapeError("solve_assignment: cost must be n x n");
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<int> match(n + 1, 0), way(n + 1, 0);  // match[col] = row, 1-based
  std::vector<char> used(n + 1);
  for (int i = 1; i <= n; ++i) {
    match[0] = i;
    int j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const int i0 = match[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost[static_cast<std::size_t>(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match[j0] != 0);
    do {
      const int j1 = way[j0];
      match[j0] = match[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> assignment(n);
  for (int j = 1; j <= n; ++j) assignment[match[j] - 1] = j - 1;
  return assignment;
}

inline double spectral_angle(const float* a, const float* b, int L, std::ptrdiff_t stride_a = 1,
                             std::ptrdiff_t stride_b = 1) {
  double ab = 0, aa = 0, bb = 0;
  for (int l = 0; l < L; ++l) {
    const double x = a[l * stride_a], y = b[l * stride_b];
    ab += x * y;
    aa += x * x;
    bb += y * y;
  }
  if (aa <= 0.0 || bb <= 0.0) throw DegenerateDataError("spectral angle of a zero-norm spectrum");
  return std::acos(std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0));
}

// Temporal mean of the per-phase endmembers, [L][P].
inline std::vector<float> mean_endmembers(const EndmemberSet& e) {
  std::vector<double> acc(static_cast<std::size_t>(e.L) * e.P, 0.0);
  for (int t = 0; t < e.T; ++t)
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += e.per_phase[static_cast<std::size_t>(t) * e.L * e.P + i];
  std::vector<float> out(acc.size());
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<float>(acc[i] / e.T);
  return out;
}

// SAD cost between columns of two [L][P] matrices, cost[e * P + j].
inline std::vector<double> sad_cost(const std::vector<float>& est, const std::vector<float>& truth, int L, int P) {
  std::vector<double> cost(static_cast<std::size_t>(P) * P);
  for (int e = 0; e < P; ++e)
    for (int j = 0; j < P; ++j) cost[static_cast<std::size_t>(e) * P + j] = spectral_angle(&est[e], &truth[j], L, P, P);
  return cost;
}

inline std::vector<int> align_endmembers(const EndmemberSet& est, const EndmemberSet& truth) {
  if (est.P != truth.P || est.L != truth.L) throw ShapeError("align_endmembers: endmember sets differ in P or L");
  return solve_assignment(sad_cost(mean_endmembers(est), mean_endmembers(truth), est.L, est.P), est.P);
}

inline void check_perm(const std::vector<int>& perm, int P) {
  if (static_cast<int>(perm.size()) != P) throw ShapeError("permutation length differs from P");
  std::vector<char> seen(P, 0);
  for (int j : perm) {
    if (j < 0 || j >= P || seen[j]) throw ValidationError("permutation is not a bijection");
    seen[j] = 1;
  }
}

inline std::vector<int> identity_perm(int P) {
  std::vector<int> p(P);
  for (int i = 0; i < P; ++i) p[i] = i;
  return p;
}

inline double nrmse_a(const AbundanceSequence& est, const AbundanceSequence& truth, const std::vector<int>& perm) {
  if (est.T != truth.T || est.P != truth.P || est.H != truth.H || est.W != truth.W)
    throw ShapeError("nrmse_a: abundance shapes differ");
  check_perm(perm, est.P);
  const int N = est.pixels();
  double acc = 0.0;
  for (int t = 0; t < est.T; ++t) {
    double num = 0.0, den = 0.0;
    for (int e = 0; e < est.P; ++e)
      for (int n = 0; n < N; ++n) {
        const double a = truth.at(t, perm[e], n);
        const double d = a - est.at(t, e, n);
        num += d * d;
      }
    for (std::size_t i = 0; i < static_cast<std::size_t>(truth.P) * N; ++i) {
      const double a = truth.data[static_cast<std::size_t>(t) * truth.P * N + i];
      den += a * a;
    }
    if (den <= 0.0) throw DegenerateDataError("nrmse_a: zero-norm truth phase " + std::to_string(t));
    acc += num / den;
  }
  return std::sqrt(acc / est.T);
}

namespace detail {
// Endmember e at (t, pixel n, band l); per-phase sets broadcast over pixels.
inline double column_at(const EndmemberSet& s, int t, int n, int l, int e) {
  return s.has_per_pixel() ? s.pixel_at(t, n, l, e) : s.at(t, l, e);
}
}  // namespace detail

// Truth per pixel when available, otherwise per phase. A per-phase estimate
// is broadcast over pixels.
inline double nrmse_m(const EndmemberSet& est, const EndmemberSet& truth, const std::vector<int>& perm) {
  if (est.T != truth.T || est.L != truth.L || est.P != truth.P) throw ShapeError("nrmse_m: endmember shapes differ");
  check_perm(perm, est.P);
  const int L = est.L, P = est.P;
  const int N = truth.has_per_pixel() ? truth.N : 1;
  double acc = 0.0;
  for (int t = 0; t < est.T; ++t)
    for (int n = 0; n < N; ++n) {
      double num = 0.0, den = 0.0;
      for (int l = 0; l < L; ++l)
        for (int e = 0; e < P; ++e) {
          const double m = detail::column_at(truth, t, n, l, perm[e]);
          const double d = m - detail::column_at(est, t, est.has_per_pixel() ? n : 0, l, e);
          num += d * d;
          den += m * m;
        }
      if (den <= 0.0) throw DegenerateDataError("nrmse_m: zero-norm truth endmembers");
      acc += num / den;
    }
  return std::sqrt(acc / (double(N) * est.T));
}

inline double sam_m(const EndmemberSet& est, const EndmemberSet& truth, const std::vector<int>& perm) {
  if (est.T != truth.T || est.L != truth.L || est.P != truth.P) throw ShapeError("sam_m: endmember shapes differ");
  check_perm(perm, est.P);
  const int L = est.L, P = est.P;
  const int N = truth.has_per_pixel() ? truth.N : 1;
  double acc = 0.0;
  std::vector<float> tcol(L), ecol(L);
  for (int t = 0; t < est.T; ++t)
    for (int n = 0; n < N; ++n)
      for (int e = 0; e < P; ++e) {
        for (int l = 0; l < L; ++l) {
          tcol[l] = static_cast<float>(detail::column_at(truth, t, n, l, perm[e]));
          ecol[l] = static_cast<float>(detail::column_at(est, t, est.has_per_pixel() ? n : 0, l, e));
        }
        acc += spectral_angle(tcol.data(), ecol.data(), L);
      }
  return acc / (double(est.T) * N * P);
}

inline double nrmse_y(const HyperCubeSequence& y, const EndmemberSet& est_e, const AbundanceSequence& est_a) {
  if (est_e.T != y.T || est_e.L != y.L || est_a.T != y.T || est_a.P != est_e.P || est_a.H != y.H || est_a.W != y.W)
    throw ShapeError("nrmse_y: shapes differ");
  const int N = y.pixels(), L = y.L, P = est_e.P;
  double acc = 0.0;
  for (int t = 0; t < y.T; ++t) {
    double num = 0.0, den = 0.0;
    for (int n = 0; n < N; ++n)
      for (int l = 0; l < L; ++l) {
        double r = 0.0;
        for (int p = 0; p < P; ++p) r += detail::column_at(est_e, t, est_e.has_per_pixel() ? n : 0, l, p) * est_a.at(t, p, n);
        const double v = y.at(t, l, n);
        num += (v - r) * (v - r);
        den += v * v;
      }
    if (den <= 0.0) throw DegenerateDataError("nrmse_y: zero-norm phase " + std::to_string(t));
    acc += num / den;
  }
  return std::sqrt(acc / y.T);
}

struct MetricsReport {
  double nrmse_a = kMissing;
  double nrmse_m = kMissing;
  double sam_m = kMissing;
  double nrmse_y = kMissing;
  double runtime_s = 0.0;
  std::vector<int> permutation;
  bool abundance_truth = false;
  std::string endmember_truth = "none";  // "per_pixel", "per_phase" or "none"
};

// Aligns the estimate to the ground truth and computes every metric the
// available truth supports; unsupported metrics stay NaN.
inline MetricsReport evaluate(const DatasetBundle& bundle, const AbundanceSequence& est_a, const EndmemberSet& est_e,
                              double runtime_s) {
  MetricsReport r;
  r.runtime_s = runtime_s;
  r.nrmse_y = nrmse_y(bundle.observed, est_e, est_a);
  r.permutation = identity_perm(est_e.P);
  if (bundle.gt_endmembers) {
    const auto& gt = *bundle.gt_endmembers;
    r.permutation = align_endmembers(est_e, gt);
    r.nrmse_m = nrmse_m(est_e, gt, r.permutation);
    r.sam_m = sam_m(est_e, gt, r.permutation);
    r.endmember_truth = gt.has_per_pixel() ? "per_pixel" : "per_phase";
  }
  if (bundle.gt_abundances) {
    r.nrmse_a = nrmse_a(est_a, *bundle.gt_abundances, r.permutation);
    r.abundance_truth = true;
  }
  return r;
}

struct MetricsRow {
  std::string method;
  std::string dataset;
  std::uint64_t seed = 0;
  MetricsReport report;
};

inline constexpr const char* kMetricsHeader = "method,dataset,seed,nrmse_a,nrmse_m,sam_m,nrmse_y,runtime_s";

inline std::string format_value(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::string metrics_csv(const std::vector<MetricsRow>& rows) {
  std::ostringstream os;
  os << kMetricsHeader << '\n';
  for (const auto& r : rows)
    os << r.method << ',' << r.dataset << ',' << r.seed << ',' << format_value(r.report.nrmse_a) << ','
       << format_value(r.report.nrmse_m) << ',' << format_value(r.report.sam_m) << ','
       << format_value(r.report.nrmse_y) << ',' << format_value(r.report.runtime_s) << '\n';
  return os.str();
}

inline std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open " + path.string());
  std::string line;
  if (!std::getline(is, line) || line != kMetricsHeader) throw FormatError(path.string() + ": unexpected header");
  std::vector<MetricsRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 8) throw FormatError(path.string() + ": expected 8 fields in '" + line + "'");
    auto num = [&](const std::string& s) { return s == "nan" ? kMissing : std::stod(s); };
    MetricsRow r;
    r.method = f[0];
    r.dataset = f[1];
    r.seed = std::stoull(f[2]);
    r.report.nrmse_a = num(f[3]);
    r.report.nrmse_m = num(f[4]);
    r.report.sam_m = num(f[5]);
    r.report.nrmse_y = num(f[6]);
    r.report.runtime_s = num(f[7]);
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace mthu::metrics
