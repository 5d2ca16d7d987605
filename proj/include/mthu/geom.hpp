#pragma once

// Geometric unmixing: vertex component analysis (VCA) for endmember
// extraction and fully constrained least squares (FCLS) for abundances.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <vector>

#include <Eigen/Dense>

#include "mthu/datamodel.hpp"
#include "mthu/errors.hpp"
#include "mthu/rng.hpp"

namespace mthu::geom {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Phase t of a cube as an L x N matrix.
inline Matrix phase_matrix(const HyperCubeSequence& y, int t) {
  const int N = y.pixels();
  Matrix m(y.L, N);
  for (int l = 0; l < y.L; ++l)
    for (int n = 0; n < N; ++n) m(l, n) = y.at(t, l, n);
  return m;
}

inline Matrix endmember_matrix(const EndmemberSet& e, int t) {
  Matrix m(e.L, e.P);
  for (int l = 0; l < e.L; ++l)
    for (int p = 0; p < e.P; ++p) m(l, p) = e.at(t, l, p);
  return m;
}

struct VcaResult {
  Matrix endmembers;                        // L x P
  std::vector<int> selected_pixel_indices;  // P
  int projection_dim = 0;
  double snr_estimate_db = 0.0;
};

namespace detail {

// Top-k eigenvectors of a symmetric matrix, descending eigenvalue order, each
// signed so that its largest-magnitude entry is positive.
inline Matrix top_eigenvectors(const Matrix& sym, int k, double& kth_ratio) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(sym);
  if (es.info() != Eigen::Success) throw DegenerateDataError("vca: eigendecomposition failed");
  const int n = static_cast<int>(sym.rows());
  Matrix out(n, k);
  for (int i = 0; i < k; ++i) {
    Vector v = es.eigenvectors().col(n - 1 - i);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    out.col(i) = v;
  }
  const double top = es.eigenvalues()(n - 1);
  kth_ratio = top > 0 ? es.eigenvalues()(n - k) / top : 0.0;
  return out;
}

}  // namespace detail

// Vertex component analysis. Y is L x N (bands x pixels). Directions are
// drawn from a seeded standard normal; subspace/projective projection is
// chosen from the estimated SNR as in the original algorithm.
inline VcaResult vca(const Matrix& Y, int P, std::uint64_t seed) {
  const int L = static_cast<int>(Y.rows());
  const int N = static_cast<int>(Y.cols());
  if (P < 1) throw ValidationError("vca: P must be >= 1");
  if (N < P || L < P) throw ValidationError("vca: need N >= P and L >= P");
  if (!Y.allFinite()) throw ValidationError("vca: non-finite input");
  constexpr double kRankTol = 1e-12;

  VcaResult res;
  if (P == 1) {
    double ratio = 0.0;
    const Matrix u = detail::top_eigenvectors(Y * Y.transpose() / double(N), 1, ratio);
    if (!(ratio > 0)) throw DegenerateDataError("vca: all-zero data");
    const Eigen::RowVectorXd x = u.transpose() * Y;
    Eigen::Index idx = 0;
    x.cwiseAbs().maxCoeff(&idx);
    res.endmembers = u * x(idx);
    res.selected_pixel_indices = {static_cast<int>(idx)};
    res.projection_dim = 1;
    res.snr_estimate_db = std::numeric_limits<double>::infinity();
    res.endmembers = res.endmembers.cwiseMax(0.0);
    return res;
  }

  const Vector r_mean = Y.rowwise().mean();
  const Matrix centered = Y.colwise() - r_mean;
  double ratio = 0.0;
  Matrix Ud = detail::top_eigenvectors(centered * centered.transpose() / double(N), P, ratio);
  Matrix x_p = Ud.transpose() * centered;

  const double p_y = Y.squaredNorm() / N;
  const double p_x = x_p.squaredNorm() / N + r_mean.squaredNorm();
  const double num = p_x - double(P) / L * p_y;
  const double den = p_y - p_x;
  double snr = den <= 0 ? std::numeric_limits<double>::infinity()
               : num <= 0 ? -std::numeric_limits<double>::infinity()
                          : 10.0 * std::log10(num / den);
  const double snr_th = 15.0 + 10.0 * std::log10(double(P));
  res.snr_estimate_db = snr;

  Matrix projected;  // L x N, data after the projection round-trip
  Matrix y;          // P x N, coordinates used for the vertex search
  if (snr < snr_th) {
    const int d = P - 1;
    double r2 = 0.0;
    Ud = detail::top_eigenvectors(centered * centered.transpose() / double(N), d, r2);
    if (!(r2 > kRankTol)) throw DegenerateDataError("vca: data spans fewer than P-1 affine dimensions");
    const Matrix x = x_p.topRows(d);
    projected = (Ud * x).colwise() + r_mean;
    const double c = std::sqrt(x.colwise().squaredNorm().maxCoeff());
    y.resize(P, N);
    y.topRows(d) = x;
    y.row(d).setConstant(c);
    res.projection_dim = d;
  } else {
    const int d = P;
    Ud = detail::top_eigenvectors(Y * Y.transpose() / double(N), d, ratio);
    if (!(ratio > kRankTol)) throw DegenerateDataError("vca: data spans fewer than P dimensions");
    x_p = Ud.transpose() * Y;
    projected = Ud * x_p;
    const Vector u = x_p.rowwise().mean();
    const Eigen::RowVectorXd scale = u.transpose() * x_p;
    y = x_p.array().rowwise() / scale.array();
    res.projection_dim = d;
  }

  Rng rng(derive_seed(seed, stream::kVca));
  Matrix A = Matrix::Zero(P, P);
  A(P - 1, 0) = 1.0;
  res.selected_pixel_indices.assign(P, 0);
  for (int i = 0; i < P; ++i) {
    Vector w(P);
    for (int k = 0; k < P; ++k) w(k) = rng.normal();
    const Vector proj = A * A.completeOrthogonalDecomposition().solve(w);
    Vector f = w - proj;
    const double fn = f.norm();
    if (!(fn > 1e-12 * w.norm())) throw DegenerateDataError("vca: degenerate search direction");
    f /= fn;
    const Eigen::RowVectorXd v = f.transpose() * y;
    Eigen::Index idx = 0;
    v.cwiseAbs().maxCoeff(&idx);
    res.selected_pixel_indices[i] = static_cast<int>(idx);
    A.col(i) = y.col(idx);
  }
  if (A.fullPivLu().rank() < P) throw DegenerateDataError("vca: selected pixels are affinely dependent");

  res.endmembers.resize(L, P);
  for (int i = 0; i < P; ++i) res.endmembers.col(i) = projected.col(res.selected_pixel_indices[i]);
  // Projection round-trip can produce small negatives; endmembers are nonnegative.
  res.endmembers = res.endmembers.cwiseMax(0.0);
  return res;
}

// Per-phase VCA as an EndmemberSet; phase t uses seed stream (seed, t).
inline EndmemberSet vca_sequence(const HyperCubeSequence& y, int P, std::uint64_t seed) {
  EndmemberSet e;
  e.T = y.T;
  e.L = y.L;
  e.P = P;
  e.per_phase.resize(static_cast<std::size_t>(y.T) * y.L * P);
  for (int t = 0; t < y.T; ++t) {
    const auto r = vca(phase_matrix(y, t), P, derive_seed(seed, t));
    for (int l = 0; l < y.L; ++l)
      for (int p = 0; p < P; ++p) e.at(t, l, p) = static_cast<float>(r.endmembers(l, p));
  }
  return e;
}

// ---------------------------------------------------------------------------
// FCLS

namespace detail {

// Lawson-Hanson active-set NNLS: argmin ||A x - b|| subject to x >= 0.
inline Vector nnls(const Matrix& A, const Vector& b, int max_iter = 0) {
  const int n = static_cast<int>(A.cols());
  if (max_iter <= 0) max_iter = 30 * n + 30;
  Vector x = Vector::Zero(n);
  std::vector<bool> passive(n, false);
  const double tol = 10.0 * std::numeric_limits<double>::epsilon() * A.norm() * std::max(1.0, b.norm()) * n;

  auto solve_passive = [&](Vector& s) {
    std::vector<int> idx;
    for (int j = 0; j < n; ++j)
      if (passive[j]) idx.push_back(j);
    Matrix Ap(A.rows(), static_cast<Eigen::Index>(idx.size()));
    for (std::size_t k = 0; k < idx.size(); ++k) Ap.col(k) = A.col(idx[k]);
    const Vector sp = Ap.colPivHouseholderQr().solve(b);
    s.setZero(n);
    for (std::size_t k = 0; k < idx.size(); ++k) s(idx[k]) = sp(k);
  };

  Vector w = A.transpose() * (b - A * x);
  for (int outer = 0; outer < max_iter; ++outer) {
    int j_max = -1;
    double w_max = tol;
    for (int j = 0; j < n; ++j)
      if (!passive[j] && w(j) > w_max) {
        w_max = w(j);
        j_max = j;
      }
    if (j_max < 0) break;
    passive[j_max] = true;

    Vector s;
    for (int inner = 0; inner < max_iter; ++inner) {
      solve_passive(s);
      double min_s = std::numeric_limits<double>::infinity();
      for (int j = 0; j < n; ++j)
        if (passive[j]) min_s = std::min(min_s, s(j));
      if (min_s > 0) break;
      double alpha = std::numeric_limits<double>::infinity();
      for (int j = 0; j < n; ++j)
        if (passive[j] && s(j) <= 0) alpha = std::min(alpha, x(j) / (x(j) - s(j)));
      x += alpha * (s - x);
      for (int j = 0; j < n; ++j)
        if (passive[j] && x(j) <= 1e-15) {
          passive[j] = false;
          x(j) = 0.0;
        }
    }
    x = s;
    w = A.transpose() * (b - A * x);
  }
  return x.cwiseMax(0.0);
}

// Equality-constrained LS on the support set: min ||y - M_S a|| s.t. sum a = 1.
inline Vector simplex_face_solve(const Matrix& gram, const Vector& mty, const std::vector<int>& support, int P,
                                 double& multiplier) {
  const int k = static_cast<int>(support.size());
  Matrix kkt = Matrix::Zero(k + 1, k + 1);
  Vector rhs(k + 1);
  for (int i = 0; i < k; ++i) {
    for (int j = 0; j < k; ++j) kkt(i, j) = gram(support[i], support[j]);
    kkt(i, k) = 1.0;
    kkt(k, i) = 1.0;
    rhs(i) = mty(support[i]);
  }
  rhs(k) = 1.0;
  const Vector sol = kkt.fullPivLu().solve(rhs);
  Vector a = Vector::Zero(P);
  for (int i = 0; i < k; ++i) a(support[i]) = sol(i);
  multiplier = sol(k);
  return a;
}

}  // namespace detail

// KKT residual of min 0.5||y - M a||^2 s.t. a >= 0, 1'a = 1: stationarity on
// the support, dual feasibility off it, primal feasibility.
inline double fcls_kkt_residual(const Vector& y, const Matrix& M, const Vector& a) {
  const Vector g = M.transpose() * (M * a - y);
  const int P = static_cast<int>(a.size());
  double mu = 0.0;
  int support = 0;
  for (int i = 0; i < P; ++i)
    if (a(i) > 0) {
      mu -= g(i);
      ++support;
    }
  if (support == 0) return std::numeric_limits<double>::infinity();
  mu /= support;
  double r = std::abs(a.sum() - 1.0);
  for (int i = 0; i < P; ++i) {
    if (a(i) < 0) r = std::max(r, -a(i));
    if (a(i) > 0) r = std::max(r, std::abs(g(i) + mu));
    else r = std::max(r, -(g(i) + mu));
  }
  return r;
}

class FclsSolver {
 public:
  explicit FclsSolver(const Matrix& M) : M_(M) {
    if (M.rows() < 1 || M.cols() < 1) throw ShapeError("fcls: empty endmember matrix");
    if (!M.allFinite()) throw ValidationError("fcls: non-finite endmember matrix");
    Eigen::JacobiSVD<Matrix> svd(M);
    const auto& sv = svd.singularValues();
    if (M.cols() > M.rows() || !(sv(sv.size() - 1) > 1e-10 * sv(0)))
      throw ConditioningError("fcls: endmember matrix is rank deficient");
    const int L = static_cast<int>(M.rows());
    const int P = static_cast<int>(M.cols());
    delta_ = 1e5 * M.cwiseAbs().maxCoeff();
    augmented_.resize(L + 1, P);
    augmented_.topRows(L) = M;
    augmented_.row(L).setConstant(delta_);
    gram_ = M.transpose() * M;
  }

  Vector solve(const Vector& y) const {
    const int L = static_cast<int>(M_.rows());
    const int P = static_cast<int>(M_.cols());
    if (y.size() != L) throw ShapeError("fcls: pixel length differs from endmember rows");
    Vector b(L + 1);
    b.head(L) = y;
    b(L) = delta_;
    Vector a = detail::nnls(augmented_, b);

    // Polish on the exact constraint set with a primal active-set loop,
    // warm-started from the ASC-augmented NNLS support.
    const double s = a.sum();
    if (s > 0) a /= s;
    else {
      a.setZero();
      Eigen::Index best = 0;
      (M_.colwise() - y).colwise().squaredNorm().minCoeff(&best);
      a(best) = 1.0;
    }
    const Vector mty = M_.transpose() * y;
    std::vector<bool> working(P);
    for (int i = 0; i < P; ++i) working[i] = a(i) > 0;
    for (int iter = 0; iter < 20 * P + 20; ++iter) {
      std::vector<int> support;
      for (int i = 0; i < P; ++i)
        if (working[i]) support.push_back(i);
      double mu = 0.0;
      const Vector z = detail::simplex_face_solve(gram_, mty, support, P, mu);
      bool feasible = true;
      for (int i : support) feasible = feasible && z(i) >= 0.0;
      if (feasible) {
        a = z;
        // Multiplier of coordinate i off the working set is g_i + mu.
        const Vector g = gram_ * a - mty;
        int enter = -1;
        double most_negative = -1e-13 * (1.0 + g.cwiseAbs().maxCoeff());
        for (int i = 0; i < P; ++i)
          if (!working[i] && g(i) + mu < most_negative) {
            most_negative = g(i) + mu;
            enter = i;
          }
        if (enter < 0) break;
        working[enter] = true;
        continue;
      }
      double alpha = 1.0;
      int blocking = -1;
      for (int i : support)
        if (z(i) < 0) {
          const double step = a(i) / (a(i) - z(i));
          if (step < alpha) {
            alpha = step;
            blocking = i;
          }
        }
      a += alpha * (z - a);
      if (blocking >= 0) a(blocking) = 0.0;
      for (int i : support)
        if (a(i) <= 1e-15) {
          a(i) = 0.0;
          working[i] = false;
        }
    }
    return a;
  }

 private:
  Matrix M_;
  Matrix augmented_;
  Matrix gram_;
  double delta_ = 1.0;
};

// Abundances (P x N) for every column of Y (L x N).
inline Matrix fcls(const Matrix& Y, const Matrix& M) {
  if (Y.rows() != M.rows()) throw ShapeError("fcls: Y and M band counts differ");
  const FclsSolver solver(M);
  Matrix out(M.cols(), Y.cols());
  for (Eigen::Index n = 0; n < Y.cols(); ++n) out.col(n) = solver.solve(Y.col(n));
  return out;
}

inline AbundanceSequence fcls_sequence(const HyperCubeSequence& seq, const EndmemberSet& M) {
  if (M.T != seq.T || M.L != seq.L) throw ShapeError("fcls_sequence: endmember set does not match sequence");
  AbundanceSequence a;
  a.T = seq.T;
  a.P = M.P;
  a.H = seq.H;
  a.W = seq.W;
  a.data.resize(static_cast<std::size_t>(a.T) * a.P * a.pixels());
  for (int t = 0; t < seq.T; ++t) {
    const Matrix abund = fcls(phase_matrix(seq, t), endmember_matrix(M, t));
    for (int p = 0; p < a.P; ++p)
      for (int n = 0; n < a.pixels(); ++n) a.at(t, p, n) = static_cast<float>(abund(p, n));
  }
  return a;
}

}  // namespace mthu::geom
