#pragma once

// Training objective: root-mean-square reconstruction error, mean spectral
// angle, and a centroid-anchored endmember penalty, combined linearly.
//
// The kernels below work on pixel-major buffers ([T][N][L] for spectra,
// [T][L][P] for endmembers) and optionally return the gradient with respect
// to the estimate. The cube-level overloads transpose and delegate.

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "mthu/datamodel.hpp"
#include "mthu/errors.hpp"
#include "mthu/nn/ops.hpp"

namespace mthu::objective {

struct LossWeights {
  double beta = 1.0;
  double gamma = 0.1;
  double lambda = 1e-4;

  void validate() const {
    if (!(beta >= 0) || !(gamma >= 0) || !(lambda >= 0)) throw ValidationError("LossWeights: weights must be >= 0");
  }
};

struct SadStats {
  std::size_t used = 0;
  std::size_t excluded = 0;  // pixels with a zero-norm spectrum on either side
};

// sqrt(mean((yhat - y)^2)) over all entries.
template <class S>
double re_kernel(std::span<const S> y, std::span<const S> yhat, std::vector<S>* grad = nullptr) {
  if (y.size() != yhat.size() || y.empty()) throw ShapeError("loss_re: size mismatch");
  double ss = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double d = double(yhat[i]) - y[i];
    ss += d * d;
  }
  const double n = double(y.size());
  const double value = std::sqrt(ss / n);
  if (grad) {
    grad->assign(y.size(), S(0));
    if (value > 0)
      for (std::size_t i = 0; i < y.size(); ++i) (*grad)[i] = S((double(yhat[i]) - y[i]) / (n * value));
  }
  return value;
}

// Mean angle between matching length-L spectra of y and yhat.
template <class S>
double sad_kernel(std::span<const S> y, std::span<const S> yhat, int L, std::vector<S>* grad = nullptr,
                  SadStats* stats = nullptr) {
  if (y.size() != yhat.size() || L < 1 || y.size() % L != 0) throw ShapeError("loss_sad: size mismatch");
  const std::size_t pixels = y.size() / L;
  if (grad) grad->assign(y.size(), S(0));
  SadStats st;
  double total = 0.0;
  std::vector<double> coef(grad ? pixels * 3 : 0);
  for (std::size_t n = 0; n < pixels; ++n) {
    const S* a = &y[n * L];
    const S* b = &yhat[n * L];
    double ab = 0, aa = 0, bb = 0;
    for (int l = 0; l < L; ++l) {
      ab += double(a[l]) * b[l];
      aa += double(a[l]) * a[l];
      bb += double(b[l]) * b[l];
    }
    if (aa <= 0.0 || bb <= 0.0) {
      ++st.excluded;
      continue;
    }
    ++st.used;
    const double na = std::sqrt(aa), nb = std::sqrt(bb);
    const double c = ab / (na * nb);
    const double cc = std::clamp(c, -1.0, 1.0);
    total += std::acos(cc);
    if (grad && std::abs(c) < 1.0) {
      // d acos(c) / d b = -(a / (|a||b|) - c b / |b|^2) / sqrt(1 - c^2)
      const double k = -1.0 / std::sqrt(1.0 - c * c);
      coef[3 * n] = k / (na * nb);
      coef[3 * n + 1] = -k * c / bb;
      coef[3 * n + 2] = 1.0;
    }
  }
  if (st.used == 0) throw DegenerateDataError("loss_sad: every spectrum has zero norm");
  if (stats) *stats = st;
  if (grad) {
    const double inv = 1.0 / double(st.used);
    for (std::size_t n = 0; n < pixels; ++n) {
      if (coef[3 * n + 2] == 0.0) continue;
      for (int l = 0; l < L; ++l)
        (*grad)[n * L + l] = S(inv * (coef[3 * n] * y[n * L + l] + coef[3 * n + 1] * yhat[n * L + l]));
    }
  }
  return total / double(st.used);
}

// Sum over phases of ||E_t - m_t 1^T||_F^2; e is [T][L][P], anchors [T][L].
template <class S>
double simplex_kernel(std::span<const S> e, std::span<const S> anchors, int T, int L, int P,
                      std::vector<S>* grad = nullptr) {
  if (e.size() != static_cast<std::size_t>(T) * L * P || anchors.size() != static_cast<std::size_t>(T) * L)
    throw ShapeError("loss_simplex: size mismatch");
  if (grad) grad->assign(e.size(), S(0));
  double total = 0.0;
  for (int t = 0; t < T; ++t)
    for (int l = 0; l < L; ++l)
      for (int p = 0; p < P; ++p) {
        const std::size_t i = (static_cast<std::size_t>(t) * L + l) * P + p;
        const double d = double(e[i]) - anchors[static_cast<std::size_t>(t) * L + l];
        total += d * d;
        if (grad) (*grad)[i] = S(2.0 * d);
      }
  return total;
}

// [T][L][N] -> [T][N][L]
template <class S = float>
std::vector<S> pixel_major(const HyperCubeSequence& y) {
  const int N = y.pixels();
  std::vector<S> out(y.data.size());
  for (int t = 0; t < y.T; ++t)
    for (int l = 0; l < y.L; ++l)
      for (int n = 0; n < N; ++n) out[(static_cast<std::size_t>(t) * N + n) * y.L + l] = S(y.at(t, l, n));
  return out;
}

// Mean observed spectrum of each phase, [T][L].
template <class S = float>
std::vector<S> phase_means(const HyperCubeSequence& y) {
  const int N = y.pixels();
  std::vector<S> m(static_cast<std::size_t>(y.T) * y.L);
  for (int t = 0; t < y.T; ++t)
    for (int l = 0; l < y.L; ++l) {
      double acc = 0.0;
      for (int n = 0; n < N; ++n) acc += y.at(t, l, n);
      m[static_cast<std::size_t>(t) * y.L + l] = S(acc / N);
    }
  return m;
}

namespace detail {
inline void same_shape(const HyperCubeSequence& a, const HyperCubeSequence& b, const char* op) {
  if (a.T != b.T || a.L != b.L || a.H != b.H || a.W != b.W) throw ShapeError(std::string(op) + ": cube shapes differ");
}
}  // namespace detail

inline double loss_re(const HyperCubeSequence& y, const HyperCubeSequence& yhat) {
  detail::same_shape(y, yhat, "loss_re");
  return re_kernel<float>(y.data, yhat.data);
}

inline double loss_sad(const HyperCubeSequence& y, const HyperCubeSequence& yhat, SadStats* stats = nullptr) {
  detail::same_shape(y, yhat, "loss_sad");
  const auto a = pixel_major(y);
  const auto b = pixel_major(yhat);
  return sad_kernel<float>(a, b, y.L, nullptr, stats);
}

inline double loss_simplex(const EndmemberSet& e, std::span<const float> anchors) {
  return simplex_kernel<float>(e.per_phase, anchors, e.T, e.L, e.P);
}

inline double total_loss(const HyperCubeSequence& y, const HyperCubeSequence& yhat, const EndmemberSet& e,
                         std::span<const float> anchors, const LossWeights& w) {
  w.validate();
  double total = 0.0;
  if (w.beta != 0) total += w.beta * loss_re(y, yhat);
  if (w.gamma != 0) total += w.gamma * loss_sad(y, yhat);
  if (w.lambda != 0) total += w.lambda * loss_simplex(e, anchors);
  return total;
}

struct LossBreakdown {
  double re = 0, sad = 0, simplex = 0, total = 0;
};

// Total loss as a tape node. y_pm is the observed cube in pixel-major
// layout matching yhat [T][N][L]; decoder is [T][L][P].
template <class S>
nn::Var total_loss_node(nn::Tape<S>& tp, std::span<const S> y_pm, nn::Var yhat, nn::Var decoder,
                        std::span<const S> anchors, const LossWeights& w, LossBreakdown* parts = nullptr) {
  w.validate();
  const auto& ys = tp.shape(yhat);
  const auto& ds = tp.shape(decoder);
  if (ys.size() != 3 || ds.size() != 3) throw ShapeError("total_loss: expected [T,N,L] and [T,L,P]");
  const auto& yv = tp.value(yhat);
  std::vector<S> g_re, g_sad, g_e;
  LossBreakdown b;
  b.re = re_kernel<S>(y_pm, yv, &g_re);
  b.sad = sad_kernel<S>(y_pm, yv, ys[2], &g_sad);
  b.simplex = simplex_kernel<S>(tp.value(decoder), anchors, ds[0], ds[1], ds[2], &g_e);
  b.total = w.beta * b.re + w.gamma * b.sad + w.lambda * b.simplex;
  std::vector<S> g_y(g_re.size());
  for (std::size_t i = 0; i < g_y.size(); ++i) g_y[i] = S(w.beta * g_re[i] + w.gamma * g_sad[i]);
  for (auto& v : g_e) v = S(w.lambda * v);
  if (parts) *parts = b;
  return nn::scalar_function<S>(tp, S(b.total), {{yhat, std::move(g_y)}, {decoder, std::move(g_e)}});
}

}  // namespace mthu::objective
