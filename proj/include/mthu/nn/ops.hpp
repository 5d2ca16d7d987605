#pragma once

// Differentiable tensor operations recorded on a Tape.
//
// Convolution layout is [B][C][H][W]; token layout is [B][R][C] (rows of
// C-vectors). Every op computes its output eagerly and registers an adjoint
// that accumulates into the gradients of the inputs that need one.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "mthu/errors.hpp"
#include "mthu/nn/tape.hpp"
#include "mthu/rng.hpp"

namespace mthu::nn {

template <class S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MapMat = Eigen::Map<RowMat<S>>;
template <class S>
using CMapMat = Eigen::Map<const RowMat<S>>;

// When set, piecewise ops append the branch they took for every element
// (leaky_relu: sign, pool_max: winning row). Two evaluations with equal
// patterns lie on the same smooth piece of the network function.
inline thread_local std::vector<std::uint32_t>* branch_pattern = nullptr;

namespace detail {

inline void require(bool ok, const char* op, const std::string& msg) {
  if (!ok) throw ShapeError(std::string(op) + ": " + msg);
}

template <class S>
void accumulate(std::vector<S>& dst, const std::vector<S>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <class S>
Var add(Tape<S>& tp, Var a, Var b) {
  const auto& va = tp.value(a);
  const auto& vb = tp.value(b);
  detail::require(va.size() == vb.size(), "add", "size mismatch " + shape_str(tp.shape(a)) + " vs " + shape_str(tp.shape(b)));
  std::vector<S> out(va.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] + vb[i];
  Var o = tp.emit(tp.shape(a), std::move(out), {a, b});
  tp.on_backward(o, [&tp, a, b, o] {
    const auto& g = tp.grad(o);
    if (tp.needs_grad(a)) detail::accumulate(tp.grad(a), g);
    if (tp.needs_grad(b)) detail::accumulate(tp.grad(b), g);
  });
  return o;
}

template <class S>
Var sub(Tape<S>& tp, Var a, Var b) {
  const auto& va = tp.value(a);
  const auto& vb = tp.value(b);
  detail::require(va.size() == vb.size(), "sub", "size mismatch");
  std::vector<S> out(va.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] - vb[i];
  Var o = tp.emit(tp.shape(a), std::move(out), {a, b});
  tp.on_backward(o, [&tp, a, b, o] {
    const auto& g = tp.grad(o);
    if (tp.needs_grad(a)) detail::accumulate(tp.grad(a), g);
    if (tp.needs_grad(b)) {
      auto& gb = tp.grad(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
  return o;
}

template <class S>
Var mul(Tape<S>& tp, Var a, Var b) {
  const auto& va = tp.value(a);
  const auto& vb = tp.value(b);
  detail::require(va.size() == vb.size(), "mul", "size mismatch");
  std::vector<S> out(va.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] * vb[i];
  Var o = tp.emit(tp.shape(a), std::move(out), {a, b});
  tp.on_backward(o, [&tp, a, b, o] {
    const auto& g = tp.grad(o);
    const auto& va = tp.value(a);
    const auto& vb = tp.value(b);
    if (tp.needs_grad(a)) {
      auto& ga = tp.grad(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb[i];
    }
    if (tp.needs_grad(b)) {
      auto& gb = tp.grad(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va[i];
    }
  });
  return o;
}

// y = scale * x + shift
template <class S>
Var affine(Tape<S>& tp, Var x, S scale, S shift) {
  const auto& vx = tp.value(x);
  std::vector<S> out(vx.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = scale * vx[i] + shift;
  Var o = tp.emit(tp.shape(x), std::move(out), {x});
  tp.on_backward(o, [&tp, x, o, scale] {
    const auto& g = tp.grad(o);
    auto& gx = tp.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += scale * g[i];
  });
  return o;
}

template <class S>
Var leaky_relu(Tape<S>& tp, Var x, S slope) {
  const auto& vx = tp.value(x);
  std::vector<S> out(vx.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = vx[i] > 0 ? vx[i] : slope * vx[i];
  if (branch_pattern)
    for (S v : vx) branch_pattern->push_back(v > 0);
  Var o = tp.emit(tp.shape(x), std::move(out), {x});
  tp.on_backward(o, [&tp, x, o, slope] {
    const auto& g = tp.grad(o);
    const auto& vx = tp.value(x);
    auto& gx = tp.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += vx[i] > 0 ? g[i] : slope * g[i];
  });
  return o;
}

template <class S>
S sigmoid_scalar(S v) {
  return v >= 0 ? S(1) / (S(1) + std::exp(-v)) : std::exp(v) / (S(1) + std::exp(v));
}

template <class S>
Var sigmoid(Tape<S>& tp, Var x) {
  const auto& vx = tp.value(x);
  std::vector<S> out(vx.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoid_scalar(vx[i]);
  Var o = tp.emit(tp.shape(x), std::move(out), {x});
  tp.on_backward(o, [&tp, x, o] {
    const auto& g = tp.grad(o);
    const auto& y = tp.value(o);
    auto& gx = tp.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i] * (S(1) - y[i]);
  });
  return o;
}

// Inverted dropout; identity when rate == 0.
template <class S>
Var dropout(Tape<S>& tp, Var x, double rate, Rng& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw ValidationError("dropout: rate must be < 1");
  const auto& vx = tp.value(x);
  auto mask = std::make_shared<std::vector<S>>(vx.size());
  const S keep_scale = S(1.0 / (1.0 - rate));
  for (auto& m : *mask) m = rng.uniform() < rate ? S(0) : keep_scale;
  std::vector<S> out(vx.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = vx[i] * (*mask)[i];
  Var o = tp.emit(tp.shape(x), std::move(out), {x});
  tp.on_backward(o, [&tp, x, o, mask] {
    const auto& g = tp.grad(o);
    auto& gx = tp.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*mask)[i];
  });
  return o;
}

// Softmax over the last axis.
template <class S>
Var softmax_last(Tape<S>& tp, Var x) {
  const auto& shape = tp.shape(x);
  const int K = shape.back();
  const auto& vx = tp.value(x);
  const std::size_t rows = vx.size() / K;
  std::vector<S> out(vx.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const S* in = &vx[r * K];
    S* y = &out[r * K];
    const S mx = *std::max_element(in, in + K);
    S z = 0;
    for (int k = 0; k < K; ++k) z += y[k] = std::exp(in[k] - mx);
    for (int k = 0; k < K; ++k) y[k] /= z;
  }
  Var o = tp.emit(shape, std::move(out), {x});
  tp.on_backward(o, [&tp, x, o, K, rows] {
    const auto& g = tp.grad(o);
    const auto& y = tp.value(o);
    auto& gx = tp.grad(x);
    for (std::size_t r = 0; r < rows; ++r) {
      S dot = 0;
      for (int k = 0; k < K; ++k) dot += g[r * K + k] * y[r * K + k];
      for (int k = 0; k < K; ++k) gx[r * K + k] += y[r * K + k] * (g[r * K + k] - dot);
    }
  });
  return o;
}

// ---------------------------------------------------------------------------
// Index manipulation

// out[i] = x[index[i]], or 0 where index[i] < 0.
template <class S>
Var gather(Tape<S>& tp, Var x, std::shared_ptr<const std::vector<int>> index, Shape out_shape) {
  detail::require(index->size() == numel(out_shape), "gather", "index size does not match output shape");
  const auto& vx = tp.value(x);
  std::vector<S> out(index->size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const int j = (*index)[i];
    out[i] = j >= 0 ? vx.at(static_cast<std::size_t>(j)) : S(0);
  }
  Var o = tp.emit(std::move(out_shape), std::move(out), {x});
  tp.on_backward(o, [&tp, x, o, index] {
    const auto& g = tp.grad(o);
    auto& gx = tp.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i)
      if ((*index)[i] >= 0) gx[(*index)[i]] += g[i];
  });
  return o;
}

// [B][C] rows prepended to [B][M][C] -> [B][M+1][C].
template <class S>
Var prepend_rows(Tape<S>& tp, Var head, Var body) {
  const auto& hs = tp.shape(head);
  const auto& bs = tp.shape(body);
  detail::require(hs.size() == 2 && bs.size() == 3 && hs[0] == bs[0] && hs[1] == bs[2], "prepend_rows",
                  "shapes " + shape_str(hs) + " and " + shape_str(bs));
  const int B = bs[0], M = bs[1], C = bs[2];
  const auto& vh = tp.value(head);
  const auto& vb = tp.value(body);
  std::vector<S> out(static_cast<std::size_t>(B) * (M + 1) * C);
  for (int b = 0; b < B; ++b) {
    std::copy_n(&vh[static_cast<std::size_t>(b) * C], C, &out[static_cast<std::size_t>(b) * (M + 1) * C]);
    std::copy_n(&vb[static_cast<std::size_t>(b) * M * C], static_cast<std::size_t>(M) * C,
                &out[(static_cast<std::size_t>(b) * (M + 1) + 1) * C]);
  }
  Var o = tp.emit({B, M + 1, C}, std::move(out), {head, body});
  tp.on_backward(o, [&tp, head, body, o, B, M, C] {
    const auto& g = tp.grad(o);
    if (tp.needs_grad(head)) {
      auto& gh = tp.grad(head);
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) gh[static_cast<std::size_t>(b) * C + c] += g[static_cast<std::size_t>(b) * (M + 1) * C + c];
    }
    if (tp.needs_grad(body)) {
      auto& gb = tp.grad(body);
      for (int b = 0; b < B; ++b)
        for (std::size_t i = 0; i < static_cast<std::size_t>(M) * C; ++i)
          gb[static_cast<std::size_t>(b) * M * C + i] += g[(static_cast<std::size_t>(b) * (M + 1) + 1) * C + i];
    }
  });
  return o;
}

// Flat concatenation, reshaped to out_shape.
template <class S>
Var concat(Tape<S>& tp, Var a, Var b, Shape out_shape) {
  const auto& va = tp.value(a);
  const auto& vb = tp.value(b);
  detail::require(va.size() + vb.size() == numel(out_shape), "concat", "output shape size mismatch");
  std::vector<S> out(va);
  out.insert(out.end(), vb.begin(), vb.end());
  Var o = tp.emit(std::move(out_shape), std::move(out), {a, b});
  const std::size_t na = va.size();
  tp.on_backward(o, [&tp, a, b, o, na] {
    const auto& g = tp.grad(o);
    if (tp.needs_grad(a)) {
      auto& ga = tp.grad(a);
      for (std::size_t i = 0; i < na; ++i) ga[i] += g[i];
    }
    if (tp.needs_grad(b)) {
      auto& gb = tp.grad(b);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[na + i];
    }
  });
  return o;
}

// ---------------------------------------------------------------------------
// Broadcast and reductions over [B][R][C]

// x[b][r][c] * w[b][c]
template <class S>
Var mul_channels(Tape<S>& tp, Var x, Var w) {
  const auto& xs = tp.shape(x);
  const auto& ws = tp.shape(w);
  detail::require(xs.size() == 3 && ws.size() == 2 && xs[0] == ws[0] && xs[2] == ws[1], "mul_channels",
                  shape_str(xs) + " * " + shape_str(ws));
  const int B = xs[0], R = xs[1], C = xs[2];
  const auto& vx = tp.value(x);
  const auto& vw = tp.value(w);
  std::vector<S> out(vx.size());
  for (int b = 0; b < B; ++b)
    for (int r = 0; r < R; ++r)
      for (int c = 0; c < C; ++c) {
        const std::size_t i = (static_cast<std::size_t>(b) * R + r) * C + c;
        out[i] = vx[i] * vw[static_cast<std::size_t>(b) * C + c];
      }
  Var o = tp.emit(xs, std::move(out), {x, w});
  tp.on_backward(o, [&tp, x, w, o, B, R, C] {
    const auto& g = tp.grad(o);
    const auto& vx = tp.value(x);
    const auto& vw = tp.value(w);
    const bool gx_on = tp.needs_grad(x), gw_on = tp.needs_grad(w);
    std::vector<S>* gx = gx_on ? &tp.grad(x) : nullptr;
    std::vector<S>* gw = gw_on ? &tp.grad(w) : nullptr;
    for (int b = 0; b < B; ++b)
      for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c) {
          const std::size_t i = (static_cast<std::size_t>(b) * R + r) * C + c;
          const std::size_t j = static_cast<std::size_t>(b) * C + c;
          if (gx) (*gx)[i] += g[i] * vw[j];
          if (gw) (*gw)[j] += g[i] * vx[i];
        }
  });
  return o;
}

// x[b][r][c] + v[b][c]
template <class S>
Var add_rows(Tape<S>& tp, Var x, Var v) {
  const auto& xs = tp.shape(x);
  const auto& vs = tp.shape(v);
  detail::require(xs.size() == 3 && vs.size() == 2 && xs[0] == vs[0] && xs[2] == vs[1], "add_rows",
                  shape_str(xs) + " + " + shape_str(vs));
  const int B = xs[0], R = xs[1], C = xs[2];
  const auto& vx = tp.value(x);
  const auto& vv = tp.value(v);
  std::vector<S> out(vx.size());
  for (int b = 0; b < B; ++b)
    for (int r = 0; r < R; ++r)
      for (int c = 0; c < C; ++c) {
        const std::size_t i = (static_cast<std::size_t>(b) * R + r) * C + c;
        out[i] = vx[i] + vv[static_cast<std::size_t>(b) * C + c];
      }
  Var o = tp.emit(xs, std::move(out), {x, v});
  tp.on_backward(o, [&tp, x, v, o, B, R, C] {
    const auto& g = tp.grad(o);
    if (tp.needs_grad(x)) detail::accumulate(tp.grad(x), g);
    if (tp.needs_grad(v)) {
      auto& gv = tp.grad(v);
      for (int b = 0; b < B; ++b)
        for (int r = 0; r < R; ++r)
          for (int c = 0; c < C; ++c)
            gv[static_cast<std::size_t>(b) * C + c] += g[(static_cast<std::size_t>(b) * R + r) * C + c];
    }
  });
  return o;
}

// x[b][c] * s[b]
template <class S>
Var mul_rows(Tape<S>& tp, Var x, Var s) {
  const auto& xs = tp.shape(x);
  detail::require(xs.size() == 2 && tp.value(s).size() == static_cast<std::size_t>(xs[0]), "mul_rows",
                  "shape " + shape_str(xs));
  const int B = xs[0], C = xs[1];
  const auto& vx = tp.value(x);
  const auto& vs = tp.value(s);
  std::vector<S> out(vx.size());
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) out[static_cast<std::size_t>(b) * C + c] = vx[static_cast<std::size_t>(b) * C + c] * vs[b];
  Var o = tp.emit(xs, std::move(out), {x, s});
  tp.on_backward(o, [&tp, x, s, o, B, C] {
    const auto& g = tp.grad(o);
    const auto& vx = tp.value(x);
    const auto& vs = tp.value(s);
    if (tp.needs_grad(x)) {
      auto& gx = tp.grad(x);
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) gx[static_cast<std::size_t>(b) * C + c] += g[static_cast<std::size_t>(b) * C + c] * vs[b];
    }
    if (tp.needs_grad(s)) {
      auto& gs = tp.grad(s);
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) gs[b] += g[static_cast<std::size_t>(b) * C + c] * vx[static_cast<std::size_t>(b) * C + c];
    }
  });
  return o;
}

// Mean over the row axis: [B][R][C] -> [B][C].
template <class S>
Var pool_mean(Tape<S>& tp, Var x) {
  const auto& xs = tp.shape(x);
  detail::require(xs.size() == 3, "pool_mean", "expects [B,R,C]");
  const int B = xs[0], R = xs[1], C = xs[2];
  const auto& vx = tp.value(x);
  std::vector<S> out(static_cast<std::size_t>(B) * C, S(0));
  for (int b = 0; b < B; ++b)
    for (int r = 0; r < R; ++r)
      for (int c = 0; c < C; ++c) out[static_cast<std::size_t>(b) * C + c] += vx[(static_cast<std::size_t>(b) * R + r) * C + c];
  for (auto& v : out) v /= S(R);
  Var o = tp.emit({B, C}, std::move(out), {x});
  tp.on_backward(o, [&tp, x, o, B, R, C] {
    const auto& g = tp.grad(o);
    auto& gx = tp.grad(x);
    for (int b = 0; b < B; ++b)
      for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c)
          gx[(static_cast<std::size_t>(b) * R + r) * C + c] += g[static_cast<std::size_t>(b) * C + c] / S(R);
  });
  return o;
}

// Max over the row axis: [B][R][C] -> [B][C]; ties go to the first row.
template <class S>
Var pool_max(Tape<S>& tp, Var x) {
  const auto& xs = tp.shape(x);
  detail::require(xs.size() == 3, "pool_max", "expects [B,R,C]");
  const int B = xs[0], R = xs[1], C = xs[2];
  const auto& vx = tp.value(x);
  std::vector<S> out(static_cast<std::size_t>(B) * C, -std::numeric_limits<S>::infinity());
  auto arg = std::make_shared<std::vector<std::size_t>>(out.size(), 0);
  for (int b = 0; b < B; ++b)
    for (int r = 0; r < R; ++r)
      for (int c = 0; c < C; ++c) {
        const std::size_t i = (static_cast<std::size_t>(b) * R + r) * C + c;
        const std::size_t j = static_cast<std::size_t>(b) * C + c;
        if (vx[i] > out[j]) {
          out[j] = vx[i];
          (*arg)[j] = i;
        }
      }
  if (branch_pattern)
    for (std::size_t a : *arg) branch_pattern->push_back(static_cast<std::uint32_t>(a));
  Var o = tp.emit({B, C}, std::move(out), {x});
  tp.on_backward(o, [&tp, x, o, arg] {
    const auto& g = tp.grad(o);
    auto& gx = tp.grad(x);
    for (std::size_t j = 0; j < g.size(); ++j) gx[(*arg)[j]] += g[j];
  });
  return o;
}

// Mean over everything but the first axis: [B][...] -> [B].
template <class S>
Var mean_per_batch(Tape<S>& tp, Var x) {
  const auto& xs = tp.shape(x);
  const int B = xs.at(0);
  const auto& vx = tp.value(x);
  const std::size_t K = vx.size() / B;
  std::vector<S> out(B, S(0));
  for (int b = 0; b < B; ++b) {
    S acc = 0;
    for (std::size_t k = 0; k < K; ++k) acc += vx[b * K + k];
    out[b] = acc / S(K);
  }
  Var o = tp.emit({B}, std::move(out), {x});
  tp.on_backward(o, [&tp, x, o, B, K] {
    const auto& g = tp.grad(o);
    auto& gx = tp.grad(x);
    for (int b = 0; b < B; ++b)
      for (std::size_t k = 0; k < K; ++k) gx[b * K + k] += g[b] / S(K);
  });
  return o;
}

// ---------------------------------------------------------------------------
// Dense layers

// y = x w + b over the last axis; x [..., in], w [in, out], b [out] (optional).
template <class S>
Var linear(Tape<S>& tp, Var x, Var w, Var b = Var{}) {
  const auto& xs = tp.shape(x);
  const auto& ws = tp.shape(w);
  detail::require(ws.size() == 2 && xs.back() == ws[0], "linear", shape_str(xs) + " x " + shape_str(ws));
  const int in = ws[0], outd = ws[1];
  const auto& vx = tp.value(x);
  const int rows = static_cast<int>(vx.size() / in);
  Shape os = xs;
  os.back() = outd;
  std::vector<S> out(static_cast<std::size_t>(rows) * outd);
  MapMat<S> Y(out.data(), rows, outd);
  Y.noalias() = CMapMat<S>(vx.data(), rows, in) * CMapMat<S>(tp.value(w).data(), in, outd);
  if (b.valid()) {
    detail::require(tp.value(b).size() == static_cast<std::size_t>(outd), "linear", "bias size");
    Y.rowwise() += Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(tp.value(b).data(), outd);
  }
  Var o = b.valid() ? tp.emit(os, std::move(out), {x, w, b}) : tp.emit(os, std::move(out), {x, w});
  tp.on_backward(o, [&tp, x, w, b, o, rows, in, outd] {
    CMapMat<S> G(tp.grad(o).data(), rows, outd);
    if (tp.needs_grad(x)) {
      MapMat<S> GX(tp.grad(x).data(), rows, in);
      GX.noalias() += G * CMapMat<S>(tp.value(w).data(), in, outd).transpose();
    }
    if (tp.needs_grad(w)) {
      MapMat<S> GW(tp.grad(w).data(), in, outd);
      GW.noalias() += CMapMat<S>(tp.value(x).data(), rows, in).transpose() * G;
    }
    if (b.valid() && tp.needs_grad(b)) {
      // Plain loops keep the summation order independent of buffer alignment.
      auto& gb = tp.grad(b);
      for (Eigen::Index r = 0; r < rows; ++r)
        for (int j = 0; j < outd; ++j) gb[j] += G(r, j);
    }
  });
  return o;
}

// Per-batch product a_b w_b^T: a [B][N][P], w [B][L][P] -> [B][N][L].
template <class S>
Var batched_matmul_nt(Tape<S>& tp, Var a, Var w) {
  const auto& as = tp.shape(a);
  const auto& ws = tp.shape(w);
  detail::require(as.size() == 3 && ws.size() == 3 && as[0] == ws[0] && as[2] == ws[2], "batched_matmul_nt",
                  shape_str(as) + " x " + shape_str(ws) + "^T");
  const int B = as[0], N = as[1], P = as[2], L = ws[1];
  std::vector<S> out(static_cast<std::size_t>(B) * N * L);
  for (int b = 0; b < B; ++b) {
    MapMat<S> Y(&out[static_cast<std::size_t>(b) * N * L], N, L);
    Y.noalias() = CMapMat<S>(&tp.value(a)[static_cast<std::size_t>(b) * N * P], N, P) *
                  CMapMat<S>(&tp.value(w)[static_cast<std::size_t>(b) * L * P], L, P).transpose();
  }
  Var o = tp.emit({B, N, L}, std::move(out), {a, w});
  tp.on_backward(o, [&tp, a, w, o, B, N, P, L] {
    for (int b = 0; b < B; ++b) {
      CMapMat<S> G(&tp.grad(o)[static_cast<std::size_t>(b) * N * L], N, L);
      if (tp.needs_grad(a)) {
        MapMat<S> GA(&tp.grad(a)[static_cast<std::size_t>(b) * N * P], N, P);
        GA.noalias() += G * CMapMat<S>(&tp.value(w)[static_cast<std::size_t>(b) * L * P], L, P);
      }
      if (tp.needs_grad(w)) {
        MapMat<S> GW(&tp.grad(w)[static_cast<std::size_t>(b) * L * P], L, P);
        GW.noalias() += G.transpose() * CMapMat<S>(&tp.value(a)[static_cast<std::size_t>(b) * N * P], N, P);
      }
    }
  });
  return o;
}

// ---------------------------------------------------------------------------
// Convolution and normalization

namespace detail {

// col[(c*k + ky)*k + kx][y*W + x] = in[c][y + ky - pad][x + kx - pad] (0 outside).
template <class S>
void im2col(const S* in, int C, int H, int W, int k, S* col) {
  const int pad = k / 2;
  for (int c = 0; c < C; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        S* row = col + (static_cast<std::size_t>(c * k + ky) * k + kx) * H * W;
        for (int y = 0; y < H; ++y) {
          const int sy = y + ky - pad;
          S* dst = row + static_cast<std::size_t>(y) * W;
          if (sy < 0 || sy >= H) {
            std::fill_n(dst, W, S(0));
            continue;
          }
          const S* src = in + (static_cast<std::size_t>(c) * H + sy) * W;
          for (int x = 0; x < W; ++x) {
            const int sx = x + kx - pad;
            dst[x] = (sx >= 0 && sx < W) ? src[sx] : S(0);
          }
        }
      }
}

template <class S>
void col2im_add(const S* col, int C, int H, int W, int k, S* out) {
  const int pad = k / 2;
  for (int c = 0; c < C; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const S* row = col + (static_cast<std::size_t>(c * k + ky) * k + kx) * H * W;
        for (int y = 0; y < H; ++y) {
          const int sy = y + ky - pad;
          if (sy < 0 || sy >= H) continue;
          const S* src = row + static_cast<std::size_t>(y) * W;
          S* dst = out + (static_cast<std::size_t>(c) * H + sy) * W;
          for (int x = 0; x < W; ++x) {
            const int sx = x + kx - pad;
            if (sx >= 0 && sx < W) dst[sx] += src[x];
          }
        }
      }
}

}  // namespace detail

// Stride-1 "same" convolution with odd square kernel; x [B][Ci][H][W],
// w [Co][Ci][k][k], b [Co] (optional).
template <class S>
Var conv2d(Tape<S>& tp, Var x, Var w, Var b = Var{}) {
  const auto& xs = tp.shape(x);
  const auto& ws = tp.shape(w);
  detail::require(xs.size() == 4 && ws.size() == 4 && ws[1] == xs[1] && ws[2] == ws[3] && ws[2] % 2 == 1, "conv2d",
                  shape_str(xs) + " * " + shape_str(ws));
  const int B = xs[0], Ci = xs[1], H = xs[2], W = xs[3], Co = ws[0], k = ws[2];
  const int HW = H * W;
  const int K = Ci * k * k;
  std::vector<S> out(static_cast<std::size_t>(B) * Co * HW);
  std::vector<S> col(k == 1 ? 0 : static_cast<std::size_t>(K) * HW);
  CMapMat<S> Wm(tp.value(w).data(), Co, K);
  for (int bi = 0; bi < B; ++bi) {
    const S* in = &tp.value(x)[static_cast<std::size_t>(bi) * Ci * HW];
    const S* colp = in;
    if (k != 1) {
      detail::im2col(in, Ci, H, W, k, col.data());
      colp = col.data();
    }
    MapMat<S> Y(&out[static_cast<std::size_t>(bi) * Co * HW], Co, HW);
    Y.noalias() = Wm * CMapMat<S>(colp, K, HW);
    if (b.valid()) Y.colwise() += Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>>(tp.value(b).data(), Co);
  }
  Var o = b.valid() ? tp.emit({B, Co, H, W}, std::move(out), {x, w, b}) : tp.emit({B, Co, H, W}, std::move(out), {x, w});
  tp.on_backward(o, [&tp, x, w, b, o, B, Ci, H, W, Co, k, HW, K] {
    std::vector<S> col(static_cast<std::size_t>(K) * HW);
    CMapMat<S> Wm(tp.value(w).data(), Co, K);
    const bool gx_on = tp.needs_grad(x);
    const bool gw_on = tp.needs_grad(w);
    const bool gb_on = b.valid() && tp.needs_grad(b);
    for (int bi = 0; bi < B; ++bi) {
      CMapMat<S> G(&tp.grad(o)[static_cast<std::size_t>(bi) * Co * HW], Co, HW);
      const S* in = &tp.value(x)[static_cast<std::size_t>(bi) * Ci * HW];
      if (gw_on) {
        const S* colp = in;
        if (k != 1) {
          detail::im2col(in, Ci, H, W, k, col.data());
          colp = col.data();
        }
        MapMat<S> GW(tp.grad(w).data(), Co, K);
        GW.noalias() += G * CMapMat<S>(colp, K, HW).transpose();
      }
      if (gb_on) {
        auto& gb = tp.grad(b);
        for (int c = 0; c < Co; ++c) {
          S acc = 0;
          for (int i = 0; i < HW; ++i) acc += G(c, i);
          gb[c] += acc;
        }
      }
      if (gx_on) {
        S* gx = &tp.grad(x)[static_cast<std::size_t>(bi) * Ci * HW];
        if (k == 1) {
          MapMat<S>(gx, K, HW).noalias() += Wm.transpose() * G;
        } else {
          MapMat<S>(col.data(), K, HW).noalias() = Wm.transpose() * G;
          detail::col2im_add(col.data(), Ci, H, W, k, gx);
        }
      }
    }
  });
  return o;
}

// Running statistics of a batch-norm layer.
template <class S>
struct NormStats {
  std::vector<S>* mean = nullptr;
  std::vector<S>* var = nullptr;
};

// Per-channel batch normalization of x [B][C][H][W]. Training mode
// normalizes with batch statistics and, when stats are given and
// update_stats is set, folds them into the running averages (unbiased
// variance, momentum 0.1). Eval mode uses the running averages.
template <class S>
Var batch_norm(Tape<S>& tp, Var x, Var gamma, Var beta, NormStats<S> stats, bool train, bool update_stats,
               double momentum = 0.1, double eps = 1e-5) {
  const auto& xs = tp.shape(x);
  detail::require(xs.size() == 4, "batch_norm", "expects [B,C,H,W]");
  const int B = xs[0], C = xs[1], HW = xs[2] * xs[3];
  const std::size_t M = static_cast<std::size_t>(B) * HW;
  const auto& vx = tp.value(x);
  auto xhat = std::make_shared<std::vector<S>>(vx.size());
  auto inv_std = std::make_shared<std::vector<S>>(C);
  for (int c = 0; c < C; ++c) {
    double mean = 0.0, var = 0.0;
    if (train) {
      for (int b = 0; b < B; ++b) {
        const S* p = &vx[(static_cast<std::size_t>(b) * C + c) * HW];
        for (int i = 0; i < HW; ++i) mean += p[i];
      }
      mean /= double(M);
      for (int b = 0; b < B; ++b) {
        const S* p = &vx[(static_cast<std::size_t>(b) * C + c) * HW];
        for (int i = 0; i < HW; ++i) var += (p[i] - mean) * (p[i] - mean);
      }
      var /= double(M);
      if (update_stats && stats.mean && stats.var) {
        (*stats.mean)[c] = S((1.0 - momentum) * (*stats.mean)[c] + momentum * mean);
        const double unbiased = M > 1 ? var * double(M) / double(M - 1) : var;
        (*stats.var)[c] = S((1.0 - momentum) * (*stats.var)[c] + momentum * unbiased);
      }
    } else {
      if (!stats.mean || !stats.var) throw ValidationError("batch_norm: eval mode requires running statistics");
      mean = (*stats.mean)[c];
      var = (*stats.var)[c];
    }
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[c] = S(is);
    for (int b = 0; b < B; ++b) {
      const std::size_t off = (static_cast<std::size_t>(b) * C + c) * HW;
      for (int i = 0; i < HW; ++i) (*xhat)[off + i] = S((vx[off + i] - mean) * is);
    }
  }
  std::vector<S> out(vx.size());
  const auto& g = tp.value(gamma);
  const auto& be = tp.value(beta);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const std::size_t off = (static_cast<std::size_t>(b) * C + c) * HW;
      for (int i = 0; i < HW; ++i) out[off + i] = g[c] * (*xhat)[off + i] + be[c];
    }
  Var o = tp.emit(xs, std::move(out), {x, gamma, beta});
  tp.on_backward(o, [&tp, x, gamma, beta, o, xhat, inv_std, B, C, HW, M, train] {
    const auto& go = tp.grad(o);
    const auto& gm = tp.value(gamma);
    for (int c = 0; c < C; ++c) {
      double sum_g = 0.0, sum_gx = 0.0;
      for (int b = 0; b < B; ++b) {
        const std::size_t off = (static_cast<std::size_t>(b) * C + c) * HW;
        for (int i = 0; i < HW; ++i) {
          sum_g += go[off + i];
          sum_gx += double(go[off + i]) * (*xhat)[off + i];
        }
      }
      if (tp.needs_grad(gamma)) tp.grad(gamma)[c] += S(sum_gx);
      if (tp.needs_grad(beta)) tp.grad(beta)[c] += S(sum_g);
      if (tp.needs_grad(x)) {
        auto& gx = tp.grad(x);
        const double scale = double(gm[c]) * (*inv_std)[c];
        for (int b = 0; b < B; ++b) {
          const std::size_t off = (static_cast<std::size_t>(b) * C + c) * HW;
          for (int i = 0; i < HW; ++i) {
            if (train)
              gx[off + i] += S(scale * (go[off + i] - sum_g / double(M) - (*xhat)[off + i] * sum_gx / double(M)));
            else
              gx[off + i] += S(scale * go[off + i]);
          }
        }
      }
    }
  });
  return o;
}

// Scalar node with externally computed local gradients: d(out)/d(input_i) =
// partials[i]. Used to splice closed-form loss functions into the tape.
template <class S>
Var scalar_function(Tape<S>& tp, S value, std::vector<std::pair<Var, std::vector<S>>> partials) {
  bool ng = false;
  for (const auto& [v, g] : partials) {
    detail::require(g.size() == tp.value(v).size(), "scalar_function", "partial size mismatch");
    ng = ng || tp.needs_grad(v);
  }
  Var o = ng ? tp.variable(Tensor<S>({1}, std::vector<S>{value})) : tp.constant({1}, {value});
  if (!ng) return o;
  auto shared = std::make_shared<std::vector<std::pair<Var, std::vector<S>>>>(std::move(partials));
  tp.on_backward(o, [&tp, o, shared] {
    const S up = tp.grad(o)[0];
    for (const auto& [v, g] : *shared) {
      if (!tp.needs_grad(v)) continue;
      auto& gv = tp.grad(v);
      for (std::size_t i = 0; i < g.size(); ++i) gv[i] += up * g[i];
    }
  });
  return o;
}

}  // namespace mthu::nn
