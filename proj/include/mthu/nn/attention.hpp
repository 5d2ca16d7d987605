#pragma once

// Multi-head attention kernels over token tensors [T][S][D], where row 0 of
// each phase is that phase's cls token and rows 1..S-1 are patch tokens.
// Both kernels consume a fused projection qkv [T][S][3D] laid out as
// (q | k | v), each split into `heads` contiguous blocks of D/heads.

#include <cmath>
#include <memory>
#include <vector>

#include <Eigen/Dense>

#include "mthu/nn/ops.hpp"

namespace mthu::nn {

namespace detail {

template <class S>
using Strided = Eigen::Map<RowMat<S>, 0, Eigen::OuterStride<>>;
template <class S>
using CStrided = Eigen::Map<const RowMat<S>, 0, Eigen::OuterStride<>>;

struct QkvLayout {
  int T, R, D, heads, dh;
  QkvLayout(const Shape& s, int h) : T(s.at(0)), R(s.at(1)), D(s.at(2) / 3), heads(h), dh(0) {
    require(s.size() == 3 && s[2] % 3 == 0, "attention", "qkv must be [T,S,3D], got " + shape_str(s));
    require(h > 0 && D % h == 0, "attention", "embedding dim not divisible by heads");
    dh = D / h;
  }
  std::size_t row(int t, int r) const { return (static_cast<std::size_t>(t) * R + r) * 3 * D; }
  int q(int h) const { return h * dh; }
  int k(int h) const { return D + h * dh; }
  int v(int h) const { return 2 * D + h * dh; }
};

template <class S>
void softmax_rows(RowMat<S>& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    row.array() -= row.maxCoeff();
    row = row.array().exp().matrix();
    S z = 0;
    for (Eigen::Index c = 0; c < row.size(); ++c) z += row(c);
    row /= z;
  }
}

}  // namespace detail

// Self-attention among the tokens of each phase (cls included). When
// `weights` is given it receives the attention matrices as [T][heads][S][S].
template <class S>
Var spatial_attention_kernel(Tape<S>& tp, Var qkv, int heads, std::vector<S>* weights = nullptr) {
  const detail::QkvLayout lay(tp.shape(qkv), heads);
  const int T = lay.T, R = lay.R, D = lay.D, dh = lay.dh;
  const S scale = S(1) / std::sqrt(S(dh));
  const auto& in = tp.value(qkv);
  std::vector<S> out(static_cast<std::size_t>(T) * R * D);
  if (weights) weights->assign(static_cast<std::size_t>(T) * heads * R * R, S(0));
  RowMat<S> P(R, R);
  for (int t = 0; t < T; ++t)
    for (int h = 0; h < heads; ++h) {
      const S* base = &in[lay.row(t, 0)];
      detail::CStrided<S> Q(base + lay.q(h), R, dh, Eigen::OuterStride<>(3 * D));
      detail::CStrided<S> K(base + lay.k(h), R, dh, Eigen::OuterStride<>(3 * D));
      detail::CStrided<S> V(base + lay.v(h), R, dh, Eigen::OuterStride<>(3 * D));
      P.noalias() = scale * Q * K.transpose();
      detail::softmax_rows(P);
      detail::Strided<S> O(&out[static_cast<std::size_t>(t) * R * D + h * dh], R, dh, Eigen::OuterStride<>(D));
      O.noalias() = P * V;
      if (weights)
        std::copy(P.data(), P.data() + P.size(), &(*weights)[(static_cast<std::size_t>(t) * heads + h) * R * R]);
    }
  Var o = tp.emit({T, R, D}, std::move(out), {qkv});
  tp.on_backward(o, [&tp, qkv, o, lay, scale] {
    const int R = lay.R, D = lay.D, dh = lay.dh;
    const auto& in = tp.value(qkv);
    const auto& go = tp.grad(o);
    auto& gi = tp.grad(qkv);
    RowMat<S> P(R, R), dP(R, R);
    for (int t = 0; t < lay.T; ++t)
      for (int h = 0; h < lay.heads; ++h) {
        const S* base = &in[lay.row(t, 0)];
        S* gbase = &gi[lay.row(t, 0)];
        detail::CStrided<S> Q(base + lay.q(h), R, dh, Eigen::OuterStride<>(3 * D));
        detail::CStrided<S> K(base + lay.k(h), R, dh, Eigen::OuterStride<>(3 * D));
        detail::CStrided<S> V(base + lay.v(h), R, dh, Eigen::OuterStride<>(3 * D));
        detail::CStrided<S> G(&go[static_cast<std::size_t>(t) * R * D + h * dh], R, dh, Eigen::OuterStride<>(D));
        P.noalias() = scale * Q * K.transpose();
        detail::softmax_rows(P);
        detail::Strided<S>(gbase + lay.v(h), R, dh, Eigen::OuterStride<>(3 * D)).noalias() += P.transpose() * G;
        dP.noalias() = G * V.transpose();
        Eigen::Matrix<S, Eigen::Dynamic, 1> rs(R);
        for (Eigen::Index r = 0; r < R; ++r) {
          S acc = 0;
          for (Eigen::Index c = 0; c < R; ++c) acc += dP(r, c) * P(r, c);
          rs(r) = acc;
        }
        dP = (P.array() * (dP.colwise() - rs).array()).matrix();
        detail::Strided<S>(gbase + lay.q(h), R, dh, Eigen::OuterStride<>(3 * D)).noalias() += scale * dP * K;
        detail::Strided<S>(gbase + lay.k(h), R, dh, Eigen::OuterStride<>(3 * D)).noalias() += scale * dP.transpose() * Q;
      }
  });
  return o;
}

// Attention across phases at a fixed token position. A patch query (r, t)
// attends to the cls token of its own phase and to position r in every
// phase (T + 1 keys); a cls query attends to the cls tokens of all phases
// (T keys). When `weights` is given it receives [S][heads][T][T+1] with key
// slot 0 the own-phase cls key (always 0 for cls queries) and slot 1 + t'
// position r of phase t'.
template <class S>
Var temporal_attention_kernel(Tape<S>& tp, Var qkv, int heads, std::vector<S>* weights = nullptr) {
  const detail::QkvLayout lay(tp.shape(qkv), heads);
  const int T = lay.T, R = lay.R, D = lay.D, dh = lay.dh;
  const int K = T + 1;
  const S scale = S(1) / std::sqrt(S(dh));
  const auto& in = tp.value(qkv);
  std::vector<S> out(static_cast<std::size_t>(T) * R * D, S(0));
  auto probs = std::make_shared<std::vector<S>>(static_cast<std::size_t>(R) * heads * T * K, S(0));
  auto key_row = [&lay](int r, int t, int j) { return j == 0 ? lay.row(t, 0) : lay.row(j - 1, r); };
  std::vector<S> logit(K);
  for (int r = 0; r < R; ++r)
    for (int h = 0; h < heads; ++h)
      for (int t = 0; t < T; ++t) {
        const S* q = &in[lay.row(t, r) + lay.q(h)];
        const int j0 = r == 0 ? 1 : 0;
        S mx = -std::numeric_limits<S>::infinity();
        for (int j = j0; j < K; ++j) {
          const S* k = &in[key_row(r, t, j) + lay.k(h)];
          S acc = 0;
          for (int d = 0; d < dh; ++d) acc += q[d] * k[d];
          logit[j] = acc * scale;
          mx = std::max(mx, logit[j]);
        }
        S* p = &(*probs)[((static_cast<std::size_t>(r) * heads + h) * T + t) * K];
        S z = 0;
        for (int j = j0; j < K; ++j) z += p[j] = std::exp(logit[j] - mx);
        S* o = &out[(static_cast<std::size_t>(t) * R + r) * D + h * dh];
        for (int j = j0; j < K; ++j) {
          p[j] /= z;
          const S* v = &in[key_row(r, t, j) + lay.v(h)];
          for (int d = 0; d < dh; ++d) o[d] += p[j] * v[d];
        }
      }
  if (weights) *weights = *probs;
  Var o = tp.emit({T, R, D}, std::move(out), {qkv});
  tp.on_backward(o, [&tp, qkv, o, lay, scale, probs] {
    const int T = lay.T, R = lay.R, D = lay.D, dh = lay.dh, K = T + 1;
    const auto& in = tp.value(qkv);
    const auto& go = tp.grad(o);
    auto& gi = tp.grad(qkv);
    auto key_row = [&lay](int r, int t, int j) { return j == 0 ? lay.row(t, 0) : lay.row(j - 1, r); };
    std::vector<S> dp(K);
    for (int r = 0; r < R; ++r)
      for (int h = 0; h < lay.heads; ++h)
        for (int t = 0; t < T; ++t) {
          const int j0 = r == 0 ? 1 : 0;
          const S* p = &(*probs)[((static_cast<std::size_t>(r) * lay.heads + h) * T + t) * K];
          const S* g = &go[(static_cast<std::size_t>(t) * R + r) * D + h * dh];
          S dot = 0;
          for (int j = j0; j < K; ++j) {
            const std::size_t kr = key_row(r, t, j);
            const S* v = &in[kr + lay.v(h)];
            S* gv = &gi[kr + lay.v(h)];
            S acc = 0;
            for (int d = 0; d < dh; ++d) {
              acc += g[d] * v[d];
              gv[d] += p[j] * g[d];
            }
            dp[j] = acc;
            dot += acc * p[j];
          }
          const std::size_t qr = lay.row(t, r);
          const S* q = &in[qr + lay.q(h)];
          S* gq = &gi[qr + lay.q(h)];
          for (int j = j0; j < K; ++j) {
            const S ds = p[j] * (dp[j] - dot) * scale;
            const std::size_t kr = key_row(r, t, j);
            const S* k = &in[kr + lay.k(h)];
            S* gk = &gi[kr + lay.k(h)];
            for (int d = 0; d < dh; ++d) {
              gq[d] += ds * k[d];
              gk[d] += ds * q[d];
            }
          }
        }
  });
  return o;
}

}  // namespace mthu::nn
