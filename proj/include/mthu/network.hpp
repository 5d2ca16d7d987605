#pragma once

// Transformer unmixing network: convolutional encoder, patch tokens with a
// per-phase cls token, stacked temporal/spatial attention blocks, channel
// attention, a change-driven cls gate between adjacent phases, a softmax
// abundance head and one linear decoder per phase.
//
// Each stage is a function on a Context that binds named parameters to tape
// variables on first use. Token tensors are [T][S][D] with S = 1 + N' and
// row 0 the cls token; abundances leave the head as [T][N][P] and
// reconstructions as [T][N][L] (pixel-major).

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mthu/datamodel.hpp"
#include "mthu/errors.hpp"
#include "mthu/nn/attention.hpp"
#include "mthu/nn/ops.hpp"
#include "mthu/nn/tape.hpp"
#include "mthu/rng.hpp"

namespace mthu::net {

using nn::Shape;
using nn::Tape;
using nn::Tensor;
using nn::Var;

enum class CemMode { a1, a2, a1_plus_a2, a1_times_a2 };

inline std::string to_string(CemMode m) {
  switch (m) {
    case CemMode::a1: return "a1";
    case CemMode::a2: return "a2";
    case CemMode::a1_plus_a2: return "a1_plus_a2";
    case CemMode::a1_times_a2: return "a1_times_a2";
  }
  return "?";
}

inline CemMode parse_cem_mode(const std::string& s) {
  if (s == "a1") return CemMode::a1;
  if (s == "a2") return CemMode::a2;
  if (s == "a1_plus_a2") return CemMode::a1_plus_a2;
  if (s == "a1_times_a2") return CemMode::a1_times_a2;
  throw ValidationError("unknown cem_mode '" + s + "'");
}

struct Switches {
  bool use_gam = true;
  bool use_cem = true;
  CemMode cem_mode = CemMode::a1_times_a2;
  bool operator==(const Switches&) const = default;
};

struct ArchitectureConfig {
  int C = 32;
  int patch = 1;
  int D = 128;
  int heads = 8;
  int depth = 2;
  double dropout = 0.1;
  double alpha = 0.5;
  int P = 3;

  int head_dim() const { return D / heads; }
  int spectral_hidden() const { return std::max(2, D / 8); }

  void validate() const {
    if (C < 1 || D < 1 || heads < 1 || depth < 0 || P < 1 || patch < 1)
      throw ValidationError("ArchitectureConfig: sizes must be positive");
    if (D % heads != 0) throw ValidationError("ArchitectureConfig: D must be divisible by heads");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ValidationError("ArchitectureConfig: dropout must be in [0,1)");
    if (!(alpha >= 0.0)) throw ValidationError("ArchitectureConfig: alpha must be >= 0");
  }
  void validate(int H, int W) const {
    validate();
    if (H % patch != 0 || W % patch != 0) throw ValidationError("ArchitectureConfig: patch size must divide H and W");
  }
  bool operator==(const ArchitectureConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const ArchitectureConfig& a) {
  j = {{"C", a.C},         {"patch_size", a.patch}, {"embed_dim", a.D}, {"heads", a.heads},
       {"depth", a.depth}, {"dropout", a.dropout},  {"alpha", a.alpha}, {"P", a.P}};
}

inline void from_json(const nlohmann::json& j, ArchitectureConfig& a) {
  a.C = j.value("C", a.C);
  a.patch = j.value("patch_size", a.patch);
  a.D = j.value("embed_dim", a.D);
  a.heads = j.value("heads", a.heads);
  a.depth = j.value("depth", a.depth);
  a.dropout = j.value("dropout", a.dropout);
  a.alpha = j.value("alpha", a.alpha);
  a.P = j.value("P", a.P);
}

// Data dimensions a parameter set is built for.
struct ModelDims {
  int T = 0, L = 0, H = 0, W = 0;
  bool operator==(const ModelDims&) const = default;
};

template <class S>
struct Parameters {
  ArchitectureConfig arch;
  ModelDims dims;
  std::map<std::string, Tensor<S>> values;   // trainable
  std::map<std::string, Tensor<S>> buffers;  // normalization running statistics

  int grid_h() const { return dims.H / arch.patch; }
  int grid_w() const { return dims.W / arch.patch; }
  int patches() const { return grid_h() * grid_w(); }
  int tokens() const { return 1 + patches(); }

  Tensor<S>& at(const std::string& name) {
    auto it = values.find(name);
    if (it == values.end()) throw ValidationError("unknown parameter '" + name + "'");
    return it->second;
  }
  const Tensor<S>& at(const std::string& name) const { return const_cast<Parameters*>(this)->at(name); }

  void validate() const {
    for (const auto& [name, t] : values)
      for (S v : t.data)
        if (!std::isfinite(double(v))) throw ValidationError("parameter '" + name + "' is not finite");
    const auto& d = at("dec.w");
    if (d.shape != Shape{dims.T, dims.L, arch.P}) throw ValidationError("decoder shape mismatch");
  }
  bool operator==(const Parameters&) const = default;
};

using ModelParameters = Parameters<float>;

template <class To, class From>
Parameters<To> cast_parameters(const Parameters<From>& p) {
  Parameters<To> out;
  out.arch = p.arch;
  out.dims = p.dims;
  auto conv = [](const Tensor<From>& t) {
    return Tensor<To>(t.shape, std::vector<To>(t.data.begin(), t.data.end()));
  };
  for (const auto& [k, v] : p.values) out.values.emplace(k, conv(v));
  for (const auto& [k, v] : p.buffers) out.buffers.emplace(k, conv(v));
  return out;
}

// PyTorch-style initialization: weights and biases uniform in
// +-1/sqrt(fan_in), normalization scale 1 and shift 0, cls and positional
// embeddings N(0, 0.02^2). Decoders start uniform in [0, 1) until replaced.
template <class S = float>
Parameters<S> init_parameters(const ArchitectureConfig& arch, const ModelDims& dims, std::uint64_t seed) {
  arch.validate(dims.H, dims.W);
  if (dims.T < 1 || dims.L < 1) throw ValidationError("init_parameters: invalid data dimensions");
  Parameters<S> p;
  p.arch = arch;
  p.dims = dims;
  Rng rng(derive_seed(seed, stream::kInit));
  const int C = arch.C, D = arch.D, pp = arch.patch * arch.patch;
  auto uniform = [&](const std::string& name, Shape shape, int fan_in) {
    Tensor<S> t(std::move(shape));
    const double b = 1.0 / std::sqrt(double(fan_in));
    for (auto& v : t.data) v = S(rng.uniform(-b, b));
    p.values.emplace(name, std::move(t));
  };
  auto normal = [&](const std::string& name, Shape shape, double sd) {
    Tensor<S> t(std::move(shape));
    for (auto& v : t.data) v = S(sd * rng.normal());
    p.values.emplace(name, std::move(t));
  };
  auto conv = [&](const std::string& name, int co, int ci, int k) {
    uniform(name + ".w", {co, ci, k, k}, ci * k * k);
    uniform(name + ".b", {co}, ci * k * k);
  };
  auto dense = [&](const std::string& name, int in, int out) {
    uniform(name + ".w", {in, out}, in);
    uniform(name + ".b", {out}, in);
  };
  auto norm = [&](const std::string& name, int c) {
    p.values.emplace(name + ".gamma", Tensor<S>({c}, S(1)));
    p.values.emplace(name + ".beta", Tensor<S>({c}, S(0)));
    p.buffers.emplace(name + ".mean", Tensor<S>({c}, S(0)));
    p.buffers.emplace(name + ".var", Tensor<S>({c}, S(1)));
  };

  conv("enc.conv1", C, dims.L, 3);
  norm("enc.bn1", C);
  conv("enc.conv2", C, C, 3);
  norm("enc.bn2", C);
  dense("tok.proj", C * pp, D);
  normal("tok.cls", {dims.T, D}, 0.02);
  normal("tok.pos", {dims.T, p.tokens(), D}, 0.02);
  for (int i = 0; i < arch.depth; ++i) {
    const std::string b = "gam." + std::to_string(i);
    dense(b + ".tattn.qkv", D, 3 * D);
    dense(b + ".tattn.out", D, D);
    dense(b + ".sattn.qkv", D, 3 * D);
    dense(b + ".sattn.out", D, D);
    dense(b + ".mlp.fc1", D, 4 * D);
    dense(b + ".mlp.fc2", 4 * D, D);
  }
  dense("gam.spec.fc1", D, arch.spectral_hidden());
  dense("gam.spec.fc2", arch.spectral_hidden(), D);
  conv("cem.conv3", D, D, 3);
  norm("cem.bn3", D);
  conv("cem.conv7", D, D, 7);
  norm("cem.bn7", D);
  conv("cem.proj1", 1, D, 1);
  conv("cem.proj2", 1, D, 1);
  dense("head", D, arch.P);
  Tensor<S> dec({dims.T, dims.L, arch.P});
  for (auto& v : dec.data) v = S(rng.uniform());
  p.values.emplace("dec.w", std::move(dec));
  return p;
}

// Copies per-phase endmembers [T][L][P] into the decoders.
template <class S>
void set_decoder(Parameters<S>& p, const EndmemberSet& e) {
  if (e.T != p.dims.T || e.L != p.dims.L || e.P != p.arch.P) throw ShapeError("set_decoder: endmember shape mismatch");
  auto& d = p.at("dec.w");
  for (std::size_t i = 0; i < d.data.size(); ++i) d.data[i] = S(e.per_phase[i]);
}

// Decoder weights read as endmembers, negative entries clamped to zero.
template <class S>
EndmemberSet read_endmembers(const Parameters<S>& p) {
  const auto& d = p.at("dec.w");
  EndmemberSet e;
  e.T = p.dims.T;
  e.L = p.dims.L;
  e.P = p.arch.P;
  e.per_phase.resize(d.data.size());
  for (std::size_t i = 0; i < d.data.size(); ++i) e.per_phase[i] = std::max(0.0f, float(d.data[i]));
  return e;
}

// ---------------------------------------------------------------------------
// Forward context

template <class S>
struct CemTrace {
  std::vector<S> a1, a2, combined;  // [T-1][H'][W']
  std::vector<S> gate;              // [T-1]
};

template <class S>
struct AttentionTrace {
  std::vector<std::vector<S>> temporal, spatial;  // per block, kernel layouts
};

template <class S>
struct Context {
  Tape<S>& tape;
  Parameters<S>& params;
  bool train = false;
  bool update_stats = true;    // fold batch statistics into running averages in train mode
  bool track_grad = true;      // bind parameters as variables
  Rng* dropout_rng = nullptr;  // required when train and dropout > 0
  CemTrace<S>* cem_trace = nullptr;
  AttentionTrace<S>* attention_trace = nullptr;
  std::map<std::string, Var> bound;

  Context(Tape<S>& t, Parameters<S>& p) : tape(t), params(p) {}

  Var param(const std::string& name) {
    auto it = bound.find(name);
    if (it != bound.end()) return it->second;
    const auto& v = params.at(name);
    Var var = track_grad ? tape.variable(v) : tape.constant(v);
    bound.emplace(name, var);
    return var;
  }

  nn::NormStats<S> stats(const std::string& name) {
    return {&params.buffers.at(name + ".mean").data, &params.buffers.at(name + ".var").data};
  }

  Var dropout(Var x) {
    if (!train || params.arch.dropout <= 0.0) return x;
    if (!dropout_rng) throw ValidationError("forward: train mode with dropout needs a random stream");
    return nn::dropout(tape, x, params.arch.dropout, *dropout_rng);
  }
};

namespace detail {

using Index = std::shared_ptr<const std::vector<int>>;

template <class F>
Index make_index(std::size_t n, F f) {
  auto v = std::make_shared<std::vector<int>>(n);
  for (std::size_t i = 0; i < n; ++i) (*v)[i] = f(i);
  return v;
}

template <class S>
Var conv_bn_act(Context<S>& ctx, Var x, const std::string& conv, const std::string& norm) {
  auto& tp = ctx.tape;
  Var y = nn::conv2d(tp, x, ctx.param(conv + ".w"), ctx.param(conv + ".b"));
  y = nn::batch_norm(tp, y, ctx.param(norm + ".gamma"), ctx.param(norm + ".beta"), ctx.stats(norm), ctx.train,
                     ctx.update_stats);
  return nn::leaky_relu(tp, y, S(0.01));
}

template <class S>
Var dense(Context<S>& ctx, Var x, const std::string& name) {
  return nn::linear(ctx.tape, x, ctx.param(name + ".w"), ctx.param(name + ".b"));
}

}  // namespace detail

// Observed cube as a [T][L][H][W] tape constant.
template <class S>
Var input_cube(Tape<S>& tp, const HyperCubeSequence& y) {
  return tp.constant({y.T, y.L, y.H, y.W}, std::vector<S>(y.data.begin(), y.data.end()));
}

// [T][L][H][W] -> [T][C][H][W]
template <class S>
Var encode(Context<S>& ctx, Var x) {
  const auto& s = ctx.tape.shape(x);
  if (s.size() != 4 || s[1] != ctx.params.dims.L || s[2] != ctx.params.dims.H || s[3] != ctx.params.dims.W)
    throw ShapeError("encode: input " + nn::shape_str(s) + " does not match the model");
  Var y = detail::conv_bn_act(ctx, x, "enc.conv1", "enc.bn1");
  y = ctx.dropout(y);
  y = detail::conv_bn_act(ctx, y, "enc.conv2", "enc.bn2");
  return ctx.dropout(y);
}

// [T][C][H][W] -> [T][S][D]: p x p patches projected to D, cls prepended,
// positional embedding added.
template <class S>
Var tokenize(Context<S>& ctx, Var feat) {
  auto& tp = ctx.tape;
  const auto& s = tp.shape(feat);
  const int p = ctx.params.arch.patch;
  if (s.size() != 4 || s[2] % p != 0 || s[3] % p != 0) throw ValidationError("tokenize: patch size must divide H and W");
  const int T = s[0], C = s[1], H = s[2], W = s[3], Wg = W / p, Np = (H / p) * Wg, F = C * p * p;
  auto idx = detail::make_index(static_cast<std::size_t>(T) * Np * F, [=](std::size_t i) {
    const int f = static_cast<int>(i % F);
    const int tok = static_cast<int>((i / F) % Np);
    const int t = static_cast<int>(i / (static_cast<std::size_t>(F) * Np));
    const int c = f / (p * p), dy = (f / p) % p, dx = f % p;
    const int y = (tok / Wg) * p + dy, x = (tok % Wg) * p + dx;
    return ((t * C + c) * H + y) * W + x;
  });
  Var patches = nn::gather(tp, feat, idx, {T, Np, F});
  Var proj = detail::dense(ctx, patches, "tok.proj");
  Var tokens = nn::prepend_rows(tp, ctx.param("tok.cls"), proj);
  return nn::add(tp, tokens, ctx.param("tok.pos"));
}

// Residual temporal attention of block `block`.
template <class S>
Var temporal_attention(Context<S>& ctx, Var x, int block) {
  const std::string b = "gam." + std::to_string(block) + ".tattn";
  Var qkv = detail::dense(ctx, x, b + ".qkv");
  std::vector<S>* w = nullptr;
  if (ctx.attention_trace) w = &ctx.attention_trace->temporal.emplace_back();
  Var att = nn::temporal_attention_kernel(ctx.tape, qkv, ctx.params.arch.heads, w);
  return nn::add(ctx.tape, x, detail::dense(ctx, att, b + ".out"));
}

// Residual spatial attention of block `block`, followed by the residual
// feed-forward module (D -> 4D -> D).
template <class S>
Var spatial_attention(Context<S>& ctx, Var x, int block) {
  auto& tp = ctx.tape;
  const std::string b = "gam." + std::to_string(block);
  Var qkv = detail::dense(ctx, x, b + ".sattn.qkv");
  std::vector<S>* w = nullptr;
  if (ctx.attention_trace) w = &ctx.attention_trace->spatial.emplace_back();
  Var att = nn::spatial_attention_kernel(tp, qkv, ctx.params.arch.heads, w);
  x = nn::add(tp, x, detail::dense(ctx, att, b + ".sattn.out"));
  Var h = nn::leaky_relu(tp, detail::dense(ctx, x, b + ".mlp.fc1"), S(0.01));
  return nn::add(tp, x, detail::dense(ctx, h, b + ".mlp.fc2"));
}

template <class S>
struct TokenSplit {
  Var cls;      // [T][D]
  Var patches;  // [T][N'][D]
};

template <class S>
TokenSplit<S> split_tokens(Context<S>& ctx, Var x) {
  const auto& s = ctx.tape.shape(x);
  const int T = s.at(0), R = s.at(1), D = s.at(2);
  auto cls_idx = detail::make_index(static_cast<std::size_t>(T) * D, [=](std::size_t i) {
    return static_cast<int>((i / D) * R * D + i % D);
  });
  auto patch_idx = detail::make_index(static_cast<std::size_t>(T) * (R - 1) * D, [=](std::size_t i) {
    const std::size_t t = i / (static_cast<std::size_t>(R - 1) * D);
    const std::size_t rest = i % (static_cast<std::size_t>(R - 1) * D);
    return static_cast<int>(t * R * D + D + rest);
  });
  return {nn::gather(ctx.tape, x, cls_idx, {T, D}), nn::gather(ctx.tape, x, patch_idx, {T, R - 1, D})};
}

// Channel attention on patch tokens: sigmoid(mlp(avg) + mlp(max)) per phase
// scales each channel. The cls tokens are not touched.
template <class S>
Var spectral_attention(Context<S>& ctx, Var patches) {
  auto& tp = ctx.tape;
  auto mlp = [&](Var v) {
    Var h = nn::leaky_relu(tp, detail::dense(ctx, v, "gam.spec.fc1"), S(0.01));
    return detail::dense(ctx, h, "gam.spec.fc2");
  };
  Var w = nn::sigmoid(tp, nn::add(tp, mlp(nn::pool_mean(tp, patches)), mlp(nn::pool_max(tp, patches))));
  return nn::mul_channels(tp, patches, w);
}

// Change gate between adjacent phases. For k = 1..T-1 the maps of phases k
// and k-1 give A1 = sigmoid(proj1(f3(next) - prev)) and A2 likewise with the
// 7x7 branch; the mode combines them into A, g = mean(A) and the cls token of
// phase k is scaled by 1 + alpha * g. Phase 0 keeps its cls token.
template <class S>
Var cem(Context<S>& ctx, Var patches, Var cls, CemMode mode) {
  auto& tp = ctx.tape;
  const auto& s = tp.shape(patches);
  const int T = s.at(0), Np = s.at(1), D = s.at(2);
  const int Hg = ctx.params.grid_h(), Wg = ctx.params.grid_w();
  if (Hg * Wg != Np || tp.shape(cls) != Shape{T, D}) throw ShapeError("cem: token shapes do not match the model grid");
  if (T < 2) return cls;
  const std::size_t n = static_cast<std::size_t>(T - 1) * D * Np;
  auto fold = [&](int offset) {
    return detail::make_index(n, [=](std::size_t i) {
      const std::size_t k = i / (static_cast<std::size_t>(D) * Np);
      const std::size_t d = (i / Np) % D;
      const std::size_t px = i % Np;
      return static_cast<int>(((k + offset) * Np + px) * D + d);
    });
  };
  const Shape map_shape{T - 1, D, Hg, Wg};
  Var next = nn::gather(tp, patches, fold(1), map_shape);
  Var prev = nn::gather(tp, patches, fold(0), map_shape);
  auto branch = [&](const std::string& conv, const std::string& norm, const std::string& proj) {
    Var f = detail::conv_bn_act(ctx, next, conv, norm);
    Var diff = nn::sub(tp, f, prev);
    return nn::sigmoid(tp, nn::conv2d(tp, diff, ctx.param(proj + ".w"), ctx.param(proj + ".b")));
  };
  std::optional<Var> a1, a2;
  if (mode != CemMode::a2) a1 = branch("cem.conv3", "cem.bn3", "cem.proj1");
  if (mode != CemMode::a1) a2 = branch("cem.conv7", "cem.bn7", "cem.proj2");
  Var a;
  switch (mode) {
    case CemMode::a1: a = *a1; break;
    case CemMode::a2: a = *a2; break;
    case CemMode::a1_plus_a2: a = nn::add(tp, *a1, *a2); break;
    case CemMode::a1_times_a2: a = nn::mul(tp, *a1, *a2); break;
  }
  Var g = nn::mean_per_batch(tp, a);
  Var factor = nn::affine(tp, g, S(ctx.params.arch.alpha), S(1));
  Var full = nn::concat(tp, tp.constant({1}, {S(1)}), factor, {T});
  if (ctx.cem_trace) {
    ctx.cem_trace->a1 = a1 ? tp.value(*a1) : std::vector<S>{};
    ctx.cem_trace->a2 = a2 ? tp.value(*a2) : std::vector<S>{};
    ctx.cem_trace->combined = tp.value(a);
    ctx.cem_trace->gate = tp.value(g);
  }
  return nn::mul_rows(tp, cls, full);
}

// Patch tokens plus their phase's cls token, upsampled to pixels, mapped to
// P logits and normalized: [T][N][P].
template <class S>
Var abundance_head(Context<S>& ctx, Var patches, Var cls) {
  auto& tp = ctx.tape;
  Var x = nn::add_rows(tp, patches, cls);
  const int p = ctx.params.arch.patch;
  if (p > 1) {
    const int T = ctx.params.dims.T, H = ctx.params.dims.H, W = ctx.params.dims.W, D = ctx.params.arch.D;
    const int Wg = ctx.params.grid_w(), Np = ctx.params.patches(), N = H * W;
    auto idx = detail::make_index(static_cast<std::size_t>(T) * N * D, [=](std::size_t i) {
      const int d = static_cast<int>(i % D);
      const int px = static_cast<int>((i / D) % N);
      const int t = static_cast<int>(i / (static_cast<std::size_t>(D) * N));
      const int tok = (px / W / p) * Wg + (px % W) / p;
      return (t * Np + tok) * D + d;
    });
    x = nn::gather(tp, x, idx, {T, N, D});
  }
  return nn::softmax_last(tp, detail::dense(ctx, x, "head"));
}

// [T][N][P] -> [T][N][L] through the per-phase decoders.
template <class S>
Var decode(Context<S>& ctx, Var abundances) {
  const auto& s = ctx.tape.shape(abundances);
  if (s.size() != 3 || s[0] != ctx.params.dims.T || s[2] != ctx.params.arch.P)
    throw ShapeError("decode: abundance shape " + nn::shape_str(s) + " does not match the decoders");
  return nn::batched_matmul_nt(ctx.tape, abundances, ctx.param("dec.w"));
}

template <class S>
struct Graph {
  Var abundances;      // [T][N][P]
  Var reconstruction;  // [T][N][L]
  Var decoder;         // [T][L][P]
};

template <class S>
Graph<S> forward(Context<S>& ctx, Var cube, const Switches& sw) {
  Var x = tokenize(ctx, encode(ctx, cube));
  if (sw.use_gam)
    for (int i = 0; i < ctx.params.arch.depth; ++i) {
      x = temporal_attention(ctx, x, i);
      x = spatial_attention(ctx, x, i);
    }
  auto [cls, patches] = split_tokens(ctx, x);
  if (sw.use_gam) patches = spectral_attention(ctx, patches);
  if (sw.use_cem) cls = cem(ctx, patches, cls, sw.cem_mode);
  Var a = abundance_head(ctx, patches, cls);
  Var y = decode(ctx, a);
  return {a, y, ctx.param("dec.w")};
}

// [T][N][P] tape values -> AbundanceSequence [T][P][H][W].
template <class S>
AbundanceSequence to_abundances(const std::vector<S>& v, const ModelDims& d, int P) {
  AbundanceSequence a;
  a.T = d.T;
  a.P = P;
  a.H = d.H;
  a.W = d.W;
  const int N = d.H * d.W;
  a.data.resize(static_cast<std::size_t>(d.T) * P * N);
  for (int t = 0; t < d.T; ++t)
    for (int n = 0; n < N; ++n)
      for (int p = 0; p < P; ++p) a.at(t, p, n) = float(v[(static_cast<std::size_t>(t) * N + n) * P + p]);
  return a;
}

// [T][N][L] tape values -> HyperCubeSequence [T][L][H][W].
template <class S>
HyperCubeSequence to_cube(const std::vector<S>& v, const ModelDims& d) {
  HyperCubeSequence y;
  y.T = d.T;
  y.L = d.L;
  y.H = d.H;
  y.W = d.W;
  const int N = d.H * d.W;
  y.data.resize(static_cast<std::size_t>(d.T) * d.L * N);
  for (int t = 0; t < d.T; ++t)
    for (int n = 0; n < N; ++n)
      for (int l = 0; l < d.L; ++l) y.at(t, l, n) = float(v[(static_cast<std::size_t>(t) * N + n) * d.L + l]);
  return y;
}

struct Estimate {
  AbundanceSequence abundances;
  HyperCubeSequence reconstruction;
  EndmemberSet endmembers;
};

// Eval-mode forward pass producing domain objects.
inline Estimate infer(const HyperCubeSequence& y, ModelParameters& params, const Switches& sw) {
  if (y.T != params.dims.T || y.L != params.dims.L || y.H != params.dims.H || y.W != params.dims.W)
    throw ShapeError("infer: data dimensions do not match the model");
  Tape<float> tp;
  Context<float> ctx(tp, params);
  ctx.train = false;
  ctx.track_grad = false;
  const auto g = forward(ctx, input_cube(tp, y), sw);
  return {to_abundances(tp.value(g.abundances), params.dims, params.arch.P), to_cube(tp.value(g.reconstruction), params.dims),
          read_endmembers(params)};
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr char kCheckpointMagic[8] = {'M', 'T', 'H', 'U', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <class T>
void put(std::ostream& os, T v) {
  static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is, const std::string& what) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw FormatError("checkpoint truncated while reading " + what);
  return v;
}

}  // namespace detail

inline nlohmann::json dims_json(const ModelDims& d) { return {{"T", d.T}, {"L", d.L}, {"H", d.H}, {"W", d.W}}; }

// Blob: magic, u32 version, u32 header length, JSON header (arch, dims),
// u32 tensor count, then per tensor: u8 kind (0 parameter, 1 buffer),
// u32 name length, name, u32 rank, i32 dims, f32 data. Little-endian.
inline void save_checkpoint(const ModelParameters& p, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path.string());
  os.write(kCheckpointMagic, 8);
  detail::put<std::uint32_t>(os, kCheckpointVersion);
  const std::string header = nlohmann::json{{"arch", p.arch}, {"dims", dims_json(p.dims)}}.dump();
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(header.size()));
  os.write(header.data(), static_cast<std::streamsize>(header.size()));
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(p.values.size() + p.buffers.size()));
  auto write = [&](std::uint8_t kind, const std::string& name, const Tensor<float>& t) {
    detail::put<std::uint8_t>(os, kind);
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(t.shape.size()));
    for (int d : t.shape) detail::put<std::int32_t>(os, d);
    os.write(reinterpret_cast<const char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * sizeof(float)));
  };
  for (const auto& [k, v] : p.values) write(0, k, v);
  for (const auto& [k, v] : p.buffers) write(1, k, v);
  if (!os) throw std::runtime_error("failed writing checkpoint " + path.string());
}

inline ModelParameters load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint " + path.string());
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw FormatError(path.string() + ": not a checkpoint file");
  if (const auto v = detail::get<std::uint32_t>(is, "version"); v != kCheckpointVersion)
    throw FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(v));
  const auto hlen = detail::get<std::uint32_t>(is, "header length");
  std::string header(hlen, '\0');
  if (!is.read(header.data(), hlen)) throw FormatError("checkpoint truncated in header");
  ModelParameters p;
  try {
    const auto j = nlohmann::json::parse(header);
    p.arch = j.at("arch").get<ArchitectureConfig>();
    const auto& d = j.at("dims");
    p.dims = {d.at("T").get<int>(), d.at("L").get<int>(), d.at("H").get<int>(), d.at("W").get<int>()};
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": bad checkpoint header: " + e.what());
  }
  const auto count = detail::get<std::uint32_t>(is, "tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto kind = detail::get<std::uint8_t>(is, "tensor kind");
    const auto nlen = detail::get<std::uint32_t>(is, "name length");
    if (nlen > 4096) throw FormatError("checkpoint tensor name too long");
    std::string name(nlen, '\0');
    if (!is.read(name.data(), nlen)) throw FormatError("checkpoint truncated in tensor name");
    const auto rank = detail::get<std::uint32_t>(is, "rank");
    if (rank > 8) throw FormatError("checkpoint tensor '" + name + "' has invalid rank");
    Shape shape(rank);
    for (auto& d : shape) {
      d = detail::get<std::int32_t>(is, "dims");
      if (d < 0) throw FormatError("checkpoint tensor '" + name + "' has a negative dimension");
    }
    Tensor<float> t(shape);
    if (!is.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * sizeof(float))))
      throw FormatError("checkpoint truncated in tensor '" + name + "'");
    (kind == 0 ? p.values : p.buffers).emplace(std::move(name), std::move(t));
  }
  const auto ref = init_parameters<float>(p.arch, p.dims, 0);
  for (const auto& [k, v] : ref.values)
    if (!p.values.count(k) || p.values.at(k).shape != v.shape) throw FormatError("checkpoint missing or misshaped '" + k + "'");
  for (const auto& [k, v] : ref.buffers)
    if (!p.buffers.count(k) || p.buffers.at(k).shape != v.shape) throw FormatError("checkpoint missing or misshaped '" + k + "'");
  p.validate();
  return p;
}

}  // namespace mthu::net
