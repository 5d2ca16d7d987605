#pragma once

// Finite-difference check of the full network loss against reverse-mode
// gradients, in double precision, over every parameter entry.

#include <chrono>
#include <cmath>
#include <map>
#include <string>

#include "mthu/network.hpp"
#include "mthu/objective.hpp"
#include "mthu/synthgen.hpp"

namespace mthu::testutil {

struct MicroModel {
  DatasetBundle data;
  net::Parameters<double> params;
  net::Switches switches;
};

// T=2, 4x4, L=6, P=2, D=8, two heads, one block.
inline MicroModel micro_model(std::uint64_t seed = 1) {
  synth::Synth1Config c;
  c.T = 2;
  c.H = c.W = 4;
  c.L = 6;
  c.P = 2;
  c.mutation_phases = {2};
  c.mutation_radius_px = 1;
  c.seed = seed;
  MicroModel m{synth::generate_synthetic1(c), {}, {}};
  net::ArchitectureConfig a;
  a.C = 8;
  a.D = 8;
  a.heads = 2;
  a.depth = 1;
  a.P = 2;
  a.dropout = 0.0;
  m.params = net::init_parameters<double>(a, {2, 6, 4, 4}, seed);
  return m;
}

// Training-mode loss using batch statistics without updating running
// averages, so repeated evaluations are a pure function of the parameters.
// When grads is given it receives d(loss)/d(parameter) for every parameter;
// pattern receives the branches taken by piecewise ops.
inline double micro_loss(MicroModel& m, std::map<std::string, std::vector<double>>* grads = nullptr,
                         std::vector<std::uint32_t>* pattern = nullptr) {
  if (pattern) pattern->clear();
  nn::branch_pattern = pattern;
  nn::Tape<double> tp;
  net::Context<double> ctx(tp, m.params);
  ctx.train = true;
  ctx.update_stats = false;
  ctx.track_grad = grads != nullptr;
  const auto g = net::forward(ctx, net::input_cube(tp, m.data.observed), m.switches);
  const auto y = objective::pixel_major<double>(m.data.observed);
  const auto anchors = objective::phase_means<double>(m.data.observed);
  const auto loss = objective::total_loss_node<double>(tp, y, g.reconstruction, g.decoder, anchors, {});
  nn::branch_pattern = nullptr;
  if (grads) {
    tp.backward(loss);
    grads->clear();
    for (const auto& [name, var] : ctx.bound)
      (*grads)[name] = tp.has_grad(var) ? tp.grad(var) : std::vector<double>(tp.value(var).size(), 0.0);
  }
  return tp.value(loss)[0];
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst;
  std::size_t entries = 0;
  std::size_t unused = 0;   // parameters the forward pass never touched
  std::size_t skipped = 0;  // entries whose +-step evaluations cross a kink
  double seconds = 0.0;
};

// Central differences (f(x+h) - f(x-h)) / 2h with relative error
// |a - n| / max(|a|, |n|, floor), floor = floor_scale * max |a| over all
// entries. The floor covers entries whose true gradient is zero or orders of
// magnitude below the rest (conv biases ahead of batch normalization),
// where the quotient only measures rounding and truncation noise. An entry
// is skipped when either perturbed evaluation takes a different branch of a leaky ReLU or max pool than the
// unperturbed one: the difference quotient then spans a kink and is not an
// estimate of the derivative.
inline GradCheckResult check_micro_gradients(MicroModel& m, double step = 1e-3, double floor_scale = 1e-4) {
  const auto t0 = std::chrono::steady_clock::now();
  GradCheckResult r;
  std::map<std::string, std::vector<double>> grads;
  std::vector<std::uint32_t> base, plus, minus;
  micro_loss(m, &grads, &base);
  double gmax = 0.0;
  for (const auto& [name, g] : grads)
    for (double v : g) gmax = std::max(gmax, std::abs(v));
  const double floor = floor_scale * gmax;
  for (auto& [name, tensor] : m.params.values) {
    auto it = grads.find(name);
    if (it == grads.end()) {
      ++r.unused;
      continue;
    }
    for (std::size_t i = 0; i < tensor.data.size(); ++i) {
      const double keep = tensor.data[i];
      tensor.data[i] = keep + step;
      const double fp = micro_loss(m, nullptr, &plus);
      tensor.data[i] = keep - step;
      const double fm = micro_loss(m, nullptr, &minus);
      tensor.data[i] = keep;
      ++r.entries;
      if (plus != base || minus != base) {
        ++r.skipped;
        continue;
      }
      const double num = (fp - fm) / (2 * step);
      const double ana = it->second[i];
      const double rel = std::abs(ana - num) / std::max({std::abs(ana), std::abs(num), floor});
      if (rel > r.max_rel_error) {
        r.max_rel_error = rel;
        r.worst = name + "[" + std::to_string(i) + "] analytic " + std::to_string(ana) + " numeric " + std::to_string(num);
      }
    }
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

}  // namespace mthu::testutil
