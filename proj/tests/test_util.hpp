#pragma once

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "mthu/datamodel.hpp"
#include "mthu/nn/ops.hpp"

namespace mthu::testutil {

inline std::filesystem::path temp_dir(const std::string& name) {
  auto d = std::filesystem::temp_directory_path() / ("mthu_test_" + name);
  std::filesystem::remove_all(d);
  std::filesystem::create_directories(d);
  return d;
}

inline std::vector<double> random_vector(std::size_t n, std::mt19937_64& g, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = u(g);
  return v;
}

inline AbundanceSequence uniform_abundances(int T, int P, int H, int W) {
  AbundanceSequence a;
  a.T = T;
  a.P = P;
  a.H = H;
  a.W = W;
  a.data.assign(static_cast<std::size_t>(T) * P * H * W, 1.0f / P);
  return a;
}

// Central differences of a scalar function of a flat parameter vector.
inline std::vector<double> numeric_gradient(const std::function<double(const std::vector<double>&)>& f,
                                            std::vector<double> x, double h = 1e-6) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double fp = f(x);
    x[i] = keep - h;
    const double fm = f(x);
    x[i] = keep;
    g[i] = (fp - fm) / (2 * h);
  }
  return g;
}

// Checks an op's reverse-mode gradient against central differences. `build`
// maps input variables to an output; the scalar checked is sum(w * output)
// with fixed random weights w.
inline void expect_gradients_match(
    const std::vector<nn::Tensor<double>>& inputs,
    const std::function<nn::Var(nn::Tape<double>&, const std::vector<nn::Var>&)>& build, double tol = 1e-6,
    std::uint64_t seed = 7) {
  auto run = [&](const std::vector<nn::Tensor<double>>& in, nn::Tape<double>& tp, std::vector<nn::Var>& vars) {
    vars.clear();
    for (const auto& t : in) vars.push_back(tp.variable(t));
    return build(tp, vars);
  };
  nn::Tape<double> tp;
  std::vector<nn::Var> vars;
  const nn::Var out = run(inputs, tp, vars);
  std::mt19937_64 g(seed);
  const auto weights = random_vector(tp.value(out).size(), g);
  auto dot = [&](const std::vector<double>& v) {
    double s = 0;
    for (std::size_t i = 0; i < v.size(); ++i) s += weights[i] * v[i];
    return s;
  };
  const nn::Var root = nn::scalar_function<double>(tp, dot(tp.value(out)), {{out, weights}});
  tp.backward(root);

  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto f = [&](const std::vector<double>& x) {
      auto in = inputs;
      in[k].data = x;
      nn::Tape<double> t2;
      std::vector<nn::Var> v2;
      return dot(t2.value(run(in, t2, v2)));
    };
    const auto num = numeric_gradient(f, inputs[k].data);
    const auto ana = tp.has_grad(vars[k]) ? tp.grad(vars[k]) : std::vector<double>(num.size(), 0.0);
    for (std::size_t i = 0; i < num.size(); ++i)
      EXPECT_NEAR(ana[i], num[i], tol * std::max(1.0, std::abs(num[i]))) << "input " << k << " entry " << i;
  }
}

}  // namespace mthu::testutil
