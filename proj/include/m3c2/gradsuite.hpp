// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference suite over every differentiable op and the composed
// model. Shared by the `gradcheck` command and the test binaries.
#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "m3c2/gradcore.hpp"
#include "m3c2/model.hpp"
#include "m3c2/trainer.hpp"

namespace m3c2::gradsuite {

inline constexpr double kStep = 1e-5;
inline constexpr double kTolerance = 1e-4;
// At most this share of probes may be lost to stencils that cross a relu kink
// or a top-M boundary.
inline constexpr double kMaxStraddledFraction = 0.01;

struct CaseResult {
  std::string name;
  std::uint64_t seed = 0;
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t coords = 0;
  std::size_t straddled = 0;
  bool passed = true;
};

struct SuiteReport {
  std::vector<CaseResult> cases;
  bool all_cases_passed() const {
    for (const auto& c : cases)
      if (!c.passed) return false;
    return true;
  }
  bool passed() const {
    return all_cases_passed() &&
           static_cast<double>(straddled()) <=
               kMaxStraddledFraction * static_cast<double>(coords() + straddled());
  }
  double max_rel_error() const {
    double m = 0.0;
    for (const auto& c : cases) m = std::max(m, c.max_rel_error);
    return m;
  }
  std::size_t coords() const {
    std::size_t n = 0;
    for (const auto& c : cases) n += c.coords;
    return n;
  }
  std::size_t straddled() const {
    std::size_t n = 0;
    for (const auto& c : cases) n += c.straddled;
    return n;
  }
};

inline CaseResult summarize(const std::string& name, std::uint64_t seed,
                            const grad::GradCheckReport& r) {
  CaseResult c;
  c.name = name;
  c.seed = seed;
  for (const auto& p : r.params) {
    c.coords += p.checked;
    c.straddled += p.straddled;
    if (p.max_rel_error >= c.max_rel_error) {
      c.max_rel_error = p.max_rel_error;
      c.worst_param = p.name;
    }
  }
  c.passed = r.passed();
  return c;
}

namespace detail {

struct Rng {
  std::mt19937_64 gen;
  explicit Rng(std::uint64_t seed) : gen(splitmix64(seed ^ 0x67c7a5eULL)) {}

  grad::Tensor uniform(std::size_t r, std::size_t c, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> d(lo, hi);
    grad::Tensor t(r, c);
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = d(gen);
    return t;
  }
  // Magnitudes in [lo, hi] with random sign; keeps inputs off kinks and poles.
  grad::Tensor away_from_zero(std::size_t r, std::size_t c, double lo, double hi) {
    grad::Tensor t = uniform(r, c, lo, hi);
    std::bernoulli_distribution sign(0.5);
    for (std::size_t i = 0; i < t.numel(); ++i)
      if (sign(gen)) t[i] = -t[i];
    return t;
  }
  std::size_t index(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(gen); }
};

}  // namespace detail

/// One check per op; each reduces the op output against a random weighting
/// so that every output element carries a distinct gradient.
inline SuiteReport op_suite(std::uint64_t seed) {
  using namespace grad;
  detail::Rng rng(seed);
  SuiteReport report;

  auto run = [&](const std::string& name, std::vector<Tensor> inputs,
                 const std::function<Var(const std::vector<Var>&)>& op) {
    std::vector<Var> vars;
    std::vector<NamedParam> named;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      vars.push_back(parameter(inputs[i]));
      named.push_back({name + ".x" + std::to_string(i), vars.back()});
    }
    Tensor weight;
    bool have_weight = false;
    auto f = [&]() {
      const Var y = op(vars);
      if (!have_weight) {
        weight = rng.uniform(y.rows(), y.cols(), 0.5, 1.5);
        have_weight = true;
      }
      return sum(mul(y, constant(weight)));
    };
    report.cases.push_back(summarize(name, seed, grad_check(f, named, kStep, kTolerance)));
  };

  const std::size_t r = 2 + rng.index(3), c = 2 + rng.index(3), k = 2 + rng.index(3);
  run("add", {rng.uniform(r, c), rng.uniform(r, c)}, [](auto& v) { return add(v[0], v[1]); });
  run("sub", {rng.uniform(r, c), rng.uniform(r, c)}, [](auto& v) { return sub(v[0], v[1]); });
  run("mul", {rng.uniform(r, c), rng.uniform(r, c)}, [](auto& v) { return mul(v[0], v[1]); });
  run("div", {rng.uniform(r, c), rng.away_from_zero(r, c, 0.5, 2.0)},
      [](auto& v) { return div(v[0], v[1]); });
  run("add_scalar", {rng.uniform(1, 1), rng.uniform(r, c)}, [](auto& v) { return add(v[0], v[1]); });
  run("mul_scalar", {rng.uniform(r, c), rng.uniform(1, 1)}, [](auto& v) { return mul(v[0], v[1]); });
  run("div_scalar", {rng.away_from_zero(1, 1, 0.5, 2.0), rng.away_from_zero(r, c, 0.5, 2.0)},
      [](auto& v) { return div(v[0], v[1]); });
  run("scale", {rng.uniform(r, c)}, [](auto& v) { return scale(v[0], -1.7); });
  run("add_constant", {rng.uniform(r, c)}, [](auto& v) { return mul(add_constant(v[0], 0.3), v[0]); });
  run("tanh", {rng.uniform(r, c, -2.0, 2.0)}, [](auto& v) { return tanh(v[0]); });
  run("relu", {rng.away_from_zero(r, c, 0.05, 1.0)}, [](auto& v) { return relu(v[0]); });
  run("exp", {rng.uniform(r, c)}, [](auto& v) { return exp(v[0]); });
  run("log", {rng.uniform(r, c, 0.2, 3.0)}, [](auto& v) { return log(v[0]); });
  run("matmul", {rng.uniform(r, k), rng.uniform(k, c)}, [](auto& v) { return matmul(v[0], v[1]); });
  run("transpose", {rng.uniform(r, c)}, [](auto& v) { return transpose(v[0]); });
  run("repeat_rows", {rng.uniform(1, c)}, [r](auto& v) { return repeat_rows(v[0], r); });
  run("concat0", {rng.uniform(r, c), rng.uniform(k, c)}, [](auto& v) { return concat({v[0], v[1]}, 0); });
  run("concat1", {rng.uniform(r, c), rng.uniform(r, k)}, [](auto& v) { return concat({v[0], v[1]}, 1); });
  run("slice0", {rng.uniform(r + 2, c)}, [r](auto& v) { return slice(v[0], 0, 1, r + 1); });
  run("slice1", {rng.uniform(r, c + 2)}, [c](auto& v) { return slice(v[0], 1, 1, c + 1); });
  run("take", {rng.uniform(r, c)}, [](auto& v) { return take(v[0], {0, 2, 2, 1}); });
  run("sum", {rng.uniform(r, c)}, [](auto& v) { return mul(sum(v[0]), sum(v[0])); });
  run("mean", {rng.uniform(r, c)}, [](auto& v) { return mul(mean(v[0]), sum(v[0])); });
  run("sum_axis0", {rng.uniform(r, c)}, [](auto& v) { return sum(v[0], 0); });
  run("sum_axis1", {rng.uniform(r, c)}, [](auto& v) { return sum(v[0], 1); });
  run("mean_axis0", {rng.uniform(r, c)}, [](auto& v) { return mean(v[0], 0); });
  run("mean_axis1", {rng.uniform(r, c)}, [](auto& v) { return mean(v[0], 1); });
  run("l2_norm", {rng.uniform(r, c)}, [](auto& v) { return l2_norm(v[0]); });
  run("dot", {rng.uniform(r, c), rng.uniform(r, c)}, [](auto& v) { return dot(v[0], v[1]); });
  run("cosine", {rng.uniform(r, c), rng.uniform(r, c)}, [](auto& v) { return cosine(v[0], v[1]); });
  run("mse", {rng.uniform(r, c), rng.uniform(r, c)}, [](auto& v) { return mse(v[0], v[1]); });
  run("softmax0", {rng.uniform(r, c, -2.0, 2.0)}, [](auto& v) { return softmax(v[0], 0); });
  run("softmax1", {rng.uniform(r, c, -2.0, 2.0)}, [](auto& v) { return softmax(v[0], 1); });
  run("layer_norm", {rng.uniform(r, c + 1), rng.uniform(1, c + 1), rng.uniform(1, c + 1)},
      [](auto& v) { return layer_norm(v[0], v[1], v[2]); });
  const std::size_t target = rng.index(c);
  run("softmax_cross_entropy", {rng.uniform(1, c, -2.0, 2.0)},
      [target](auto& v) { return softmax_cross_entropy(v[0], target); });
  return report;
}

/// Tiny random bag for model checks.
inline PatchBag random_bag(std::uint64_t seed, std::size_t n, std::size_t k) {
  detail::Rng rng(seed ^ 0xba9ULL);
  PatchBag b;
  b.case_id = "grad_" + std::to_string(seed);
  b.feats_high = rng.uniform(n, k, -2.0, 2.0);
  b.feats_low = rng.uniform(n, k, -2.0, 2.0);
  std::bernoulli_distribution coin(0.5);
  b.markers.idh_mut = coin(rng.gen);
  b.markers.codel_1p19q = b.markers.idh_mut && coin(rng.gen);
  b.markers.cdkn_homdel = coin(rng.gen);
  b.markers.nmp = coin(rng.gen);
  b.glioma_class = derive_glioma_class(b.markers);
  return b;
}

inline grad::Tensor random_cooccurrence(std::uint64_t seed) {
  detail::Rng rng(seed ^ 0xa11ULL);
  std::vector<std::array<int, 3>> labels(12);
  std::bernoulli_distribution coin(0.5);
  for (auto& l : labels)
    for (int& v : l) v = coin(rng.gen);
  return estimate_cooccurrence(labels).a;
}

struct ModelCheckOptions {
  std::size_t n = 5;
  std::size_t k = 4;
  std::size_t pool_hidden = 3;
  std::size_t dcc_m = 2;
  bool use_graph = true;
  std::size_t coords_per_param = 0;  // 0 = every coordinate
};

/// Every parameter of the composed model against the full weighted objective
/// (all six loss families active).
inline CaseResult model_check(std::uint64_t seed, const ModelCheckOptions& opt = {}) {
  ModelConfig mc;
  mc.K = opt.k;
  mc.pool_hidden = opt.pool_hidden;
  mc.seed = seed;
  Model model(mc, random_cooccurrence(seed));
  {
    // Check at a random point, not the initialisation: biases become nonzero
    // and activations stay O(1), which keeps layer norm well conditioned.
    detail::Rng rng(seed ^ 0x9a7aULL);
    for (auto& p : model.store().params()) p.var.mutable_value() = rng.uniform(p.var.rows(), p.var.cols());
  }
  const PatchBag bag = random_bag(seed, opt.n, opt.k);
  ForwardOptions fo;
  fo.use_graph = opt.use_graph;
  fo.dcc_m = opt.dcc_m;
  const TrainConfig tc;
  auto f = [&]() {
    const BagLosses l = model.forward(bag, fo).losses;
    return total_loss(std::span<const BagLosses>(&l, 1), tc).total;
  };
  std::vector<grad::NamedParam> named;
  for (const auto& p : model.store().params()) named.push_back({p.name, p.var});
  std::mt19937_64 pick_rng(splitmix64(seed ^ 0xc0ffeeULL));
  auto pick = [&](std::size_t, std::size_t numel, std::size_t) {
    return std::uniform_int_distribution<std::size_t>(0, numel - 1)(pick_rng);
  };
  return summarize("model", seed,
                   grad::grad_check(f, named, kStep, kTolerance, opt.coords_per_param, pick));
}

struct SuiteOptions {
  std::uint64_t seed = 0;
  std::size_t seeds = 100;
  std::size_t sampled_coords = 2;
  std::size_t full_coverage_seeds = 3;
};

/// Op checks and a sampled model check on every seed, plus full-coordinate
/// model checks on the first few seeds (with and without the graph).
inline SuiteReport full_suite(const SuiteOptions& o = {}) {
  SuiteReport all;
  for (std::size_t s = 0; s < o.seeds; ++s) {
    const std::uint64_t seed = o.seed + s;
    SuiteReport ops = op_suite(seed);
    all.cases.insert(all.cases.end(), ops.cases.begin(), ops.cases.end());
    ModelCheckOptions mo;
    mo.coords_per_param = s < o.full_coverage_seeds ? 0 : o.sampled_coords;
    all.cases.push_back(model_check(seed, mo));
    if (s < o.full_coverage_seeds) {
      mo.use_graph = false;
      CaseResult c = model_check(seed, mo);
      c.name = "model_no_graph";
      all.cases.push_back(c);
    }
  }
  return all;
}

}  // namespace m3c2::gradsuite
