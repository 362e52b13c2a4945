// SPDX-License-Identifier: Apache-2.0
//
// Named parameter ownership and the dense layer shared by every module.
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "m3c2/gradcore.hpp"

namespace m3c2 {

/// Which task path owns a parameter. Shared parameters are never modulated.
enum class Partition { Shared, Histology, Molecular };

inline const char* partition_name(Partition p) {
  switch (p) {
    case Partition::Shared: return "shared";
    case Partition::Histology: return "histology";
    case Partition::Molecular: return "molecular";
  }
  return "?";
}

struct Parameter {
  std::string name;
  Partition partition;
  grad::Var var;
};

/// Registration-ordered parameter collection with a seeded initialiser.
class ParameterStore {
 public:
  explicit ParameterStore(std::uint64_t seed) : rng_(seed) {}

  grad::Var add(const std::string& name, grad::Tensor init, Partition part) {
    for (const auto& p : params_) {
      if (p.name == name) throw std::invalid_argument("duplicate parameter name: " + name);
    }
    grad::Var v = grad::parameter(std::move(init));
    params_.push_back({name, part, v});
    return v;
  }

  /// U(-bound, bound) entries.
  grad::Var uniform(const std::string& name, std::size_t rows, std::size_t cols, double bound,
                    Partition part) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    grad::Tensor t(rows, cols);
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = dist(rng_);
    return add(name, std::move(t), part);
  }

  grad::Var filled(const std::string& name, std::size_t rows, std::size_t cols, double value,
                   Partition part) {
    return add(name, grad::Tensor(rows, cols, value), part);
  }

  void zero_grad() {
    for (auto& p : params_) p.var.zero_grad();
  }

  const std::vector<Parameter>& params() const { return params_; }
  std::vector<Parameter>& params() { return params_; }

  const Parameter* find(const std::string& name) const {
    for (const auto& p : params_)
      if (p.name == name) return &p;
    return nullptr;
  }

  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.var.value().numel();
    return n;
  }

  std::vector<grad::NamedParam> named() const {
    std::vector<grad::NamedParam> out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.push_back({p.name, p.var});
    return out;
  }

 private:
  std::vector<Parameter> params_;
  std::mt19937_64 rng_;
};

/// y = x W + b, W in (in x out), b a 1 x out row.
struct Linear {
  grad::Var weight;
  grad::Var bias;

  static Linear create(ParameterStore& store, const std::string& name, std::size_t in,
                       std::size_t out, Partition part) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    Linear l;
    l.weight = store.uniform(name + ".weight", in, out, bound, part);
    l.bias = store.filled(name + ".bias", 1, out, 0.0, part);
    return l;
  }

  grad::Var operator()(const grad::Var& x) const {
    return grad::add(grad::matmul(x, weight), grad::repeat_rows(bias, x.rows()));
  }

  std::size_t in_features() const { return weight.rows(); }
  std::size_t out_features() const { return weight.cols(); }
};

/// Linear -> relu -> Linear.
struct Mlp {
  Linear hidden;
  Linear out;

  static Mlp create(ParameterStore& store, const std::string& name, std::size_t in,
                    std::size_t width, std::size_t out_dim, Partition part) {
    return {Linear::create(store, name + ".fc1", in, width, part),
            Linear::create(store, name + ".fc2", width, out_dim, part)};
  }

  grad::Var operator()(const grad::Var& x) const { return out(grad::relu(hidden(x))); }
};

}  // namespace m3c2
