// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "m3c2/interaction.hpp"
#include "m3c2/nn.hpp"

namespace m3c2 {

/// Adam with decoupled weight decay:
///   p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)
class AdamW {
 public:
  struct Options {
    double lr = 0.003;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;
  };

  AdamW(const ParameterStore& store, Options opt) : opt_(opt) {
    for (const auto& p : store.params()) {
      m_.emplace_back(p.var.value().numel(), 0.0);
      v_.emplace_back(p.var.value().numel(), 0.0);
    }
  }

  /// Applies one update using `grads` (same order as the store).
  void step(ParameterStore& store, const GradientSet& grads) {
    auto& params = store.params();
    const auto& entries = grads.entries();
    if (entries.size() != params.size()) throw std::invalid_argument("AdamW: gradient count mismatch");
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& value = params[i].var.mutable_value();
      const auto& g = entries[i].grad;
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < value.numel(); ++j) {
        m[j] = opt_.beta1 * m[j] + (1.0 - opt_.beta1) * g[j];
        v[j] = opt_.beta2 * v[j] + (1.0 - opt_.beta2) * g[j] * g[j];
        const double mh = m[j] / bc1;
        const double vh = v[j] / bc2;
        value[j] -= opt_.lr * (mh / (std::sqrt(vh) + opt_.eps) + opt_.weight_decay * value[j]);
      }
    }
  }

  std::size_t steps() const { return t_; }

 private:
  Options opt_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace m3c2
