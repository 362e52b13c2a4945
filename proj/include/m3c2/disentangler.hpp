// SPDX-License-Identifier: Apache-2.0
//
// Multi-scale disentangling: fuses the two magnification feature sets with
// learnable scalar weights, splits the result into shared and independent
// features per task, and scores the split with a ratio of Frobenius norms.
#pragma once

#include <string>

#include "m3c2/gradcore.hpp"
#include "m3c2/nn.hpp"

namespace m3c2 {

struct DisentangledFeatures {
  grad::Var shared_mol, indep_mol;  // S_m, I_m
  grad::Var shared_his, indep_his;  // S_h, I_h
  grad::Var base;                   // U_base
  grad::Var fused_mol, fused_his;   // U_m, U_h
};

struct Disentangler {
  grad::Var weight_low, weight_high;  // 1x1 learnable scale weights
  Linear base;                        // 2K -> K
  Mlp shared_mol, indep_mol, shared_his, indep_his;  // K -> 2K -> K
  Linear fuse_mol, fuse_his;                         // 2K -> K

  static Disentangler create(ParameterStore& store, std::size_t k,
                             const std::string& name = "disent") {
    const auto part = Partition::Shared;
    Disentangler d;
    d.weight_low = store.filled(name + ".w_low", 1, 1, 1.0, part);
    d.weight_high = store.filled(name + ".w_high", 1, 1, 1.0, part);
    d.base = Linear::create(store, name + ".base", 2 * k, k, part);
    d.shared_mol = Mlp::create(store, name + ".S_m", k, 2 * k, k, part);
    d.indep_mol = Mlp::create(store, name + ".I_m", k, 2 * k, k, part);
    d.shared_his = Mlp::create(store, name + ".S_h", k, 2 * k, k, part);
    d.indep_his = Mlp::create(store, name + ".I_h", k, 2 * k, k, part);
    d.fuse_mol = Linear::create(store, name + ".U_m", 2 * k, k, part);
    d.fuse_his = Linear::create(store, name + ".U_h", 2 * k, k, part);
    return d;
  }

  DisentangledFeatures operator()(const grad::Var& feats_low, const grad::Var& feats_high) const {
    using namespace grad;
    check_same_shape("disentangle", feats_low.value(), feats_high.value());
    if (feats_low.cols() * 2 != base.in_features()) {
      throw ShapeError("disentangle: shape mismatch " + feats_low.value().shape_string() +
                       " vs expected width " + std::to_string(base.in_features() / 2));
    }
    DisentangledFeatures out;
    out.base = base(concat({mul(weight_low, feats_low), mul(weight_high, feats_high)}, 1));
    out.shared_mol = shared_mol(out.base);
    out.indep_mol = indep_mol(out.base);
    out.shared_his = shared_his(out.base);
    out.indep_his = indep_his(out.base);
    out.fused_mol = fuse_mol(concat({out.shared_mol, out.indep_mol}, 1));
    out.fused_his = fuse_his(concat({out.shared_his, out.indep_his}, 1));
    return out;
  }
};

inline constexpr double kDisentEps = 1e-8;

/// ||S_m - S_h|| / (||I_m - I_h|| + ||I_m - U_m|| + ||I_h - U_h|| + eps).
inline grad::Var disent_loss(const DisentangledFeatures& d) {
  using namespace grad;
  const Var num = l2_norm(sub(d.shared_mol, d.shared_his));
  const Var den = add(add(l2_norm(sub(d.indep_mol, d.indep_his)),
                          l2_norm(sub(d.indep_mol, d.fused_mol))),
                      l2_norm(sub(d.indep_his, d.fused_his)));
  return div(num, add_constant(den, kDisentEps));
}

}  // namespace m3c2
