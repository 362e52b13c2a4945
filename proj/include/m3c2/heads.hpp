// SPDX-License-Identifier: Apache-2.0
//
// Task heads: hierarchical molecular marker subnets with the co-occurrence
// label-correlation graph, the NMP histology head, and the 4-class fusion
// classifier.
#pragma once

#include <array>
#include <string>
#include <vector>

#include "m3c2/backbone.hpp"
#include "m3c2/gradcore.hpp"
#include "m3c2/nn.hpp"

namespace m3c2 {

inline constexpr std::size_t kMarkers = 3;  // IDH, 1p/19q, CDKN
inline constexpr std::array<std::size_t, kMarkers> kMarkerDepths = {3, 2, 2};
inline constexpr std::size_t kHistologyDepth = 3;
inline constexpr std::size_t kGliomaClasses = 4;
inline constexpr const char* kMarkerNames[kMarkers] = {"idh", "1p19q", "cdkn"};

using MarkerFeatures = std::array<grad::Var, kMarkers>;

/// F_mid_i = relu(sum_j A_ij F_in_j W_g). A mixes the marker axis, W_g the
/// feature axis, independently for every patch row.
inline MarkerFeatures graph_conv(const MarkerFeatures& f_in, const grad::Tensor& a,
                                 const grad::Var& w_graph) {
  using namespace grad;
  if (a.rows() != kMarkers || a.cols() != kMarkers) {
    throw ShapeError("graph_conv: shape mismatch A " + a.shape_string() + " vs [3x3]");
  }
  MarkerFeatures out;
  for (std::size_t i = 0; i < kMarkers; ++i) {
    Var mixed = scale(f_in[0], a(i, 0));
    for (std::size_t j = 1; j < kMarkers; ++j) mixed = add(mixed, scale(f_in[j], a(i, j)));
    out[i] = relu(matmul(mixed, w_graph));
  }
  return out;
}

/// F_out = alpha * F_mid + (1 - alpha) * F_in.
inline MarkerFeatures graph_residual(const MarkerFeatures& f_mid, const MarkerFeatures& f_in,
                                     double alpha) {
  MarkerFeatures out;
  for (std::size_t i = 0; i < kMarkers; ++i) {
    out[i] = grad::add(grad::scale(f_mid[i], alpha), grad::scale(f_in[i], 1.0 - alpha));
  }
  return out;
}

/// 3x3 matrix of Frobenius cosines between marker feature blocks, as a 1x9 row.
inline grad::Var cosine_matrix(const MarkerFeatures& f) {
  std::vector<grad::Var> entries;
  entries.reserve(kMarkers * kMarkers);
  for (std::size_t i = 0; i < kMarkers; ++i)
    for (std::size_t j = 0; j < kMarkers; ++j) entries.push_back(grad::cosine(f[i], f[j]));
  return grad::concat(entries, 1);
}

/// MSE between the co-occurrence matrix and the cosine matrix, over all 9 entries.
inline grad::Var lc_loss(const MarkerFeatures& f_out, const grad::Tensor& a) {
  if (a.rows() != kMarkers || a.cols() != kMarkers) {
    throw grad::ShapeError("lc_loss: shape mismatch A " + a.shape_string() + " vs [3x3]");
  }
  const grad::Var target = grad::constant(grad::Tensor(1, kMarkers * kMarkers, a.storage()));
  return grad::mse(cosine_matrix(f_out), target);
}

struct MolecularState {
  MarkerFeatures f_in, f_mid, f_out;
  std::array<PooledBag, kMarkers> pooled;
  std::array<grad::Var, kMarkers> logits;  // 1 x 2 each
};

struct MolecularHead {
  std::array<BlockStack, kMarkers> subnets;
  grad::Var w_graph;  // K x K
  std::array<AttentionPool, kMarkers> pools;
  std::array<Linear, kMarkers> classifiers;  // K -> 2; column 0 is the negative class
  double alpha = 0.5;

  static MolecularHead create(ParameterStore& store, std::size_t k, std::size_t pool_hidden,
                              double alpha) {
    const auto part = Partition::Molecular;
    MolecularHead h;
    for (std::size_t i = 0; i < kMarkers; ++i) {
      const std::string name = std::string("mol.") + kMarkerNames[i];
      h.subnets[i] = BlockStack::create(store, name, kMarkerDepths[i], k, part);
    }
    h.w_graph = store.uniform("mol.graph.W", k, k, 1.0 / std::sqrt(static_cast<double>(k)), part);
    for (std::size_t i = 0; i < kMarkers; ++i) {
      const std::string name = std::string("mol.") + kMarkerNames[i];
      h.pools[i] = AttentionPool::create(store, name + ".pool", k, pool_hidden, part);
      h.classifiers[i] = Linear::create(store, name + ".cls", k, 2, part);
    }
    h.alpha = alpha;
    return h;
  }

  /// IDH features come first; each later subnet consumes the previous one.
  /// With `use_graph` false the graph layer is bypassed (F_out = F_in).
  MolecularState operator()(const grad::Var& f_mole, const grad::Tensor& a,
                            bool use_graph = true) const {
    MolecularState s;
    grad::Var x = f_mole;
    for (std::size_t i = 0; i < kMarkers; ++i) {
      x = subnets[i](x);
      s.f_in[i] = x;
    }
    if (use_graph) {
      s.f_mid = graph_conv(s.f_in, a, w_graph);
      s.f_out = graph_residual(s.f_mid, s.f_in, alpha);
    } else {
      s.f_mid = s.f_in;
      s.f_out = s.f_in;
    }
    for (std::size_t i = 0; i < kMarkers; ++i) {
      s.pooled[i] = pools[i](s.f_out[i]);
      s.logits[i] = classifiers[i](s.pooled[i].z);
    }
    return s;
  }
};

struct HistologyState {
  grad::Var features;  // N x K after the block stack
  PooledBag pooled;
  grad::Var logits;    // 1 x 2
};

struct HistologyHead {
  BlockStack blocks;
  AttentionPool pool;
  Linear classifier;  // K -> 2; column 1 is NMP positive

  static HistologyHead create(ParameterStore& store, std::size_t k, std::size_t pool_hidden) {
    const auto part = Partition::Histology;
    HistologyHead h;
    h.blocks = BlockStack::create(store, "his.nmp", kHistologyDepth, k, part);
    h.pool = AttentionPool::create(store, "his.nmp.pool", k, pool_hidden, part);
    h.classifier = Linear::create(store, "his.nmp.cls", k, 2, part);
    return h;
  }

  HistologyState operator()(const grad::Var& f_his) const {
    HistologyState s;
    s.features = blocks(f_his);
    s.pooled = pool(s.features);
    s.logits = classifier(s.pooled.z);
    return s;
  }
};

/// Mean of the three pooled marker embeddings.
inline grad::Var pool_molecular(const MolecularState& s) {
  grad::Var acc = s.pooled[0].z;
  for (std::size_t i = 1; i < kMarkers; ++i) acc = grad::add(acc, s.pooled[i].z);
  return grad::scale(acc, 1.0 / static_cast<double>(kMarkers));
}

struct FusionClassifier {
  Linear fc;  // 2K -> 4

  static FusionClassifier create(ParameterStore& store, std::size_t k) {
    return {Linear::create(store, "fusion.cls", 2 * k, kGliomaClasses, Partition::Shared)};
  }

  /// Logits over glioma classes 0..3 from concat(U_h pooled, U_m pooled).
  grad::Var operator()(const grad::Var& his_pooled, const grad::Var& mol_pooled) const {
    return fc(grad::concat({his_pooled, mol_pooled}, 1));
  }
};

}  // namespace m3c2
