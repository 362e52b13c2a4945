// SPDX-License-Identifier: Apache-2.0
//
// The assembled multi-task model: disentangler -> molecular and histology
// heads -> fusion classifier, plus the per-bag loss components.
#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "m3c2/backbone.hpp"
#include "m3c2/databank.hpp"
#include "m3c2/disentangler.hpp"
#include "m3c2/gradcore.hpp"
#include "m3c2/heads.hpp"
#include "m3c2/interaction.hpp"
#include "m3c2/nn.hpp"

namespace m3c2 {

struct ModelConfig {
  std::size_t K = 16;
  std::size_t pool_hidden = 0;  // attention width L; 0 means L = K
  double alpha = 0.5;
  std::uint64_t seed = 0;

  std::size_t attention_width() const { return pool_hidden == 0 ? K : pool_hidden; }
};

struct ForwardOptions {
  bool use_graph = true;
  std::size_t dcc_m = 1;  // clamped to the bag size
  double tau = kDefaultTemperature;
};

/// Unweighted loss components of one bag.
struct BagLosses {
  grad::Var glioma, idh, codel, cdkn, nmp;
  grad::Var disent, lc, dcc;
  double dcc_overlap = 0.0;
};

struct BagForward {
  DisentangledFeatures disent;
  MolecularState mol;
  HistologyState his;
  grad::Var glioma_logits;  // 1 x 4
  grad::Var c_wt, c_nmp;    // N x 1 confidence weights
  BagLosses losses;
};

class Model {
 public:
  Model(const ModelConfig& cfg, const grad::Tensor& cooccurrence)
      : cfg_(cfg), store_(cfg.seed), a_(cooccurrence) {
    if (a_.rows() != kMarkers || a_.cols() != kMarkers) {
      throw grad::ShapeError("Model: co-occurrence matrix must be 3x3, got " + a_.shape_string());
    }
    disent_ = Disentangler::create(store_, cfg.K);
    mol_ = MolecularHead::create(store_, cfg.K, cfg.attention_width(), cfg.alpha);
    his_ = HistologyHead::create(store_, cfg.K, cfg.attention_width());
    fusion_ = FusionClassifier::create(store_, cfg.K);
  }

  // Parameters are shared graph nodes; a copy would alias them.
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  BagForward forward(const PatchBag& bag, const ForwardOptions& opt = {}) const {
    using namespace grad;
    BagForward f;
    const Var low = constant(bag.feats_low);
    const Var high = constant(bag.feats_high);
    f.disent = disent_(low, high);
    f.mol = mol_(f.disent.fused_mol, a_, opt.use_graph);
    f.his = his_(f.disent.fused_his);
    f.glioma_logits = fusion_(f.his.pooled.z, pool_molecular(f.mol));

    f.c_wt = confidence_weights(f.mol.f_out[0], f.mol.pooled[0].z,
                                class_column(mol_.classifiers[0].weight, 0));
    f.c_nmp = confidence_weights(f.his.features, f.his.pooled.z,
                                 class_column(his_.classifier.weight, 1));

    const auto& m = bag.markers;
    BagLosses& l = f.losses;
    l.glioma = softmax_cross_entropy(f.glioma_logits, static_cast<std::size_t>(bag.glioma_class));
    l.idh = softmax_cross_entropy(f.mol.logits[0], static_cast<std::size_t>(m.idh_mut));
    l.codel = softmax_cross_entropy(f.mol.logits[1], static_cast<std::size_t>(m.codel_1p19q));
    l.cdkn = softmax_cross_entropy(f.mol.logits[2], static_cast<std::size_t>(m.cdkn_homdel));
    l.nmp = softmax_cross_entropy(f.his.logits, static_cast<std::size_t>(m.nmp));
    l.disent = disent_loss(f.disent);
    l.lc = lc_loss(f.mol.f_out, a_);
    const std::size_t n = bag.patches();
    const std::size_t mp = std::clamp<std::size_t>(opt.dcc_m, 1, n);
    l.dcc = dcc_surrogate_loss(f.c_wt, f.c_nmp, mp, opt.tau);
    l.dcc_overlap = dcc_overlap(to_confidence(f.c_wt), to_confidence(f.c_nmp), mp);
    return f;
  }

  const ModelConfig& config() const { return cfg_; }
  ParameterStore& store() { return store_; }
  const ParameterStore& store() const { return store_; }
  const grad::Tensor& cooccurrence() const { return a_; }

  const Disentangler& disentangler() const { return disent_; }
  const MolecularHead& molecular() const { return mol_; }
  const HistologyHead& histology() const { return his_; }
  const FusionClassifier& fusion() const { return fusion_; }

 private:
  ModelConfig cfg_;
  ParameterStore store_;
  grad::Tensor a_;
  Disentangler disent_;
  MolecularHead mol_;
  HistologyHead his_;
  FusionClassifier fusion_;
};

}  // namespace m3c2
