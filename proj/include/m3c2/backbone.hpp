// SPDX-License-Identifier: Apache-2.0
//
// Patch-axis sequence machinery: a pre-norm single-head transformer block and
// attention-based MIL pooling.
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "m3c2/gradcore.hpp"
#include "m3c2/nn.hpp"

namespace m3c2 {

/// Pre-norm residual block over the rows (patches) of an N x K bag.
/// No positional encoding, so the block is permutation equivariant.
struct TransformerBlock {
  grad::Var wq, wk, wv, wo;  // K x K
  Linear ffn_in;             // K -> 2K
  Linear ffn_out;            // 2K -> K
  grad::Var ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;

  static TransformerBlock create(ParameterStore& store, const std::string& name, std::size_t k,
                                 Partition part) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(k));
    TransformerBlock b;
    b.wq = store.uniform(name + ".attn.q", k, k, bound, part);
    b.wk = store.uniform(name + ".attn.k", k, k, bound, part);
    b.wv = store.uniform(name + ".attn.v", k, k, bound, part);
    b.wo = store.uniform(name + ".attn.o", k, k, bound, part);
    b.ffn_in = Linear::create(store, name + ".ffn.fc1", k, 2 * k, part);
    b.ffn_out = Linear::create(store, name + ".ffn.fc2", 2 * k, k, part);
    b.ln1_gamma = store.filled(name + ".ln1.gamma", 1, k, 1.0, part);
    b.ln1_beta = store.filled(name + ".ln1.beta", 1, k, 0.0, part);
    b.ln2_gamma = store.filled(name + ".ln2.gamma", 1, k, 1.0, part);
    b.ln2_beta = store.filled(name + ".ln2.beta", 1, k, 0.0, part);
    return b;
  }

  std::size_t width() const { return wq.rows(); }

  grad::Var attention(const grad::Var& x) const {
    using namespace grad;
    const Var q = matmul(x, wq);
    const Var kk = matmul(x, wk);
    const Var v = matmul(x, wv);
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(width()));
    const Var scores = scale(matmul(q, transpose(kk)), inv_sqrt_d);
    const Var probs = softmax(scores, 1);
    return matmul(matmul(probs, v), wo);
  }

  grad::Var operator()(const grad::Var& f) const {
    using namespace grad;
    if (f.cols() != width()) {
      throw ShapeError("transformer_block: shape mismatch " + f.value().shape_string() +
                       " vs width " + std::to_string(width()));
    }
    const Var h = add(f, attention(layer_norm(f, ln1_gamma, ln1_beta)));
    const Var ff = ffn_out(relu(ffn_in(layer_norm(h, ln2_gamma, ln2_beta))));
    return add(h, ff);
  }
};

struct BlockStack {
  std::vector<TransformerBlock> blocks;

  static BlockStack create(ParameterStore& store, const std::string& name, std::size_t depth,
                           std::size_t k, Partition part) {
    BlockStack s;
    for (std::size_t i = 0; i < depth; ++i) {
      s.blocks.push_back(
          TransformerBlock::create(store, name + ".block" + std::to_string(i), k, part));
    }
    return s;
  }

  grad::Var operator()(grad::Var f) const {
    for (const auto& b : blocks) f = b(f);
    return f;
  }
};

struct PooledBag {
  grad::Var z;        // 1 x K
  grad::Var weights;  // N x 1, sums to one
};

/// a_n = softmax_n(w^T tanh(V f_n^T)), z = sum_n a_n f_n.
struct AttentionPool {
  grad::Var v;  // L x K
  grad::Var w;  // L x 1

  static AttentionPool create(ParameterStore& store, const std::string& name, std::size_t k,
                              std::size_t hidden, Partition part) {
    AttentionPool p;
    p.v = store.uniform(name + ".V", hidden, k, 1.0 / std::sqrt(static_cast<double>(k)), part);
    p.w = store.uniform(name + ".w", hidden, 1, 1.0 / std::sqrt(static_cast<double>(hidden)),
                        part);
    return p;
  }

  PooledBag operator()(const grad::Var& f) const {
    using namespace grad;
    if (f.cols() != v.cols()) {
      throw ShapeError("attention_pool: shape mismatch " + f.value().shape_string() + " vs V " +
                       v.value().shape_string());
    }
    const Var scores = matmul(tanh(matmul(f, transpose(v))), w);  // N x 1
    const Var a = softmax(scores, 0);
    const Var z = matmul(transpose(a), f);
    return {z, a};
  }
};

}  // namespace m3c2
