// SPDX-License-Identifier: Apache-2.0
//
// Cross-modal interaction between the histology and molecular paths:
// per-patch confidence weights, the top-M overlap constraint with its
// curriculum, and gradient modulation by perpendicular projection.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "m3c2/gradcore.hpp"
#include "m3c2/nn.hpp"

namespace m3c2 {

// ---------------------------------------------------------------------------
// Confidence weights

struct ConfidenceVector {
  std::vector<double> values;
  std::vector<std::size_t> order;  // indices by descending value, ties to the lower index

  static ConfidenceVector from_values(std::vector<double> v) {
    ConfidenceVector c;
    c.order.resize(v.size());
    std::iota(c.order.begin(), c.order.end(), std::size_t{0});
    std::stable_sort(c.order.begin(), c.order.end(),
                     [&v](std::size_t a, std::size_t b) { return v[a] > v[b]; });
    c.values = std::move(v);
    return c;
  }

  std::size_t size() const { return values.size(); }

  std::vector<std::size_t> top(std::size_t m) const {
    m = std::min(m, order.size());
    return {order.begin(), order.begin() + static_cast<std::ptrdiff_t>(m)};
  }
};

/// c_n = (f_n (.) z) . w_class: each patch's additive contribution to the
/// class logit. Returns an N x 1 column.
inline grad::Var confidence_weights(const grad::Var& feats, const grad::Var& z,
                                    const grad::Var& w_class) {
  using namespace grad;
  if (z.rows() != 1 || z.cols() != feats.cols() || w_class.rows() != feats.cols() ||
      w_class.cols() != 1) {
    throw ShapeError("confidence_weights: shape mismatch F " + feats.value().shape_string() +
                     ", z " + z.value().shape_string() + ", w " + w_class.value().shape_string());
  }
  return matmul(mul(feats, repeat_rows(z, feats.rows())), w_class);
}

/// Column `cls` of a K x C classifier weight as K x 1.
inline grad::Var class_column(const grad::Var& weight, std::size_t cls) {
  return grad::slice(weight, 1, cls, cls + 1);
}

inline ConfidenceVector to_confidence(const grad::Var& c) {
  return ConfidenceVector::from_values(c.value().storage());
}

// ---------------------------------------------------------------------------
// Dynamic confidence constraint

struct CurriculumSchedule {
  std::size_t m0 = 8;
  double beta = 0.5;
  std::size_t p0 = 10;
};

/// clamp(floor(M_0 * beta^floor(p / p_0)), 1, N).
inline std::size_t curriculum_m(std::size_t epoch, const CurriculumSchedule& s, std::size_t n) {
  const std::size_t p0 = std::max<std::size_t>(s.p0, 1);
  const double raw = std::floor(static_cast<double>(s.m0) *
                                std::pow(s.beta, static_cast<double>(epoch / p0)));
  const double hi = static_cast<double>(std::max<std::size_t>(n, 1));
  return static_cast<std::size_t>(std::clamp(raw, 1.0, hi));
}

/// |topM(a) intersect topM(b)| / M. Equals the two-sided indicator average.
inline double dcc_overlap(const ConfidenceVector& a, const ConfidenceVector& b, std::size_t m) {
  if (m < 1 || m > a.size() || a.size() != b.size()) {
    throw std::invalid_argument("dcc_overlap: need 1 <= M <= N and equal lengths");
  }
  std::vector<char> in_b(b.size(), 0);
  for (std::size_t idx : b.top(m)) in_b[idx] = 1;
  std::size_t hits = 0;
  for (std::size_t idx : a.top(m)) hits += in_b[idx];
  return static_cast<double>(hits) / static_cast<double>(m);
}

inline constexpr double kDefaultTemperature = 1.0;

/// 1 - (mass of q_nmp on topM(wt) + mass of q_wt on topM(nmp)) / 2 with
/// q = softmax(C / tau). Top-M sets are constants for the step.
inline grad::Var dcc_surrogate_loss(const grad::Var& c_wt, const grad::Var& c_nmp, std::size_t m,
                                    double tau = kDefaultTemperature) {
  using namespace grad;
  check_same_shape("dcc_surrogate_loss", c_wt.value(), c_nmp.value());
  if (c_wt.cols() != 1) {
    throw ShapeError("dcc_surrogate_loss: expected N x 1 confidences, got " +
                     c_wt.value().shape_string());
  }
  if (m < 1 || m > c_wt.rows() || !(tau > 0.0)) {
    throw std::invalid_argument("dcc_surrogate_loss: need 1 <= M <= N and tau > 0");
  }
  const auto top_wt = to_confidence(c_wt).top(m);
  const auto top_nmp = to_confidence(c_nmp).top(m);
  for (std::size_t i : top_wt) note_branch(i);
  for (std::size_t i : top_nmp) note_branch(i + 0x10000);
  const Var q_wt = softmax(scale(c_wt, 1.0 / tau), 0);
  const Var q_nmp = softmax(scale(c_nmp, 1.0 / tau), 0);
  const Var mass = add(sum(take(q_nmp, top_wt)), sum(take(q_wt, top_nmp)));
  return add_constant(scale(mass, -0.5), 1.0);
}

// ---------------------------------------------------------------------------
// Gradient modulation

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline constexpr double kProjectionGuard = 1e-12;

/// a - (a.b / |b|^2) b; `a` unchanged when |b| is below the guard.
inline std::vector<double> project_perp(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("project_perp: length mismatch");
  std::vector<double> out(a.begin(), a.end());
  const double bb = dot(b, b);
  if (std::sqrt(bb) < kProjectionGuard) return out;
  const double coef = dot(a, b) / bb;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= coef * b[i];
  return out;
}

inline std::vector<double> rescale(std::span<const double> v, double target_norm) {
  if (target_norm < 0.0) throw std::invalid_argument("rescale: negative target norm");
  std::vector<double> out(v.begin(), v.end());
  const double n = norm(v);
  if (n == 0.0) return out;
  const double f = target_norm / n;
  for (double& x : out) x *= f;
  return out;
}

/// Gradients for every trainable parameter, tagged by task partition.
class GradientSet {
 public:
  struct Entry {
    std::string name;
    Partition partition;
    grad::Tensor grad;
  };

  static GradientSet from_store(const ParameterStore& store) {
    GradientSet g;
    for (const auto& p : store.params()) g.entries_.push_back({p.name, p.partition, p.var.grad()});
    return g;
  }

  void add(std::string name, Partition part, grad::Tensor grad) {
    entries_.push_back({std::move(name), part, std::move(grad)});
  }

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }

  std::size_t size(Partition part) const {
    std::size_t n = 0;
    for (const auto& e : entries_)
      if (e.partition == part) n += e.grad.numel();
    return n;
  }

  /// Concatenation of a partition's gradients in registration order.
  std::vector<double> flat(Partition part) const {
    std::vector<double> out;
    out.reserve(size(part));
    for (const auto& e : entries_)
      if (e.partition == part) out.insert(out.end(), e.grad.storage().begin(), e.grad.storage().end());
    return out;
  }

  void assign_flat(Partition part, std::span<const double> values) {
    if (values.size() != size(part)) throw std::invalid_argument("assign_flat: length mismatch");
    std::size_t off = 0;
    for (auto& e : entries_) {
      if (e.partition != part) continue;
      std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(off), e.grad.numel(),
                  e.grad.storage().begin());
      off += e.grad.numel();
    }
  }

  /// Writes gradients back into the matching store parameters.
  void write_to(ParameterStore& store) const {
    auto& params = store.params();
    for (std::size_t i = 0; i < entries_.size(); ++i) params[i].var.node()->grad = entries_[i].grad;
  }

 private:
  std::vector<Entry> entries_;
};

struct ModulationOptions {
  bool guide = true;    // false: always modulate the molecular path
  bool rescale = true;  // false: keep the projected norm
};

struct ModulationResult {
  Partition modulated = Partition::Molecular;
  Partition reference = Partition::Histology;
  double norm_before = 0.0;
  double norm_after = 0.0;
  double reference_norm = 0.0;
  double dot_after = 0.0;  // <g_modulated, g_reference> after modulation
  bool projected = false;  // false when the reference gradient was below the guard
};

/// `ref` truncated or zero-extended to length n. The two partitions differ in
/// size; both are treated as embedded in a common zero-padded space.
inline std::vector<double> aligned_reference(std::span<const double> ref, std::size_t n) {
  std::vector<double> out(n, 0.0);
  std::copy_n(ref.begin(), std::min(n, ref.size()), out.begin());
  return out;
}

/// NMP-positive majority modulates the molecular gradient against the
/// histology one; NMP-negative does the reverse.
inline ModulationResult cmg_modulate(GradientSet& g, int nmp_majority,
                                     const ModulationOptions& opt = {}) {
  ModulationResult r;
  const bool molecular = !opt.guide || nmp_majority == 1;
  r.modulated = molecular ? Partition::Molecular : Partition::Histology;
  r.reference = molecular ? Partition::Histology : Partition::Molecular;

  const std::vector<double> target = g.flat(r.modulated);
  const std::vector<double> full_ref = g.flat(r.reference);
  if (target.empty() || full_ref.empty()) throw std::invalid_argument("cmg_modulate: empty partition");
  const std::vector<double> ref = aligned_reference(full_ref, target.size());
  r.norm_before = norm(target);
  r.reference_norm = norm(ref);
  r.projected = r.reference_norm >= kProjectionGuard;

  std::vector<double> out = project_perp(target, ref);
  if (opt.rescale) out = rescale(out, r.norm_before);
  r.norm_after = norm(out);
  r.dot_after = dot(out, ref);
  g.assign_flat(r.modulated, out);
  return r;
}

}  // namespace m3c2
