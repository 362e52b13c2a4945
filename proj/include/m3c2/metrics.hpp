// SPDX-License-Identifier: Apache-2.0
//
// Classification metrics. Binary tasks are scored on the positive class; the
// 4-class glioma task is micro-averaged over one-vs-rest decisions.
#pragma once

#include <algorithm>
#include <array>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace m3c2 {

using Metric = std::optional<double>;  // empty when undefined (e.g. 0/0)

struct TaskMetrics {
  Metric accuracy, sensitivity, specificity, auc, f1;
  bool operator==(const TaskMetrics&) const = default;
};

inline Metric ratio(double num, double den) {
  if (den == 0.0) return std::nullopt;
  return num / den;
}

/// Mann-Whitney rank statistic with mid-ranks for ties. Undefined when only
/// one class is present.
inline Metric auc_rank(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("auc_rank: length mismatch");
  const std::size_t n = scores.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum_pos = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[idx[j]] == scores[idx[i]]) ++j;
    // 1-based ranks i+1..j share their mean
    const double mid = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t t = i; t < j; ++t) {
      if (labels[idx[t]] == 1) {
        rank_sum_pos += mid;
        ++n_pos;
      }
    }
    i = j;
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) return std::nullopt;
  const double np = static_cast<double>(n_pos);
  const double u = rank_sum_pos - np * (np + 1.0) / 2.0;
  return u / (np * static_cast<double>(n_neg));
}

struct ConfusionCounts {
  double tp = 0, fp = 0, tn = 0, fn = 0;

  TaskMetrics metrics(Metric auc) const {
    TaskMetrics m;
    m.accuracy = ratio(tp + tn, tp + tn + fp + fn);
    m.sensitivity = ratio(tp, tp + fn);
    m.specificity = ratio(tn, tn + fp);
    m.f1 = ratio(2.0 * tp, 2.0 * tp + fp + fn);
    m.auc = auc;
    return m;
  }
};

inline TaskMetrics binary_metrics(std::span<const int> labels, std::span<const int> preds,
                                  std::span<const double> scores) {
  if (labels.size() != preds.size() || labels.size() != scores.size()) {
    throw std::invalid_argument("binary_metrics: length mismatch");
  }
  ConfusionCounts c;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool y = labels[i] == 1, p = preds[i] == 1;
    if (y && p) ++c.tp;
    else if (!y && p) ++c.fp;
    else if (!y && !p) ++c.tn;
    else ++c.fn;
  }
  return c.metrics(auc_rank(scores, labels));
}

/// Micro average over classes: pools every one-vs-rest decision. For a
/// single-label problem TP = #correct and FP = FN = #wrong, so accuracy,
/// sensitivity and F1 coincide. Accuracy is the plain fraction correct.
template <std::size_t C>
TaskMetrics micro_metrics(std::span<const int> labels, std::span<const int> preds,
                          std::span<const std::array<double, C>> probs) {
  if (labels.size() != preds.size() || labels.size() != probs.size()) {
    throw std::invalid_argument("micro_metrics: length mismatch");
  }
  ConfusionCounts c;
  std::vector<double> pooled_scores;
  std::vector<int> pooled_labels;
  pooled_scores.reserve(labels.size() * C);
  pooled_labels.reserve(labels.size() * C);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    for (std::size_t k = 0; k < C; ++k) {
      const bool y = labels[i] == static_cast<int>(k);
      const bool p = preds[i] == static_cast<int>(k);
      if (y && p) ++c.tp;
      else if (!y && p) ++c.fp;
      else if (!y && !p) ++c.tn;
      else ++c.fn;
      pooled_scores.push_back(probs[i][k]);
      pooled_labels.push_back(y ? 1 : 0);
    }
  }
  TaskMetrics m = c.metrics(auc_rank(pooled_scores, pooled_labels));
  m.accuracy = ratio(c.tp, static_cast<double>(labels.size()));
  return m;
}

template <class Range>
int argmax(const Range& r) {
  return static_cast<int>(std::distance(std::begin(r), std::max_element(std::begin(r), std::end(r))));
}

}  // namespace m3c2
