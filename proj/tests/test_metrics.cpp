// SPDX-License-Identifier: Apache-2.0
#include <array>
#include <random>

#include <gtest/gtest.h>

#include "m3c2/metrics.hpp"
#include "test_util.hpp"

using namespace m3c2;

TEST(Auc, HandExample) {
  const std::vector<double> s{0.1, 0.4, 0.35, 0.8};
  const std::vector<int> y{0, 0, 1, 1};
  EXPECT_EQ(auc_rank(s, y), 0.75);
}

TEST(Auc, TiesCountHalf) {
  const std::vector<double> s{0.5, 0.5, 0.5};
  const std::vector<int> y{1, 0, 0};
  EXPECT_EQ(auc_rank(s, y), 0.5);
}

TEST(Auc, UndefinedOnSingleClass) {
  const std::vector<double> s{0.1, 0.2};
  EXPECT_FALSE(auc_rank(s, std::vector<int>{1, 1}).has_value());
  EXPECT_FALSE(auc_rank(s, std::vector<int>{0, 0}).has_value());
  EXPECT_FALSE(auc_rank({}, {}).has_value());
  EXPECT_THROW(auc_rank(s, std::vector<int>{1}), std::invalid_argument);
}

TEST(Auc, MatchesBruteForcePairs) {
  std::mt19937_64 rng(0);
  for (int trial = 0; trial < 2000; ++trial) {
    const std::size_t n = 1 + rng() % 50;
    std::vector<double> s(n);
    std::vector<int> y(n);
    const int levels = 1 + static_cast<int>(rng() % 8);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng() % levels) / 8.0;
      y[i] = static_cast<int>(rng() % 2);
    }
    EXPECT_EQ(auc_rank(s, y), m3c2::testing::brute_force_auc(s, y));
  }
}

TEST(BinaryMetrics, PerfectPredictions) {
  const std::vector<int> y{0, 1, 1, 0, 1};
  const std::vector<double> s{0.1, 0.9, 0.8, 0.2, 0.7};
  const TaskMetrics m = binary_metrics(y, y, s);
  for (const Metric* v : {&m.accuracy, &m.sensitivity, &m.specificity, &m.auc, &m.f1}) EXPECT_EQ(*v, 1.0);
}

TEST(BinaryMetrics, HandCounts) {
  // tp 2, fn 1, fp 1, tn 1.
  const std::vector<int> y{1, 1, 1, 0, 0};
  const std::vector<int> p{1, 1, 0, 1, 0};
  const std::vector<double> s{0.9, 0.8, 0.3, 0.6, 0.1};
  const TaskMetrics m = binary_metrics(y, p, s);
  EXPECT_DOUBLE_EQ(*m.accuracy, 0.6);
  EXPECT_DOUBLE_EQ(*m.sensitivity, 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(*m.specificity, 0.5);
  EXPECT_DOUBLE_EQ(*m.f1, 4.0 / 6.0);
  EXPECT_DOUBLE_EQ(*m.auc, 5.0 / 6.0);
}

TEST(BinaryMetrics, UndefinedRatios) {
  const std::vector<int> y{0, 0};
  const std::vector<double> s{0.1, 0.2};
  const TaskMetrics m = binary_metrics(y, y, s);
  EXPECT_EQ(m.accuracy, 1.0);
  EXPECT_FALSE(m.sensitivity.has_value());
  EXPECT_FALSE(m.auc.has_value());
  EXPECT_FALSE(m.f1.has_value());
}

TEST(MicroMetrics, AccuracySensitivityF1Coincide) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng() % 40;
    std::vector<int> y(n), p(n);
    std::vector<std::array<double, 4>> probs(n);
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = static_cast<int>(rng() % 4);
      p[i] = static_cast<int>(rng() % 4);
      for (auto& x : probs[i]) x = u(rng);
    }
    const TaskMetrics m = micro_metrics<4>(y, p, std::span<const std::array<double, 4>>(probs));
    EXPECT_EQ(m.accuracy, m.sensitivity);
    EXPECT_EQ(m.accuracy, m.f1);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < n; ++i) correct += y[i] == p[i];
    EXPECT_EQ(*m.accuracy, static_cast<double>(correct) / static_cast<double>(n));
  }
}

TEST(MicroMetrics, PooledAuc) {
  const std::vector<int> y{0, 1};
  const std::vector<int> p{0, 1};
  const std::vector<std::array<double, 2>> probs{{0.9, 0.1}, {0.2, 0.8}};
  const TaskMetrics m = micro_metrics<2>(y, p, std::span<const std::array<double, 2>>(probs));
  std::vector<double> s;
  std::vector<int> l;
  for (std::size_t i = 0; i < 2; ++i)
    for (int k = 0; k < 2; ++k) {
      s.push_back(probs[i][k]);
      l.push_back(y[i] == k);
    }
  EXPECT_EQ(m.auc, m3c2::testing::brute_force_auc(s, l));
  EXPECT_EQ(m.auc, 1.0);
  EXPECT_EQ(m.specificity, 1.0);
}

TEST(Argmax, FirstMaximumWins) {
  EXPECT_EQ(argmax(std::array<double, 4>{0.1, 0.4, 0.4, 0.1}), 1);
  EXPECT_EQ(argmax(std::vector<double>{-1.0}), 0);
}
