#include <gtest/gtest.h>

#include <cmath>

#include "edr/detect.hpp"
#include "edr/iforest.hpp"
#include "edr/rng.hpp"
#include "test_util.hpp"

using namespace edr;
using detect::IsolationForest;

namespace {

double gauss(Rng& rng) {
  const double u1 = rng.open_unit(), u2 = rng.unit();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

struct Planted {
  std::vector<std::vector<double>> rows;
  std::vector<bool> outlier;
};

Planted planted(std::uint64_t seed, std::size_t inliers = 1000, std::size_t outliers = 20, std::size_t dims = 8) {
  Rng rng(seed);
  Planted p;
  for (std::size_t i = 0; i < inliers; ++i) {
    std::vector<double> r(dims);
    for (auto& v : r) v = gauss(rng);
    p.rows.push_back(r);
    p.outlier.push_back(false);
  }
  for (std::size_t i = 0; i < outliers; ++i) {
    std::vector<double> r(dims);
    for (auto& v : r) v = (rng.chance(0.5) ? 1 : -1) * (4.0 + 2.0 * rng.unit());
    p.rows.push_back(r);
    p.outlier.push_back(true);
  }
  return p;
}

/// Pairwise AUC: P(score(outlier) > score(inlier)), ties count half.
double pairwise_auc(const std::vector<double>& s, const std::vector<bool>& y) {
  double wins = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!y[i]) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j]) continue;
      pairs += 1;
      wins += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
    }
  }
  return wins / pairs;
}

/// c(n) from the harmonic-number definition, H(i) ~ ln(i) + gamma.
double c_oracle(double n) {
  if (n <= 1) return 0.0;
  if (n == 2) return 1.0;
  const double h = std::log(n - 1.0) + 0.5772156649;
  return 2.0 * h - 2.0 * (n - 1.0) / n;
}

}  // namespace

TEST(IForestMath, AveragePathLength) {
  EXPECT_EQ(detect::average_path_length(0), 0.0);
  EXPECT_EQ(detect::average_path_length(1), 0.0);
  EXPECT_EQ(detect::average_path_length(2), 1.0);
  EXPECT_NEAR(detect::average_path_length(256), 10.2448, 1e-3);
  for (std::size_t n = 3; n < 5000; n += 97) {
    EXPECT_NEAR(detect::average_path_length(n), c_oracle(static_cast<double>(n)), 1e-12);
  }
}

TEST(IForestMath, ScoreFromPath) {
  const double c = detect::average_path_length(256);
  EXPECT_DOUBLE_EQ(IsolationForest::score_from_path(c, c), 0.5);
  EXPECT_NEAR(IsolationForest::score_from_path(0.0, c), 1.0, 1e-15);
  EXPECT_LT(IsolationForest::score_from_path(2 * c, c), 0.5);
  EXPECT_DOUBLE_EQ(IsolationForest::score_from_path(2 * c, c), 0.25);
}

TEST(IForestMath, ProbeAtExpectedDepthScoresHalf) {
  // Single-leaf trees holding psi points: every probe's path length is c(psi).
  std::vector<detect::IsolationTree> trees;
  for (int i = 0; i < 10; ++i) {
    trees.emplace_back(std::vector<detect::ITreeNode>{{-1, 0.0, -1, -1, 256}});
  }
  auto f = IsolationForest::from_trees(std::move(trees), 256, 3);
  const std::vector<double> x{1.0, 2.0, 3.0};
  EXPECT_DOUBLE_EQ(f.expected_path_length(x), detect::average_path_length(256));
  EXPECT_EQ(f.score(x), 0.5);
}

TEST(IForestMath, PathLengthCountsEdgesPlusLeafCorrection) {
  // root splits feature 0 at 0.5; left leaf holds 1 point, right leaf 5.
  detect::IsolationTree t({{0, 0.5, 1, 2, 6}, {-1, 0, -1, -1, 1}, {-1, 0, -1, -1, 5}});
  const std::vector<double> lo{0.1}, hi{0.9};
  EXPECT_DOUBLE_EQ(t.path_length(lo), 1.0);
  EXPECT_DOUBLE_EQ(t.path_length(hi), 1.0 + c_oracle(5));
  EXPECT_EQ(t.depth(), 1u);
}

TEST(IForest, PlantedOutliersRankHigh) {
  auto p = planted(17);
  detect::ForestParams params;
  params.seed = 5;
  const auto f = IsolationForest::train(p.rows, params);
  std::vector<double> s;
  double in_sum = 0, out_sum = 0;
  for (std::size_t i = 0; i < p.rows.size(); ++i) {
    s.push_back(f.score(p.rows[i]));
    (p.outlier[i] ? out_sum : in_sum) += s.back();
    EXPECT_GT(s.back(), 0.0);
    EXPECT_LT(s.back(), 1.0);
  }
  EXPECT_GE(pairwise_auc(s, p.outlier), 0.95);
  EXPECT_GT(out_sum / 20.0, in_sum / 1000.0);
}

TEST(IForest, DeterministicForSeed) {
  auto p = planted(3);
  detect::ForestParams params;
  params.seed = 11;
  const auto a = IsolationForest::train(p.rows, params);
  const auto b = IsolationForest::train(p.rows, params);
  EXPECT_EQ(a.trees(), b.trees());
  for (const auto& r : p.rows) EXPECT_EQ(a.score(r), b.score(r));
  params.seed = 12;
  const auto c = IsolationForest::train(p.rows, params);
  EXPECT_NE(a.trees(), c.trees());
}

TEST(IForest, StructuralInvariants) {
  auto p = planted(8, 300, 0, 4);
  detect::ForestParams params;
  params.n_trees = 25;
  params.psi = 64;
  const auto f = IsolationForest::train(p.rows, params);
  EXPECT_EQ(f.trees().size(), 25u);
  EXPECT_EQ(f.psi(), 64u);
  EXPECT_EQ(f.height_limit(), 6u);  // ceil(log2 64)
  EXPECT_DOUBLE_EQ(f.c_psi(), detect::average_path_length(64));
  for (const auto& t : f.trees()) {
    EXPECT_LE(t.depth(), f.height_limit());
    EXPECT_EQ(t.nodes().front().size, 64u);
    std::uint32_t leaf_total = 0;
    for (const auto& n : t.nodes()) {
      if (n.is_leaf()) leaf_total += n.size;
    }
    EXPECT_EQ(leaf_total, 64u);
  }
}

TEST(IForest, PsiCappedBySampleCount) {
  std::vector<std::vector<double>> rows{{0.0}, {1.0}, {2.0}, {3.0}, {10.0}};
  const auto f = IsolationForest::train(rows, {});
  EXPECT_EQ(f.psi(), 5u);
  EXPECT_DOUBLE_EQ(f.c_psi(), detect::average_path_length(5));
}

TEST(IForest, TrainingInputValidation) {
  std::vector<std::vector<double>> one{{1.0}};
  EXPECT_THROW(IsolationForest::train(one, {}), Error);
  std::vector<std::vector<double>> ragged{{1.0}, {1.0, 2.0}};
  EXPECT_THROW(IsolationForest::train(ragged, {}), Error);
  std::vector<std::vector<double>> nan{{1.0}, {std::nan("")}};
  EXPECT_THROW(IsolationForest::train(nan, {}), Error);
  std::vector<std::vector<double>> ok{{1.0}, {2.0}};
  detect::ForestParams p;
  p.psi = 1;
  EXPECT_THROW(IsolationForest::train(ok, p), Error);
  p = {};
  p.n_trees = 0;
  EXPECT_THROW(IsolationForest::train(ok, p), Error);
}

TEST(IForest, SaveLoadRoundTrip) {
  testutil::TempDir dir;
  auto p = planted(21, 200, 5, 3);
  detect::ForestParams params;
  params.n_trees = 20;
  const auto f = IsolationForest::train(p.rows, params);
  f.save(dir.path() / "m.json");
  const auto g = IsolationForest::load(dir.path() / "m.json");
  EXPECT_EQ(g.trees(), f.trees());
  for (const auto& r : p.rows) EXPECT_EQ(g.score(r), f.score(r));
  auto doc = f.to_json();
  doc["version"] = 99;
  EXPECT_THROW(IsolationForest::from_json(doc), Error);
}

TEST(Anomaly, DetectorThreshold) {
  auto p = planted(2, 400, 0, events::kFeatureCount);
  for (auto& r : p.rows) {
    for (auto& v : r) v = std::clamp(0.5 + 0.05 * v, 0.0, 1.0);
  }
  auto forest = std::make_shared<const IsolationForest>(IsolationForest::train(p.rows, {}));
  detect::AnomalyDetector det(forest, 0.6);
  EXPECT_TRUE(det.ready());
  events::FeatureVector fv;
  std::copy(p.rows[0].begin(), p.rows[0].end(), fv.values.begin());
  EXPECT_EQ(det.score(fv), forest->score(fv.values));
  EXPECT_FALSE(detect::AnomalyDetector().ready());
}
