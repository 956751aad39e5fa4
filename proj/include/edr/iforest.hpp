#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "edr/common.hpp"

namespace edr::detect {

inline constexpr double kEulerGamma = 0.5772156649;

/// Average path length of an unsuccessful BST search over n points:
/// c(0) = c(1) = 0, c(2) = 1, c(n) = 2(ln(n-1) + gamma) - 2(n-1)/n.
double average_path_length(std::size_t n) noexcept;

/// Flat node; `feature < 0` marks a leaf holding `size` training points.
struct ITreeNode {
  std::int32_t feature = -1;
  double split = 0.0;
  std::int32_t left = -1;
  std::int32_t right = -1;
  std::uint32_t size = 0;

  bool is_leaf() const noexcept { return feature < 0; }
  bool operator==(const ITreeNode&) const = default;
};

class IsolationTree {
 public:
  IsolationTree() = default;
  explicit IsolationTree(std::vector<ITreeNode> nodes) : nodes_(std::move(nodes)) {}

  /// Edges to the reached leaf plus c(leaf.size) for unresolved leaves.
  double path_length(std::span<const double> x) const;
  std::size_t depth() const;
  const std::vector<ITreeNode>& nodes() const noexcept { return nodes_; }

  bool operator==(const IsolationTree&) const = default;

 private:
  std::vector<ITreeNode> nodes_;  // root at index 0
};

struct ForestParams {
  std::size_t n_trees = 100;
  std::size_t psi = 256;
  std::uint64_t seed = 0;
};

class IsolationForest {
 public:
  static constexpr int kFormatVersion = 1;

  IsolationForest() = default;

  /// Each tree sees min(psi, |data|) rows drawn without replacement. Throws
  /// Error when |data| < 2, psi < 2, n_trees < 1 or row widths differ.
  static IsolationForest train(std::span<const std::vector<double>> data,
                               const ForestParams& params);

  double expected_path_length(std::span<const double> x) const;
  /// s = 2^(-E(h(x)) / c(psi)), in (0, 1).
  double score(std::span<const double> x) const;
  /// Score for a given mean path length; exposed for probes.
  static double score_from_path(double mean_path, double c_psi) noexcept;

  std::size_t psi() const noexcept { return psi_; }
  double c_psi() const noexcept { return c_psi_; }
  std::size_t height_limit() const noexcept { return height_limit_; }
  std::size_t feature_count() const noexcept { return feature_count_; }
  std::uint64_t seed() const noexcept { return seed_; }
  const std::vector<IsolationTree>& trees() const noexcept { return trees_; }
  bool empty() const noexcept { return trees_.empty(); }

  nlohmann::json to_json() const;
  /// Rejects documents whose version differs from kFormatVersion.
  static IsolationForest from_json(const nlohmann::json& doc);
  void save(const std::filesystem::path& path) const;
  static IsolationForest load(const std::filesystem::path& path);

  /// Builds a forest from explicit trees (tests and probes).
  static IsolationForest from_trees(std::vector<IsolationTree> trees, std::size_t psi,
                                    std::size_t feature_count);

 private:
  std::vector<IsolationTree> trees_;
  std::size_t psi_ = 0;
  double c_psi_ = 0.0;
  std::size_t height_limit_ = 0;
  std::size_t feature_count_ = 0;
  std::uint64_t seed_ = 0;
};

}  // namespace edr::detect
