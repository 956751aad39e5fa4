#include "edr/iforest.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "edr/rng.hpp"

namespace edr::detect {

double average_path_length(std::size_t n) noexcept {
  if (n <= 1) return 0.0;
  if (n == 2) return 1.0;
  const double m = static_cast<double>(n);
  return 2.0 * (std::log(m - 1.0) + kEulerGamma) - 2.0 * (m - 1.0) / m;
}

double IsolationTree::path_length(std::span<const double> x) const {
  if (nodes_.empty()) return 0.0;
  std::size_t i = 0;
  double edges = 0.0;
  while (!nodes_[i].is_leaf()) {
    const auto& node = nodes_[i];
    i = static_cast<std::size_t>(x[static_cast<std::size_t>(node.feature)] < node.split
                                     ? node.left
                                     : node.right);
    edges += 1.0;
  }
  return edges + average_path_length(nodes_[i].size);
}

std::size_t IsolationTree::depth() const {
  if (nodes_.empty()) return 0;
  std::size_t deepest = 0;
  std::vector<std::pair<std::size_t, std::size_t>> stack{{0, 0}};
  while (!stack.empty()) {
    auto [i, d] = stack.back();
    stack.pop_back();
    deepest = std::max(deepest, d);
    if (!nodes_[i].is_leaf()) {
      stack.push_back({static_cast<std::size_t>(nodes_[i].left), d + 1});
      stack.push_back({static_cast<std::size_t>(nodes_[i].right), d + 1});
    }
  }
  return deepest;
}

namespace {

class TreeBuilder {
 public:
  TreeBuilder(std::span<const std::vector<double>> data, std::size_t height_limit, Rng& rng)
      : data_(data), height_limit_(height_limit), rng_(rng) {}

  std::vector<ITreeNode> build(std::vector<std::size_t> rows) {
    nodes_.clear();
    grow(rows, 0, rows.size(), 0);
    return std::move(nodes_);
  }

 private:
  std::int32_t grow(std::vector<std::size_t>& rows, std::size_t begin, std::size_t end,
                    std::size_t depth) {
    const auto id = static_cast<std::int32_t>(nodes_.size());
    nodes_.push_back({});
    const std::size_t count = end - begin;
    ITreeNode leaf;
    leaf.size = static_cast<std::uint32_t>(count);
    if (depth >= height_limit_ || count <= 1) {
      nodes_[static_cast<std::size_t>(id)] = leaf;
      return id;
    }
    // Features with a non-zero range over this node's rows.
    const std::size_t width = data_[rows[begin]].size();
    candidates_.clear();
    lo_.assign(width, 0.0);
    hi_.assign(width, 0.0);
    for (std::size_t f = 0; f < width; ++f) {
      double lo = data_[rows[begin]][f], hi = lo;
      for (std::size_t r = begin + 1; r < end; ++r) {
        const double v = data_[rows[r]][f];
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
      lo_[f] = lo;
      hi_[f] = hi;
      if (hi > lo) candidates_.push_back(f);
    }
    if (candidates_.empty()) {
      nodes_[static_cast<std::size_t>(id)] = leaf;
      return id;
    }
    const std::size_t f = candidates_[rng_.below(candidates_.size())];
    const double lo = lo_[f], hi = hi_[f];
    double split = lo + rng_.open_unit() * (hi - lo);
    if (!(split > lo && split < hi)) split = lo + (hi - lo) / 2.0;
    if (!(split > lo && split < hi)) split = std::nextafter(lo, hi);

    auto mid_it = std::partition(rows.begin() + static_cast<std::ptrdiff_t>(begin),
                                 rows.begin() + static_cast<std::ptrdiff_t>(end),
                                 [&](std::size_t r) { return data_[r][f] < split; });
    const auto mid = static_cast<std::size_t>(mid_it - rows.begin());
    const auto left = grow(rows, begin, mid, depth + 1);
    const auto right = grow(rows, mid, end, depth + 1);
    auto& node = nodes_[static_cast<std::size_t>(id)];
    node.feature = static_cast<std::int32_t>(f);
    node.split = split;
    node.left = left;
    node.right = right;
    node.size = static_cast<std::uint32_t>(count);
    return id;
  }

  std::span<const std::vector<double>> data_;
  std::size_t height_limit_;
  Rng& rng_;
  std::vector<ITreeNode> nodes_;
  std::vector<std::size_t> candidates_;
  std::vector<double> lo_, hi_;
};

}  // namespace

IsolationForest IsolationForest::train(std::span<const std::vector<double>> data,
                                       const ForestParams& params) {
  if (data.size() < 2) throw Error("isolation forest needs at least 2 training rows");
  if (params.psi < 2) throw Error("isolation forest subsample size must be >= 2");
  if (params.n_trees < 1) throw Error("isolation forest needs at least one tree");
  const std::size_t width = data.front().size();
  for (const auto& row : data) {
    if (row.size() != width) throw Error("training rows have inconsistent widths");
    for (double v : row) {
      if (!std::isfinite(v)) throw Error("training rows must be finite");
    }
  }

  IsolationForest forest;
  forest.psi_ = std::min(params.psi, data.size());
  forest.c_psi_ = average_path_length(forest.psi_);
  forest.height_limit_ =
      static_cast<std::size_t>(std::ceil(std::log2(static_cast<double>(forest.psi_))));
  forest.feature_count_ = width;
  forest.seed_ = params.seed;

  Rng rng(params.seed);
  TreeBuilder builder(data, forest.height_limit_, rng);
  std::vector<std::size_t> all(data.size());
  forest.trees_.reserve(params.n_trees);
  for (std::size_t t = 0; t < params.n_trees; ++t) {
    std::iota(all.begin(), all.end(), std::size_t{0});
    // Partial Fisher-Yates: the first psi slots become the subsample.
    for (std::size_t i = 0; i < forest.psi_; ++i) {
      const std::size_t j = i + rng.below(all.size() - i);
      std::swap(all[i], all[j]);
    }
    std::vector<std::size_t> sample(all.begin(),
                                    all.begin() + static_cast<std::ptrdiff_t>(forest.psi_));
    forest.trees_.emplace_back(builder.build(std::move(sample)));
  }
  return forest;
}

double IsolationForest::expected_path_length(std::span<const double> x) const {
  if (trees_.empty()) throw Error("isolation forest is not trained");
  if (x.size() != feature_count_) {
    throw Error("expected " + std::to_string(feature_count_) + " features, got " +
                std::to_string(x.size()));
  }
  double total = 0.0;
  for (const auto& tree : trees_) total += tree.path_length(x);
  return total / static_cast<double>(trees_.size());
}

double IsolationForest::score_from_path(double mean_path, double c_psi) noexcept {
  if (c_psi <= 0.0) return 0.5;
  return std::exp2(-mean_path / c_psi);
}

double IsolationForest::score(std::span<const double> x) const {
  return score_from_path(expected_path_length(x), c_psi_);
}

IsolationForest IsolationForest::from_trees(std::vector<IsolationTree> trees, std::size_t psi,
                                            std::size_t feature_count) {
  if (trees.empty()) throw Error("forest needs at least one tree");
  IsolationForest forest;
  forest.trees_ = std::move(trees);
  forest.psi_ = psi;
  forest.c_psi_ = average_path_length(psi);
  forest.height_limit_ =
      psi > 1 ? static_cast<std::size_t>(std::ceil(std::log2(static_cast<double>(psi)))) : 0;
  forest.feature_count_ = feature_count;
  return forest;
}

nlohmann::json IsolationForest::to_json() const {
  nlohmann::json doc{{"format", "edr-iforest"},
                     {"version", kFormatVersion},
                     {"psi", psi_},
                     {"n_trees", trees_.size()},
                     {"seed", seed_},
                     {"feature_count", feature_count_},
                     {"height_limit", height_limit_}};
  auto trees = nlohmann::json::array();
  for (const auto& tree : trees_) {
    auto nodes = nlohmann::json::array();
    for (const auto& n : tree.nodes()) {
      if (n.is_leaf()) {
        nodes.push_back({-1, n.size});
      } else {
        nodes.push_back({n.feature, n.split, n.left, n.right, n.size});
      }
    }
    trees.push_back(std::move(nodes));
  }
  doc["trees"] = std::move(trees);
  return doc;
}

IsolationForest IsolationForest::from_json(const nlohmann::json& doc) {
  try {
    if (doc.value("format", std::string{}) != "edr-iforest") {
      throw Error("not an isolation forest model document");
    }
    const int version = doc.at("version").get<int>();
    if (version != kFormatVersion) {
      throw Error("unsupported model version " + std::to_string(version) + " (expected " +
                  std::to_string(kFormatVersion) + ")");
    }
    IsolationForest forest;
    forest.psi_ = doc.at("psi").get<std::size_t>();
    forest.seed_ = doc.at("seed").get<std::uint64_t>();
    forest.feature_count_ = doc.at("feature_count").get<std::size_t>();
    forest.height_limit_ = doc.at("height_limit").get<std::size_t>();
    forest.c_psi_ = average_path_length(forest.psi_);
    for (const auto& tree : doc.at("trees")) {
      std::vector<ITreeNode> nodes;
      for (const auto& n : tree) {
        ITreeNode node;
        if (n.at(0).get<int>() < 0) {
          node.size = n.at(1).get<std::uint32_t>();
        } else {
          node.feature = n.at(0).get<std::int32_t>();
          node.split = n.at(1).get<double>();
          node.left = n.at(2).get<std::int32_t>();
          node.right = n.at(3).get<std::int32_t>();
          node.size = n.at(4).get<std::uint32_t>();
        }
        nodes.push_back(node);
      }
      forest.trees_.emplace_back(std::move(nodes));
    }
    if (forest.trees_.size() != doc.at("n_trees").get<std::size_t>() || forest.trees_.empty()) {
      throw Error("model header n_trees does not match tree list");
    }
    return forest;
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("malformed model document: ") + e.what());
  }
}

void IsolationForest::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw Error("cannot write model file " + path.string());
  out << to_json().dump() << '\n';
}

IsolationForest IsolationForest::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open model file " + path.string());
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(std::string("model parse failure: ") + e.what());
  }
}

}  // namespace edr::detect
