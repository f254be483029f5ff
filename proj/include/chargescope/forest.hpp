#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

namespace chargescope::baseline {

/// Internal nodes have feature >= 0 and two children; leaves carry the
/// class histogram of the bootstrap samples that reached them.
struct TreeNode {
    int feature = -1;
    double threshold = 0.0;
    int left = -1;
    int right = -1;
    std::vector<std::uint32_t> histogram;

    bool is_leaf() const { return feature < 0; }
    bool operator==(const TreeNode&) const = default;
};

struct DecisionTree {
    std::vector<TreeNode> nodes;  // nodes[0] is the root

    bool operator==(const DecisionTree&) const = default;
};

struct ForestConfig {
    std::size_t n_trees = 100;
    std::optional<std::size_t> max_depth;  // unlimited when absent
    std::uint64_t seed = 0;
};

struct Forest {
    std::vector<DecisionTree> trees;
    std::size_t n_trees = 0;
    std::optional<std::size_t> max_depth;
    std::uint64_t seed = 0;
    std::size_t n_features = 0;
    std::size_t n_classes = 0;
    /// Accuracy on samples left out of each tree's bootstrap; NaN if none were.
    double oob_accuracy = 0.0;

    bool operator==(const Forest&) const = default;
};

/// Bootstrap-sampled Gini trees with floor(sqrt(F)) candidate features per
/// node. Tree t draws from derive_seed(seed, t). Labels must be 0..C-1.
Forest rf_train(const std::vector<std::vector<double>>& features, const std::vector<int>& labels,
                const ForestConfig& config = {});

/// Mean of the per-tree leaf class distributions.
std::vector<double> rf_predict_proba(const Forest& forest, std::span<const double> features);

/// Per-class count of trees whose leaf majority is that class (ties to the lower index).
std::vector<std::size_t> rf_tree_votes(const Forest& forest, std::span<const double> features);

/// Classes ordered by mean probability, ties to the lower index.
std::vector<int> rf_predict(const Forest& forest, std::span<const double> features);

void write_forest(const std::filesystem::path& path, const Forest& forest);
Forest read_forest(const std::filesystem::path& path);

}  // namespace chargescope::baseline
