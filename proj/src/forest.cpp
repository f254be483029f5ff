#include "chargescope/forest.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include "chargescope/random.hpp"
#include "chargescope/trace.hpp"

namespace chargescope::baseline {

namespace {

double gini(std::span<const std::uint32_t> counts, std::size_t total) {
    if (total == 0) return 0.0;
    double sum_sq = 0.0;
    for (auto c : counts) {
        const double p = static_cast<double>(c) / static_cast<double>(total);
        sum_sq += p * p;
    }
    return 1.0 - sum_sq;
}

struct SplitChoice {
    int feature = -1;
    double threshold = 0.0;
    double impurity = std::numeric_limits<double>::infinity();
};

class TreeBuilder {
public:
    TreeBuilder(const std::vector<std::vector<double>>& x, const std::vector<int>& y,
                std::size_t n_classes, std::optional<std::size_t> max_depth, Rng& rng)
        : x_(x), y_(y), n_classes_(n_classes), max_depth_(max_depth), rng_(rng),
          n_features_(x.front().size()),
          mtry_(std::max<std::size_t>(1, static_cast<std::size_t>(
                                             std::floor(std::sqrt(static_cast<double>(n_features_)))))) {}

    DecisionTree build(std::vector<std::size_t> samples) {
        DecisionTree tree;
        struct Pending {
            int node;
            std::vector<std::size_t> samples;
            std::size_t depth;
        };
        tree.nodes.emplace_back();
        std::vector<Pending> stack;
        stack.push_back({0, std::move(samples), 0});
        while (!stack.empty()) {
            Pending job = std::move(stack.back());
            stack.pop_back();
            std::vector<std::uint32_t> hist(n_classes_, 0);
            for (auto s : job.samples) ++hist[static_cast<std::size_t>(y_[s])];
            const bool pure =
                std::count_if(hist.begin(), hist.end(), [](auto c) { return c > 0; }) <= 1;
            const bool depth_limited = max_depth_ && job.depth >= *max_depth_;
            SplitChoice split;
            if (!pure && !depth_limited && job.samples.size() >= 2) split = find_split(job.samples, hist);
            if (split.feature < 0) {
                tree.nodes[static_cast<std::size_t>(job.node)].histogram = std::move(hist);
                continue;
            }
            std::vector<std::size_t> left, right;
            for (auto s : job.samples)
                (x_[s][static_cast<std::size_t>(split.feature)] <= split.threshold ? left : right)
                    .push_back(s);
            const int left_id = static_cast<int>(tree.nodes.size());
            tree.nodes.emplace_back();
            const int right_id = static_cast<int>(tree.nodes.size());
            tree.nodes.emplace_back();
            auto& node = tree.nodes[static_cast<std::size_t>(job.node)];
            node.feature = split.feature;
            node.threshold = split.threshold;
            node.left = left_id;
            node.right = right_id;
            stack.push_back({right_id, std::move(right), job.depth + 1});
            stack.push_back({left_id, std::move(left), job.depth + 1});
        }
        return tree;
    }

private:
    /// Tries floor(sqrt(F)) random features; if none of them can separate the
    /// node, keeps drawing from the remaining features until one can.
    SplitChoice find_split(const std::vector<std::size_t>& samples,
                           const std::vector<std::uint32_t>& parent_hist) {
        std::vector<std::size_t> features(n_features_);
        std::iota(features.begin(), features.end(), 0);
        SplitChoice best;
        std::vector<std::pair<double, int>> column(samples.size());
        std::vector<std::uint32_t> left(n_classes_), right(n_classes_);
        for (std::size_t drawn = 0; drawn < n_features_; ++drawn) {
            std::uniform_int_distribution<std::size_t> pick(drawn, n_features_ - 1);
            std::swap(features[drawn], features[pick(rng_)]);
            const std::size_t f = features[drawn];
            for (std::size_t i = 0; i < samples.size(); ++i)
                column[i] = {x_[samples[i]][f], y_[samples[i]]};
            std::sort(column.begin(), column.end());
            std::fill(left.begin(), left.end(), 0);
            right = parent_hist;
            const std::size_t n = column.size();
            for (std::size_t i = 0; i + 1 < n; ++i) {
                const auto c = static_cast<std::size_t>(column[i].second);
                ++left[c];
                --right[c];
                if (column[i].first == column[i + 1].first) continue;
                const std::size_t nl = i + 1, nr = n - nl;
                const double impurity = (static_cast<double>(nl) * gini(left, nl) +
                                         static_cast<double>(nr) * gini(right, nr)) /
                                        static_cast<double>(n);
                if (impurity < best.impurity) {
                    double threshold = 0.5 * (column[i].first + column[i + 1].first);
                    if (!(threshold < column[i + 1].first)) threshold = column[i].first;
                    best = {static_cast<int>(f), threshold, impurity};
                }
            }
            if (drawn + 1 >= mtry_ && best.feature >= 0) break;
        }
        return best;
    }

    const std::vector<std::vector<double>>& x_;
    const std::vector<int>& y_;
    std::size_t n_classes_;
    std::optional<std::size_t> max_depth_;
    Rng& rng_;
    std::size_t n_features_;
    std::size_t mtry_;
};

const TreeNode& leaf_for(const DecisionTree& tree, std::span<const double> features) {
    std::size_t node = 0;
    while (!tree.nodes[node].is_leaf()) {
        const auto& n = tree.nodes[node];
        node = static_cast<std::size_t>(
            features[static_cast<std::size_t>(n.feature)] <= n.threshold ? n.left : n.right);
    }
    return tree.nodes[node];
}

void add_leaf_distribution(const TreeNode& leaf, std::vector<double>& acc) {
    const double total = std::accumulate(leaf.histogram.begin(), leaf.histogram.end(), 0.0);
    if (total <= 0.0) return;
    for (std::size_t c = 0; c < acc.size(); ++c) acc[c] += leaf.histogram[c] / total;
}

}  // namespace

Forest rf_train(const std::vector<std::vector<double>>& features, const std::vector<int>& labels,
                const ForestConfig& config) {
    if (features.empty() || features.size() != labels.size())
        throw std::invalid_argument("need one label per feature row");
    if (config.n_trees == 0) throw std::invalid_argument("forest needs at least one tree");
    const std::size_t width = features.front().size();
    if (width == 0) throw std::invalid_argument("feature rows are empty");
    for (const auto& row : features)
        if (row.size() != width) throw std::invalid_argument("feature rows differ in width");
    std::set<int> distinct;
    for (int y : labels) {
        if (y < 0) throw std::invalid_argument("labels must be non-negative");
        distinct.insert(y);
    }
    if (distinct.size() < 2) throw std::invalid_argument("random forest needs at least two classes");

    Forest forest;
    forest.n_trees = config.n_trees;
    forest.max_depth = config.max_depth;
    forest.seed = config.seed;
    forest.n_features = width;
    forest.n_classes = static_cast<std::size_t>(*distinct.rbegin()) + 1;

    const std::size_t n = features.size();
    std::vector<std::vector<double>> oob_votes(n, std::vector<double>(forest.n_classes, 0.0));
    std::vector<std::size_t> oob_hits(n, 0);
    for (std::size_t t = 0; t < config.n_trees; ++t) {
        Rng rng(derive_seed(config.seed, t));
        std::uniform_int_distribution<std::size_t> draw(0, n - 1);
        std::vector<std::size_t> sample(n);
        std::vector<bool> in_bag(n, false);
        for (auto& s : sample) {
            s = draw(rng);
            in_bag[s] = true;
        }
        TreeBuilder builder(features, labels, forest.n_classes, config.max_depth, rng);
        forest.trees.push_back(builder.build(std::move(sample)));
        for (std::size_t i = 0; i < n; ++i) {
            if (in_bag[i]) continue;
            add_leaf_distribution(leaf_for(forest.trees.back(), features[i]), oob_votes[i]);
            ++oob_hits[i];
        }
    }

    std::size_t scored = 0, correct = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (oob_hits[i] == 0) continue;
        ++scored;
        const auto best = std::max_element(oob_votes[i].begin(), oob_votes[i].end());
        if (static_cast<int>(best - oob_votes[i].begin()) == labels[i]) ++correct;
    }
    forest.oob_accuracy = scored == 0 ? std::numeric_limits<double>::quiet_NaN()
                                      : static_cast<double>(correct) / static_cast<double>(scored);
    return forest;
}

std::vector<double> rf_predict_proba(const Forest& forest, std::span<const double> features) {
    if (features.size() != forest.n_features)
        throw std::invalid_argument("feature width " + std::to_string(features.size()) +
                                    " does not match the forest (" +
                                    std::to_string(forest.n_features) + ")");
    std::vector<double> acc(forest.n_classes, 0.0);
    for (const auto& tree : forest.trees) add_leaf_distribution(leaf_for(tree, features), acc);
    for (auto& v : acc) v /= static_cast<double>(forest.trees.size());
    return acc;
}

std::vector<std::size_t> rf_tree_votes(const Forest& forest, std::span<const double> features) {
    if (features.size() != forest.n_features)
        throw std::invalid_argument("feature width does not match the forest");
    std::vector<std::size_t> votes(forest.n_classes, 0);
    for (const auto& tree : forest.trees) {
        const auto& hist = leaf_for(tree, features).histogram;
        const auto best = std::max_element(hist.begin(), hist.end()) - hist.begin();
        ++votes[static_cast<std::size_t>(best)];
    }
    return votes;
}

std::vector<int> rf_predict(const Forest& forest, std::span<const double> features) {
    const auto proba = rf_predict_proba(forest, features);
    std::vector<int> order(proba.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return proba[static_cast<std::size_t>(a)] > proba[static_cast<std::size_t>(b)];
    });
    return order;
}

void write_forest(const std::filesystem::path& path, const Forest& forest) {
    std::string out = "chargescope-forest v1\n";
    out += "n_trees=" + std::to_string(forest.n_trees) + "\n";
    out += "max_depth=" + (forest.max_depth ? std::to_string(*forest.max_depth) : "none") + "\n";
    out += "seed=" + std::to_string(forest.seed) + "\n";
    out += "n_features=" + std::to_string(forest.n_features) + "\n";
    out += "n_classes=" + std::to_string(forest.n_classes) + "\n";
    out += "oob_accuracy=" + format_double(forest.oob_accuracy) + "\n";
    for (std::size_t t = 0; t < forest.trees.size(); ++t) {
        const auto& tree = forest.trees[t];
        out += "tree " + std::to_string(t) + " " + std::to_string(tree.nodes.size()) + "\n";
        for (const auto& node : tree.nodes) {
            if (node.is_leaf()) {
                out += "L";
                for (auto c : node.histogram) out += " " + std::to_string(c);
            } else {
                out += "S " + std::to_string(node.feature) + " " + format_double(node.threshold) +
                       " " + std::to_string(node.left) + " " + std::to_string(node.right);
            }
            out += "\n";
        }
    }
    std::ofstream file(path, std::ios::binary | std::ios::trunc);
    if (!file) throw std::runtime_error("cannot write forest " + path.string());
    file << out;
}

Forest read_forest(const std::filesystem::path& path) {
    const std::string name = path.string();
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + name);
    std::string line;
    if (!std::getline(in, line) || line != "chargescope-forest v1")
        throw std::runtime_error(name + ": not a chargescope forest");
    auto value_of = [&](const std::string& key) {
        if (!std::getline(in, line) || line.rfind(key + "=", 0) != 0)
            throw std::runtime_error(name + ": expected '" + key + "'");
        return line.substr(key.size() + 1);
    };
    Forest forest;
    forest.n_trees = std::stoull(value_of("n_trees"));
    const auto depth = value_of("max_depth");
    if (depth != "none") forest.max_depth = std::stoull(depth);
    forest.seed = std::stoull(value_of("seed"));
    forest.n_features = std::stoull(value_of("n_features"));
    forest.n_classes = std::stoull(value_of("n_classes"));
    {
        const auto text = value_of("oob_accuracy");
        if (text == "nan") forest.oob_accuracy = std::numeric_limits<double>::quiet_NaN();
        else std::from_chars(text.data(), text.data() + text.size(), forest.oob_accuracy);
    }
    for (std::size_t t = 0; t < forest.n_trees; ++t) {
        std::string word;
        std::size_t index = 0, count = 0;
        if (!(in >> word >> index >> count) || word != "tree" || index != t)
            throw std::runtime_error(name + ": malformed tree header");
        DecisionTree tree;
        tree.nodes.resize(count);
        for (auto& node : tree.nodes) {
            in >> word;
            if (word == "L") {
                node.histogram.resize(forest.n_classes);
                for (auto& c : node.histogram) in >> c;
            } else if (word == "S") {
                std::string threshold;
                in >> node.feature >> threshold >> node.left >> node.right;
                auto [ptr, ec] = std::from_chars(threshold.data(), threshold.data() + threshold.size(),
                                                 node.threshold);
                if (ec != std::errc()) throw std::runtime_error(name + ": invalid threshold");
            } else {
                throw std::runtime_error(name + ": unknown node kind '" + word + "'");
            }
            if (!in) throw std::runtime_error(name + ": truncated tree " + std::to_string(t));
        }
        forest.trees.push_back(std::move(tree));
    }
    return forest;
}

}  // namespace chargescope::baseline
