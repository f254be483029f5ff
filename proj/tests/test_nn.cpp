#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>

#include "chargescope/nn.hpp"
#include "chargescope/random.hpp"

namespace fs = std::filesystem;
using namespace chargescope;
using namespace chargescope::nn;

namespace {

ModelConfig tiny_config(std::size_t classes = 3) {
    ModelConfig c;
    c.conv_filters = {2, 2, 2};
    c.kernel = 3;
    c.lstm_units = 3;
    c.dense_units = 4;
    c.n_classes = classes;
    return c;
}

SlicedSegment random_segment(std::mt19937_64& rng, std::size_t n_slices, std::size_t slice_len,
                             int label) {
    std::normal_distribution<double> g(0.0, 1.0);
    SlicedSegment s;
    s.n_slices = n_slices;
    s.slice_len = slice_len;
    s.values.resize(n_slices * slice_len);
    for (auto& v : s.values) v = g(rng);
    s.label = label;
    return s;
}

/// Moves every parameter off zero so no ReLU input sits exactly on its kink.
void jitter(ModelParams<double>& p, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, 0.05);
    for (auto& t : p.tensors)
        for (auto& v : t.values) v += g(rng);
}

/// Three classes of separable synthetic windows: a bump early, middle or late.
std::vector<SlicedSegment> toy_set(std::size_t per_class, std::size_t slice_len, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, 0.2);
    std::vector<SlicedSegment> out;
    for (int c = 0; c < 3; ++c)
        for (std::size_t j = 0; j < per_class; ++j) {
            SlicedSegment s;
            s.n_slices = 3;
            s.slice_len = slice_len;
            s.values.resize(3 * slice_len);
            for (auto& v : s.values) v = g(rng);
            for (std::size_t i = 0; i < slice_len; ++i) s.values[static_cast<std::size_t>(c) * slice_len + i] += 2.0;
            s.label = c;
            out.push_back(std::move(s));
        }
    return out;
}

}  // namespace

TEST(ShapePlan, PaperChain) {
    const ModelConfig c;
    const auto plan = shape_plan(c, 233);
    const std::vector<std::size_t> expected{229, 114, 110, 55, 51, 25};
    ASSERT_EQ(plan.layers.size(), 6u);
    for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(plan.layers[i].length, expected[i]) << plan.layers[i].layer;
    EXPECT_EQ(plan.feature_width, 25u * 300u);

    const auto p500 = shape_plan(c, 166);
    const std::vector<std::size_t> expected500{162, 81, 77, 38, 34, 17};
    for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(p500.layers[i].length, expected500[i]);
}

TEST(ShapePlan, TooShortNamesLayer) {
    // 12 -> conv 8 -> pool 4 -> conv 0: the second convolution is the first to collapse.
    try {
        shape_plan(ModelConfig{}, 12);
        FAIL() << "expected an error";
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("conv2"), std::string::npos) << e.what();
    }
    // 20 -> 16 -> 8 -> 4 -> 2 -> conv -2.
    try {
        shape_plan(ModelConfig{}, 20);
        FAIL() << "expected an error";
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("conv3"), std::string::npos) << e.what();
    }
    EXPECT_NO_THROW(shape_plan(ModelConfig{}, 36));
}

TEST(Forward, SoftmaxSumsToOne) {
    std::mt19937_64 rng(1);
    const auto params = init_params<double>(tiny_config(), 24, 5);
    for (int i = 0; i < 20; ++i) {
        const auto s = random_segment(rng, 3, 24, 0);
        const auto p = forward(params, s);
        EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-9);
        for (double v : p) EXPECT_GE(v, 0.0);
        EXPECT_EQ(forward(params, s), p);
    }
}

TEST(Forward, ZeroWeightsGiveUniform) {
    ModelConfig c;
    c.conv_filters = {4, 4, 4};
    c.lstm_units = 8;
    c.dense_units = 6;
    const auto params = zero_params<float>(c, 40);
    std::mt19937_64 rng(2);
    const auto p = forward(params, random_segment(rng, 3, 40, 0));
    ASSERT_EQ(p.size(), 20u);
    for (double v : p) EXPECT_NEAR(v, 1.0 / 20.0, 1e-7);
}

TEST(Forward, ShapeMismatch) {
    std::mt19937_64 rng(3);
    const auto params = init_params<double>(tiny_config(), 24, 5);
    EXPECT_THROW(forward(params, random_segment(rng, 3, 25, 0)), std::invalid_argument);
    EXPECT_THROW(forward(params, random_segment(rng, 2, 24, 0)), std::invalid_argument);
}

TEST(Gradients, MatchFiniteDifferences) {
    std::mt19937_64 rng(4);
    for (std::uint64_t trial = 0; trial < 3; ++trial) {
        auto params = init_params<double>(tiny_config(), 24, 100 + trial);
        jitter(params, 200 + trial);
        std::vector<SlicedSegment> data;
        for (int b = 0; b < 4; ++b) data.push_back(random_segment(rng, 3, 24, b % 3));
        std::vector<LabeledRef> batch;
        for (const auto& s : data) batch.push_back({&s, *s.label});
        for (auto mode : {Mode::infer, Mode::train}) {
            const auto r = gradient_check(params, batch, mode, 300 + trial);
            EXPECT_LT(r.max_relative_error, 1e-4) << "worst " << r.worst_parameter;
            EXPECT_EQ(r.checked, params.parameter_count());
        }
    }
}

TEST(Gradients, DuplicateBatchInvariance) {
    std::mt19937_64 rng(5);
    const auto params = init_params<double>(tiny_config(), 24, 6);
    std::vector<SlicedSegment> data;
    for (int b = 0; b < 3; ++b) data.push_back(random_segment(rng, 3, 24, b));
    std::vector<LabeledRef> once, twice;
    for (const auto& s : data) once.push_back({&s, *s.label});
    twice = once;
    twice.insert(twice.end(), once.begin(), once.end());
    const auto a = loss_and_gradients(params, once, Mode::infer);
    const auto b = loss_and_gradients(params, twice, Mode::infer);
    EXPECT_NEAR(a.loss, b.loss, 1e-12);
    for (std::size_t t = 0; t < a.gradients.size(); ++t)
        for (std::size_t k = 0; k < a.gradients[t].values.size(); ++k)
            EXPECT_NEAR(a.gradients[t].values[k], b.gradients[t].values[k], 1e-12);
    EXPECT_DOUBLE_EQ(batch_loss(params, once, Mode::infer), a.loss);
}

TEST(Gradients, ConfidentCorrectPredictionHasZeroLoss) {
    std::mt19937_64 rng(6);
    auto params = init_params<double>(tiny_config(), 24, 7);
    params[kOutB].values = {0.0, 1000.0, 0.0};
    const auto s = random_segment(rng, 3, 24, 1);
    const LabeledRef item{&s, 1};
    const auto r = loss_and_gradients(params, std::span<const LabeledRef>(&item, 1), Mode::infer);
    EXPECT_EQ(r.loss, 0.0);
    for (double g : r.gradients[kOutW].values) EXPECT_EQ(g, 0.0);
    for (double g : r.gradients[kOutB].values) EXPECT_EQ(g, 0.0);
}

TEST(Dropout, PreservesExpectation) {
    const std::size_t units = 16;
    std::vector<double> mean(units, 0.0);
    const int draws = 20000;
    for (int d = 0; d < draws; ++d) {
        const auto m = dropout_mask(units, 0.5, derive_seed(9, static_cast<std::uint64_t>(d)));
        for (std::size_t u = 0; u < units; ++u) {
            ASSERT_TRUE(m[u] == 0.0 || m[u] == 2.0);
            mean[u] += m[u] / draws;
        }
    }
    // The masked-and-scaled vector averages back to the input (here all ones).
    double total = 0.0;
    for (double m : mean) total += m;
    EXPECT_NEAR(total / units, 1.0, 0.01);
    EXPECT_EQ(dropout_mask(4, 0.0, 1), std::vector<double>(4, 1.0));
    EXPECT_THROW(dropout_mask(4, 1.0, 1), std::invalid_argument);
}

TEST(Train, MemorizesToyProblem) {
    const auto data = toy_set(10, 24, 8);
    ModelConfig c;
    c.conv_filters = {4, 4, 4};
    c.kernel = 3;
    c.lstm_units = 8;
    c.dense_units = 8;
    c.n_classes = 3;
    TrainConfig tc;
    tc.learning_rate = 1e-2;
    tc.batch_size = 8;
    tc.max_epochs = 50;
    tc.early_stop_patience = 50;
    tc.seed = 3;
    const auto r = train<float>(c, tc, data, data);
    const auto preds = predict_segments(r.params, data);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < data.size(); ++i) correct += preds[i].label == *data[i].label;
    EXPECT_EQ(correct, data.size());
    EXPECT_EQ(r.best_val_accuracy, 1.0);

    // Best-epoch bookkeeping: no recorded epoch beats the kept one.
    for (const auto& e : r.history) EXPECT_LE(e.val_accuracy, r.best_val_accuracy);
    EXPECT_EQ(r.history[r.best_epoch - 1].val_accuracy, r.best_val_accuracy);
}

TEST(Train, Deterministic) {
    const auto data = toy_set(4, 24, 9);
    const ModelConfig c = tiny_config();
    TrainConfig tc;
    tc.max_epochs = 3;
    tc.seed = 11;
    const auto a = train<float>(c, tc, data, data);
    const auto b = train<float>(c, tc, data, data);
    EXPECT_EQ(a.params, b.params);
    tc.seed = 12;
    EXPECT_NE(train<float>(c, tc, data, data).params, a.params);
}

TEST(Train, FirstStepDescends) {
    const auto data = toy_set(4, 24, 10);
    ModelConfig c = tiny_config();
    c.dropout = 0.0;
    TrainConfig tc;
    tc.learning_rate = 1e-4;
    tc.batch_size = data.size();
    tc.max_epochs = 1;
    tc.seed = 4;
    std::vector<LabeledRef> batch;
    for (const auto& s : data) batch.push_back({&s, *s.label});
    const auto start = init_params<double>(c, 24, derive_seed(tc.seed, 0));
    const auto r = train<double>(c, tc, data, {});
    EXPECT_LT(batch_loss(r.params, batch, Mode::infer), batch_loss(start, batch, Mode::infer));
}

TEST(Predict, MatchesForwardAndTieRule) {
    std::mt19937_64 rng(12);
    const auto params = init_params<float>(tiny_config(), 24, 13);
    std::vector<SlicedSegment> segs;
    for (int i = 0; i < 5; ++i) segs.push_back(random_segment(rng, 3, 24, 0));
    const auto preds = predict_segments(params, segs, 2);
    for (std::size_t i = 0; i < segs.size(); ++i) {
        const auto p = forward(params, segs[i]);
        for (std::size_t k = 0; k < p.size(); ++k) EXPECT_NEAR(preds[i].probabilities[k], p[k], 1e-6);
    }
    std::vector<SlicedSegment> reversed(segs.rbegin(), segs.rend());
    const auto rev = predict_segments(params, reversed);
    for (std::size_t i = 0; i < segs.size(); ++i)
        EXPECT_EQ(rev[segs.size() - 1 - i].probabilities, preds[i].probabilities);

    const auto uniform = predict_segments(zero_params<float>(tiny_config(), 24), segs);
    for (const auto& p : uniform) EXPECT_EQ(p.label, 0);
}

TEST(Checkpoint, RoundTrip) {
    const auto dir = fs::temp_directory_path() / "chargescope_nn_ckpt";
    fs::create_directories(dir);
    const auto f = init_params<float>(tiny_config(), 24, 14);
    write_checkpoint(dir / "f.ckpt", f, 77, {{"norm_mean", "1.5"}});
    const auto back = read_checkpoint<float>(dir / "f.ckpt");
    EXPECT_EQ(back.params, f);
    EXPECT_EQ(back.train_seed, 77u);
    EXPECT_EQ(back.extras.at("norm_mean"), "1.5");
    EXPECT_EQ(checkpoint_precision(dir / "f.ckpt"), Precision::single);
    EXPECT_THROW(read_checkpoint<double>(dir / "f.ckpt"), std::runtime_error);

    auto d = init_params<double>(tiny_config(), 24, 15);
    jitter(d, 16);
    write_checkpoint(dir / "d.ckpt", d, 1);
    EXPECT_EQ(read_checkpoint<double>(dir / "d.ckpt").params, d);
}
