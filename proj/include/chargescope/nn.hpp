#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <new>
#include <span>
#include <string>
#include <vector>

#include "chargescope/prediction.hpp"
#include "chargescope/preprocess.hpp"

namespace chargescope::nn {

/// Architecture of the sliced-window classifier: a shared three-layer conv
/// stack (valid convolution, ReLU, max-pool) applied to every temporal
/// slice, an LSTM over the slice sequence, dropout, a ReLU dense layer and
/// a softmax output.
struct ModelConfig {
    std::size_t n_slices = 3;
    std::array<std::size_t, 3> conv_filters{128, 192, 300};
    std::size_t kernel = 5;
    std::size_t pool_size = 2;
    std::size_t pool_stride = 2;
    std::size_t lstm_units = 128;
    std::size_t dense_units = 100;
    std::size_t n_classes = 20;
    double dropout = 0.5;

    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

struct LayerShape {
    std::string layer;
    std::size_t length = 0;
    std::size_t channels = 0;
};

struct ShapePlan {
    std::vector<LayerShape> layers;  // conv1, pool1, conv2, pool2, conv3, pool3
    std::size_t feature_width = 0;   // flattened per-slice features fed to the LSTM
};

/// Throws std::invalid_argument naming the first layer whose length would be < 1.
ShapePlan shape_plan(const ModelConfig& config, std::size_t slice_len);

enum ParamId : std::size_t {
    kConv1W, kConv1B, kConv2W, kConv2B, kConv3W, kConv3B,
    kLstmWx, kLstmWh, kLstmB,
    kDenseW, kDenseB, kOutW, kOutB,
    kParamCount
};

/// Cache-line aligned storage. Vectorized kernels then take the same code
/// path on every allocation, which keeps training bit-reproducible.
template <typename T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::size_t kAlign = 64;

    AlignedAllocator() = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) {
        return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(kAlign)));
    }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t(kAlign)); }

    template <typename U>
    bool operator==(const AlignedAllocator<U>&) const noexcept {
        return true;
    }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

template <typename Scalar>
struct Tensor {
    std::string name;
    std::vector<std::size_t> shape;
    AlignedVector<Scalar> values;

    bool operator==(const Tensor&) const = default;
};

/// Tensor layouts (row-major):
///   conv{l}.weight  (kernel * c_in) x c_out, row index k * c_in + channel
///   lstm.w_input    feature_width x 4H, gate blocks ordered input, forget, cell, output
///   lstm.w_hidden   H x 4H
///   dense.weight    H x dense_units
///   output.weight   dense_units x n_classes
template <typename Scalar>
struct ModelParams {
    ModelConfig config;
    std::size_t slice_len = 0;
    std::vector<Tensor<Scalar>> tensors;

    Tensor<Scalar>& operator[](ParamId id) { return tensors[id]; }
    const Tensor<Scalar>& operator[](ParamId id) const { return tensors[id]; }
    std::size_t parameter_count() const;
    bool operator==(const ModelParams&) const = default;
};

/// Zero-filled parameters with the correct shapes.
template <typename Scalar>
ModelParams<Scalar> zero_params(const ModelConfig& config, std::size_t slice_len);

/// He/Glorot uniform initialization, forget-gate bias 1.
template <typename Scalar>
ModelParams<Scalar> init_params(const ModelConfig& config, std::size_t slice_len,
                                std::uint64_t seed);

template <typename To, typename From>
ModelParams<To> cast_params(const ModelParams<From>& params);

enum class Mode { train, infer };

/// Inverted-dropout multipliers: 0 with probability `dropout`, else 1/(1-dropout).
std::vector<double> dropout_mask(std::size_t units, double dropout, std::uint64_t seed);

/// Class probabilities for one sliced window. In train mode a dropout mask
/// is drawn from `dropout_seed`.
template <typename Scalar>
std::vector<double> forward(const ModelParams<Scalar>& params, const SlicedSegment& input,
                            Mode mode = Mode::infer, std::uint64_t dropout_seed = 0);

struct LabeledRef {
    const SlicedSegment* segment;
    int label;
};

template <typename Scalar>
struct LossAndGradients {
    double loss = 0.0;
    std::vector<Tensor<Scalar>> gradients;  // same order and shapes as ModelParams::tensors
};

/// Mean cross-entropy over the batch and its exact gradient. Batch item b
/// uses dropout mask derive_seed(dropout_seed, b) in train mode.
template <typename Scalar>
LossAndGradients<Scalar> loss_and_gradients(const ModelParams<Scalar>& params,
                                            std::span<const LabeledRef> batch,
                                            Mode mode = Mode::train,
                                            std::uint64_t dropout_seed = 0);

/// Loss only; shares the forward path with loss_and_gradients.
template <typename Scalar>
double batch_loss(const ModelParams<Scalar>& params, std::span<const LabeledRef> batch,
                  Mode mode = Mode::train, std::uint64_t dropout_seed = 0);

template <typename Scalar>
std::vector<SegmentPrediction> predict_segments(const ModelParams<Scalar>& params,
                                                std::span<const SlicedSegment> segments,
                                                std::size_t batch_size = 256);

enum class Precision { single, double_ };

struct TrainConfig {
    double learning_rate = 1e-3;
    std::size_t batch_size = 32;
    std::size_t max_epochs = 100;
    std::size_t early_stop_patience = 10;
    std::uint64_t seed = 1;
    Precision precision = Precision::single;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_epsilon = 1e-7;

    void validate() const;
};

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double train_accuracy = 0.0;
    double val_loss = 0.0;
    double val_accuracy = 0.0;
};

template <typename Scalar>
struct TrainResult {
    ModelParams<Scalar> params;
    std::vector<EpochRecord> history;
    std::size_t best_epoch = 0;
    double best_val_accuracy = 0.0;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Adam over shuffled mini-batches, early stopping on validation segment
/// accuracy. Returns the parameters of the best validation epoch.
template <typename Scalar>
TrainResult<Scalar> train(const ModelConfig& config, const TrainConfig& train_config,
                          std::span<const SlicedSegment> train_segments,
                          std::span<const SlicedSegment> val_segments,
                          const EpochCallback& on_epoch = {});

/// Checkpoint container; `extras` carries pipeline settings (normalization,
/// windowing) next to the weights.
template <typename Scalar>
void write_checkpoint(const std::filesystem::path& path, const ModelParams<Scalar>& params,
                      std::uint64_t train_seed,
                      const std::map<std::string, std::string>& extras = {});

template <typename Scalar>
struct Checkpoint {
    ModelParams<Scalar> params;
    std::uint64_t train_seed = 0;
    std::map<std::string, std::string> extras;
};

/// Reads a checkpoint written with the same precision.
template <typename Scalar>
Checkpoint<Scalar> read_checkpoint(const std::filesystem::path& path);

/// Precision recorded in a checkpoint header.
Precision checkpoint_precision(const std::filesystem::path& path);

struct GradCheckResult {
    double max_relative_error = 0.0;
    std::string worst_parameter;
    std::size_t checked = 0;
};

/// Central finite differences against backprop for every parameter, double precision.
/// Relative error is |a - n| / max(|a|, |n|, abs_floor).
GradCheckResult gradient_check(const ModelParams<double>& params,
                               std::span<const LabeledRef> batch, Mode mode,
                               std::uint64_t dropout_seed, double step = 1e-5,
                               double abs_floor = 1e-6);

}  // namespace chargescope::nn
