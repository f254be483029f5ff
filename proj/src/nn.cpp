#include "chargescope/nn.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "chargescope/random.hpp"
#include "chargescope/trace.hpp"

namespace chargescope::nn {

namespace {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using RowVec = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;
template <typename Scalar>
using MatMap = Eigen::Map<Mat<Scalar>>;
template <typename Scalar>
using ConstMatMap = Eigen::Map<const Mat<Scalar>>;
template <typename Scalar>
using StridedMap = Eigen::Map<const Mat<Scalar>, 0, Eigen::OuterStride<>>;

template <typename Scalar>
ConstMatMap<Scalar> view(const Tensor<Scalar>& t) {
    const auto rows = static_cast<Eigen::Index>(t.shape[0]);
    const auto cols = static_cast<Eigen::Index>(t.shape.size() > 1 ? t.shape[1] : 1);
    return ConstMatMap<Scalar>(t.values.data(), rows, cols);
}

template <typename Scalar>
MatMap<Scalar> view(Tensor<Scalar>& t) {
    const auto rows = static_cast<Eigen::Index>(t.shape[0]);
    const auto cols = static_cast<Eigen::Index>(t.shape.size() > 1 ? t.shape[1] : 1);
    return MatMap<Scalar>(t.values.data(), rows, cols);
}

template <typename Scalar>
Eigen::Map<const RowVec<Scalar>> row_view(const Tensor<Scalar>& t) {
    return Eigen::Map<const RowVec<Scalar>>(t.values.data(), static_cast<Eigen::Index>(t.values.size()));
}

template <typename Scalar>
Eigen::Map<RowVec<Scalar>> row_view(Tensor<Scalar>& t) {
    return Eigen::Map<RowVec<Scalar>>(t.values.data(), static_cast<Eigen::Index>(t.values.size()));
}

template <typename Scalar>
Scalar sigmoid(Scalar x) {
    return Scalar(1) / (Scalar(1) + std::exp(-x));
}

struct TensorSpec {
    std::string name;
    std::vector<std::size_t> shape;
};

std::vector<TensorSpec> tensor_specs(const ModelConfig& c, std::size_t slice_len) {
    const auto plan = shape_plan(c, slice_len);
    const auto h = c.lstm_units;
    std::vector<TensorSpec> specs;
    std::size_t c_in = 1;
    for (std::size_t l = 0; l < 3; ++l) {
        const auto name = "conv" + std::to_string(l + 1);
        specs.push_back({name + ".weight", {c.kernel * c_in, c.conv_filters[l]}});
        specs.push_back({name + ".bias", {c.conv_filters[l]}});
        c_in = c.conv_filters[l];
    }
    specs.push_back({"lstm.w_input", {plan.feature_width, 4 * h}});
    specs.push_back({"lstm.w_hidden", {h, 4 * h}});
    specs.push_back({"lstm.bias", {4 * h}});
    specs.push_back({"dense.weight", {h, c.dense_units}});
    specs.push_back({"dense.bias", {c.dense_units}});
    specs.push_back({"output.weight", {c.dense_units, c.n_classes}});
    specs.push_back({"output.bias", {c.n_classes}});
    return specs;
}

/// Activations of one forward pass, kept for backpropagation.
template <typename Scalar>
struct ConvCache {
    std::size_t in_len = 0, in_channels = 0, conv_len = 0, pool_len = 0, channels = 0;
    std::size_t rows_full = 0;       // stacked im2col rows, including rows that straddle slices
    Mat<Scalar> input;               // (N * in_len) x in_channels
    Mat<Scalar> activation;          // rows_full x channels, post-ReLU
    std::vector<std::uint32_t> argmax;  // per pooled element, winning row in `activation`
    Mat<Scalar> pooled;              // (N * pool_len) x channels
};

template <typename Scalar>
struct ForwardCache {
    std::size_t batch = 0;
    std::size_t steps = 0;
    std::array<ConvCache<Scalar>, 3> conv;
    std::vector<Mat<Scalar>> x_steps;                 // per step: B x F
    std::vector<Mat<Scalar>> gate_i, gate_f, gate_g, gate_o, cell, cell_tanh, hidden;
    Mat<Scalar> mask;                                 // B x H, already scaled by 1/(1-p)
    Mat<Scalar> dropped;                              // B x H
    Mat<Scalar> dense_pre;                            // B x D
    Mat<Scalar> dense_act;                            // B x D
    Mat<Scalar> logits;                               // B x C
    Mat<Scalar> probs;                                // B x C
};

template <typename Scalar>
void conv_forward(ConvCache<Scalar>& cc, const Tensor<Scalar>& weight, const Tensor<Scalar>& bias,
                  std::size_t kernel, std::size_t pool_size, std::size_t pool_stride,
                  std::size_t n_items) {
    const auto c_in = cc.in_channels;
    const auto rows_in = n_items * cc.in_len;
    cc.rows_full = rows_in - kernel + 1;
    cc.conv_len = cc.in_len - kernel + 1;
    cc.pool_len = (cc.conv_len - pool_size) / pool_stride + 1;
    cc.channels = weight.shape[1];

    // Row r of the im2col matrix is the contiguous run input[r .. r+kernel-1][*].
    StridedMap<Scalar> cols(cc.input.data(), static_cast<Eigen::Index>(cc.rows_full),
                            static_cast<Eigen::Index>(kernel * c_in),
                            Eigen::OuterStride<>(static_cast<Eigen::Index>(c_in)));
    cc.activation.noalias() = cols * view(weight);
    cc.activation.rowwise() += row_view(bias);
    cc.activation = cc.activation.cwiseMax(Scalar(0));

    const auto ch = cc.channels;
    cc.pooled.resize(static_cast<Eigen::Index>(n_items * cc.pool_len), static_cast<Eigen::Index>(ch));
    cc.argmax.assign(n_items * cc.pool_len * ch, 0);
    for (std::size_t n = 0; n < n_items; ++n) {
        for (std::size_t p = 0; p < cc.pool_len; ++p) {
            const std::size_t out_row = n * cc.pool_len + p;
            const std::size_t first = n * cc.in_len + p * pool_stride;
            Scalar* out = cc.pooled.data() + out_row * ch;
            std::uint32_t* arg = cc.argmax.data() + out_row * ch;
            const Scalar* a0 = cc.activation.data() + first * ch;
            for (std::size_t c = 0; c < ch; ++c) {
                out[c] = a0[c];
                arg[c] = static_cast<std::uint32_t>(first);
            }
            for (std::size_t q = 1; q < pool_size; ++q) {
                const Scalar* aq = cc.activation.data() + (first + q) * ch;
                for (std::size_t c = 0; c < ch; ++c) {
                    if (aq[c] > out[c]) {
                        out[c] = aq[c];
                        arg[c] = static_cast<std::uint32_t>(first + q);
                    }
                }
            }
        }
    }
}

template <typename Scalar>
void make_mask(Mat<Scalar>& mask, std::size_t batch, std::size_t units, double dropout,
               Mode mode, std::uint64_t seed) {
    mask.setOnes(static_cast<Eigen::Index>(batch), static_cast<Eigen::Index>(units));
    if (mode != Mode::train || dropout <= 0.0) return;
    for (std::size_t b = 0; b < batch; ++b) {
        const auto row = dropout_mask(units, dropout, derive_seed(seed, b));
        for (std::size_t u = 0; u < units; ++u)
            mask(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(u)) = static_cast<Scalar>(row[u]);
    }
}

template <typename Scalar>
void run_forward(const ModelParams<Scalar>& params, std::span<const SlicedSegment* const> inputs,
                 Mode mode, std::uint64_t dropout_seed, ForwardCache<Scalar>& fc) {
    const auto& cfg = params.config;
    const auto batch = inputs.size();
    const auto steps = cfg.n_slices;
    const auto n_items = batch * steps;
    fc.batch = batch;
    fc.steps = steps;

    auto& first = fc.conv[0];
    first.in_len = params.slice_len;
    first.in_channels = 1;
    first.input.resize(static_cast<Eigen::Index>(n_items * params.slice_len), 1);
    for (std::size_t b = 0; b < batch; ++b) {
        const auto* seg = inputs[b];
        if (seg->n_slices != steps || seg->slice_len != params.slice_len ||
            seg->values.size() != steps * params.slice_len)
            throw std::invalid_argument("segment shape does not match the model");
        Scalar* dst = first.input.data() + b * steps * params.slice_len;
        for (std::size_t i = 0; i < seg->values.size(); ++i) dst[i] = static_cast<Scalar>(seg->values[i]);
    }

    for (std::size_t l = 0; l < 3; ++l) {
        auto& cc = fc.conv[l];
        if (l > 0) {
            const auto& prev = fc.conv[l - 1];
            cc.in_len = prev.pool_len;
            cc.in_channels = prev.channels;
            cc.input = prev.pooled;
        }
        conv_forward(cc, params.tensors[kConv1W + 2 * l], params.tensors[kConv1B + 2 * l],
                     cfg.kernel, cfg.pool_size, cfg.pool_stride, n_items);
    }

    const auto& last = fc.conv[2];
    const auto width = static_cast<Eigen::Index>(last.pool_len * last.channels);
    const auto h = static_cast<Eigen::Index>(cfg.lstm_units);
    const auto b_rows = static_cast<Eigen::Index>(batch);
    const auto wx = view(params[kLstmWx]);
    const auto wh = view(params[kLstmWh]);
    const auto lb = row_view(params[kLstmB]);

    for (auto* v : {&fc.x_steps, &fc.gate_i, &fc.gate_f, &fc.gate_g, &fc.gate_o, &fc.cell,
                    &fc.cell_tanh, &fc.hidden})
        v->assign(steps, Mat<Scalar>());

    Mat<Scalar> h_prev = Mat<Scalar>::Zero(b_rows, h);
    Mat<Scalar> c_prev = Mat<Scalar>::Zero(b_rows, h);
    Mat<Scalar> z;
    for (std::size_t t = 0; t < steps; ++t) {
        // Features of slice t for every batch item: rows b * steps + t.
        StridedMap<Scalar> xt(last.pooled.data() + t * static_cast<std::size_t>(width), b_rows,
                              width, Eigen::OuterStride<>(static_cast<Eigen::Index>(steps) * width));
        fc.x_steps[t] = xt;
        z.noalias() = fc.x_steps[t] * wx;
        z.noalias() += h_prev * wh;
        z.rowwise() += lb;
        auto& gi = fc.gate_i[t];
        auto& gf = fc.gate_f[t];
        auto& gg = fc.gate_g[t];
        auto& go = fc.gate_o[t];
        gi = z.middleCols(0, h).unaryExpr([](Scalar v) { return sigmoid(v); });
        gf = z.middleCols(h, h).unaryExpr([](Scalar v) { return sigmoid(v); });
        gg = z.middleCols(2 * h, h).array().tanh().matrix();
        go = z.middleCols(3 * h, h).unaryExpr([](Scalar v) { return sigmoid(v); });
        fc.cell[t] = gf.cwiseProduct(c_prev) + gi.cwiseProduct(gg);
        fc.cell_tanh[t] = fc.cell[t].array().tanh().matrix();
        fc.hidden[t] = go.cwiseProduct(fc.cell_tanh[t]);
        h_prev = fc.hidden[t];
        c_prev = fc.cell[t];
    }

    make_mask(fc.mask, batch, cfg.lstm_units, cfg.dropout, mode, dropout_seed);
    fc.dropped = h_prev.cwiseProduct(fc.mask);
    fc.dense_pre.noalias() = fc.dropped * view(params[kDenseW]);
    fc.dense_pre.rowwise() += row_view(params[kDenseB]);
    fc.dense_act = fc.dense_pre.cwiseMax(Scalar(0));
    fc.logits.noalias() = fc.dense_act * view(params[kOutW]);
    fc.logits.rowwise() += row_view(params[kOutB]);

    fc.probs.resize(fc.logits.rows(), fc.logits.cols());
    for (Eigen::Index b = 0; b < fc.logits.rows(); ++b) {
        const Scalar top = fc.logits.row(b).maxCoeff();
        fc.probs.row(b) = (fc.logits.row(b).array() - top).exp().matrix();
        fc.probs.row(b) /= fc.probs.row(b).sum();
    }
}

/// Mean cross-entropy computed from logits (log-sum-exp) to avoid log(0).
template <typename Scalar>
double cross_entropy(const ForwardCache<Scalar>& fc, std::span<const LabeledRef> batch) {
    double total = 0.0;
    for (std::size_t b = 0; b < batch.size(); ++b) {
        const Eigen::RowVectorXd row = fc.logits.row(static_cast<Eigen::Index>(b)).template cast<double>();
        const double top = row.maxCoeff();
        const double lse = top + std::log((row.array() - top).exp().sum());
        total += lse - row(batch[b].label);
    }
    return total / static_cast<double>(batch.size());
}

template <typename Scalar>
std::vector<const SlicedSegment*> pointers(std::span<const LabeledRef> batch,
                                           const ModelConfig& cfg) {
    std::vector<const SlicedSegment*> out;
    out.reserve(batch.size());
    for (const auto& item : batch) {
        if (item.label < 0 || static_cast<std::size_t>(item.label) >= cfg.n_classes)
            throw std::invalid_argument("label outside the model's class range");
        out.push_back(item.segment);
    }
    return out;
}

template <typename Scalar>
void conv_backward(const ConvCache<Scalar>& cc, const Tensor<Scalar>& weight,
                   const Mat<Scalar>& d_pooled, std::size_t kernel, Tensor<Scalar>& d_weight,
                   Tensor<Scalar>& d_bias, Mat<Scalar>* d_input) {
    const auto ch = cc.channels;
    Mat<Scalar> d_act = Mat<Scalar>::Zero(cc.activation.rows(), cc.activation.cols());
    const auto pooled_elems = static_cast<std::size_t>(d_pooled.size());
    for (std::size_t i = 0; i < pooled_elems; ++i) {
        const std::size_t c = i % ch;
        d_act.data()[cc.argmax[i] * ch + c] += d_pooled.data()[i];
    }
    d_act = d_act.cwiseProduct((cc.activation.array() > Scalar(0)).template cast<Scalar>().matrix());

    const auto c_in = cc.in_channels;
    StridedMap<Scalar> cols(cc.input.data(), static_cast<Eigen::Index>(cc.rows_full),
                            static_cast<Eigen::Index>(kernel * c_in),
                            Eigen::OuterStride<>(static_cast<Eigen::Index>(c_in)));
    view(d_weight).noalias() += cols.transpose() * d_act;
    row_view(d_bias) += d_act.colwise().sum();

    if (d_input) {
        const Mat<Scalar> d_cols = d_act * view(weight).transpose();
        d_input->setZero(cc.input.rows(), cc.input.cols());
        const auto span_len = static_cast<Eigen::Index>(kernel * c_in);
        for (std::size_t r = 0; r < cc.rows_full; ++r) {
            Eigen::Map<RowVec<Scalar>>(d_input->data() + r * c_in, span_len) +=
                d_cols.row(static_cast<Eigen::Index>(r));
        }
    }
}

template <typename Scalar>
std::vector<Tensor<Scalar>> zero_like(const ModelParams<Scalar>& params) {
    std::vector<Tensor<Scalar>> out = params.tensors;
    for (auto& t : out) std::fill(t.values.begin(), t.values.end(), Scalar(0));
    return out;
}

template <typename Scalar>
std::vector<Tensor<Scalar>> run_backward(const ModelParams<Scalar>& params,
                                         const ForwardCache<Scalar>& fc,
                                         std::span<const LabeledRef> batch) {
    const auto& cfg = params.config;
    auto grads = zero_like(params);
    const auto b_rows = static_cast<Eigen::Index>(fc.batch);
    const auto h = static_cast<Eigen::Index>(cfg.lstm_units);

    Mat<Scalar> d_logits = fc.probs;
    for (std::size_t b = 0; b < fc.batch; ++b) d_logits(static_cast<Eigen::Index>(b), batch[b].label) -= Scalar(1);
    d_logits /= static_cast<Scalar>(fc.batch);

    view(grads[kOutW]).noalias() += fc.dense_act.transpose() * d_logits;
    row_view(grads[kOutB]) += d_logits.colwise().sum();
    Mat<Scalar> d_dense = d_logits * view(params[kOutW]).transpose();
    d_dense = d_dense.cwiseProduct((fc.dense_pre.array() > Scalar(0)).template cast<Scalar>().matrix());
    view(grads[kDenseW]).noalias() += fc.dropped.transpose() * d_dense;
    row_view(grads[kDenseB]) += d_dense.colwise().sum();
    Mat<Scalar> d_h = (d_dense * view(params[kDenseW]).transpose()).cwiseProduct(fc.mask);

    const auto& last = fc.conv[2];
    const auto width = static_cast<Eigen::Index>(last.pool_len * last.channels);
    Mat<Scalar> d_features(last.pooled.rows(), last.pooled.cols());
    const auto wx = view(params[kLstmWx]);
    const auto wh = view(params[kLstmWh]);
    Mat<Scalar> d_c = Mat<Scalar>::Zero(b_rows, h);
    Mat<Scalar> d_z(b_rows, 4 * h);
    const Mat<Scalar> zeros = Mat<Scalar>::Zero(b_rows, h);
    for (std::size_t step = fc.steps; step-- > 0;) {
        const auto& gi = fc.gate_i[step];
        const auto& gf = fc.gate_f[step];
        const auto& gg = fc.gate_g[step];
        const auto& go = fc.gate_o[step];
        const auto& tc = fc.cell_tanh[step];
        const Mat<Scalar>& c_prev = step > 0 ? fc.cell[step - 1] : zeros;
        const Mat<Scalar>& h_prev = step > 0 ? fc.hidden[step - 1] : zeros;

        const auto one = Scalar(1);
        d_c.array() += d_h.array() * go.array() * (one - tc.array().square());
        d_z.middleCols(0, h) = (d_c.array() * gg.array() * gi.array() * (one - gi.array())).matrix();
        d_z.middleCols(h, h) = (d_c.array() * c_prev.array() * gf.array() * (one - gf.array())).matrix();
        d_z.middleCols(2 * h, h) = (d_c.array() * gi.array() * (one - gg.array().square())).matrix();
        d_z.middleCols(3 * h, h) = (d_h.array() * tc.array() * go.array() * (one - go.array())).matrix();

        view(grads[kLstmWx]).noalias() += fc.x_steps[step].transpose() * d_z;
        view(grads[kLstmWh]).noalias() += h_prev.transpose() * d_z;
        row_view(grads[kLstmB]) += d_z.colwise().sum();

        const Mat<Scalar> d_x = d_z * wx.transpose();
        for (Eigen::Index b = 0; b < b_rows; ++b) {
            Eigen::Map<RowVec<Scalar>>(d_features.data() +
                                           (static_cast<std::size_t>(b) * fc.steps + step) *
                                               static_cast<std::size_t>(width),
                                       width) = d_x.row(b);
        }
        d_h = d_z * wh.transpose();
        d_c = d_c.cwiseProduct(gf);
    }

    Mat<Scalar> d_pooled = std::move(d_features);
    for (std::size_t l = 3; l-- > 0;) {
        Mat<Scalar> d_input;
        conv_backward(fc.conv[l], params.tensors[kConv1W + 2 * l], d_pooled, cfg.kernel,
                      grads[kConv1W + 2 * l], grads[kConv1B + 2 * l], l > 0 ? &d_input : nullptr);
        d_pooled = std::move(d_input);
    }
    return grads;
}

template <typename Scalar>
void check_params(const ModelParams<Scalar>& params) {
    const auto specs = tensor_specs(params.config, params.slice_len);
    if (params.tensors.size() != specs.size()) throw std::invalid_argument("wrong tensor count");
    for (std::size_t i = 0; i < specs.size(); ++i) {
        const auto& t = params.tensors[i];
        if (t.shape != specs[i].shape)
            throw std::invalid_argument("tensor " + specs[i].name + " has the wrong shape");
        const auto n = std::accumulate(t.shape.begin(), t.shape.end(), std::size_t{1},
                                       std::multiplies<>());
        if (t.values.size() != n) throw std::invalid_argument("tensor " + t.name + " size mismatch");
    }
}

}  // namespace

void ModelConfig::validate() const {
    if (n_slices == 0 || kernel == 0 || pool_size == 0 || pool_stride == 0 || lstm_units == 0 ||
        dense_units == 0 || n_classes == 0)
        throw std::invalid_argument("model dimensions must be positive");
    for (auto f : conv_filters)
        if (f == 0) throw std::invalid_argument("filter counts must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("dropout must be in [0, 1)");
}

ShapePlan shape_plan(const ModelConfig& config, std::size_t slice_len) {
    config.validate();
    ShapePlan plan;
    long long len = static_cast<long long>(slice_len);
    const auto k = static_cast<long long>(config.kernel);
    const auto ps = static_cast<long long>(config.pool_size);
    const auto st = static_cast<long long>(config.pool_stride);
    for (std::size_t l = 0; l < 3; ++l) {
        const auto idx = std::to_string(l + 1);
        len = len - k + 1;
        if (len < 1)
            throw std::invalid_argument("conv" + idx + " output length would be " + std::to_string(len));
        plan.layers.push_back({"conv" + idx, static_cast<std::size_t>(len), config.conv_filters[l]});
        // floor((in - size) / stride) + 1, valid only when in >= size
        if (len < ps)
            throw std::invalid_argument("pool" + idx + " output length would be non-positive");
        len = (len - ps) / st + 1;
        plan.layers.push_back({"pool" + idx, static_cast<std::size_t>(len), config.conv_filters[l]});
    }
    plan.feature_width = static_cast<std::size_t>(len) * config.conv_filters[2];
    return plan;
}

template <typename Scalar>
std::size_t ModelParams<Scalar>::parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.values.size();
    return n;
}

template <typename Scalar>
ModelParams<Scalar> zero_params(const ModelConfig& config, std::size_t slice_len) {
    ModelParams<Scalar> params;
    params.config = config;
    params.slice_len = slice_len;
    for (auto& spec : tensor_specs(config, slice_len)) {
        const auto n = std::accumulate(spec.shape.begin(), spec.shape.end(), std::size_t{1},
                                       std::multiplies<>());
        params.tensors.push_back({spec.name, spec.shape, AlignedVector<Scalar>(n, Scalar(0))});
    }
    return params;
}

template <typename Scalar>
ModelParams<Scalar> init_params(const ModelConfig& config, std::size_t slice_len,
                                std::uint64_t seed) {
    auto params = zero_params<Scalar>(config, slice_len);
    auto fill_uniform = [&](ParamId id, double limit) {
        Rng rng(derive_seed(seed, id));
        std::uniform_real_distribution<double> dist(-limit, limit);
        for (auto& v : params[id].values) v = static_cast<Scalar>(dist(rng));
    };
    for (std::size_t l = 0; l < 3; ++l) {
        const auto fan_in = static_cast<double>(params.tensors[kConv1W + 2 * l].shape[0]);
        fill_uniform(static_cast<ParamId>(kConv1W + 2 * l), std::sqrt(6.0 / fan_in));
    }
    const auto h = static_cast<double>(config.lstm_units);
    const auto width = static_cast<double>(params[kLstmWx].shape[0]);
    fill_uniform(kLstmWx, std::sqrt(6.0 / (width + 4.0 * h)));
    fill_uniform(kLstmWh, std::sqrt(6.0 / (h + 4.0 * h)));
    for (std::size_t u = 0; u < config.lstm_units; ++u)
        params[kLstmB].values[config.lstm_units + u] = Scalar(1);
    fill_uniform(kDenseW, std::sqrt(6.0 / h));
    fill_uniform(kOutW, std::sqrt(6.0 / (static_cast<double>(config.dense_units) +
                                         static_cast<double>(config.n_classes))));
    return params;
}

template <typename To, typename From>
ModelParams<To> cast_params(const ModelParams<From>& params) {
    ModelParams<To> out;
    out.config = params.config;
    out.slice_len = params.slice_len;
    for (const auto& t : params.tensors) {
        Tensor<To> c{t.name, t.shape, {}};
        c.values.reserve(t.values.size());
        for (auto v : t.values) c.values.push_back(static_cast<To>(v));
        out.tensors.push_back(std::move(c));
    }
    return out;
}

template <typename Scalar>
std::vector<double> forward(const ModelParams<Scalar>& params, const SlicedSegment& input,
                            Mode mode, std::uint64_t dropout_seed) {
    check_params(params);
    ForwardCache<Scalar> fc;
    const SlicedSegment* ptr = &input;
    run_forward(params, std::span<const SlicedSegment* const>(&ptr, 1), mode, dropout_seed, fc);
    std::vector<double> out(static_cast<std::size_t>(fc.probs.cols()));
    for (Eigen::Index c = 0; c < fc.probs.cols(); ++c) out[static_cast<std::size_t>(c)] = fc.probs(0, c);
    return out;
}

template <typename Scalar>
LossAndGradients<Scalar> loss_and_gradients(const ModelParams<Scalar>& params,
                                            std::span<const LabeledRef> batch, Mode mode,
                                            std::uint64_t dropout_seed) {
    if (batch.empty()) throw std::invalid_argument("empty batch");
    check_params(params);
    const auto inputs = pointers<Scalar>(batch, params.config);
    ForwardCache<Scalar> fc;
    run_forward(params, std::span<const SlicedSegment* const>(inputs), mode, dropout_seed, fc);
    LossAndGradients<Scalar> out;
    out.loss = cross_entropy(fc, batch);
    if (!std::isfinite(out.loss)) throw std::runtime_error("non-finite loss");
    out.gradients = run_backward(params, fc, batch);
    return out;
}

template <typename Scalar>
double batch_loss(const ModelParams<Scalar>& params, std::span<const LabeledRef> batch, Mode mode,
                  std::uint64_t dropout_seed) {
    if (batch.empty()) throw std::invalid_argument("empty batch");
    const auto inputs = pointers<Scalar>(batch, params.config);
    ForwardCache<Scalar> fc;
    run_forward(params, std::span<const SlicedSegment* const>(inputs), mode, dropout_seed, fc);
    return cross_entropy(fc, batch);
}

template <typename Scalar>
std::vector<SegmentPrediction> predict_segments(const ModelParams<Scalar>& params,
                                                std::span<const SlicedSegment> segments,
                                                std::size_t batch_size) {
    check_params(params);
    if (batch_size == 0) batch_size = 1;
    std::vector<SegmentPrediction> out;
    out.reserve(segments.size());
    ForwardCache<Scalar> fc;
    std::vector<const SlicedSegment*> ptrs;
    for (std::size_t start = 0; start < segments.size(); start += batch_size) {
        const auto end = std::min(segments.size(), start + batch_size);
        ptrs.clear();
        for (auto i = start; i < end; ++i) ptrs.push_back(&segments[i]);
        run_forward(params, std::span<const SlicedSegment* const>(ptrs), Mode::infer, 0, fc);
        for (Eigen::Index b = 0; b < fc.probs.rows(); ++b) {
            SegmentPrediction pred;
            pred.probabilities.resize(static_cast<std::size_t>(fc.probs.cols()));
            for (Eigen::Index c = 0; c < fc.probs.cols(); ++c)
                pred.probabilities[static_cast<std::size_t>(c)] = fc.probs(b, c);
            pred.label = argmax_lowest(pred.probabilities);
            out.push_back(std::move(pred));
        }
    }
    return out;
}

void TrainConfig::validate() const {
    if (!(learning_rate > 0.0)) throw std::invalid_argument("learning rate must be positive");
    if (batch_size < 1) throw std::invalid_argument("batch size must be at least 1");
    if (max_epochs < 1) throw std::invalid_argument("max_epochs must be at least 1");
}

template <typename Scalar>
TrainResult<Scalar> train(const ModelConfig& config, const TrainConfig& tc,
                          std::span<const SlicedSegment> train_segments,
                          std::span<const SlicedSegment> val_segments,
                          const EpochCallback& on_epoch) {
    tc.validate();
    if (train_segments.empty()) throw std::invalid_argument("no training segments");
    const auto slice_len = train_segments.front().slice_len;
    for (const auto* set : {&train_segments, &val_segments})
        for (const auto& s : *set) {
            if (s.slice_len != slice_len || s.n_slices != config.n_slices)
                throw std::invalid_argument("segments have inconsistent shapes");
            if (!s.label) throw std::invalid_argument("training segments must be labeled");
        }

    TrainResult<Scalar> result;
    auto params = init_params<Scalar>(config, slice_len, derive_seed(tc.seed, 0));
    result.params = params;

    std::vector<AlignedVector<Scalar>> m(params.tensors.size()), v(params.tensors.size());
    for (std::size_t i = 0; i < params.tensors.size(); ++i) {
        m[i].assign(params.tensors[i].values.size(), Scalar(0));
        v[i].assign(params.tensors[i].values.size(), Scalar(0));
    }
    const double b1 = tc.adam_beta1, b2 = tc.adam_beta2;
    std::uint64_t step = 0;

    std::vector<std::size_t> order(train_segments.size());
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(derive_seed(tc.seed, 1));
    std::vector<LabeledRef> batch;
    std::size_t since_best = 0;
    bool have_best = false;

    for (std::size_t epoch = 1; epoch <= tc.max_epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        double loss_sum = 0.0;
        std::size_t correct = 0;
        for (std::size_t start = 0; start < order.size(); start += tc.batch_size) {
            const auto end = std::min(order.size(), start + tc.batch_size);
            batch.clear();
            for (auto i = start; i < end; ++i) {
                const auto& s = train_segments[order[i]];
                batch.push_back({&s, *s.label});
            }
            ++step;
            const auto dropout_seed = derive_seed(tc.seed, 1000 + step);
            const auto inputs = pointers<Scalar>(batch, config);
            ForwardCache<Scalar> fc;
            run_forward(params, std::span<const SlicedSegment* const>(inputs), Mode::train,
                        dropout_seed, fc);
            const double loss = cross_entropy(fc, std::span<const LabeledRef>(batch));
            if (!std::isfinite(loss))
                throw std::runtime_error("training diverged (non-finite loss) in epoch " +
                                         std::to_string(epoch));
            loss_sum += loss * static_cast<double>(batch.size());
            for (std::size_t b = 0; b < batch.size(); ++b) {
                Eigen::Index best = 0;
                fc.probs.row(static_cast<Eigen::Index>(b)).maxCoeff(&best);
                if (best == batch[b].label) ++correct;
            }
            const auto grads = run_backward(params, fc, std::span<const LabeledRef>(batch));

            const double correction1 = 1.0 - std::pow(b1, static_cast<double>(step));
            const double correction2 = 1.0 - std::pow(b2, static_cast<double>(step));
            const auto lr = static_cast<Scalar>(tc.learning_rate * std::sqrt(correction2) / correction1);
            const auto eps = static_cast<Scalar>(tc.adam_epsilon * std::sqrt(correction2));
            const auto sb1 = static_cast<Scalar>(b1), sb2 = static_cast<Scalar>(b2);
            for (std::size_t i = 0; i < params.tensors.size(); ++i) {
                auto& w = params.tensors[i].values;
                const auto& g = grads[i].values;
                for (std::size_t k = 0; k < w.size(); ++k) {
                    m[i][k] = sb1 * m[i][k] + (Scalar(1) - sb1) * g[k];
                    v[i][k] = sb2 * v[i][k] + (Scalar(1) - sb2) * g[k] * g[k];
                    w[k] -= lr * m[i][k] / (std::sqrt(v[i][k]) + eps);
                }
            }
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = loss_sum / static_cast<double>(order.size());
        rec.train_accuracy = static_cast<double>(correct) / static_cast<double>(order.size());
        if (!val_segments.empty()) {
            const auto preds = predict_segments(params, val_segments);
            std::size_t val_correct = 0;
            double val_loss = 0.0;
            for (std::size_t i = 0; i < preds.size(); ++i) {
                const int y = *val_segments[i].label;
                if (preds[i].label == y) ++val_correct;
                val_loss -= std::log(std::max(preds[i].probabilities[static_cast<std::size_t>(y)], 1e-300));
            }
            rec.val_accuracy = static_cast<double>(val_correct) / static_cast<double>(preds.size());
            rec.val_loss = val_loss / static_cast<double>(preds.size());
        } else {
            rec.val_accuracy = rec.train_accuracy;
            rec.val_loss = rec.train_loss;
        }
        result.history.push_back(rec);
        if (on_epoch) on_epoch(rec);

        if (!have_best || rec.val_accuracy > result.best_val_accuracy) {
            have_best = true;
            result.best_val_accuracy = rec.val_accuracy;
            result.best_epoch = epoch;
            result.params = params;
            since_best = 0;
        } else if (++since_best >= tc.early_stop_patience && tc.early_stop_patience > 0) {
            break;
        }
    }
    return result;
}

namespace {

constexpr const char* kCheckpointMagic = "chargescope-model v1";

template <typename Scalar>
std::string format_scalar(Scalar value) {
    char buffer[64];
    auto [ptr, ec] = std::to_chars(buffer, buffer + sizeof(buffer), value);
    if (ec != std::errc()) throw std::runtime_error("cannot format number");
    return std::string(buffer, ptr);
}

template <typename Scalar>
constexpr const char* precision_name() {
    return sizeof(Scalar) == sizeof(float) ? "single" : "double";
}

std::string join(const std::array<std::size_t, 3>& values) {
    return std::to_string(values[0]) + "," + std::to_string(values[1]) + "," +
           std::to_string(values[2]);
}

std::size_t parse_size(const std::string& s) {
    std::size_t value = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
    if (ec != std::errc() || ptr != s.data() + s.size())
        throw std::runtime_error("checkpoint: invalid integer '" + s + "'");
    return value;
}

std::map<std::string, std::string> read_header(std::istream& in, const std::string& path) {
    std::string line;
    if (!std::getline(in, line) || line != kCheckpointMagic)
        throw std::runtime_error(path + ": not a chargescope model checkpoint");
    std::map<std::string, std::string> header;
    while (std::getline(in, line)) {
        if (line == "tensors") break;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw std::runtime_error(path + ": malformed line '" + line + "'");
        header[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return header;
}

}  // namespace

template <typename Scalar>
void write_checkpoint(const std::filesystem::path& path, const ModelParams<Scalar>& params,
                      std::uint64_t train_seed, const std::map<std::string, std::string>& extras) {
    check_params(params);
    const auto& c = params.config;
    std::string out;
    out += std::string(kCheckpointMagic) + "\n";
    out += std::string("precision=") + precision_name<Scalar>() + "\n";
    out += "train_seed=" + std::to_string(train_seed) + "\n";
    out += "slice_len=" + std::to_string(params.slice_len) + "\n";
    out += "n_slices=" + std::to_string(c.n_slices) + "\n";
    out += "conv_filters=" + join(c.conv_filters) + "\n";
    out += "kernel=" + std::to_string(c.kernel) + "\n";
    out += "pool_size=" + std::to_string(c.pool_size) + "\n";
    out += "pool_stride=" + std::to_string(c.pool_stride) + "\n";
    out += "lstm_units=" + std::to_string(c.lstm_units) + "\n";
    out += "dense_units=" + std::to_string(c.dense_units) + "\n";
    out += "n_classes=" + std::to_string(c.n_classes) + "\n";
    out += "dropout=" + format_double(c.dropout) + "\n";
    for (const auto& [key, value] : extras) {
        if (key.find('=') != std::string::npos || value.find('\n') != std::string::npos)
            throw std::invalid_argument("checkpoint extra '" + key + "' is not representable");
        out += "extra." + key + "=" + value + "\n";
    }
    out += "tensors\n";
    for (const auto& t : params.tensors) {
        out += "tensor " + t.name;
        for (auto d : t.shape) out += " " + std::to_string(d);
        out += "\n";
        const std::size_t cols = t.shape.size() > 1 ? t.shape[1] : t.shape[0];
        for (std::size_t i = 0; i < t.values.size(); ++i) {
            out += format_scalar(t.values[i]);
            out += (i + 1) % cols == 0 ? '\n' : ' ';
        }
    }
    out += "end\n";
    std::ofstream file(path, std::ios::binary | std::ios::trunc);
    if (!file) throw std::runtime_error("cannot write checkpoint " + path.string());
    file.write(out.data(), static_cast<std::streamsize>(out.size()));
}

Precision checkpoint_precision(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    const auto header = read_header(in, path.string());
    const auto it = header.find("precision");
    if (it == header.end()) throw std::runtime_error(path.string() + ": missing precision");
    if (it->second == "single") return Precision::single;
    if (it->second == "double") return Precision::double_;
    throw std::runtime_error(path.string() + ": unknown precision '" + it->second + "'");
}

template <typename Scalar>
Checkpoint<Scalar> read_checkpoint(const std::filesystem::path& path) {
    const std::string name = path.string();
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + name);
    auto header = read_header(in, name);
    auto get = [&](const std::string& key) -> const std::string& {
        auto it = header.find(key);
        if (it == header.end()) throw std::runtime_error(name + ": missing key '" + key + "'");
        return it->second;
    };
    if (get("precision") != precision_name<Scalar>())
        throw std::runtime_error(name + ": checkpoint precision is " + get("precision"));

    Checkpoint<Scalar> ckpt;
    ckpt.train_seed = std::stoull(get("train_seed"));
    ModelConfig c;
    c.n_slices = parse_size(get("n_slices"));
    {
        std::stringstream filters(get("conv_filters"));
        std::string item;
        for (std::size_t l = 0; l < 3; ++l) {
            if (!std::getline(filters, item, ','))
                throw std::runtime_error(name + ": conv_filters needs three values");
            c.conv_filters[l] = parse_size(item);
        }
    }
    c.kernel = parse_size(get("kernel"));
    c.pool_size = parse_size(get("pool_size"));
    c.pool_stride = parse_size(get("pool_stride"));
    c.lstm_units = parse_size(get("lstm_units"));
    c.dense_units = parse_size(get("dense_units"));
    c.n_classes = parse_size(get("n_classes"));
    c.dropout = std::stod(get("dropout"));
    for (const auto& [key, value] : header)
        if (key.rfind("extra.", 0) == 0) ckpt.extras[key.substr(6)] = value;

    ckpt.params = zero_params<Scalar>(c, parse_size(get("slice_len")));
    std::string word;
    for (auto& t : ckpt.params.tensors) {
        if (!(in >> word) || word != "tensor") throw std::runtime_error(name + ": expected tensor");
        in >> word;
        if (word != t.name) throw std::runtime_error(name + ": expected tensor " + t.name);
        for (auto d : t.shape) {
            in >> word;
            if (parse_size(word) != d) throw std::runtime_error(name + ": shape mismatch for " + t.name);
        }
        for (auto& value : t.values) {
            if (!(in >> word)) throw std::runtime_error(name + ": truncated tensor " + t.name);
            auto [ptr, ec] = std::from_chars(word.data(), word.data() + word.size(), value);
            if (ec != std::errc() || ptr != word.data() + word.size())
                throw std::runtime_error(name + ": invalid value '" + word + "' in " + t.name);
        }
    }
    if (!(in >> word) || word != "end") throw std::runtime_error(name + ": missing end marker");
    return ckpt;
}

GradCheckResult gradient_check(const ModelParams<double>& params,
                               std::span<const LabeledRef> batch, Mode mode,
                               std::uint64_t dropout_seed, double step, double abs_floor) {
    const auto analytic = loss_and_gradients(params, batch, mode, dropout_seed);
    GradCheckResult result;
    auto probe = params;
    for (std::size_t i = 0; i < probe.tensors.size(); ++i) {
        auto& values = probe.tensors[i].values;
        for (std::size_t k = 0; k < values.size(); ++k) {
            const double saved = values[k];
            values[k] = saved + step;
            const double up = batch_loss(probe, batch, mode, dropout_seed);
            values[k] = saved - step;
            const double down = batch_loss(probe, batch, mode, dropout_seed);
            values[k] = saved;
            const double numeric = (up - down) / (2.0 * step);
            const double a = analytic.gradients[i].values[k];
            const double denom = std::max({std::abs(a), std::abs(numeric), abs_floor});
            const double rel = std::abs(a - numeric) / denom;
            ++result.checked;
            if (rel > result.max_relative_error) {
                result.max_relative_error = rel;
                result.worst_parameter = probe.tensors[i].name + "[" + std::to_string(k) + "]";
            }
        }
    }
    return result;
}

#define CHARGESCOPE_INSTANTIATE(S)                                                              \
    template struct ModelParams<S>;                                                             \
    template ModelParams<S> zero_params<S>(const ModelConfig&, std::size_t);                    \
    template ModelParams<S> init_params<S>(const ModelConfig&, std::size_t, std::uint64_t);     \
    template std::vector<double> forward<S>(const ModelParams<S>&, const SlicedSegment&, Mode,  \
                                            std::uint64_t);                                     \
    template LossAndGradients<S> loss_and_gradients<S>(const ModelParams<S>&,                   \
                                                       std::span<const LabeledRef>, Mode,       \
                                                       std::uint64_t);                          \
    template double batch_loss<S>(const ModelParams<S>&, std::span<const LabeledRef>, Mode,     \
                                  std::uint64_t);                                               \
    template std::vector<SegmentPrediction> predict_segments<S>(                                \
        const ModelParams<S>&, std::span<const SlicedSegment>, std::size_t);                    \
    template TrainResult<S> train<S>(const ModelConfig&, const TrainConfig&,                    \
                                     std::span<const SlicedSegment>,                            \
                                     std::span<const SlicedSegment>, const EpochCallback&);     \
    template void write_checkpoint<S>(const std::filesystem::path&, const ModelParams<S>&,      \
                                      std::uint64_t, const std::map<std::string, std::string>&); \
    template Checkpoint<S> read_checkpoint<S>(const std::filesystem::path&);

CHARGESCOPE_INSTANTIATE(float)
CHARGESCOPE_INSTANTIATE(double)
#undef CHARGESCOPE_INSTANTIATE

template ModelParams<float> cast_params<float, double>(const ModelParams<double>&);
template ModelParams<double> cast_params<double, float>(const ModelParams<float>&);

std::vector<double> dropout_mask(std::size_t units, double dropout, std::uint64_t seed) {
    if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("dropout must be in [0, 1)");
    std::vector<double> mask(units, 1.0);
    if (dropout == 0.0) return mask;
    const double keep_scale = 1.0 / (1.0 - dropout);
    Rng rng(seed);
    std::bernoulli_distribution drop(dropout);
    for (auto& m : mask) m = drop(rng) ? 0.0 : keep_scale;
    return mask;
}

}  // namespace chargescope::nn
