#include "chargescope/experiment.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "chargescope/countermeasures.hpp"
#include "chargescope/fft.hpp"
#include "chargescope/preprocess.hpp"
#include "chargescope/random.hpp"

namespace chargescope {

namespace fs = std::filesystem;

const std::vector<std::string>& scenario_names() {
    static const std::vector<std::string> names = {
        "attack",        "device_compare", "cross_device", "cross_charger", "noise",
        "duration_sweep", "aging",         "soc_sweep",    "countermeasure"};
    return names;
}

DeviceProfile ExperimentConfig::device(const std::string& name) const {
    const auto it = custom_devices.find(name);
    if (it != custom_devices.end()) return it->second;
    return builtin_device(name);
}

void ExperimentConfig::validate() const {
    const auto& names = scenario_names();
    if (std::find(names.begin(), names.end(), scenario) == names.end())
        throw std::invalid_argument("unknown scenario '" + scenario + "'");
    sim.validate();
    model.validate();
    train.validate();
    if (model.n_classes != static_cast<std::size_t>(sim.classes))
        throw std::invalid_argument("model class count differs from the simulated class count");
    if (lowpass_hz && !(*lowpass_hz > 0.0)) throw std::invalid_argument("low-pass cutoff must be positive");
    if (charge_cap && !(*charge_cap > 0.0 && *charge_cap <= 1.0))
        throw std::invalid_argument("charge cap must lie in (0, 1]");
    if (scenario == "duration_sweep" && durations.empty())
        throw std::invalid_argument("duration_sweep needs at least one duration");
    if (scenario == "aging" && data_dir)
        throw std::invalid_argument("aging regenerates test traces and cannot use ingested data");
}

ExperimentConfig desk_config() {
    ExperimentConfig c;
    c.sim.classes = 20;
    c.sim.traces_per_class = 20;
    c.sim.duration_s = 2.5;
    c.sim.fs = 500;
    c.overlap = 0.90;
    c.model.conv_filters = {32, 64, 96};
    c.model.lstm_units = 64;
    c.model.dense_units = 64;
    c.model.n_classes = 20;
    c.train.max_epochs = 25;
    c.train.early_stop_patience = 10;
    c.durations = {2.5, 4.0, 5.0, 6.0};
    return c;
}

ExperimentConfig full_config() {
    ExperimentConfig c;
    c.sim.classes = 20;
    c.sim.traces_per_class = 50;
    c.sim.duration_s = 10.0;
    c.sim.fs = 700;
    c.overlap = 0.975;
    c.model = nn::ModelConfig{};
    c.train.max_epochs = 100;
    c.durations = {2.5, 4.0, 5.0, 6.0, 10.0};
    return c;
}

namespace {

LeakageRamp parse_ramp(const std::vector<double>& values, const std::string& what) {
    if (values.size() != 2) throw std::invalid_argument(what + " needs two values: soc_zero, soc_full");
    LeakageRamp r{values[0], values[1]};
    r.validate();
    return r;
}

template <typename T>
void assign(std::optional<T> value, auto& target) {
    if (value) target = static_cast<std::remove_reference_t<decltype(target)>>(*value);
}

std::size_t positive_size(std::optional<long long> value, const std::string& what, std::size_t fallback) {
    if (!value) return fallback;
    if (*value < 0) throw std::invalid_argument(what + " must be non-negative");
    return static_cast<std::size_t>(*value);
}

}  // namespace

ExperimentConfig apply_config(const KeyValueConfig& file, ExperimentConfig c) {
    assign(file.get_string("", "scenario"), c.scenario);
    if (auto seed = file.get_u64("", "seed")) c.seed = *seed;
    if (auto kind = file.get_string("", "classifier")) {
        if (*kind == "cnn") c.classifier = ClassifierKind::cnn;
        else if (*kind == "forest") c.classifier = ClassifierKind::forest;
        else throw std::invalid_argument("classifier must be cnn or forest, got '" + *kind + "'");
    }
    if (auto dir = file.get_string("", "data_dir")) c.data_dir = fs::path(*dir);
    assign(file.get_bool("", "verbose"), c.verbose);

    for (const auto& section : file.sections()) {
        if (section.rfind("device.", 0) != 0) continue;
        const auto name = section.substr(7);
        DeviceProfile d = builtin_device(file.get_string(section, "base").value_or("iphone11"));
        d.name = name;
        assign(file.get_double(section, "gain"), d.gain);
        assign(file.get_double(section, "smoothing_ms"), d.smoothing_ms);
        assign(file.get_double(section, "coil_smoothing_ms"), d.coil_smoothing_ms);
        assign(file.get_double(section, "coil_gain"), d.coil_gain);
        assign(file.get_double(section, "time_scale"), d.time_scale);
        assign(file.get_double(section, "ripple_hz"), d.ripple_hz);
        assign(file.get_double(section, "ripple_amp"), d.ripple_amp);
        assign(file.get_double(section, "noise_sd_wireless"), d.noise_sd_wireless);
        assign(file.get_double(section, "noise_sd_wired"), d.noise_sd_wired);
        if (auto text = file.get(section, "wireless_ramp"); text && *text == "none") {
            file.get_string(section, "wireless_ramp");
            d.wireless_ramp.reset();
        } else if (auto ramp = file.get_doubles(section, "wireless_ramp")) {
            d.wireless_ramp = parse_ramp(*ramp, section + ".wireless_ramp");
        }
        if (auto ramp = file.get_doubles(section, "wired_ramp"))
            d.wired_ramp = parse_ramp(*ramp, section + ".wired_ramp");
        d.validate();
        c.custom_devices[name] = d;
    }

    assign(file.get_int("sim", "classes"), c.sim.classes);
    assign(file.get_int("sim", "traces_per_class"), c.sim.traces_per_class);
    assign(file.get_double("sim", "duration_s"), c.sim.duration_s);
    assign(file.get_int("sim", "fs"), c.sim.fs);
    if (auto name = file.get_string("sim", "device")) c.sim.device = c.device(*name);
    if (auto ch = file.get_string("sim", "channel")) c.sim.channel = parse_channel(*ch);
    assign(file.get_doubles("sim", "soc"), c.sim.soc);
    assign(file.get_u64("sim", "signature_seed"), c.sim.signature_seed);
    assign(file.get_u64("sim", "noise_seed"), c.sim.noise_seed);
    assign(file.get_double("sim", "drift"), c.sim.drift);
    assign(file.get_u64("sim", "aging_seed"), c.sim.aging_seed);

    assign(file.get_double("jitter", "shift_max_s"), c.sim.jitter.shift_max_s);
    assign(file.get_double("jitter", "event_jitter_s"), c.sim.jitter.event_jitter_s);
    assign(file.get_double("jitter", "amp_jitter_frac"), c.sim.jitter.amp_jitter_frac);

    assign(file.get_double("battery", "i_max"), c.sim.battery.i_max);
    assign(file.get_double("battery", "i_top"), c.sim.battery.i_top);
    assign(file.get_double("battery", "soc_cv"), c.sim.battery.soc_cv);
    assign(file.get_double("battery", "tau_cv"), c.sim.battery.tau_cv);
    assign(file.get_double("battery", "capacity_mah"), c.sim.battery.capacity_mah);

    assign(file.get_double("preprocess", "window_s"), c.window_s);
    assign(file.get_double("preprocess", "overlap"), c.overlap);
    c.model.n_slices = positive_size(file.get_int("preprocess", "n_slices"), "n_slices", c.model.n_slices);
    if (auto ratios = file.get_doubles("preprocess", "split")) {
        if (ratios->size() != 3) throw std::invalid_argument("preprocess.split needs three ratios");
        c.split_ratios = {(*ratios)[0], (*ratios)[1], (*ratios)[2]};
    }

    if (auto filters = file.get_doubles("model", "conv_filters")) {
        if (filters->size() != 3) throw std::invalid_argument("model.conv_filters needs three values");
        for (std::size_t l = 0; l < 3; ++l) c.model.conv_filters[l] = static_cast<std::size_t>((*filters)[l]);
    }
    c.model.kernel = positive_size(file.get_int("model", "kernel"), "kernel", c.model.kernel);
    c.model.pool_size = positive_size(file.get_int("model", "pool_size"), "pool_size", c.model.pool_size);
    c.model.pool_stride = positive_size(file.get_int("model", "pool_stride"), "pool_stride", c.model.pool_stride);
    c.model.lstm_units = positive_size(file.get_int("model", "lstm_units"), "lstm_units", c.model.lstm_units);
    c.model.dense_units = positive_size(file.get_int("model", "dense_units"), "dense_units", c.model.dense_units);
    assign(file.get_double("model", "dropout"), c.model.dropout);

    assign(file.get_double("train", "learning_rate"), c.train.learning_rate);
    c.train.batch_size = positive_size(file.get_int("train", "batch_size"), "batch_size", c.train.batch_size);
    c.train.max_epochs = positive_size(file.get_int("train", "max_epochs"), "max_epochs", c.train.max_epochs);
    c.train.early_stop_patience = positive_size(file.get_int("train", "early_stop_patience"),
                                                "early_stop_patience", c.train.early_stop_patience);
    assign(file.get_u64("train", "seed"), c.train.seed);
    if (auto p = file.get_string("train", "precision")) {
        if (*p == "single") c.train.precision = nn::Precision::single;
        else if (*p == "double") c.train.precision = nn::Precision::double_;
        else throw std::invalid_argument("train.precision must be single or double");
    }

    c.forest.n_trees = positive_size(file.get_int("forest", "n_trees"), "n_trees", c.forest.n_trees);
    if (auto depth = file.get_string("forest", "max_depth")) {
        if (*depth == "none") c.forest.max_depth.reset();
        else c.forest.max_depth = static_cast<std::size_t>(std::stoull(*depth));
    }
    assign(file.get_u64("forest", "seed"), c.forest.seed);

    assign(file.get_strings("scenario", "devices"), c.devices);
    assign(file.get_string("scenario", "train_device"), c.train_device);
    assign(file.get_string("scenario", "test_device"), c.test_device);
    assign(file.get_doubles("scenario", "noise_scales"), c.noise_scales);
    assign(file.get_doubles("scenario", "durations"), c.durations);
    assign(file.get_doubles("scenario", "drifts"), c.drifts);
    assign(file.get_doubles("scenario", "soc_grid"), c.soc_grid);

    if (auto hz = file.get_double("countermeasure", "lowpass_hz")) c.lowpass_hz = *hz;
    if (auto cap = file.get_double("countermeasure", "charge_cap")) c.charge_cap = *cap;

    c.model.n_classes = static_cast<std::size_t>(std::max(c.sim.classes, 1));

    const auto unknown = file.unconsumed();
    if (!unknown.empty()) {
        std::string list;
        for (const auto& key : unknown) list += (list.empty() ? "" : ", ") + key;
        throw std::invalid_argument(file.origin() + ": unknown config keys: " + list);
    }
    c.validate();
    return c;
}

double parse_countermeasure(const std::string& spec) {
    const std::string prefix = "lowpass:";
    if (spec.rfind(prefix, 0) != 0)
        throw std::invalid_argument("countermeasure must look like lowpass:<hz>, got '" + spec + "'");
    std::size_t used = 0;
    const double hz = std::stod(spec.substr(prefix.size()), &used);
    if (used != spec.size() - prefix.size() || !(hz > 0.0))
        throw std::invalid_argument("invalid low-pass cutoff in '" + spec + "'");
    return hz;
}

namespace {

std::string join_doubles(const std::vector<double>& values) {
    std::string out;
    for (std::size_t i = 0; i < values.size(); ++i) out += (i ? "," : "") + format_double(values[i]);
    return out;
}

std::string ramp_text(const std::optional<LeakageRamp>& r) {
    return r ? format_double(r->soc_zero) + "," + format_double(r->soc_full) : "none";
}

void describe_device(std::string& out, const std::string& prefix, const DeviceProfile& d) {
    out += prefix + "name=" + d.name + "\n";
    out += prefix + "wireless_ramp=" + ramp_text(d.wireless_ramp) + "\n";
    out += prefix + "wired_ramp=" + ramp_text(d.wired_ramp) + "\n";
    out += prefix + "gain=" + format_double(d.gain) + "\n";
    out += prefix + "smoothing_ms=" + format_double(d.smoothing_ms) + "\n";
    out += prefix + "coil_smoothing_ms=" + format_double(d.coil_smoothing_ms) + "\n";
    out += prefix + "coil_gain=" + format_double(d.coil_gain) + "\n";
    out += prefix + "time_scale=" + format_double(d.time_scale) + "\n";
    out += prefix + "ripple_hz=" + format_double(d.ripple_hz) + "\n";
    out += prefix + "ripple_amp=" + format_double(d.ripple_amp) + "\n";
    out += prefix + "noise_sd_wireless=" + format_double(d.noise_sd_wireless) + "\n";
    out += prefix + "noise_sd_wired=" + format_double(d.noise_sd_wired) + "\n";
}

std::uint64_t split_seed(const ExperimentConfig& c) { return derive_seed(c.seed, 1); }

}  // namespace

std::string describe(const ExperimentConfig& c) {
    std::string out;
    out += "scenario=" + c.scenario + "\n";
    out += "seed=" + std::to_string(c.seed) + "\n";
    out += "split_seed=" + std::to_string(split_seed(c)) + "\n";
    out += std::string("classifier=") + (c.classifier == ClassifierKind::cnn ? "cnn" : "forest") + "\n";
    if (c.data_dir) out += "data_dir=" + c.data_dir->string() + "\n";
    out += "sim.classes=" + std::to_string(c.sim.classes) + "\n";
    out += "sim.traces_per_class=" + std::to_string(c.sim.traces_per_class) + "\n";
    out += "sim.duration_s=" + format_double(c.sim.duration_s) + "\n";
    out += "sim.fs=" + std::to_string(c.sim.fs) + "\n";
    out += "sim.channel=" + to_string(c.sim.channel) + "\n";
    out += "sim.soc=" + join_doubles(c.sim.soc) + "\n";
    out += "sim.signature_seed=" + std::to_string(c.sim.signature_seed) + "\n";
    out += "sim.noise_seed=" + std::to_string(c.sim.noise_seed) + "\n";
    out += "sim.drift=" + format_double(c.sim.drift) + "\n";
    out += "sim.aging_seed=" + std::to_string(c.sim.aging_seed) + "\n";
    describe_device(out, "sim.device.", c.sim.device);
    out += "jitter.shift_max_s=" + format_double(c.sim.jitter.shift_max_s) + "\n";
    out += "jitter.event_jitter_s=" + format_double(c.sim.jitter.event_jitter_s) + "\n";
    out += "jitter.amp_jitter_frac=" + format_double(c.sim.jitter.amp_jitter_frac) + "\n";
    out += "battery.i_max=" + format_double(c.sim.battery.i_max) + "\n";
    out += "battery.i_top=" + format_double(c.sim.battery.i_top) + "\n";
    out += "battery.soc_cv=" + format_double(c.sim.battery.soc_cv) + "\n";
    out += "battery.tau_cv=" + format_double(c.sim.battery.tau_cv) + "\n";
    out += "battery.capacity_mah=" + format_double(c.sim.battery.capacity_mah) + "\n";
    out += "preprocess.window_s=" + format_double(c.window_s) + "\n";
    out += "preprocess.overlap=" + format_double(c.overlap) + "\n";
    out += "preprocess.n_slices=" + std::to_string(c.model.n_slices) + "\n";
    out += "preprocess.split=" + format_double(c.split_ratios[0]) + "," +
           format_double(c.split_ratios[1]) + "," + format_double(c.split_ratios[2]) + "\n";
    out += "model.conv_filters=" + std::to_string(c.model.conv_filters[0]) + "," +
           std::to_string(c.model.conv_filters[1]) + "," + std::to_string(c.model.conv_filters[2]) + "\n";
    out += "model.kernel=" + std::to_string(c.model.kernel) + "\n";
    out += "model.pool_size=" + std::to_string(c.model.pool_size) + "\n";
    out += "model.pool_stride=" + std::to_string(c.model.pool_stride) + "\n";
    out += "model.lstm_units=" + std::to_string(c.model.lstm_units) + "\n";
    out += "model.dense_units=" + std::to_string(c.model.dense_units) + "\n";
    out += "model.n_classes=" + std::to_string(c.model.n_classes) + "\n";
    out += "model.dropout=" + format_double(c.model.dropout) + "\n";
    out += "train.learning_rate=" + format_double(c.train.learning_rate) + "\n";
    out += "train.batch_size=" + std::to_string(c.train.batch_size) + "\n";
    out += "train.max_epochs=" + std::to_string(c.train.max_epochs) + "\n";
    out += "train.early_stop_patience=" + std::to_string(c.train.early_stop_patience) + "\n";
    out += "train.seed=" + std::to_string(c.train.seed) + "\n";
    out += std::string("train.precision=") +
           (c.train.precision == nn::Precision::single ? "single" : "double") + "\n";
    out += "forest.n_trees=" + std::to_string(c.forest.n_trees) + "\n";
    out += "forest.max_depth=" + (c.forest.max_depth ? std::to_string(*c.forest.max_depth) : "none") + "\n";
    out += "forest.seed=" + std::to_string(c.forest.seed) + "\n";
    std::string devices;
    for (const auto& d : c.devices) devices += (devices.empty() ? "" : ",") + d;
    out += "scenario.devices=" + devices + "\n";
    out += "scenario.train_device=" + c.train_device + "\n";
    out += "scenario.test_device=" + c.test_device + "\n";
    out += "scenario.noise_scales=" + join_doubles(c.noise_scales) + "\n";
    out += "scenario.durations=" + join_doubles(c.durations) + "\n";
    out += "scenario.drifts=" + join_doubles(c.drifts) + "\n";
    out += "scenario.soc_grid=" + join_doubles(c.soc_grid) + "\n";
    out += "countermeasure.lowpass_hz=" + (c.lowpass_hz ? format_double(*c.lowpass_hz) : "none") + "\n";
    out += "countermeasure.charge_cap=" + (c.charge_cap ? format_double(*c.charge_cap) : "none") + "\n";
    for (const auto& [name, d] : c.custom_devices) describe_device(out, "device." + name + ".", d);
    return out;
}

const AttackReport& ExperimentResult::at(const std::string& name) const {
    for (const auto& r : runs)
        if (r.name == name) return r.report;
    throw std::out_of_range("no run named '" + name + "'");
}

// ---------------------------------------------------------------------------
// Pipeline stages

namespace {

std::vector<Segment> window_traces(const ExperimentConfig& c, const TraceSet& set,
                                   const std::vector<std::size_t>& idx) {
    std::vector<Segment> out;
    for (auto i : idx) {
        auto w = sliding_windows(set.traces[i], c.window_s, c.overlap, i);
        std::move(w.begin(), w.end(), std::back_inserter(out));
    }
    return out;
}

std::vector<SlicedSegment> slice_all(const std::vector<Segment>& segments, std::size_t n_slices) {
    std::vector<SlicedSegment> out;
    out.reserve(segments.size());
    for (const auto& s : segments) out.push_back(slice_segment(s, n_slices));
    return out;
}

std::vector<std::vector<double>> spectra(const TraceSet& set, const std::vector<std::size_t>& idx) {
    std::vector<std::vector<double>> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(baseline::fft_magnitude(set.traces[i]).magnitudes);
    return out;
}

template <typename Scalar>
nn::ModelParams<Scalar>& cnn_params(TrainedClassifier& m) {
    if constexpr (std::is_same_v<Scalar, float>) return m.cnn_single;
    else return m.cnn_double;
}

template <typename Scalar>
const nn::ModelParams<Scalar>& cnn_params(const TrainedClassifier& m) {
    if constexpr (std::is_same_v<Scalar, float>) return m.cnn_single;
    else return m.cnn_double;
}

template <typename Scalar>
void train_cnn(const ExperimentConfig& c, TrainedClassifier& out,
               const std::vector<SlicedSegment>& train, const std::vector<SlicedSegment>& val,
               const Logger& log) {
    nn::EpochCallback cb;
    if (log && c.verbose) {
        cb = [&](const nn::EpochRecord& r) {
            char line[160];
            std::snprintf(line, sizeof(line),
                          "  epoch %zu: loss %.4f acc %.3f | val loss %.4f acc %.3f", r.epoch,
                          r.train_loss, r.train_accuracy, r.val_loss, r.val_accuracy);
            log(line);
        };
    }
    auto result = nn::train<Scalar>(c.model, c.train, train, val, cb);
    if (log) {
        char line[120];
        std::snprintf(line, sizeof(line), "  trained %zu epochs, best epoch %zu (val acc %.3f)",
                      result.history.size(), result.best_epoch, result.best_val_accuracy);
        log(line);
    }
    cnn_params<Scalar>(out) = std::move(result.params);
    out.history = std::move(result.history);
}

template <typename Scalar>
std::vector<SegmentPrediction> predict_cnn(const TrainedClassifier& m,
                                           const std::vector<SlicedSegment>& segments) {
    return nn::predict_segments(cnn_params<Scalar>(m), segments);
}

}  // namespace

TrainedClassifier train_classifier(const ExperimentConfig& c, const TraceSet& set,
                                   const std::vector<std::size_t>& train_idx,
                                   const std::vector<std::size_t>& val_idx, const Logger& log) {
    TrainedClassifier out;
    out.kind = c.classifier;
    out.precision = c.train.precision;
    out.window_s = c.window_s;
    out.overlap = c.overlap;
    if (c.classifier == ClassifierKind::forest) {
        std::vector<std::size_t> fit = train_idx;
        fit.insert(fit.end(), val_idx.begin(), val_idx.end());
        std::vector<int> labels;
        for (auto i : fit) labels.push_back(*set.traces[i].label());
        out.forest = baseline::rf_train(spectra(set, fit), labels, c.forest);
        if (log) log("  forest trained, out-of-bag accuracy " + format_percent(out.forest.oob_accuracy));
        return out;
    }

    auto train_segments = window_traces(c, set, train_idx);
    auto val_segments = window_traces(c, set, val_idx);
    out.norm = fit_norm(train_segments);
    apply_norm(train_segments, out.norm);
    apply_norm(val_segments, out.norm);
    const auto train_sliced = slice_all(train_segments, c.model.n_slices);
    const auto val_sliced = slice_all(val_segments, c.model.n_slices);
    if (log)
        log("  " + std::to_string(train_sliced.size()) + " training / " +
            std::to_string(val_sliced.size()) + " validation windows");
    if (c.train.precision == nn::Precision::single)
        train_cnn<float>(c, out, train_sliced, val_sliced, log);
    else
        train_cnn<double>(c, out, train_sliced, val_sliced, log);
    return out;
}

AttackReport evaluate_classifier(const ExperimentConfig&, const TrainedClassifier& model,
                                 const TraceSet& set, const std::vector<std::size_t>& test_idx) {
    std::vector<TraceResult> results;
    results.reserve(test_idx.size());
    if (model.kind == ClassifierKind::forest) {
        for (auto i : test_idx) {
            const auto features = baseline::fft_magnitude(set.traces[i]).magnitudes;
            TraceResult r;
            r.trace_id = i;
            r.true_label = set.traces[i].label();
            r.ranking = baseline::rf_predict(model.forest, features);
            const auto votes = baseline::rf_tree_votes(model.forest, features);
            r.votes.assign(votes.begin(), votes.end());
            results.push_back(std::move(r));
        }
        return build_report(std::move(results), model.forest.n_classes);
    }

    const std::size_t n_classes =
        model.precision == nn::Precision::single ? model.cnn_single.config.n_classes
                                                  : model.cnn_double.config.n_classes;
    const std::size_t n_slices =
        model.precision == nn::Precision::single ? model.cnn_single.config.n_slices
                                                  : model.cnn_double.config.n_slices;
    for (auto i : test_idx) {
        auto segments = sliding_windows(set.traces[i], model.window_s, model.overlap, i);
        apply_norm(segments, model.norm);
        const auto sliced = slice_all(segments, n_slices);
        const auto preds = model.precision == nn::Precision::single ? predict_cnn<float>(model, sliced)
                                                                    : predict_cnn<double>(model, sliced);
        results.push_back(trace_result(tally_votes(preds, i, set.traces[i].label())));
    }
    return build_report(std::move(results), n_classes);
}

void save_classifier(const fs::path& dir, const ExperimentConfig& c, const TrainedClassifier& m) {
    fs::create_directories(dir);
    if (m.kind == ClassifierKind::forest) {
        baseline::write_forest(dir / "forest.ckpt", m.forest);
        return;
    }
    const std::map<std::string, std::string> extras = {
        {"norm_mean", format_double(m.norm.mean)},
        {"norm_sd", format_double(m.norm.sd)},
        {"window_s", format_double(c.window_s)},
        {"overlap", format_double(c.overlap)},
    };
    if (m.precision == nn::Precision::single)
        nn::write_checkpoint(dir / "model.ckpt", m.cnn_single, c.train.seed, extras);
    else
        nn::write_checkpoint(dir / "model.ckpt", m.cnn_double, c.train.seed, extras);

    std::string csv = "epoch,train_loss,train_accuracy,val_loss,val_accuracy\n";
    for (const auto& r : m.history)
        csv += std::to_string(r.epoch) + "," + format_double(r.train_loss) + "," +
               format_double(r.train_accuracy) + "," + format_double(r.val_loss) + "," +
               format_double(r.val_accuracy) + "\n";
    std::ofstream(dir / "history.csv", std::ios::binary | std::ios::trunc) << csv;
}

TrainedClassifier load_classifier(const fs::path& dir) {
    TrainedClassifier m;
    if (fs::exists(dir / "forest.ckpt")) {
        m.kind = ClassifierKind::forest;
        m.forest = baseline::read_forest(dir / "forest.ckpt");
        return m;
    }
    const auto path = dir / "model.ckpt";
    m.kind = ClassifierKind::cnn;
    m.precision = nn::checkpoint_precision(path);
    std::map<std::string, std::string> extras;
    if (m.precision == nn::Precision::single) {
        auto ck = nn::read_checkpoint<float>(path);
        m.cnn_single = std::move(ck.params);
        extras = std::move(ck.extras);
    } else {
        auto ck = nn::read_checkpoint<double>(path);
        m.cnn_double = std::move(ck.params);
        extras = std::move(ck.extras);
    }
    if (!extras.contains("norm_mean") || !extras.contains("norm_sd"))
        throw std::runtime_error(path.string() + ": missing normalization statistics");
    m.norm.mean = std::stod(extras["norm_mean"]);
    m.norm.sd = std::stod(extras["norm_sd"]);
    if (extras.contains("window_s")) m.window_s = std::stod(extras["window_s"]);
    if (extras.contains("overlap")) m.overlap = std::stod(extras["overlap"]);
    return m;
}

void write_split(const fs::path& path, const DatasetSplit& split) {
    std::string csv = "index,part\n";
    std::vector<std::pair<std::size_t, const char*>> rows;
    for (auto i : split.train) rows.emplace_back(i, "train");
    for (auto i : split.val) rows.emplace_back(i, "val");
    for (auto i : split.test) rows.emplace_back(i, "test");
    std::sort(rows.begin(), rows.end());
    for (const auto& [i, part] : rows) csv += std::to_string(i) + "," + part + "\n";
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << csv;
}

DatasetSplit read_split(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::string line;
    std::getline(in, line);
    DatasetSplit split;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto comma = line.find(',');
        const auto index = static_cast<std::size_t>(std::stoull(line.substr(0, comma)));
        const auto part = line.substr(comma + 1);
        if (part == "train") split.train.push_back(index);
        else if (part == "val") split.val.push_back(index);
        else if (part == "test") split.test.push_back(index);
        else throw std::runtime_error(path.string() + ": unknown split part '" + part + "'");
    }
    return split;
}

TraceSet apply_trace_countermeasures(const ExperimentConfig& c, TraceSet set) {
    if (!c.lowpass_hz) return set;
    for (auto& t : set.traces) t = lowpass_filter(t, *c.lowpass_hz);
    return set;
}

// ---------------------------------------------------------------------------
// Scenarios

namespace {

class Runner {
public:
    Runner(const ExperimentConfig& config, std::optional<fs::path> out, Logger log)
        : c_(config), out_(std::move(out)), log_(std::move(log)) {}

    ExperimentResult run() {
        if (out_) {
            fs::create_directories(*out_);
            std::ofstream(*out_ / "runinfo.txt", std::ios::binary | std::ios::trunc) << describe(c_);
        }
        const auto& s = c_.scenario;
        if (s == "attack") attack();
        else if (s == "device_compare") device_compare();
        else if (s == "cross_device") cross_device();
        else if (s == "cross_charger") cross_charger();
        else if (s == "noise") noise();
        else if (s == "duration_sweep") duration_sweep();
        else if (s == "aging") aging();
        else if (s == "soc_sweep") soc_sweep();
        else if (s == "countermeasure") countermeasure();
        if (out_) write_summary();
        return std::move(result_);
    }

private:
    void say(const std::string& msg) const {
        if (log_) log_(msg);
    }

    /// Simulates (charge cap applied first) or ingests, then filters if configured.
    TraceSet dataset(const SimConfig& sim, const std::string& name, bool countermeasures = true) {
        TraceSet set;
        if (c_.data_dir) {
            say("loading " + c_.data_dir->string());
            set = read_dataset(*c_.data_dir);
        } else {
            SimConfig effective = sim;
            if (countermeasures && c_.charge_cap) effective = charge_cap_policy(effective, *c_.charge_cap);
            say("simulating " + name + ": " + std::to_string(effective.classes) + " classes x " +
                std::to_string(effective.traces_per_class) + " traces, " + effective.device.name + ", " +
                to_string(effective.channel));
            set = synth_dataset(effective);
        }
        if (out_) write_dataset(set, *out_ / "data" / name);
        if (countermeasures) set = apply_trace_countermeasures(c_, std::move(set));
        return set;
    }

    DatasetSplit split(const TraceSet& set) {
        auto sp = split_dataset(set, c_.split_ratios, split_seed(c_));
        if (out_) write_split(*out_ / "split.csv", sp);
        return sp;
    }

    TrainedClassifier fit(const TraceSet& set, const DatasetSplit& sp, const std::string& name) {
        say("training on " + name);
        auto model = train_classifier(c_, set, sp.train, sp.val, log_);
        if (out_) save_classifier(*out_ / "models" / name, c_, model);
        return model;
    }

    void record(const std::string& name, AttackReport report) {
        say("  " + name + ": rank-1 " + format_percent(report.rank1_acc) + ", rank-2 " +
            format_percent(report.rank2_acc));
        if (out_) {
            const auto dir = *out_ / "runs" / name;
            write_report(dir, report);
            verify_report_consistency(dir);
        }
        result_.runs.push_back({name, std::move(report)});
    }

    void attack_on(const TraceSet& set, const std::string& name) {
        const auto sp = split(set);
        const auto model = fit(set, sp, name);
        record(name, evaluate_classifier(c_, model, set, sp.test));
    }

    void attack() { attack_on(dataset(c_.sim, "attack"), "attack"); }

    void device_compare() {
        for (const auto& d : c_.devices) {
            SimConfig sim = c_.sim;
            sim.device = c_.device(d);
            attack_on(dataset(sim, d), d);
        }
    }

    void cross_device() {
        SimConfig sim_a = c_.sim, sim_b = c_.sim;
        sim_a.device = c_.device(c_.train_device);
        sim_b.device = c_.device(c_.test_device);
        sim_b.noise_seed = derive_seed(c_.sim.noise_seed, 1);
        const auto a = dataset(sim_a, c_.train_device);
        const auto b = dataset(sim_b, c_.test_device);
        const auto sp = split(a);
        const auto& na = c_.train_device;
        const auto& nb = c_.test_device;
        const auto model_a = fit(a, sp, na);
        record(na + "_to_" + na, evaluate_classifier(c_, model_a, a, sp.test));
        record(na + "_to_" + nb, evaluate_classifier(c_, model_a, b, sp.test));
        const auto model_b = fit(b, sp, nb);
        record(nb + "_to_" + nb, evaluate_classifier(c_, model_b, b, sp.test));
        record(nb + "_to_" + na, evaluate_classifier(c_, model_b, a, sp.test));
    }

    void cross_charger() {
        SimConfig sim_w = c_.sim, sim_d = c_.sim;
        sim_w.channel = Channel::wireless;
        sim_d.channel = Channel::wired;
        sim_d.noise_seed = derive_seed(c_.sim.noise_seed, 2);
        const auto w = dataset(sim_w, "wireless");
        const auto d = dataset(sim_d, "wired");
        const auto sp = split(w);
        const auto model_w = fit(w, sp, "wireless");
        record("wireless_to_wireless", evaluate_classifier(c_, model_w, w, sp.test));
        record("wireless_to_wired", evaluate_classifier(c_, model_w, d, sp.test));
        const auto model_d = fit(d, sp, "wired");
        record("wired_to_wired", evaluate_classifier(c_, model_d, d, sp.test));
        record("wired_to_wireless", evaluate_classifier(c_, model_d, w, sp.test));
    }

    void noise() {
        for (double scale : c_.noise_scales) {
            if (!(scale >= 0.0)) throw std::invalid_argument("noise scales must be non-negative");
            SimConfig sim = c_.sim;
            sim.device.noise_sd_wireless *= scale;
            sim.device.noise_sd_wired *= scale;
            sim.jitter.shift_max_s *= scale;
            sim.jitter.event_jitter_s *= scale;
            sim.jitter.amp_jitter_frac *= scale;
            const auto name = "noise_x" + format_double(scale);
            attack_on(dataset(sim, name), name);
        }
    }

    void duration_sweep() {
        SimConfig sim = c_.sim;
        sim.duration_s = *std::max_element(c_.durations.begin(), c_.durations.end());
        const auto full = dataset(sim, "duration_sweep");
        const auto sp = split(full);
        for (double d : c_.durations) {
            TraceSet cut;
            cut.class_names = full.class_names;
            for (const auto& t : full.traces) cut.traces.push_back(slice_prefix(t, d));
            const auto name = "duration_" + format_double(d) + "s";
            const auto model = fit(cut, sp, name);
            record(name, evaluate_classifier(c_, model, cut, sp.test));
        }
    }

    void aging() {
        SimConfig sim = c_.sim;
        sim.drift = 0.0;
        const auto fresh = dataset(sim, "aging");
        const auto sp = split(fresh);
        const auto model = fit(fresh, sp, "aging");
        for (double drift : c_.drifts) {
            SimConfig aged = sim;
            aged.drift = drift;
            if (c_.charge_cap) aged = charge_cap_policy(aged, *c_.charge_cap);
            const auto sigs = dataset_signatures(aged);
            // Same trace seeds as the originals; only the page content has drifted.
            TraceSet test = fresh;
            for (auto i : sp.test) {
                const auto cls = static_cast<int>(i) / aged.traces_per_class;
                const auto j = static_cast<int>(i) % aged.traces_per_class;
                test.traces[i] = synth_trace(sigs[static_cast<std::size_t>(cls)], aged,
                                             derive_seed(aged.noise_seed, i), aged.soc_for_trace(j));
                if (c_.lowpass_hz) test.traces[i] = lowpass_filter(test.traces[i], *c_.lowpass_hz);
            }
            const auto name = "drift_" + format_double(drift);
            record(name, evaluate_classifier(c_, model, test, sp.test));
        }
    }

    void soc_sweep() {
        for (double soc : c_.soc_grid) {
            SimConfig sim = c_.sim;
            sim.soc = {soc};
            const auto name = "soc_" + format_double(soc);
            attack_on(dataset(sim, name), name);
        }
    }

    void countermeasure() {
        ExperimentConfig plain = c_;
        plain.lowpass_hz.reset();
        plain.charge_cap.reset();
        ExperimentConfig countered = c_;
        if (!countered.lowpass_hz && !countered.charge_cap) countered.lowpass_hz = 60.0;

        Runner base(plain, std::nullopt, log_);
        base.out_ = out_;
        base.attack_on(base.dataset(plain.sim, "baseline"), "baseline");
        Runner defended(countered, std::nullopt, log_);
        defended.out_ = out_;
        defended.attack_on(defended.dataset(countered.sim, "countered"), "countered");
        for (auto* r : {&base, &defended})
            for (auto& run : r->result_.runs) result_.runs.push_back(std::move(run));
        say("  accuracy change: rank-1 " +
            format_percent(result_.at("countered").rank1_acc - result_.at("baseline").rank1_acc));
    }

    void write_summary() const {
        std::string csv = "run,traces,rank1,rank2\n";
        for (const auto& r : result_.runs) {
            std::size_t labeled = 0;
            for (const auto& t : r.report.traces) labeled += t.true_label ? 1 : 0;
            csv += r.name + "," + std::to_string(labeled) + "," + format_percent(r.report.rank1_acc) +
                   "," + format_percent(r.report.rank2_acc) + "\n";
        }
        std::ofstream(*out_ / "scenario_summary.csv", std::ios::binary | std::ios::trunc) << csv;
    }

    ExperimentConfig c_;
    std::optional<fs::path> out_;
    Logger log_;
    ExperimentResult result_;
};

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& config, const std::optional<fs::path>& out_dir,
                                const Logger& log) {
    config.validate();
    return Runner(config, out_dir, log).run();
}

ExperimentResult run_experiment(const fs::path& config_path, const std::optional<fs::path>& out_dir,
                                const Logger& log) {
    const auto config = apply_config(KeyValueConfig::load(config_path), desk_config());
    return run_experiment(config, out_dir, log);
}

}  // namespace chargescope
