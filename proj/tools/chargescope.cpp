#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "chargescope/countermeasures.hpp"
#include "chargescope/experiment.hpp"
#include "chargescope/preprocess.hpp"
#include "chargescope/random.hpp"

namespace fs = std::filesystem;
using namespace chargescope;

namespace {

struct CommonOptions {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    bool full = false;
    std::string countermeasure;
    std::optional<double> charge_cap;
    bool verbose = false;
};

void add_common(CLI::App* cmd, CommonOptions& o, bool out_required) {
    cmd->add_option("--config", o.config, "Config file (key = value, [sections])")->check(CLI::ExistingFile);
    cmd->add_option("--seed", o.seed, "Base seed; every other seed is derived from it");
    auto* out = cmd->add_option("--out", o.out, "Output directory");
    if (out_required) out->required();
    cmd->add_flag("--full", o.full, "Full-scale settings instead of the desk defaults");
    cmd->add_option("--countermeasure", o.countermeasure, "Trace filter, e.g. lowpass:60");
    cmd->add_option("--charge-cap", o.charge_cap, "Stop charging at this state of charge (0, 1]");
    cmd->add_flag("-v,--verbose", o.verbose, "Per-epoch progress");
}

/// Defaults, then --full, then the config file, then command-line flags.
ExperimentConfig resolve(const CommonOptions& o) {
    ExperimentConfig c = o.full ? full_config() : desk_config();
    if (!o.config.empty()) c = apply_config(KeyValueConfig::load(o.config), c);
    if (o.seed) {
        c.seed = *o.seed;
        c.sim.signature_seed = derive_seed(*o.seed, 10);
        c.sim.noise_seed = derive_seed(*o.seed, 11);
        c.sim.aging_seed = derive_seed(*o.seed, 12);
        c.train.seed = derive_seed(*o.seed, 13);
        c.forest.seed = derive_seed(*o.seed, 14);
    }
    if (!o.countermeasure.empty()) c.lowpass_hz = parse_countermeasure(o.countermeasure);
    if (o.charge_cap) c.charge_cap = *o.charge_cap;
    c.verbose = c.verbose || o.verbose;
    c.validate();
    return c;
}

void log_line(const std::string& msg) { std::cerr << msg << '\n'; }

void print_report(const AttackReport& r) {
    std::size_t labeled = 0;
    for (const auto& t : r.traces) labeled += t.true_label ? 1 : 0;
    std::printf("traces=%zu rank1=%s rank2=%s\n", labeled, format_percent(r.rank1_acc).c_str(),
                format_percent(r.rank2_acc).c_str());
}

void write_runinfo(const fs::path& dir, const ExperimentConfig& c) {
    fs::create_directories(dir);
    std::ofstream(dir / "runinfo.txt", std::ios::binary | std::ios::trunc) << describe(c);
}

int cmd_simulate(const CommonOptions& o) {
    const auto c = resolve(o);
    SimConfig sim = c.sim;
    if (c.charge_cap) sim = charge_cap_policy(sim, *c.charge_cap);
    auto set = apply_trace_countermeasures(c, synth_dataset(sim));
    write_dataset(set, o.out);
    write_runinfo(o.out, c);
    std::printf("wrote %zu traces (%zu classes) to %s\n", set.traces.size(), set.class_count(),
                o.out.c_str());
    return 0;
}

int cmd_ingest(const CommonOptions& o, const std::vector<std::string>& inputs, int fs_hz,
               const std::string& device, const std::string& channel, std::optional<int> resample_hz) {
    const auto c = resolve(o);
    TraceSet set;
    std::map<std::string, int> class_ids;
    for (const auto& entry : inputs) {
        // "<class>=<path>" for labeled logs, a bare path for unlabeled ones.
        std::optional<int> label;
        fs::path path = entry;
        if (const auto eq = entry.find('='); eq != std::string::npos) {
            const auto name = entry.substr(0, eq);
            path = entry.substr(eq + 1);
            auto [it, inserted] = class_ids.emplace(name, static_cast<int>(set.class_names.size()));
            if (inserted) set.class_names.push_back(name);
            label = it->second;
        }
        TraceMeta meta;
        meta.device_profile = device;
        meta.channel = parse_channel(channel);
        meta.collected_at = fs::absolute(path).string();
        auto trace = read_logger_csv(path, fs_hz, label, meta);
        if (resample_hz) trace = resample(trace, *resample_hz);
        if (c.lowpass_hz) trace = lowpass_filter(trace, *c.lowpass_hz);
        set.traces.push_back(std::move(trace));
    }
    set.validate();
    write_dataset(set, o.out);
    std::printf("ingested %zu traces (%zu classes) into %s\n", set.traces.size(), set.class_count(),
                o.out.c_str());
    return 0;
}

int cmd_train(const CommonOptions& o, const std::string& data, const std::string& classifier) {
    auto c = resolve(o);
    if (!classifier.empty())
        c.classifier = classifier == "forest" ? ClassifierKind::forest : ClassifierKind::cnn;
    TraceSet set = apply_trace_countermeasures(c, read_dataset(data));
    c.model.n_classes = set.class_count();
    const auto split = split_dataset(set, c.split_ratios, derive_seed(c.seed, 1));
    const auto model = train_classifier(c, set, split.train, split.val, log_line);
    save_classifier(o.out, c, model);
    write_split(fs::path(o.out) / "split.csv", split);
    write_runinfo(o.out, c);
    print_report(evaluate_classifier(c, model, set, split.val));
    return 0;
}

int cmd_evaluate(const CommonOptions& o, const std::string& model_dir, const std::string& data,
                 const std::string& split_path) {
    const auto c = resolve(o);
    const auto model = load_classifier(model_dir);
    const TraceSet set = apply_trace_countermeasures(c, read_dataset(data));
    std::vector<std::size_t> idx;
    if (!split_path.empty()) {
        idx = read_split(split_path).test;
    } else {
        for (std::size_t i = 0; i < set.traces.size(); ++i) idx.push_back(i);
    }
    const auto report = evaluate_classifier(c, model, set, idx);
    write_report(o.out, report);
    verify_report_consistency(o.out);
    print_report(report);
    return 0;
}

int cmd_attack(const CommonOptions& o, const std::string& scenario, const std::string& data) {
    auto c = resolve(o);
    if (!scenario.empty()) c.scenario = scenario;
    if (!data.empty()) c.data_dir = fs::path(data);
    const auto result = run_experiment(c, fs::path(o.out), log_line);
    for (const auto& run : result.runs) {
        std::printf("%-24s ", run.name.c_str());
        print_report(run.report);
    }
    return 0;
}

int cmd_gradcheck(const CommonOptions& o, double tolerance) {
    const auto c = resolve(o);
    nn::ModelConfig model;
    model.conv_filters = {3, 4, 5};
    model.kernel = 3;
    model.lstm_units = 4;
    model.dense_units = 5;
    model.n_classes = 3;
    const std::size_t slice_len = 40;
    auto params = nn::init_params<double>(model, slice_len, c.train.seed);

    Rng rng(derive_seed(c.seed, 2));
    std::normal_distribution<double> gauss(0.0, 1.0);
    // Zero biases put ReLU inputs exactly on the kink when dropout removes a whole layer input.
    for (auto& t : params.tensors)
        for (auto& v : t.values) v += 0.05 * gauss(rng);
    std::vector<SlicedSegment> inputs(4);
    std::vector<nn::LabeledRef> batch;
    for (std::size_t b = 0; b < inputs.size(); ++b) {
        inputs[b].n_slices = model.n_slices;
        inputs[b].slice_len = slice_len;
        inputs[b].values.resize(model.n_slices * slice_len);
        for (auto& v : inputs[b].values) v = gauss(rng);
        inputs[b].label = static_cast<int>(b % model.n_classes);
        batch.push_back({&inputs[b], static_cast<int>(b % model.n_classes)});
    }
    bool ok = true;
    for (auto mode : {nn::Mode::infer, nn::Mode::train}) {
        const auto r = nn::gradient_check(params, batch, mode, derive_seed(c.seed, 3));
        const bool pass = r.max_relative_error < tolerance;
        ok = ok && pass;
        std::printf("%s mode: %zu parameters, max relative error %.3e (%s) %s\n",
                    mode == nn::Mode::infer ? "inference" : "dropout", r.checked,
                    r.max_relative_error, r.worst_parameter.c_str(), pass ? "PASS" : "FAIL");
    }
    return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"chargescope: website fingerprinting from charger current traces"};
    app.require_subcommand(1);

    CommonOptions o;

    auto* simulate = app.add_subcommand("simulate", "Generate a synthetic trace dataset");
    add_common(simulate, o, true);

    std::vector<std::string> inputs;
    int fs_hz = 700;
    std::string device = "unknown", channel = "wireless";
    std::optional<int> resample_hz;
    auto* ingest = app.add_subcommand("ingest", "Convert sensor logs into a dataset");
    add_common(ingest, o, true);
    ingest->add_option("inputs", inputs, "<class>=<log.csv> or <log.csv> (unlabeled)")->required();
    ingest->add_option("--fs", fs_hz, "Sampling rate of the logs in Hz")->check(CLI::PositiveNumber);
    ingest->add_option("--device", device, "Device name recorded in the trace metadata");
    ingest->add_option("--channel", channel, "wireless or wired")->check(CLI::IsMember({"wireless", "wired"}));
    ingest->add_option("--resample", resample_hz, "Resample to this rate")->check(CLI::PositiveNumber);

    std::string data, classifier;
    auto* train = app.add_subcommand("train", "Train a classifier on a dataset");
    add_common(train, o, true);
    train->add_option("--data", data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
    train->add_option("--classifier", classifier, "cnn or forest")->check(CLI::IsMember({"cnn", "forest"}));

    std::string model_dir, split_path;
    auto* evaluate = app.add_subcommand("evaluate", "Score a trained classifier");
    add_common(evaluate, o, true);
    evaluate->add_option("--model", model_dir, "Directory written by train")->required()->check(CLI::ExistingDirectory);
    evaluate->add_option("--data", data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
    evaluate->add_option("--split", split_path, "split.csv; only its test traces are scored")->check(CLI::ExistingFile);

    std::string scenario;
    auto* attack = app.add_subcommand("attack", "Run a full experiment scenario end to end");
    add_common(attack, o, true);
    attack->add_option("--scenario", scenario, "Scenario name")->check(CLI::IsMember(scenario_names()));
    attack->add_option("--data", data, "Use this dataset instead of simulating")->check(CLI::ExistingDirectory);

    double tolerance = 1e-4;
    auto* gradcheck = app.add_subcommand("gradcheck", "Compare backprop against finite differences");
    add_common(gradcheck, o, false);
    gradcheck->add_option("--tolerance", tolerance, "Maximum relative error");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*simulate) return cmd_simulate(o);
        if (*ingest) return cmd_ingest(o, inputs, fs_hz, device, channel, resample_hz);
        if (*train) return cmd_train(o, data, classifier);
        if (*evaluate) return cmd_evaluate(o, model_dir, data, split_path);
        if (*attack) return cmd_attack(o, scenario, data);
        if (*gradcheck) return cmd_gradcheck(o, tolerance);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
