#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "chargescope/config.hpp"
#include "chargescope/eval.hpp"
#include "chargescope/forest.hpp"
#include "chargescope/nn.hpp"
#include "chargescope/simulator.hpp"

namespace chargescope {

enum class ClassifierKind { cnn, forest };

/// Scenario names, one per experiment axis:
/// attack, device_compare, cross_device, cross_charger, noise,
/// duration_sweep, aging, soc_sweep, countermeasure.
const std::vector<std::string>& scenario_names();

struct ExperimentConfig {
    std::string scenario = "attack";
    std::uint64_t seed = 1;
    SimConfig sim;
    /// When set, traces are read from this dataset directory instead of simulated.
    std::optional<std::filesystem::path> data_dir;

    double window_s = 1.0;
    double overlap = 0.90;
    std::array<double, 3> split_ratios{0.64, 0.16, 0.20};

    ClassifierKind classifier = ClassifierKind::cnn;
    nn::ModelConfig model;
    nn::TrainConfig train;
    baseline::ForestConfig forest;

    // Scenario parameters.
    std::vector<std::string> devices{"iphone11", "pixel4"};
    std::string train_device = "iphone11";
    std::string test_device = "pixel4";
    std::vector<double> noise_scales{0.25, 1.0};
    std::vector<double> durations{2.5, 4.0, 5.0, 6.0, 10.0};
    std::vector<double> drifts{0.0, 0.8};
    std::vector<double> soc_grid{0.5, 0.8, 0.85, 0.9, 0.95, 1.0};

    // Countermeasures applied to every run (or compared in the countermeasure scenario).
    std::optional<double> lowpass_hz;
    std::optional<double> charge_cap;

    /// Extra device profiles from `[device.<name>]` sections.
    std::map<std::string, DeviceProfile> custom_devices;

    bool verbose = false;

    DeviceProfile device(const std::string& name) const;
    void validate() const;
};

/// 20 classes x 20 traces, 2.5 s at 500 Hz, overlap 0.90, reduced layer widths.
ExperimentConfig desk_config();
/// 20 classes x 50 traces, 10 s at 700 Hz, overlap 0.975, full layer widths.
ExperimentConfig full_config();

/// Applies a parsed config file on top of `base`. Unknown keys are an error
/// listing every offending key.
ExperimentConfig apply_config(const KeyValueConfig& file, ExperimentConfig base);

/// Parses `lowpass:<hz>`.
double parse_countermeasure(const std::string& spec);

/// Full resolved configuration as `key=value` lines (also written to runinfo.txt).
std::string describe(const ExperimentConfig& config);

struct NamedReport {
    std::string name;
    AttackReport report;
};

struct ExperimentResult {
    std::vector<NamedReport> runs;

    const AttackReport& at(const std::string& name) const;
};

using Logger = std::function<void(const std::string&)>;

/// Simulates (or ingests), preprocesses, trains, evaluates. When `out_dir` is
/// given, writes manifest/traces, checkpoints, reports, runinfo.txt and
/// scenario_summary.csv under it and re-verifies every report.
ExperimentResult run_experiment(const ExperimentConfig& config,
                                const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                                const Logger& log = {});

ExperimentResult run_experiment(const std::filesystem::path& config_path,
                                const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                                const Logger& log = {});

/// Building blocks shared with the CLI.
struct TrainedClassifier {
    ClassifierKind kind = ClassifierKind::cnn;
    nn::ModelParams<float> cnn_single;
    nn::ModelParams<double> cnn_double;
    nn::Precision precision = nn::Precision::single;
    baseline::Forest forest;
    NormStats norm;
    /// Windowing the model was trained with; evaluation reuses it.
    double window_s = 1.0;
    double overlap = 0.90;
    std::vector<nn::EpochRecord> history;
};

TrainedClassifier train_classifier(const ExperimentConfig& config, const TraceSet& set,
                                   const std::vector<std::size_t>& train_idx,
                                   const std::vector<std::size_t>& val_idx, const Logger& log = {});

AttackReport evaluate_classifier(const ExperimentConfig& config, const TrainedClassifier& model,
                                 const TraceSet& set, const std::vector<std::size_t>& test_idx);

/// model.ckpt (CNN) or forest.ckpt, plus history.csv for the CNN.
void save_classifier(const std::filesystem::path& dir, const ExperimentConfig& config,
                     const TrainedClassifier& model);
TrainedClassifier load_classifier(const std::filesystem::path& dir);

/// Split indices persisted as `split.csv` (index,part).
void write_split(const std::filesystem::path& path, const DatasetSplit& split);
DatasetSplit read_split(const std::filesystem::path& path);

/// Applies the configured low-pass countermeasure (if any) to every trace.
TraceSet apply_trace_countermeasures(const ExperimentConfig& config, TraceSet set);

}  // namespace chargescope
