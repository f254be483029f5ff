#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "chargescope/prediction.hpp"

namespace chargescope {

struct VoteTally {
    std::size_t trace_id = 0;
    std::vector<std::size_t> counts;
    std::vector<double> confidence_sums;
    std::optional<int> true_label;

    std::size_t total() const;
};

/// One vote per window: the window's argmax class.
VoteTally tally_votes(std::span<const SegmentPrediction> predictions, std::size_t trace_id = 0,
                      std::optional<int> true_label = std::nullopt);

/// All classes ordered by (count desc, confidence sum desc, index asc).
std::vector<int> rank_order(const VoteTally& tally);

/// Classification outcome for one trace. `votes` holds the per-class vote
/// counts behind `ranking`.
struct TraceResult {
    std::size_t trace_id = 0;
    std::optional<int> true_label;
    std::vector<int> ranking;
    std::vector<double> votes;
};

TraceResult trace_result(const VoteTally& tally);

/// Fraction of labeled traces whose true class is among the first k ranks.
double rank_k_accuracy(std::span<const TraceResult> results, std::size_t k);

using ConfusionMatrix = std::vector<std::vector<std::size_t>>;

/// Rows are true labels, columns rank-1 predictions.
ConfusionMatrix confusion_matrix(std::span<const TraceResult> results, std::size_t n_classes);

struct AttackReport {
    std::vector<TraceResult> traces;
    double rank1_acc = 0.0;
    double rank2_acc = 0.0;
    ConfusionMatrix confusion;
    std::size_t n_classes = 0;
};

AttackReport build_report(std::vector<TraceResult> traces, std::size_t n_classes);

/// Writes report.csv, confusion.csv and summary.txt into `dir`.
void write_report(const std::filesystem::path& dir, const AttackReport& report);

struct ReportSummary {
    std::size_t traces = 0;
    double rank1_percent = 0.0;
    double rank2_percent = 0.0;
};

/// Recomputes the summary from report.csv alone.
ReportSummary summarize_report_csv(const std::filesystem::path& report_csv);
ReportSummary read_summary(const std::filesystem::path& summary_txt);

/// Throws if summary.txt disagrees with the per-trace CSV.
void verify_report_consistency(const std::filesystem::path& dir);

std::string format_percent(double fraction);

}  // namespace chargescope
