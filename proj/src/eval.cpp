#include "chargescope/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "chargescope/trace.hpp"

namespace chargescope {

std::size_t VoteTally::total() const {
    return std::accumulate(counts.begin(), counts.end(), std::size_t{0});
}

VoteTally tally_votes(std::span<const SegmentPrediction> predictions, std::size_t trace_id,
                      std::optional<int> true_label) {
    if (predictions.empty()) throw std::invalid_argument("cannot tally an empty prediction set");
    const auto n_classes = predictions.front().probabilities.size();
    VoteTally tally;
    tally.trace_id = trace_id;
    tally.true_label = true_label;
    tally.counts.assign(n_classes, 0);
    tally.confidence_sums.assign(n_classes, 0.0);
    for (const auto& p : predictions) {
        if (p.probabilities.size() != n_classes)
            throw std::invalid_argument("predictions disagree on the class count");
        if (p.label < 0 || static_cast<std::size_t>(p.label) >= n_classes)
            throw std::invalid_argument("predicted label out of range");
        ++tally.counts[static_cast<std::size_t>(p.label)];
        for (std::size_t c = 0; c < n_classes; ++c) tally.confidence_sums[c] += p.probabilities[c];
    }
    return tally;
}

std::vector<int> rank_order(const VoteTally& tally) {
    std::vector<int> order(tally.counts.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        const auto ua = static_cast<std::size_t>(a), ub = static_cast<std::size_t>(b);
        if (tally.counts[ua] != tally.counts[ub]) return tally.counts[ua] > tally.counts[ub];
        if (tally.confidence_sums[ua] != tally.confidence_sums[ub])
            return tally.confidence_sums[ua] > tally.confidence_sums[ub];
        return a < b;
    });
    return order;
}

TraceResult trace_result(const VoteTally& tally) {
    TraceResult r;
    r.trace_id = tally.trace_id;
    r.true_label = tally.true_label;
    r.ranking = rank_order(tally);
    r.votes.assign(tally.counts.begin(), tally.counts.end());
    return r;
}

double rank_k_accuracy(std::span<const TraceResult> results, std::size_t k) {
    if (k < 1) throw std::invalid_argument("k must be at least 1");
    std::size_t labeled = 0, hits = 0;
    for (const auto& r : results) {
        if (!r.true_label) continue;
        ++labeled;
        const auto depth = std::min(k, r.ranking.size());
        if (std::find(r.ranking.begin(), r.ranking.begin() + static_cast<std::ptrdiff_t>(depth),
                      *r.true_label) != r.ranking.begin() + static_cast<std::ptrdiff_t>(depth))
            ++hits;
    }
    if (labeled == 0) throw std::invalid_argument("no labeled traces to score");
    return static_cast<double>(hits) / static_cast<double>(labeled);
}

ConfusionMatrix confusion_matrix(std::span<const TraceResult> results, std::size_t n_classes) {
    if (results.empty()) throw std::invalid_argument("no results");
    ConfusionMatrix m(n_classes, std::vector<std::size_t>(n_classes, 0));
    for (const auto& r : results) {
        if (!r.true_label || r.ranking.empty()) continue;
        const auto t = static_cast<std::size_t>(*r.true_label);
        const auto p = static_cast<std::size_t>(r.ranking.front());
        if (t >= n_classes || p >= n_classes) throw std::invalid_argument("label outside the matrix");
        ++m[t][p];
    }
    return m;
}

AttackReport build_report(std::vector<TraceResult> traces, std::size_t n_classes) {
    AttackReport report;
    report.n_classes = n_classes;
    const bool any_labeled =
        std::any_of(traces.begin(), traces.end(), [](const TraceResult& r) { return r.true_label; });
    report.rank1_acc = any_labeled ? rank_k_accuracy(traces, 1) : std::nan("");
    report.rank2_acc = any_labeled ? rank_k_accuracy(traces, 2) : std::nan("");
    report.confusion = confusion_matrix(traces, n_classes);
    report.traces = std::move(traces);
    return report;
}

std::string format_percent(double fraction) {
    char buffer[32];
    std::snprintf(buffer, sizeof(buffer), "%.1f%%", 100.0 * fraction);
    return buffer;
}

void write_report(const std::filesystem::path& dir, const AttackReport& report) {
    std::filesystem::create_directories(dir);
    {
        std::string csv = "trace_id,true,rank1,rank2";
        for (std::size_t c = 0; c < report.n_classes; ++c) csv += ",votes_" + std::to_string(c);
        csv += '\n';
        for (const auto& r : report.traces) {
            csv += std::to_string(r.trace_id) + ',' +
                   (r.true_label ? std::to_string(*r.true_label) : "unlabeled") + ',' +
                   std::to_string(r.ranking.at(0)) + ',' +
                   (r.ranking.size() > 1 ? std::to_string(r.ranking[1]) : "") ;
            for (std::size_t c = 0; c < report.n_classes; ++c)
                csv += ',' + format_double(c < r.votes.size() ? r.votes[c] : 0.0);
            csv += '\n';
        }
        std::ofstream out(dir / "report.csv", std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + (dir / "report.csv").string());
        out << csv;
    }
    {
        std::string csv;
        for (const auto& row : report.confusion) {
            for (std::size_t c = 0; c < row.size(); ++c) {
                if (c) csv += ',';
                csv += std::to_string(row[c]);
            }
            csv += '\n';
        }
        std::ofstream out(dir / "confusion.csv", std::ios::binary | std::ios::trunc);
        out << csv;
    }
    std::size_t labeled = 0;
    for (const auto& r : report.traces) labeled += r.true_label ? 1 : 0;
    std::ofstream out(dir / "summary.txt", std::ios::binary | std::ios::trunc);
    out << "traces=" << labeled << '\n'
        << "rank1=" << format_percent(report.rank1_acc) << '\n'
        << "rank2=" << format_percent(report.rank2_acc) << '\n';
}

ReportSummary summarize_report_csv(const std::filesystem::path& report_csv) {
    std::ifstream in(report_csv, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + report_csv.string());
    std::string line;
    std::getline(in, line);
    if (line.rfind("trace_id,true,rank1,rank2", 0) != 0)
        throw std::runtime_error(report_csv.string() + ": unexpected header");
    std::size_t labeled = 0, r1 = 0, r2 = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string id, truth, first, second;
        std::getline(ss, id, ',');
        std::getline(ss, truth, ',');
        std::getline(ss, first, ',');
        std::getline(ss, second, ',');
        if (truth == "unlabeled") continue;
        ++labeled;
        if (truth == first) {
            ++r1;
            ++r2;
        } else if (truth == second) {
            ++r2;
        }
    }
    ReportSummary s;
    s.traces = labeled;
    if (labeled > 0) {
        s.rank1_percent = 100.0 * static_cast<double>(r1) / static_cast<double>(labeled);
        s.rank2_percent = 100.0 * static_cast<double>(r2) / static_cast<double>(labeled);
    }
    return s;
}

ReportSummary read_summary(const std::filesystem::path& summary_txt) {
    std::ifstream in(summary_txt, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + summary_txt.string());
    ReportSummary s;
    std::string line;
    while (std::getline(in, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        const auto key = line.substr(0, eq);
        auto value = line.substr(eq + 1);
        if (!value.empty() && value.back() == '%') value.pop_back();
        if (key == "traces") s.traces = std::stoull(value);
        else if (key == "rank1") s.rank1_percent = std::stod(value);
        else if (key == "rank2") s.rank2_percent = std::stod(value);
    }
    return s;
}

void verify_report_consistency(const std::filesystem::path& dir) {
    const auto recomputed = summarize_report_csv(dir / "report.csv");
    const auto stated = read_summary(dir / "summary.txt");
    if (recomputed.traces == 0 && stated.traces == 0) return;
    if (recomputed.traces != stated.traces ||
        std::abs(recomputed.rank1_percent - stated.rank1_percent) > 0.05 + 1e-9 ||
        std::abs(recomputed.rank2_percent - stated.rank2_percent) > 0.05 + 1e-9)
        throw std::runtime_error("summary.txt in " + dir.string() +
                                 " disagrees with report.csv");
}

}  // namespace chargescope
