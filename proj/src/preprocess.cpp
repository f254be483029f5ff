#include "chargescope/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>

#include "chargescope/random.hpp"

namespace chargescope {

WindowPlan plan_windows(std::size_t length, int fs, double window_s, double overlap) {
    if (!(overlap >= 0.0 && overlap < 1.0)) throw std::invalid_argument("overlap must be in [0, 1)");
    if (!(window_s > 0.0) || fs <= 0) throw std::invalid_argument("window must be positive");
    WindowPlan plan;
    plan.window = static_cast<std::size_t>(std::llround(window_s * fs));
    if (plan.window == 0) throw std::invalid_argument("window shorter than one sample");
    // The epsilon absorbs binary rounding, e.g. 500 * (1 - 0.9) = 49.999...
    const double raw_step = std::floor(static_cast<double>(plan.window) * (1.0 - overlap) + 1e-9);
    plan.step = std::max<std::size_t>(1, static_cast<std::size_t>(raw_step));
    if (length < plan.window)
        throw std::invalid_argument("trace of " + std::to_string(length) +
                                    " samples is shorter than one window of " +
                                    std::to_string(plan.window));
    plan.count = (length - plan.window) / plan.step + 1;
    return plan;
}

std::vector<Segment> sliding_windows(const CurrentTrace& trace, double window_s, double overlap,
                                     std::size_t trace_id) {
    const auto plan = plan_windows(trace.size(), trace.sampling_rate(), window_s, overlap);
    const auto samples = trace.samples();
    std::vector<Segment> out;
    out.reserve(plan.count);
    for (std::size_t k = 0; k < plan.count; ++k) {
        const std::size_t offset = k * plan.step;
        Segment seg;
        seg.values.assign(samples.begin() + static_cast<std::ptrdiff_t>(offset),
                          samples.begin() + static_cast<std::ptrdiff_t>(offset + plan.window));
        seg.parent_trace_id = trace_id;
        seg.offset_samples = offset;
        seg.label = trace.label();
        out.push_back(std::move(seg));
    }
    return out;
}

SlicedSegment slice_segment(const Segment& seg, std::size_t n_slices) {
    if (n_slices == 0 || seg.values.size() < n_slices)
        throw std::invalid_argument("window shorter than the slice count");
    SlicedSegment out;
    out.n_slices = n_slices;
    out.slice_len = seg.values.size() / n_slices;
    out.values.assign(seg.values.begin(),
                      seg.values.begin() + static_cast<std::ptrdiff_t>(n_slices * out.slice_len));
    out.parent_trace_id = seg.parent_trace_id;
    out.label = seg.label;
    return out;
}

NormStats fit_norm(std::span<const Segment> train_segments) {
    if (train_segments.empty()) throw std::invalid_argument("no training segments");
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& s : train_segments) {
        for (double v : s.values) sum += v;
        n += s.values.size();
    }
    if (n == 0) throw std::invalid_argument("training segments are empty");
    const double mean = sum / static_cast<double>(n);
    double ss = 0.0;
    for (const auto& s : train_segments)
        for (double v : s.values) ss += (v - mean) * (v - mean);
    const double sd = std::sqrt(ss / static_cast<double>(n));
    if (!(sd > 0.0)) throw std::invalid_argument("training data has zero variance");
    return {mean, sd};
}

void apply_norm(std::span<Segment> segments, const NormStats& stats) {
    for (auto& s : segments)
        for (auto& v : s.values) v = (v - stats.mean) / stats.sd;
}

void invert_norm(std::span<Segment> segments, const NormStats& stats) {
    for (auto& s : segments)
        for (auto& v : s.values) v = v * stats.sd + stats.mean;
}

DatasetSplit split_dataset(const TraceSet& set, std::array<double, 3> ratios, std::uint64_t seed) {
    if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9)
        throw std::invalid_argument("split ratios must sum to 1");
    for (double r : ratios)
        if (r < 0.0) throw std::invalid_argument("split ratios must be non-negative");

    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < set.traces.size(); ++i) {
        const auto& label = set.traces[i].label();
        if (!label) throw std::invalid_argument("cannot split unlabeled trace " + std::to_string(i));
        by_class[*label].push_back(i);
    }

    DatasetSplit split;
    for (auto& [label, members] : by_class) {
        const auto n = members.size();
        if (n < 5)
            throw std::invalid_argument("class " + std::to_string(label) + " has fewer than 5 traces");
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(label)));
        std::shuffle(members.begin(), members.end(), rng);
        const auto n_val = static_cast<std::size_t>(std::llround(ratios[1] * static_cast<double>(n)));
        const auto n_test = static_cast<std::size_t>(std::llround(ratios[2] * static_cast<double>(n)));
        if (n_val + n_test > n) throw std::invalid_argument("split leaves no training traces");
        const auto n_train = n - n_val - n_test;
        auto it = members.begin();
        split.train.insert(split.train.end(), it, it + static_cast<std::ptrdiff_t>(n_train));
        it += static_cast<std::ptrdiff_t>(n_train);
        split.val.insert(split.val.end(), it, it + static_cast<std::ptrdiff_t>(n_val));
        it += static_cast<std::ptrdiff_t>(n_val);
        split.test.insert(split.test.end(), it, members.end());
    }
    for (auto* part : {&split.train, &split.val, &split.test}) std::sort(part->begin(), part->end());
    return split;
}

}  // namespace chargescope
