#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "chargescope/trace.hpp"

namespace chargescope {

/// One window of a trace. `values` has exactly the window length.
struct Segment {
    std::vector<double> values;
    std::size_t parent_trace_id = 0;
    std::size_t offset_samples = 0;
    std::optional<int> label;
};

/// A window cut into `n_slices` consecutive slices, stored back to back.
struct SlicedSegment {
    std::vector<double> values;
    std::size_t n_slices = 0;
    std::size_t slice_len = 0;
    std::size_t parent_trace_id = 0;
    std::optional<int> label;

    std::span<const double> slice(std::size_t i) const {
        return std::span<const double>(values).subspan(i * slice_len, slice_len);
    }
};

struct WindowPlan {
    std::size_t window = 0;
    std::size_t step = 0;
    std::size_t count = 0;
};

/// Window length W = round(window_s * fs), step S = max(1, floor(W * (1 - overlap))),
/// count floor((L - W) / S) + 1.
WindowPlan plan_windows(std::size_t length, int fs, double window_s, double overlap);

std::vector<Segment> sliding_windows(const CurrentTrace& trace, double window_s = 1.0,
                                     double overlap = 0.975, std::size_t trace_id = 0);

SlicedSegment slice_segment(const Segment& seg, std::size_t n_slices = 3);

struct NormStats {
    double mean = 0.0;
    double sd = 1.0;
};

NormStats fit_norm(std::span<const Segment> train_segments);
void apply_norm(std::span<Segment> segments, const NormStats& stats);
void invert_norm(std::span<Segment> segments, const NormStats& stats);

struct DatasetSplit {
    std::vector<std::size_t> train;
    std::vector<std::size_t> val;
    std::vector<std::size_t> test;
};

/// Stratified, trace-level split. Per class: val = round(r_val * n),
/// test = round(r_test * n), train takes the remainder.
DatasetSplit split_dataset(const TraceSet& set,
                           std::array<double, 3> ratios = {0.64, 0.16, 0.20},
                           std::uint64_t seed = 0);

}  // namespace chargescope
