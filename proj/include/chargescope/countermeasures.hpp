#pragma once

#include <span>
#include <vector>

#include "chargescope/simulator.hpp"
#include "chargescope/trace.hpp"

namespace chargescope {

constexpr std::size_t kLowpassTaps = 101;

/// Hamming-windowed sinc low-pass, normalized to unit DC gain.
std::vector<double> design_lowpass(double cutoff_hz, double fs, std::size_t taps = kLowpassTaps);

/// |H(f)| of an FIR filter.
double fir_magnitude(std::span<const double> taps, double freq_hz, double fs);

/// Linear-phase filtering with the group delay removed; edges are padded by
/// reflection so the output has the input's length.
std::vector<double> fir_filter_zero_delay(std::span<const double> signal,
                                          std::span<const double> taps);

/// Filtered copy of the trace, flagged `filtered` because ringing may dip below zero.
CurrentTrace lowpass_filter(const CurrentTrace& trace, double cutoff_hz = 60.0,
                            std::size_t taps = kLowpassTaps);

/// Holds charging below `cap`: every scheduled state of charge becomes min(soc, cap).
SimConfig charge_cap_policy(const SimConfig& config, double cap = 0.80);

}  // namespace chargescope
