#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "mfpam/audio.hpp"
#include "mfpam/pitch_scale.hpp"

namespace mfpam::yin {

struct YinConfig {
  double fmin = 50.0;
  double fmax = 2000.0;
  std::size_t frame_size = 2048;
  std::size_t hop = 256;
  double cmnd_threshold = 0.15;
  double sample_rate = kSampleRate;

  void validate() const {
    if (!(fmin > 0.0 && fmin < fmax && fmax < sample_rate / 2))
      throw UsageError("yin: require 0 < fmin < fmax < sample_rate/2");
    if (frame_size < 4 || hop == 0) throw UsageError("yin: frame_size >= 4 and hop >= 1 required");
    if (!(cmnd_threshold > 0.0)) throw UsageError("yin: threshold must be positive");
  }
};

/// d(tau) = sum_{j < W} (x_j - x_{j+tau})^2 for tau in [0, tau_max), with
/// window W = len - tau_max. The cross term is computed by FFT
/// correlation; the energy terms by prefix sums.
inline std::vector<double> difference_function(std::span<const float> frame,
                                               std::size_t tau_max) {
  if (tau_max == 0 || 2 * tau_max > frame.size())
    throw UsageError("difference_function: tau_max must be in [1, len/2]");
  const std::size_t w = frame.size() - tau_max;
  std::vector<double> x(frame.begin(), frame.end());
  std::vector<double> head_rev(x.begin(), x.begin() + std::ptrdiff_t(w));
  std::reverse(head_rev.begin(), head_rev.end());
  const auto corr = fft_convolve(head_rev, x);
  std::vector<double> prefix(x.size() + 1, 0.0);
  for (std::size_t i = 0; i < x.size(); ++i) prefix[i + 1] = prefix[i] + x[i] * x[i];
  std::vector<double> d(tau_max, 0.0);
  const double e0 = prefix[w];
  for (std::size_t tau = 1; tau < tau_max; ++tau) {
    const double et = prefix[tau + w] - prefix[tau];
    d[tau] = std::max(0.0, e0 + et - 2.0 * corr[w - 1 + tau]);
  }
  return d;
}

/// Cumulative mean normalized difference: d'(0) = 1,
/// d'(tau) = d(tau) * tau / sum_{j=1..tau} d(j). A zero running sum
/// (silence) maps to 1.
inline std::vector<double> cmnd(std::span<const double> d) {
  std::vector<double> out(d.size(), 1.0);
  double running = 0.0;
  for (std::size_t tau = 1; tau < d.size(); ++tau) {
    running += d[tau];
    out[tau] = running > 0.0 ? d[tau] * double(tau) / running : 1.0;
  }
  return out;
}

/// Absolute-threshold pick with parabolic refinement. Returns 0 for
/// unvoiced frames.
inline double estimate_frame(std::span<const float> frame, const YinConfig& cfg) {
  if (frame.size() < cfg.frame_size)
    throw UsageError("estimate_frame: frame shorter than frame_size");
  const std::size_t half = cfg.frame_size / 2;
  const auto d = difference_function(frame.first(cfg.frame_size), half);
  const auto dn = cmnd(d);
  const auto tau_lo = std::max<std::size_t>(2, std::size_t(std::floor(cfg.sample_rate / cfg.fmax)));
  const auto tau_hi = std::min(half - 2, std::size_t(std::ceil(cfg.sample_rate / cfg.fmin)));
  for (std::size_t tau = tau_lo; tau <= tau_hi; ++tau) {
    if (dn[tau] >= cfg.cmnd_threshold) continue;
    while (tau + 1 <= tau_hi && dn[tau + 1] < dn[tau]) ++tau;
    const double a = dn[tau - 1], b = dn[tau], c = dn[tau + 1];
    const double denom = a - 2.0 * b + c;
    double shift = denom > 0.0 ? 0.5 * (a - c) / denom : 0.0;
    shift = std::clamp(shift, -0.5, 0.5);
    return cfg.sample_rate / (double(tau) + shift);
  }
  return 0.0;
}

inline std::size_t frame_count(std::size_t n_samples, const YinConfig& cfg) {
  if (n_samples < cfg.frame_size) return 0;
  return (n_samples - cfg.frame_size) / cfg.hop + 1;
}

/// Frame-wise tracking; frame k covers [k*hop, k*hop + frame_size) and is
/// timestamped at its centre.
inline PitchTrajectory track(const AudioClip& clip, const YinConfig& cfg = {}) {
  cfg.validate();
  if (clip.sample_rate != cfg.sample_rate)
    throw UsageError("yin: clip sample rate does not match config");
  PitchTrajectory tr;
  tr.hop_sec = double(cfg.hop) / cfg.sample_rate;
  tr.offset_sec = double(cfg.frame_size) / 2.0 / cfg.sample_rate;
  const std::size_t n = frame_count(clip.size(), cfg);
  tr.f0_hz.resize(n);
  for (std::size_t k = 0; k < n; ++k)
    tr.f0_hz[k] = estimate_frame(
        std::span<const float>(clip.samples.data() + k * cfg.hop, cfg.frame_size), cfg);
  return tr;
}

}  // namespace mfpam::yin
