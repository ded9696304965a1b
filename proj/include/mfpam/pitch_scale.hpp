#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "mfpam/tensor.hpp"

namespace mfpam {

/// Logarithmic pitch grid: 360 bins, 25 cents apart, starting at 32.7 Hz.
namespace pitch {

inline constexpr std::size_t kBins = 360;
inline constexpr double kBaseHz = 32.7;
inline constexpr double kCentsPerBin = 25.0;
inline constexpr double kBinsPerOctave = 1200.0 / kCentsPerBin;  // 48
inline const double kMaxHz = kBaseHz * std::exp2(kCentsPerBin * double(kBins - 1) / 1200.0);

inline double bin_to_freq(std::size_t bin) {
  if (bin >= kBins)
    throw UsageError("bin_to_freq: bin " + std::to_string(bin) + " outside [0, 359]");
  return kBaseHz * std::exp2(kCentsPerBin * double(bin) / 1200.0);
}

/// Continuous bin coordinate of a frequency (0 at 32.7 Hz).
inline double freq_to_fractional_bin(double hz) {
  if (!(hz > 0.0))
    throw UsageError("freq_to_bin: frequency must be positive, got " + std::to_string(hz));
  return kBinsPerOctave * std::log2(hz / kBaseHz);
}

inline std::size_t freq_to_bin(double hz) {
  const double b = std::round(freq_to_fractional_bin(hz));
  return std::size_t(std::clamp(b, 0.0, double(kBins - 1)));
}

/// Signed interval from ref to est in cents.
inline double cents_diff(double est_hz, double ref_hz) {
  if (!(est_hz > 0.0) || !(ref_hz > 0.0))
    throw UsageError("cents_diff: frequencies must be positive");
  return 1200.0 * std::log2(est_hz / ref_hz);
}

/// True iff a voiced f0 lies on the representable grid range. The upper end
/// is compared at 0.1 Hz resolution, matching the published 5834.5 Hz.
inline bool in_range(double hz) {
  return hz >= kBaseHz - 1e-9 && hz <= std::max(kMaxHz, 5834.5) + 1e-9;
}

/// One-hot (voiced) or all-zero (unvoiced, f0 == 0) target row.
template <typename T = float>
std::vector<T> encode_target(double f0_hz) {
  std::vector<T> row(kBins, T(0));
  if (f0_hz == 0.0) return row;
  if (!in_range(f0_hz))
    throw UsageError("encode_target: f0 " + std::to_string(f0_hz) +
                     " Hz outside [32.7, 5834.5]");
  row[freq_to_bin(f0_hz)] = T(1);
  return row;
}

/// Targets for a whole trajectory as a [frames x 360] tensor.
template <typename T = float>
Tensor<T> encode_targets(std::span<const double> f0_hz) {
  Tensor<T> out(Shape{f0_hz.size(), kBins});
  for (std::size_t f = 0; f < f0_hz.size(); ++f) {
    auto row = encode_target<T>(f0_hz[f]);
    std::copy(row.begin(), row.end(), out.raw() + f * kBins);
  }
  return out;
}

inline constexpr double kDefaultVoicingThreshold = 0.5;
inline constexpr std::size_t kRefineRadius = 4;

/// Posterior row to Hz. Unvoiced (0) when the peak is below the threshold;
/// otherwise the activation-weighted mean in cents over +-4 bins around the
/// argmax.
template <typename T>
double decode(std::span<const T> row, double voicing_threshold = kDefaultVoicingThreshold) {
  if (row.size() != kBins)
    throw UsageError("decode: expected 360 activations, got " + std::to_string(row.size()));
  const auto peak = std::size_t(std::max_element(row.begin(), row.end()) - row.begin());
  if (double(row[peak]) < voicing_threshold) return 0.0;
  const std::size_t lo = peak >= kRefineRadius ? peak - kRefineRadius : 0;
  const std::size_t hi = std::min(kBins - 1, peak + kRefineRadius);
  double wsum = 0.0, csum = 0.0;
  for (std::size_t i = lo; i <= hi; ++i) {
    const double w = double(row[i]);
    wsum += w;
    csum += w * kCentsPerBin * double(i);
  }
  const double cents = wsum > 0.0 ? csum / wsum : kCentsPerBin * double(peak);
  return kBaseHz * std::exp2(cents / 1200.0);
}

}  // namespace pitch

/// Per-frame F0 in Hz with 0 meaning unvoiced. Frame k is centred at
/// offset_sec + k * hop_sec.
struct PitchTrajectory {
  double hop_sec = 0.002;
  double offset_sec = 0.001;
  std::vector<double> f0_hz;

  std::size_t size() const noexcept { return f0_hz.size(); }
  double time_of(std::size_t frame) const { return offset_sec + hop_sec * double(frame); }

  void validate(double sample_rate = 16000.0) const {
    if (!(hop_sec > 0.0)) throw UsageError("trajectory hop must be positive");
    for (double f : f0_hz)
      if (!(f == 0.0 || (f > 0.0 && f < sample_rate / 2)))
        throw UsageError("trajectory f0 " + std::to_string(f) + " outside (0, sr/2)");
  }
};

/// Decodes every row of a [frames x 360] posteriorgram.
template <typename T>
PitchTrajectory decode_posteriorgram(const Tensor<T>& post, double hop_sec,
                                     double offset_sec,
                                     double voicing_threshold = pitch::kDefaultVoicingThreshold) {
  if (post.rank() != 2 || post.extent(1) != pitch::kBins)
    throw UsageError("decode_posteriorgram: expected [frames x 360], got " +
                     shape_str(post.shape()));
  PitchTrajectory traj{hop_sec, offset_sec, {}};
  traj.f0_hz.reserve(post.extent(0));
  for (std::size_t f = 0; f < post.extent(0); ++f)
    traj.f0_hz.push_back(pitch::decode<T>(
        std::span<const T>(post.raw() + f * pitch::kBins, pitch::kBins), voicing_threshold));
  return traj;
}

}  // namespace mfpam
