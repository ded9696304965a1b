#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mfpam/audio.hpp"
#include "mfpam/pitch_scale.hpp"
#include "mfpam/random.hpp"

namespace mfpam {

struct SynthOptions {
  std::size_t n_harmonics = 4;
  double sample_rate = kSampleRate;
  std::uint64_t seed = 0;
  // label grid the returned trajectory is sampled on
  double label_hop_sec = 0.002;
  double label_offset_sec = 0.001;
};

namespace detail {

/// F0 of a trajectory at time t: linear between voiced neighbours, held
/// flat beyond the ends, 0 when the nearest frame is unvoiced.
inline double f0_at(const PitchTrajectory& tr, double t) {
  if (tr.f0_hz.empty()) return 0.0;
  const double pos = (t - tr.offset_sec) / tr.hop_sec;
  if (pos <= 0.0) return tr.f0_hz.front();
  const auto last = tr.f0_hz.size() - 1;
  if (pos >= double(last)) return tr.f0_hz.back();
  const auto i = std::size_t(std::floor(pos));
  const double frac = pos - double(i);
  const double a = tr.f0_hz[i], b = tr.f0_hz[i + 1];
  if (a > 0.0 && b > 0.0) return a + frac * (b - a);
  return frac < 0.5 ? a : b;
}

}  // namespace detail

struct SynthResult {
  AudioClip clip;
  PitchTrajectory labels;
};

/// Additive harmonic synthesis following `f0_track`.
///
/// Harmonic h has amplitude 1/h and a seeded random start phase; partials
/// at or above Nyquist are muted sample by sample. The output is scaled to
/// a 0.9 peak. Labels are the synthesis F0 sampled at the label frame
/// centres.
inline SynthResult synth_harmonic(const PitchTrajectory& f0_track, std::size_t n_samples,
                                  const SynthOptions& opt) {
  if (opt.n_harmonics < 1) throw UsageError("synth_harmonic: n_harmonics must be >= 1");
  for (double f : f0_track.f0_hz)
    if (f != 0.0 && !pitch::in_range(f))
      throw UsageError("synth_harmonic: f0 " + std::to_string(f) +
                       " Hz outside [32.7, 5834.5]");
  Rng rng(opt.seed);
  std::vector<double> phase(opt.n_harmonics);
  for (auto& p : phase) p = rng.uniform(0.0, 2.0 * M_PI);

  const double sr = opt.sample_rate;
  std::vector<double> s(n_samples, 0.0);
  double base_phase = 0.0;  // cycles
  for (std::size_t n = 0; n < n_samples; ++n) {
    const double f0 = detail::f0_at(f0_track, double(n) / sr);
    if (f0 > 0.0) {
      double acc = 0.0;
      for (std::size_t h = 1; h <= opt.n_harmonics; ++h) {
        if (double(h) * f0 >= sr / 2) break;
        acc += std::sin(2.0 * M_PI * double(h) * base_phase + phase[h - 1]) / double(h);
      }
      s[n] = acc;
      base_phase += f0 / sr;
      base_phase -= std::floor(base_phase);
    }
  }
  double peak = 0.0;
  for (double v : s) peak = std::max(peak, std::abs(v));
  SynthResult out;
  out.clip.sample_rate = sr;
  out.clip.samples.resize(n_samples);
  const double g = peak > 0.0 ? 0.9 / peak : 0.0;
  for (std::size_t n = 0; n < n_samples; ++n) out.clip.samples[n] = float(s[n] * g);

  out.labels.hop_sec = opt.label_hop_sec;
  out.labels.offset_sec = opt.label_offset_sec;
  const double dur = double(n_samples) / sr;
  const auto frames = std::size_t(std::llround(dur / opt.label_hop_sec));
  out.labels.f0_hz.resize(frames);
  for (std::size_t k = 0; k < frames; ++k)
    out.labels.f0_hz[k] = detail::f0_at(f0_track, out.labels.time_of(k));
  return out;
}

enum class Contour { constant, glide, vibrato };

inline std::string to_string(Contour c) {
  switch (c) {
    case Contour::constant: return "constant";
    case Contour::glide: return "glide";
    case Contour::vibrato: return "vibrato";
  }
  return "?";
}

inline Contour contour_from_string(const std::string& s) {
  if (s == "constant") return Contour::constant;
  if (s == "glide") return Contour::glide;
  if (s == "vibrato") return Contour::vibrato;
  throw UsageError("unknown contour '" + s + "' (constant|glide|vibrato)");
}

struct DatasetSpec {
  std::size_t n_clips = 16;
  std::size_t chunk_samples = 16384;
  double f0_min = 80.0;
  double f0_max = 1000.0;
  Contour contour = Contour::constant;
  std::size_t harmonics_min = 4;
  std::size_t harmonics_max = 4;
  std::vector<double> snr_choices;  // empty: no additive noise
  double reverb_probability = 0.0;
  double rt60_min = 0.2;
  double rt60_max = 0.8;
  std::uint64_t seed = 0;
  std::size_t frames_per_chunk = 512;

  void validate() const {
    if (n_clips == 0) throw UsageError("dataset: n_clips must be positive");
    if (chunk_samples == 0 || chunk_samples % 256)
      throw UsageError("dataset: chunk_samples must be a positive multiple of 256");
    if (!(f0_min <= f0_max)) throw UsageError("dataset: empty f0 range");
    if (!pitch::in_range(f0_min) || !pitch::in_range(f0_max))
      throw UsageError("dataset: f0 range must lie within [32.7, 5834.5] Hz");
    if (harmonics_min < 1 || harmonics_min > harmonics_max)
      throw UsageError("dataset: empty harmonics range");
    if (reverb_probability < 0.0 || reverb_probability > 1.0)
      throw UsageError("dataset: reverb_probability must be in [0, 1]");
    if (!(rt60_min > 0.0 && rt60_min <= rt60_max)) throw UsageError("dataset: empty rt60 range");
    if (frames_per_chunk == 0 || chunk_samples % frames_per_chunk)
      throw UsageError("dataset: frames_per_chunk must divide chunk_samples");
  }
};

struct DatasetItem {
  AudioClip clip;    // network input
  AudioClip clean;   // signal before noise, same final scaling as clip
  PitchTrajectory labels;
  std::string condition;  // clean | noise | reverb | all
  std::optional<double> snr_db;
  bool reverb = false;
  std::uint64_t seed = 0;
};

inline PitchTrajectory make_contour(Contour kind, double f0_min, double f0_max,
                                    std::size_t n_samples, double sr, Rng& rng) {
  // per-sample track so the synthesis follows the contour exactly
  PitchTrajectory tr{1.0 / sr, 0.0, std::vector<double>(n_samples)};
  const double dur = double(n_samples) / sr;
  switch (kind) {
    case Contour::constant: {
      const double f = rng.uniform(f0_min, f0_max);
      std::fill(tr.f0_hz.begin(), tr.f0_hz.end(), f);
      break;
    }
    case Contour::glide: {
      const double a = std::log2(rng.uniform(f0_min, f0_max));
      const double b = std::log2(rng.uniform(f0_min, f0_max));
      for (std::size_t n = 0; n < n_samples; ++n)
        tr.f0_hz[n] = std::exp2(a + (b - a) * (double(n) / sr) / dur);
      break;
    }
    case Contour::vibrato: {
      // +-50 cents at 4-7 Hz, kept inside the range
      const double depth = 50.0 / 1200.0;
      const double lo = std::log2(f0_min) + depth, hi = std::log2(f0_max) - depth;
      const double c = hi > lo ? rng.uniform(lo, hi) : 0.5 * (lo + hi);
      const double rate = rng.uniform(4.0, 7.0);
      const double ph = rng.uniform(0.0, 2.0 * M_PI);
      for (std::size_t n = 0; n < n_samples; ++n)
        tr.f0_hz[n] = std::exp2(c + depth * std::sin(2.0 * M_PI * rate * double(n) / sr + ph));
      break;
    }
  }
  return tr;
}

inline std::string condition_label(bool noisy, bool reverb) {
  if (noisy && reverb) return "all";
  if (noisy) return "noise";
  if (reverb) return "reverb";
  return "clean";
}

/// Renders a labelled synthetic corpus. Each clip draws its content,
/// noise and reverb decisions from separate seed streams, so two specs
/// differing only in snr_choices share identical clean content.
inline std::vector<DatasetItem> make_dataset(const DatasetSpec& spec) {
  spec.validate();
  const double sr = kSampleRate;
  const double hop = double(spec.chunk_samples / spec.frames_per_chunk) / sr;
  std::vector<DatasetItem> items;
  items.reserve(spec.n_clips);
  for (std::size_t i = 0; i < spec.n_clips; ++i) {
    DatasetItem item;
    item.seed = derive_seed(spec.seed, i);
    Rng content(derive_seed(spec.seed, i, 0));
    Rng noise_rng(derive_seed(spec.seed, i, 1));
    Rng reverb_rng(derive_seed(spec.seed, i, 2));

    auto track = make_contour(spec.contour, spec.f0_min, spec.f0_max, spec.chunk_samples, sr,
                              content);
    const std::size_t harmonics =
        spec.harmonics_min + std::size_t(content.index(spec.harmonics_max - spec.harmonics_min + 1));
    SynthOptions so{harmonics, sr, content.next(), hop, hop / 2};
    auto syn = synth_harmonic(track, spec.chunk_samples, so);
    AudioClip signal = std::move(syn.clip);
    item.labels = std::move(syn.labels);

    const bool reverb = spec.reverb_probability > 0.0 &&
                        reverb_rng.uniform() < spec.reverb_probability;
    if (reverb) {
      const double rt60 = reverb_rng.uniform(spec.rt60_min, spec.rt60_max);
      auto ir = make_room_ir(rt60, sr, reverb_rng.next());
      signal = convolve_ir(signal, ir);
      float peak = 0.0f;
      for (float v : signal.samples) peak = std::max(peak, std::abs(v));
      if (peak > 1.0f)
        for (auto& v : signal.samples) v /= peak;
    }
    item.reverb = reverb;

    const bool noisy = !spec.snr_choices.empty();
    if (noisy) {
      const double snr = spec.snr_choices[noise_rng.index(spec.snr_choices.size())];
      const auto kind = static_cast<NoiseKind>(noise_rng.index(3));
      auto noise = make_noise(kind, spec.chunk_samples * 2, noise_rng.next());
      auto mixed = mix_noise_detailed(signal, noise, snr, noise_rng.next());
      item.clean = signal;
      for (auto& v : item.clean.samples) v = float(double(v) * mixed.normalizer);
      item.clip = std::move(mixed.mix);
      item.snr_db = snr;
    } else {
      item.clean = signal;
      item.clip = std::move(signal);
    }
    item.condition = condition_label(noisy, reverb);
    items.push_back(std::move(item));
  }
  return items;
}

}  // namespace mfpam
