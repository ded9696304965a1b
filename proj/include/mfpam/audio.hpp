#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "mfpam/random.hpp"
#include "mfpam/tensor.hpp"

namespace mfpam {

inline constexpr double kSampleRate = 16000.0;

struct AudioClip {
  std::vector<float> samples;
  double sample_rate = kSampleRate;

  std::size_t size() const noexcept { return samples.size(); }
};

// ---------------------------------------------------------------------------
// WAV I/O (RIFF, PCM16, mono, 16 kHz only)

namespace detail {

inline std::uint32_t read_u32(const unsigned char* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) |
         (std::uint32_t(p[2]) << 16) | (std::uint32_t(p[3]) << 24);
}
inline std::uint16_t read_u16(const unsigned char* p) {
  return std::uint16_t(p[0] | (p[1] << 8));
}
inline void put_u32(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(char((v >> (8 * i)) & 0xff));
}
inline void put_u16(std::string& s, std::uint16_t v) {
  s.push_back(char(v & 0xff));
  s.push_back(char(v >> 8));
}

}  // namespace detail

inline AudioClip load_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open WAV file " + path.string());
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)),
                                 std::istreambuf_iterator<char>());
  const std::string where = path.string() + ": ";
  if (buf.size() < 12 || std::memcmp(buf.data(), "RIFF", 4) != 0 ||
      std::memcmp(buf.data() + 8, "WAVE", 4) != 0)
    throw FormatError(where + "not a RIFF/WAVE file");
  bool have_fmt = false;
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  std::size_t pos = 12;
  while (pos + 8 <= buf.size()) {
    const std::string id(reinterpret_cast<const char*>(buf.data() + pos), 4);
    const std::uint32_t len = detail::read_u32(buf.data() + pos + 4);
    const std::size_t body = pos + 8;
    if (body + len > buf.size()) throw FormatError(where + "truncated chunk '" + id + "'");
    if (id == "fmt ") {
      if (len < 16) throw FormatError(where + "fmt chunk too short");
      format = detail::read_u16(buf.data() + body);
      channels = detail::read_u16(buf.data() + body + 2);
      rate = detail::read_u32(buf.data() + body + 4);
      bits = detail::read_u16(buf.data() + body + 14);
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) throw FormatError(where + "data chunk before fmt chunk");
      if (format != 1 || bits != 16)
        throw FormatError(where + "only PCM 16-bit is supported (format " +
                          std::to_string(format) + ", " + std::to_string(bits) + " bits)");
      if (channels != 1)
        throw FormatError(where + "only mono is supported (" + std::to_string(channels) +
                          " channels)");
      if (rate != 16000)
        throw FormatError(where + "sample rate must be 16000 Hz, got " + std::to_string(rate));
      AudioClip clip;
      clip.samples.resize(len / 2);
      for (std::size_t i = 0; i < clip.samples.size(); ++i) {
        const auto v = std::int16_t(detail::read_u16(buf.data() + body + 2 * i));
        clip.samples[i] = float(v) / 32768.0f;
      }
      return clip;
    }
    pos = body + len + (len & 1);
  }
  throw FormatError(where + "no data chunk");
}

inline void save_wav(const std::filesystem::path& path, const AudioClip& clip) {
  if (clip.sample_rate != kSampleRate)
    throw UsageError("save_wav: only 16 kHz clips can be written");
  const auto n = std::uint32_t(clip.samples.size());
  std::string out;
  out.reserve(44 + 2 * n);
  out += "RIFF";
  detail::put_u32(out, 36 + 2 * n);
  out += "WAVEfmt ";
  detail::put_u32(out, 16);
  detail::put_u16(out, 1);
  detail::put_u16(out, 1);
  detail::put_u32(out, 16000);
  detail::put_u32(out, 32000);
  detail::put_u16(out, 2);
  detail::put_u16(out, 16);
  out += "data";
  detail::put_u32(out, 2 * n);
  for (float s : clip.samples) {
    const double q = std::clamp(std::round(double(s) * 32768.0), -32768.0, 32767.0);
    detail::put_u16(out, std::uint16_t(std::int16_t(q)));
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot write WAV file " + path.string());
  f.write(out.data(), std::streamsize(out.size()));
  if (!f) throw FormatError("write failed for " + path.string());
}

// ---------------------------------------------------------------------------
// Band-limited upsampling

/// Polyphase windowed-sinc interpolator. Each output phase is a 64-tap
/// Kaiser-windowed sinc with cutoff at the input Nyquist frequency,
/// normalized to unit DC gain. Phase 0 reproduces the input samples.
class SincUpsampler {
 public:
  explicit SincUpsampler(std::size_t factor = 4, std::size_t taps = 64, double beta = 8.0)
      : factor_(factor), taps_(taps) {
    if (factor < 1) throw UsageError("sinc_upsample: factor must be >= 1");
    if (taps < 2 || taps % 2) throw UsageError("sinc_upsample: taps must be even and >= 2");
    const double half = double(taps / 2);
    const double i0b = std::cyl_bessel_i(0.0, beta);
    coeffs_.assign(factor * taps, 0.0);
    for (std::size_t p = 0; p < factor; ++p) {
      double sum = 0.0;
      for (std::size_t k = 0; k < taps; ++k) {
        // tap k reads input m + d with d = k - (taps/2 - 1)
        const double d = double(k) - (half - 1.0);
        const double u = double(p) / double(factor) - d;
        const double r = u / half;
        double w = 0.0;
        if (std::abs(r) < 1.0) w = std::cyl_bessel_i(0.0, beta * std::sqrt(1.0 - r * r)) / i0b;
        const double s = u == 0.0 ? 1.0 : std::sin(M_PI * u) / (M_PI * u);
        coeffs_[p * taps + k] = s * w;
        sum += s * w;
      }
      for (std::size_t k = 0; k < taps; ++k) coeffs_[p * taps + k] /= sum;
    }
  }

  std::size_t factor() const noexcept { return factor_; }

  std::vector<float> operator()(std::span<const float> x) const {
    const std::size_t n = x.size();
    std::vector<float> y(n * factor_);
    const std::ptrdiff_t first = -(std::ptrdiff_t(taps_ / 2) - 1);
    for (std::size_t m = 0; m < n; ++m) {
      for (std::size_t p = 0; p < factor_; ++p) {
        const double* c = coeffs_.data() + p * taps_;
        double acc = 0.0;
        for (std::size_t k = 0; k < taps_; ++k) {
          const std::ptrdiff_t src = std::ptrdiff_t(m) + first + std::ptrdiff_t(k);
          if (src >= 0 && src < std::ptrdiff_t(n)) acc += c[k] * double(x[std::size_t(src)]);
        }
        y[m * factor_ + p] = float(acc);
      }
    }
    return y;
  }

 private:
  std::size_t factor_;
  std::size_t taps_;
  std::vector<double> coeffs_;
};

inline std::vector<float> sinc_upsample(const AudioClip& clip, std::size_t factor = 4) {
  return SincUpsampler(factor)(clip.samples);
}

// ---------------------------------------------------------------------------
// FFT convolution

namespace detail {

inline void fft_inplace(std::vector<std::complex<double>>& a, bool inverse) {
  const std::size_t n = a.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = 2.0 * M_PI / double(len) * (inverse ? 1.0 : -1.0);
    const std::complex<double> wl(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (std::size_t j = 0; j < len / 2; ++j) {
        const auto u = a[i + j], v = a[i + j + len / 2] * w;
        a[i + j] = u + v;
        a[i + j + len / 2] = u - v;
        w *= wl;
      }
    }
  }
  if (inverse)
    for (auto& v : a) v /= double(n);
}

}  // namespace detail

/// Full linear convolution (length a + b - 1) via zero-padded FFT.
inline std::vector<double> fft_convolve(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) return {};
  const std::size_t out_len = a.size() + b.size() - 1;
  std::size_t n = 1;
  while (n < out_len) n <<= 1;
  std::vector<std::complex<double>> fa(n), fb(n);
  for (std::size_t i = 0; i < a.size(); ++i) fa[i] = a[i];
  for (std::size_t i = 0; i < b.size(); ++i) fb[i] = b[i];
  detail::fft_inplace(fa, false);
  detail::fft_inplace(fb, false);
  for (std::size_t i = 0; i < n; ++i) fa[i] *= fb[i];
  detail::fft_inplace(fa, true);
  std::vector<double> out(out_len);
  for (std::size_t i = 0; i < out_len; ++i) out[i] = fa[i].real();
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation

inline double mean_power(std::span<const float> x) {
  if (x.empty()) return 0.0;
  double s = 0.0;
  for (float v : x) s += double(v) * double(v);
  return s / double(x.size());
}

inline double rms(std::span<const float> x) { return std::sqrt(mean_power(x)); }

/// Gain that puts `noise` at `snr_db` below `clean` in mean power.
inline double noise_gain(std::span<const float> clean, std::span<const float> noise,
                         double snr_db) {
  const double pn = mean_power(noise);
  if (!(pn > 0.0)) throw UsageError("mix_noise: noise is silent (zero RMS)");
  return std::sqrt(mean_power(clean) / (pn * std::pow(10.0, snr_db / 10.0)));
}

struct NoiseMix {
  AudioClip mix;
  double gain = 1.0;        // applied to the noise crop
  double normalizer = 1.0;  // applied to the sum to avoid clipping
  std::size_t offset = 0;   // start of the noise crop
};

/// Adds a seeded-offset crop of `noise` to `clean` at the requested SNR.
/// The mix is divided by its peak when it would otherwise clip.
inline NoiseMix mix_noise_detailed(const AudioClip& clean, const AudioClip& noise,
                                   double snr_db, std::uint64_t seed = 0) {
  if (noise.size() < clean.size())
    throw UsageError("mix_noise: noise (" + std::to_string(noise.size()) +
                     " samples) shorter than clean (" + std::to_string(clean.size()) + ")");
  NoiseMix r;
  const std::size_t slack = noise.size() - clean.size();
  r.offset = slack ? std::size_t(mix_seed(seed) % (slack + 1)) : 0;
  std::span<const float> seg(noise.samples.data() + r.offset, clean.size());
  r.gain = noise_gain(clean.samples, seg, snr_db);
  r.mix = AudioClip{std::vector<float>(clean.size()), clean.sample_rate};
  std::vector<double> sum(clean.size());
  double peak = 0.0;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    sum[i] = double(clean.samples[i]) + r.gain * double(seg[i]);
    peak = std::max(peak, std::abs(sum[i]));
  }
  if (peak > 1.0) r.normalizer = 1.0 / peak;
  for (std::size_t i = 0; i < clean.size(); ++i) r.mix.samples[i] = float(sum[i] * r.normalizer);
  return r;
}

inline AudioClip mix_noise(const AudioClip& clean, const AudioClip& noise, double snr_db,
                           std::uint64_t seed = 0) {
  return mix_noise_detailed(clean, noise, snr_db, seed).mix;
}

/// Convolves with an impulse response, keeps the first len(clip) samples
/// and rescales to the RMS of the input.
inline AudioClip convolve_ir(const AudioClip& clip, std::span<const float> ir) {
  if (ir.empty()) throw UsageError("convolve_ir: impulse response is empty");
  std::vector<double> a(clip.samples.begin(), clip.samples.end());
  std::vector<double> b(ir.begin(), ir.end());
  auto full = fft_convolve(a, b);
  AudioClip out{std::vector<float>(clip.size()), clip.sample_rate};
  double p = 0.0;
  for (std::size_t i = 0; i < clip.size(); ++i) p += full[i] * full[i];
  const double out_rms = clip.size() ? std::sqrt(p / double(clip.size())) : 0.0;
  const double target = rms(clip.samples);
  const double g = out_rms > 0.0 ? target / out_rms : 1.0;
  for (std::size_t i = 0; i < clip.size(); ++i) out.samples[i] = float(full[i] * g);
  return out;
}

enum class NoiseKind { white, pink, brown };

/// Unit-RMS coloured noise.
inline AudioClip make_noise(NoiseKind kind, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n);
  double b0 = 0, b1 = 0, b2 = 0, b3 = 0, b4 = 0, b5 = 0, b6 = 0, acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double w = rng.normal();
    switch (kind) {
      case NoiseKind::white:
        v[i] = w;
        break;
      case NoiseKind::pink: {
        // Kellet's refined pink filter
        b0 = 0.99886 * b0 + w * 0.0555179;
        b1 = 0.99332 * b1 + w * 0.0750759;
        b2 = 0.96900 * b2 + w * 0.1538520;
        b3 = 0.86650 * b3 + w * 0.3104856;
        b4 = 0.55000 * b4 + w * 0.5329522;
        b5 = -0.7616 * b5 - w * 0.0168980;
        v[i] = b0 + b1 + b2 + b3 + b4 + b5 + b6 + w * 0.5362;
        b6 = w * 0.115926;
        break;
      }
      case NoiseKind::brown:
        acc = 0.995 * acc + w;
        v[i] = acc;
        break;
    }
  }
  double p = 0.0;
  for (double x : v) p += x * x;
  const double g = p > 0.0 ? 1.0 / std::sqrt(p / double(n)) : 0.0;
  AudioClip out{std::vector<float>(n), kSampleRate};
  for (std::size_t i = 0; i < n; ++i) out.samples[i] = float(v[i] * g);
  return out;
}

/// Synthetic room response: unit direct path plus an exponentially decaying
/// Gaussian tail reaching -60 dB at rt60. Normalized to unit energy.
inline std::vector<float> make_room_ir(double rt60_sec, double sample_rate, std::uint64_t seed) {
  if (!(rt60_sec > 0.0)) throw UsageError("make_room_ir: rt60 must be positive");
  Rng rng(seed);
  const auto len = std::size_t(std::ceil(rt60_sec * sample_rate));
  const std::size_t predelay = std::size_t(0.002 * sample_rate);
  std::vector<double> h(std::max<std::size_t>(len, predelay + 2), 0.0);
  h[0] = 1.0;
  const double decay = std::log(1000.0) / (rt60_sec * sample_rate);
  for (std::size_t i = predelay; i < h.size(); ++i)
    h[i] = 0.3 * rng.normal() * std::exp(-decay * double(i));
  double e = 0.0;
  for (double v : h) e += v * v;
  std::vector<float> out(h.size());
  for (std::size_t i = 0; i < h.size(); ++i) out[i] = float(h[i] / std::sqrt(e));
  return out;
}

}  // namespace mfpam
