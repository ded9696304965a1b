#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mfpam/audio.hpp"
#include "mfpam/checkpoint.hpp"
#include "mfpam/config_file.hpp"
#include "mfpam/model.hpp"
#include "mfpam/synth.hpp"
#include "mfpam/training.hpp"

namespace mfpam {

inline constexpr int kRunConfigVersion = 1;

/// Everything a command needs, read from one config file:
///
///     version = 1
///     [model]  ModelConfig keys
///     [train]  TrainConfig keys
///     [data]   n_clips, f0_min, f0_max, contour, harmonics_min,
///              harmonics_max, snr_choices, reverb_probability,
///              rt60_min, rt60_max, seed
///
/// Missing keys keep their defaults; unknown keys and sections are errors.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DatasetSpec data;

  /// Dataset spec with chunk geometry taken from the model.
  DatasetSpec dataset() const {
    DatasetSpec d = data;
    d.chunk_samples = model.chunk_samples;
    d.frames_per_chunk = model.frames();
    return d;
  }

  static RunConfig parse(const std::string& text, const std::string& origin = "config") {
    auto kv = KeyValueFile::parse(text, origin);
    RunConfig rc;
    const auto version = kv.get_size("", "version", kRunConfigVersion);
    if (version != std::size_t(kRunConfigVersion))
      throw FormatError(origin + ": unsupported config version " + std::to_string(version));
    rc.model = ModelConfig::from_section(kv);
    rc.train = TrainConfig::from_section(kv, rc.train);
    auto& d = rc.data;
    const std::string s = "data";
    d.n_clips = kv.get_size(s, "n_clips", d.n_clips);
    d.f0_min = kv.get_double(s, "f0_min", d.f0_min);
    d.f0_max = kv.get_double(s, "f0_max", d.f0_max);
    d.contour = contour_from_string(kv.get_string(s, "contour", to_string(d.contour)));
    d.harmonics_min = kv.get_size(s, "harmonics_min", d.harmonics_min);
    d.harmonics_max = kv.get_size(s, "harmonics_max", d.harmonics_max);
    if (kv.has(s, "snr_choices")) {
      const auto raw = kv.get_string(s, "snr_choices", "");
      d.snr_choices = raw.empty() ? std::vector<double>{} : kv.get_doubles(s, "snr_choices", {});
    }
    d.reverb_probability = kv.get_double(s, "reverb_probability", d.reverb_probability);
    d.rt60_min = kv.get_double(s, "rt60_min", d.rt60_min);
    d.rt60_max = kv.get_double(s, "rt60_max", d.rt60_max);
    d.seed = kv.get_u64(s, "seed", d.seed);
    kv.reject_unknown({"", "model", "train", "data"});
    rc.dataset().validate();
    return rc;
  }

  static RunConfig load(const std::filesystem::path& path) {
    return parse(read_file(path.string()), path.string());
  }
};

// ---------------------------------------------------------------------------
// CSV files

/// `time_sec,f0_hz` with one row per frame; 0 marks unvoiced frames.
inline std::string trajectory_csv(const PitchTrajectory& tr) {
  std::string out = "time_sec,f0_hz\n";
  char line[64];
  for (std::size_t i = 0; i < tr.size(); ++i) {
    std::snprintf(line, sizeof line, "%.6f,%.6f\n", tr.time_of(i), tr.f0_hz[i]);
    out += line;
  }
  return out;
}

inline void write_trajectory(const std::filesystem::path& path, const PitchTrajectory& tr) {
  write_file(path.string(), trajectory_csv(tr));
}

inline PitchTrajectory read_trajectory(const std::filesystem::path& path) {
  std::istringstream in(read_file(path.string()));
  const std::string where = path.string() + ": ";
  std::string line;
  if (!std::getline(in, line) || KeyValueFile::trim(line) != "time_sec,f0_hz")
    throw FormatError(where + "expected header 'time_sec,f0_hz'");
  std::vector<double> t, f;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (KeyValueFile::trim(line).empty()) continue;
    double a = 0, b = 0;
    char tail = 0;
    if (std::sscanf(line.c_str(), "%lf,%lf%c", &a, &b, &tail) < 2 || (tail && tail != '\r'))
      throw FormatError(where + "line " + std::to_string(lineno) + ": expected two numbers");
    if (b < 0.0) throw FormatError(where + "line " + std::to_string(lineno) + ": negative f0");
    t.push_back(a);
    f.push_back(b);
  }
  if (t.empty()) throw FormatError(where + "no frames");
  PitchTrajectory tr;
  tr.offset_sec = t.front();
  if (t.size() > 1) {
    // times are printed to 1 us; average out the rounding
    tr.hop_sec = std::round((t.back() - t.front()) / double(t.size() - 1) * 1e9) / 1e9;
    if (!(tr.hop_sec > 0.0)) throw FormatError(where + "times must increase");
  }
  tr.f0_hz = std::move(f);
  return tr;
}

/// `time_sec,b0,...,b359`, one row per frame.
template <typename T>
std::string posteriorgram_csv(const Tensor<T>& post, double hop_sec, double offset_sec) {
  std::ostringstream os;
  os << "time_sec";
  for (std::size_t b = 0; b < post.extent(1); ++b) os << ",b" << b;
  os << '\n';
  char buf[32];
  for (std::size_t f = 0; f < post.extent(0); ++f) {
    std::snprintf(buf, sizeof buf, "%.6f", offset_sec + hop_sec * double(f));
    os << buf;
    for (std::size_t b = 0; b < post.extent(1); ++b) {
      std::snprintf(buf, sizeof buf, ",%.6g", double(post(f, b)));
      os << buf;
    }
    os << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Dataset directories: clip_NNNN.wav + clip_NNNN.csv + manifest.csv

struct ManifestRow {
  std::string clip_id;
  std::string condition;
  std::optional<double> snr_db;
  bool reverb = false;
  std::uint64_t seed = 0;
};

inline std::string snr_tag(const std::optional<double>& snr) {
  if (!snr) return "clean";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", *snr);
  return buf;
}

inline void write_dataset(const std::filesystem::path& dir, const std::vector<DatasetItem>& items) {
  std::filesystem::create_directories(dir);
  std::string manifest = "clip_id,condition,snr_db,reverb,seed\n";
  for (std::size_t i = 0; i < items.size(); ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "clip_%04zu", i);
    const auto& it = items[i];
    save_wav(dir / (std::string(id) + ".wav"), it.clip);
    write_trajectory(dir / (std::string(id) + ".csv"), it.labels);
    manifest += std::string(id) + "," + it.condition + "," +
                (it.snr_db ? snr_tag(it.snr_db) : std::string()) + "," +
                (it.reverb ? "1" : "0") + "," + std::to_string(it.seed) + "\n";
  }
  write_file((dir / "manifest.csv").string(), manifest);
}

inline std::vector<ManifestRow> read_manifest(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.csv";
  if (!std::filesystem::exists(path))
    throw FormatError("no manifest.csv in " + dir.string());
  std::istringstream in(read_file(path.string()));
  std::string line;
  std::getline(in, line);
  if (KeyValueFile::trim(line) != "clip_id,condition,snr_db,reverb,seed")
    throw FormatError(path.string() + ": unexpected header");
  std::vector<ManifestRow> rows;
  while (std::getline(in, line)) {
    line = KeyValueFile::trim(line);
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (line.back() == ',') f.emplace_back();
    if (f.size() != 5) throw FormatError(path.string() + ": bad row '" + line + "'");
    ManifestRow r{f[0], f[1], std::nullopt, f[3] == "1", 0};
    try {
      if (!f[2].empty()) r.snr_db = std::stod(f[2]);
      r.seed = std::stoull(f[4]);
    } catch (const std::exception&) {
      throw FormatError(path.string() + ": bad number in row '" + line + "'");
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

inline std::vector<DatasetItem> read_dataset(const std::filesystem::path& dir) {
  std::vector<DatasetItem> items;
  for (const auto& row : read_manifest(dir)) {
    DatasetItem it;
    it.clip = load_wav(dir / (row.clip_id + ".wav"));
    it.labels = read_trajectory(dir / (row.clip_id + ".csv"));
    it.condition = row.condition;
    it.snr_db = row.snr_db;
    it.reverb = row.reverb;
    it.seed = row.seed;
    items.push_back(std::move(it));
  }
  if (items.empty()) throw FormatError(dir.string() + ": manifest lists no clips");
  return items;
}

// ---------------------------------------------------------------------------
// Inference on arbitrary-length audio

template <typename T>
struct LongInference {
  PitchTrajectory trajectory;
  Tensor<T> posteriorgram;  // [frames x 360], pad frames removed
};

/// Splits `clip` into whole chunks (zero-padding the last), runs the model
/// on each, and keeps the frames that start inside the original signal.
template <typename T>
LongInference<T> infer_clip(const MfPam<T>& model, const AudioClip& clip,
                            double threshold = pitch::kDefaultVoicingThreshold) {
  const auto& cfg = model.config();
  if (clip.sample_rate != kSampleRate) throw UsageError("infer: clip must be 16 kHz");
  if (clip.samples.empty()) throw UsageError("infer: empty clip");
  const std::size_t chunk = cfg.chunk_samples, fpc = cfg.frames();
  const std::size_t n_chunks = (clip.size() + chunk - 1) / chunk;
  const auto hop = std::size_t(cfg.hop_samples());
  const std::size_t keep = (clip.size() + hop - 1) / hop;
  Tensor<T> post(Shape{keep, pitch::kBins});
  std::vector<float> buf(chunk);
  for (std::size_t c = 0; c < n_chunks; ++c) {
    std::fill(buf.begin(), buf.end(), 0.0f);
    const std::size_t begin = c * chunk, end = std::min(clip.size(), begin + chunk);
    std::copy(clip.samples.begin() + std::ptrdiff_t(begin),
              clip.samples.begin() + std::ptrdiff_t(end), buf.begin());
    const auto out = model.predict(buf);
    for (std::size_t f = 0; f < fpc && c * fpc + f < keep; ++f)
      std::copy_n(out.raw() + f * pitch::kBins, pitch::kBins,
                  post.raw() + (c * fpc + f) * pitch::kBins);
  }
  auto tr = decode_output(cfg, post, threshold);
  return {std::move(tr), std::move(post)};
}

}  // namespace mfpam
