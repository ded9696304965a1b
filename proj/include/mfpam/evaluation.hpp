#pragma once

#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mfpam/pitch_scale.hpp"

namespace mfpam::eval {

inline constexpr double kThresholdCents = 50.0;

namespace detail {

inline void check_pair(const PitchTrajectory& est, const PitchTrajectory& ref) {
  if (est.size() != ref.size())
    throw UsageError("metrics: frame count mismatch (" + std::to_string(est.size()) + " vs " +
                     std::to_string(ref.size()) + ")");
}

}  // namespace detail

/// Running totals over reference-voiced frames. Pooling several clips is
/// just accumulating them into one tally.
struct FrameTally {
  std::size_t voiced = 0;
  std::size_t pitch_hits = 0;
  std::size_t chroma_hits = 0;
  double abs_err_sum = 0.0;

  void add(double est, double ref, double threshold = kThresholdCents) {
    if (!(ref > 0.0)) return;
    ++voiced;
    if (est > 0.0) {
      const double c = pitch::cents_diff(est, ref);
      if (std::abs(c) <= threshold) ++pitch_hits;
      const double folded = std::abs(c - 1200.0 * std::round(c / 1200.0));
      if (folded <= threshold) ++chroma_hits;
      abs_err_sum += std::abs(est - ref);
    } else {
      abs_err_sum += ref;
    }
  }

  void add(const PitchTrajectory& est, const PitchTrajectory& ref,
           double threshold = kThresholdCents) {
    detail::check_pair(est, ref);
    for (std::size_t i = 0; i < ref.size(); ++i) add(est.f0_hz[i], ref.f0_hz[i], threshold);
  }

  void require_voiced() const {
    if (voiced == 0) throw UsageError("metrics: reference has no voiced frames");
  }
  double rpa() const { require_voiced(); return 100.0 * double(pitch_hits) / double(voiced); }
  double rca() const { require_voiced(); return 100.0 * double(chroma_hits) / double(voiced); }
  double mae() const { require_voiced(); return abs_err_sum / double(voiced); }
};

/// Raw pitch accuracy in percent over reference-voiced frames.
inline double rpa(const PitchTrajectory& est, const PitchTrajectory& ref,
                  double threshold_cents = kThresholdCents) {
  FrameTally t;
  t.add(est, ref, threshold_cents);
  return t.rpa();
}

/// Raw chroma accuracy: as rpa, with the error folded to the nearest
/// whole number of octaves.
inline double rca(const PitchTrajectory& est, const PitchTrajectory& ref,
                  double threshold_cents = kThresholdCents) {
  FrameTally t;
  t.add(est, ref, threshold_cents);
  return t.rca();
}

/// Mean absolute error in Hz over reference-voiced frames; an unvoiced
/// estimate costs the full reference value.
inline double mae_hz(const PitchTrajectory& est, const PitchTrajectory& ref) {
  FrameTally t;
  t.add(est, ref);
  return t.mae();
}

/// Resamples `est` onto the frame grid of `ref` by nearest frame time.
/// Hops must be integer multiples of one another.
inline PitchTrajectory align_to(const PitchTrajectory& est, const PitchTrajectory& ref) {
  if (est.f0_hz.empty()) throw UsageError("align: estimate is empty");
  const double ratio = est.hop_sec > ref.hop_sec ? est.hop_sec / ref.hop_sec
                                                 : ref.hop_sec / est.hop_sec;
  if (std::abs(ratio - std::round(ratio)) > 1e-6)
    throw UsageError("align: hop ratio " + std::to_string(ratio) + " is not an integer");
  PitchTrajectory out{ref.hop_sec, ref.offset_sec, std::vector<double>(ref.size())};
  const double last = double(est.size() - 1);
  for (std::size_t i = 0; i < ref.size(); ++i) {
    const double pos = (ref.time_of(i) - est.offset_sec) / est.hop_sec;
    const double k = std::clamp(std::round(pos), 0.0, last);
    out.f0_hz[i] = est.f0_hz[std::size_t(k)];
  }
  return out;
}

struct ConditionRow {
  std::string condition;
  double rpa_pct = 0.0;
  double rca_pct = 0.0;
  double mae_hz = 0.0;
  std::size_t n_frames = 0;
};

struct EvalReport {
  std::vector<ConditionRow> rows;
  std::vector<std::string> warnings;

  const ConditionRow* find(const std::string& cond) const {
    for (const auto& r : rows)
      if (r.condition == cond) return &r;
    return nullptr;
  }

  std::string table() const {
    std::ostringstream os;
    char line[160];
    std::snprintf(line, sizeof line, "%-12s %10s %10s %10s %10s\n", "condition", "MAE(Hz)",
                  "RPA(%)", "RCA(%)", "frames");
    os << line;
    for (const auto& r : rows) {
      std::snprintf(line, sizeof line, "%-12s %10.2f %10.2f %10.2f %10zu\n", r.condition.c_str(),
                    r.mae_hz, r.rpa_pct, r.rca_pct, r.n_frames);
      os << line;
    }
    return os.str();
  }

  std::string csv() const {
    std::ostringstream os;
    os << "condition,rpa,rca,mae,n_frames\n";
    char line[160];
    for (const auto& r : rows) {
      std::snprintf(line, sizeof line, "%s,%.4f,%.4f,%.4f,%zu\n", r.condition.c_str(), r.rpa_pct,
                    r.rca_pct, r.mae_hz, r.n_frames);
      os << line;
    }
    return os.str();
  }
};

struct LabelledPair {
  std::string condition;
  PitchTrajectory est;
  PitchTrajectory ref;
};

/// Pools frames per condition label (in first-seen order) and computes one
/// row per non-empty bucket. Buckets without voiced reference frames are
/// dropped with a warning.
inline EvalReport aggregate(const std::vector<LabelledPair>& pairs,
                            double threshold_cents = kThresholdCents) {
  std::vector<std::string> order;
  std::map<std::string, FrameTally> tallies;
  for (const auto& p : pairs) {
    if (!tallies.count(p.condition)) order.push_back(p.condition);
    tallies[p.condition].add(p.est, p.ref, threshold_cents);
  }
  EvalReport rep;
  for (const auto& c : order) {
    const auto& t = tallies[c];
    if (t.voiced == 0) {
      rep.warnings.push_back("condition '" + c + "' has no voiced reference frames; omitted");
      continue;
    }
    rep.rows.push_back({c, t.rpa(), t.rca(), t.mae(), t.voiced});
  }
  return rep;
}

}  // namespace mfpam::eval
