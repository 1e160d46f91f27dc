#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <vector>

namespace occslam {

constexpr double kInvalidRange = std::numeric_limits<double>::infinity();

// One laser scan. Invalid returns carry kInvalidRange; valid ranges lie in
// (0, max_range]. A range equal to max_range means "no hit within range".
struct Scan {
  double timestamp = 0.0;
  std::vector<double> angles;  // radians, robot frame
  std::vector<double> ranges;  // meters
  double max_range = 30.0;

  std::size_t beam_count() const { return angles.size(); }
};

inline double logodds_of_probability(double p) { return std::log(p / (1.0 - p)); }

// Equidistantly sampled observation points of one scan, still in the robot
// frame. Per beam the layout is [free samples in range order, then the
// occupied endpoint (absent for max-range beams)]; beam_offsets delimits the
// per-beam runs so down-sampling can stride each beam independently.
struct SampleSet {
  std::vector<Eigen::Vector2d> points;
  std::vector<double> logodds;
  std::vector<std::uint8_t> occupied;
  std::vector<std::int32_t> beam_offsets;  // size = contributing beams + 1
  int scan_index = 0;

  std::size_t size() const { return points.size(); }
};

struct SamplingParams {
  double p_occ = 0.7;
  double p_free = 0.4;
};

// Samples one beam every `s` meters: free points at s, 2s, ... strictly below
// the return range, plus the occupied endpoint at the return range itself.
// Max-range returns contribute free points only; invalid beams are skipped.
inline SampleSet sample_scan(const Scan& scan, double s, const SamplingParams& params = {},
                             int scan_index = 0) {
  if (!(s > 0.0)) throw std::invalid_argument("sample_scan: resolution must be positive");
  if (!(params.p_occ > 0.5 && params.p_occ < 1.0))
    throw std::invalid_argument("sample_scan: p_occ must be in (0.5, 1)");
  if (!(params.p_free > 0.0 && params.p_free < 0.5))
    throw std::invalid_argument("sample_scan: p_free must be in (0, 0.5)");
  if (scan.angles.size() != scan.ranges.size())
    throw std::invalid_argument("sample_scan: angles/ranges length mismatch");

  const double z_occ = logodds_of_probability(params.p_occ);
  const double z_free = logodds_of_probability(params.p_free);

  SampleSet out;
  out.scan_index = scan_index;
  out.beam_offsets.push_back(0);
  for (std::size_t b = 0; b < scan.ranges.size(); ++b) {
    const double r = scan.ranges[b];
    if (!std::isfinite(r) || r <= 0.0 || r > scan.max_range) continue;
    const Eigen::Vector2d dir(std::cos(scan.angles[b]), std::sin(scan.angles[b]));
    for (int k = 1; k * s < r; ++k) {
      out.points.push_back(k * s * dir);
      out.logodds.push_back(z_free);
      out.occupied.push_back(0);
    }
    if (r < scan.max_range) {
      out.points.push_back(r * dir);
      out.logodds.push_back(z_occ);
      out.occupied.push_back(1);
    }
    out.beam_offsets.push_back(static_cast<std::int32_t>(out.points.size()));
  }
  return out;
}

// Along-beam stride: keeps every r-th free sample (so positions coincide with
// sampling at r*s) and always keeps the occupied endpoint. r = 1 is identity.
inline SampleSet downsample(const SampleSet& in, int ratio) {
  if (ratio < 1) throw std::invalid_argument("downsample: ratio must be >= 1");
  if (ratio == 1) return in;
  SampleSet out;
  out.scan_index = in.scan_index;
  out.beam_offsets.push_back(0);
  for (std::size_t b = 0; b + 1 < in.beam_offsets.size(); ++b) {
    const std::int32_t begin = in.beam_offsets[b];
    const std::int32_t end = in.beam_offsets[b + 1];
    std::int32_t free_end = end;
    const bool has_hit = end > begin && in.occupied[end - 1];
    if (has_hit) --free_end;
    for (std::int32_t i = begin + ratio - 1; i < free_end; i += ratio) {
      out.points.push_back(in.points[i]);
      out.logodds.push_back(in.logodds[i]);
      out.occupied.push_back(0);
    }
    if (has_hit) {
      out.points.push_back(in.points[end - 1]);
      out.logodds.push_back(in.logodds[end - 1]);
      out.occupied.push_back(1);
    }
    out.beam_offsets.push_back(static_cast<std::int32_t>(out.points.size()));
  }
  return out;
}

}  // namespace occslam
