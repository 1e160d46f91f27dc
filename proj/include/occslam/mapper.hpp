#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "occslam/grid.hpp"
#include "occslam/observations.hpp"
#include "occslam/pose2.hpp"

namespace occslam {

enum class CellLabel : std::uint8_t { kUnknown = 0, kFree = 1, kOccupied = 2 };

struct BuildMapResult {
  OccupancyMap map;
  HitMap hits;
  std::int64_t dropped = 0;  // samples projected outside the lattice
};

inline GridPoint project_sample(const Pose2& pose, const Eigen::Vector2d& q,
                                const GridGeometry& geom) {
  const GridPoint raw = project_to_grid(pose, q, geom.resolution());
  return {raw.u - geom.origin().x() / geom.resolution(),
          raw.v - geom.origin().y() / geom.resolution()};
}

// Occupancy mapping with known poses: every sample deposits z * w_k onto the
// four surrounding vertex values and 1 * w_k onto the hit counts. This is the
// zero-residual initialization of the joint objective, not a clamped Bayesian
// update; vertex value / hit count stays within [z_free, z_occ].
inline BuildMapResult build_map(std::span<const Pose2> poses, std::span<const SampleSet> samples,
                                const GridGeometry& geom) {
  if (poses.size() != samples.size())
    throw std::invalid_argument("build_map: pose count must match sample-set count");
  BuildMapResult out{OccupancyMap(geom), HitMap(geom), 0};
  const double inv_s = 1.0 / geom.resolution();
  const double ou = geom.origin().x() * inv_s;
  const double ov = geom.origin().y() * inv_s;
  Eigen::VectorXd& values = out.map.values();
  Eigen::VectorXd& counts = out.hits.counts();
  for (std::size_t i = 0; i < poses.size(); ++i) {
    const Eigen::Matrix2d rt = poses[i].rotation().transpose();
    const Eigen::Vector2d& t = poses[i].t;
    const SampleSet& set = samples[i];
    for (std::size_t j = 0; j < set.size(); ++j) {
      const Eigen::Vector2d w = rt * set.points[j] + t;
      const GridPoint p{w.x() * inv_s - ou, w.y() * inv_s - ov};
      if (!geom.contains(p)) {
        ++out.dropped;
        continue;
      }
      const BilinearWeights bw = bilinear_weights(geom, p);
      const double z = set.logodds[j];
      for (int k = 0; k < 4; ++k) {
        values[bw.vertex[k]] += z * bw.weight[k];
        counts[bw.vertex[k]] += bw.weight[k];
      }
    }
  }
  return out;
}

// occupied if M >= tau_occupied; unknown if |M| <= unknown_band; else free.
inline std::vector<CellLabel> classify(const OccupancyMap& map, double tau_occupied,
                                       double unknown_band) {
  if (!(tau_occupied > 0.0)) throw std::invalid_argument("classify: tau_occupied must be > 0");
  if (unknown_band < 0.0) throw std::invalid_argument("classify: unknown_band must be >= 0");
  std::vector<CellLabel> labels(map.values().size());
  for (Eigen::Index i = 0; i < map.values().size(); ++i) {
    const double m = map.values()[i];
    if (m >= tau_occupied) {
      labels[i] = CellLabel::kOccupied;
    } else if (std::abs(m) <= unknown_band) {
      labels[i] = CellLabel::kUnknown;
    } else {
      labels[i] = CellLabel::kFree;
    }
  }
  return labels;
}

// ln(0.7/0.3): one occupied observation is enough to classify as occupied.
inline const double kDefaultTauOccupied = logodds_of_probability(0.7);
constexpr double kDefaultUnknownBand = 1e-6;

}  // namespace occslam
