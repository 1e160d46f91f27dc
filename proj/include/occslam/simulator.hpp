#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <vector>

#include "occslam/mapper.hpp"
#include "occslam/observations.hpp"
#include "occslam/pose2.hpp"

namespace occslam {

struct Segment {
  Eigen::Vector2d a = Eigen::Vector2d::Zero();
  Eigen::Vector2d b = Eigen::Vector2d::Zero();
};

// Defaults mirror a Hokuyo UTM-30LX style scanner: 1081 beams over +-135 deg,
// sigma_range 0.02 m, sigma_odom 0.04 m / 0.003 rad.
struct SensorModel {
  int beam_count = 1081;
  double fov_min = -2.356194490192345;
  double fov_max = 2.356194490192345;
  double max_range = 30.0;
  double range_noise_std = 0.02;
  double odom_trans_noise_std = 0.04;
  double odom_rot_noise_std = 0.003;
  std::uint64_t seed = 0;
};

struct PathSpec {
  double speed = 1.0;          // m/s along the waypoint polyline
  double scan_interval = 0.1;  // s between scans
  std::vector<Eigen::Vector2d> waypoints;
};

struct World {
  std::vector<Segment> segments;
  Eigen::Vector2d bounds_min = Eigen::Vector2d::Zero();
  Eigen::Vector2d bounds_max = Eigen::Vector2d::Zero();
  PathSpec path;
  SensorModel sensor;
};

// One simulated run, in memory. Odometry edge i connects scans i-1 and i.
struct Dataset {
  int beam_count = 0;
  double fov_min = 0.0, fov_max = 0.0, max_range = 0.0;
  std::vector<Scan> scans;
  std::vector<OdometryEdge> odometry;
  std::vector<Pose2> gt_poses;

  bool has_odometry() const { return !odometry.empty(); }
  bool has_gt() const { return gt_poses.size() == scans.size() && !scans.empty(); }
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Parametric ray-segment intersection; returns the ray parameter or infinity.
inline double intersect(const Eigen::Vector2d& origin, const Eigen::Vector2d& dir,
                        const Segment& seg) {
  const Eigen::Vector2d e = seg.b - seg.a;
  const double det = dir.x() * (-e.y()) - dir.y() * (-e.x());
  if (std::abs(det) < 1e-14) return std::numeric_limits<double>::infinity();
  const Eigen::Vector2d rhs = seg.a - origin;
  const double t = (rhs.x() * (-e.y()) - rhs.y() * (-e.x())) / det;
  const double m = (dir.x() * rhs.y() - dir.y() * rhs.x()) / det;
  if (t < 0.0 || m < 0.0 || m > 1.0) return std::numeric_limits<double>::infinity();
  return t;
}

inline double point_segment_distance(const Eigen::Vector2d& p, const Segment& seg) {
  const Eigen::Vector2d e = seg.b - seg.a;
  const double len2 = e.squaredNorm();
  if (len2 == 0.0) return (p - seg.a).norm();
  const double t = std::clamp((p - seg.a).dot(e) / len2, 0.0, 1.0);
  return (p - (seg.a + t * e)).norm();
}

}  // namespace detail

// Nearest-intersection raycast with Gaussian range noise, deterministic in
// (sensor.seed, scan_index). Beams that hit nothing within range are invalid.
inline Scan raycast(const std::vector<Segment>& segments, const Pose2& pose,
                    const SensorModel& sensor, int scan_index, double timestamp = 0.0) {
  Scan scan;
  scan.timestamp = timestamp;
  scan.max_range = sensor.max_range;
  scan.angles.reserve(sensor.beam_count);
  scan.ranges.reserve(sensor.beam_count);
  std::mt19937_64 gen(detail::splitmix64(sensor.seed ^ (0x5cabull + 0x9e3779b97f4a7c15ULL *
                                                            static_cast<std::uint64_t>(scan_index + 1))));
  std::normal_distribution<double> noise(0.0, sensor.range_noise_std > 0 ? sensor.range_noise_std : 1.0);
  const Eigen::Matrix2d rt = pose.rotation().transpose();
  const double span = sensor.fov_max - sensor.fov_min;
  for (int k = 0; k < sensor.beam_count; ++k) {
    const double angle =
        sensor.beam_count == 1 ? sensor.fov_min : sensor.fov_min + k * span / (sensor.beam_count - 1);
    scan.angles.push_back(angle);
    const Eigen::Vector2d dir = rt * Eigen::Vector2d(std::cos(angle), std::sin(angle));
    double best = std::numeric_limits<double>::infinity();
    for (const Segment& s : segments) {
      const double t = detail::intersect(pose.t, dir, s);
      if (t < best) best = t;
    }
    if (!std::isfinite(best) || best > sensor.max_range) {
      scan.ranges.push_back(kInvalidRange);
      continue;
    }
    double r = best;
    if (sensor.range_noise_std > 0) r += noise(gen);
    r = std::clamp(r, 1e-9, sensor.max_range);
    scan.ranges.push_back(r);
  }
  return scan;
}

// Poses along the waypoint polyline at constant speed, heading along the
// direction of travel, one pose per scan interval.
inline std::vector<Pose2> path_trajectory(const PathSpec& path) {
  if (path.waypoints.size() < 2) throw std::invalid_argument("path needs at least two waypoints");
  if (!(path.speed > 0) || !(path.scan_interval > 0))
    throw std::invalid_argument("path speed and scan interval must be positive");
  std::vector<double> cumulative{0.0};
  for (std::size_t i = 1; i < path.waypoints.size(); ++i)
    cumulative.push_back(cumulative.back() + (path.waypoints[i] - path.waypoints[i - 1]).norm());
  const double total = cumulative.back();
  const double step = path.speed * path.scan_interval;
  std::vector<Pose2> poses;
  std::size_t seg = 0;
  for (double d = 0.0; d <= total + 1e-12; d += step) {
    const double dd = std::min(d, total);
    while (seg + 2 < cumulative.size() && cumulative[seg + 1] <= dd) ++seg;
    const Eigen::Vector2d a = path.waypoints[seg];
    const Eigen::Vector2d b = path.waypoints[seg + 1];
    const double len = cumulative[seg + 1] - cumulative[seg];
    const double t = len > 0 ? (dd - cumulative[seg]) / len : 0.0;
    const Eigen::Vector2d dir = (b - a).normalized();
    poses.emplace_back(a + t * (b - a), std::atan2(dir.y(), dir.x()));
  }
  return poses;
}

// Scans from raycasts at the ground-truth poses plus odometry edges that are
// the exact relative poses with per-component Gaussian noise. Covariances in
// the edges are the generating noise variances.
inline Dataset synthesize_dataset(const World& world) {
  Dataset ds;
  const SensorModel& sensor = world.sensor;
  ds.beam_count = sensor.beam_count;
  ds.fov_min = sensor.fov_min;
  ds.fov_max = sensor.fov_max;
  ds.max_range = sensor.max_range;
  ds.gt_poses = path_trajectory(world.path);
  for (const Pose2& p : ds.gt_poses) {
    if (p.t.x() < world.bounds_min.x() || p.t.x() > world.bounds_max.x() ||
        p.t.y() < world.bounds_min.y() || p.t.y() > world.bounds_max.y())
      throw std::invalid_argument("trajectory leaves the world bounds");
  }
  for (std::size_t i = 0; i < ds.gt_poses.size(); ++i) {
    ds.scans.push_back(raycast(world.segments, ds.gt_poses[i], sensor, static_cast<int>(i),
                               static_cast<double>(i) * world.path.scan_interval));
  }
  std::mt19937_64 gen(detail::splitmix64(sensor.seed ^ 0x0d0eULL));
  std::normal_distribution<double> tn(0.0, sensor.odom_trans_noise_std > 0 ? sensor.odom_trans_noise_std : 1.0);
  std::normal_distribution<double> rn(0.0, sensor.odom_rot_noise_std > 0 ? sensor.odom_rot_noise_std : 1.0);
  const double var_t = std::max(sensor.odom_trans_noise_std * sensor.odom_trans_noise_std, 1e-12);
  const double var_r = std::max(sensor.odom_rot_noise_std * sensor.odom_rot_noise_std, 1e-12);
  for (std::size_t i = 1; i < ds.gt_poses.size(); ++i) {
    OdometryEdge e = exact_edge(ds.gt_poses[i - 1], ds.gt_poses[i]);
    if (sensor.odom_trans_noise_std > 0) {
      e.dt.x() += tn(gen);
      e.dt.y() += tn(gen);
    }
    if (sensor.odom_rot_noise_std > 0) e.dtheta = wrap_angle(e.dtheta + rn(gen));
    e.covariance = Eigen::Vector3d(var_t, var_t, var_r).asDiagonal();
    ds.odometry.push_back(e);
  }
  return ds;
}

// Ground-truth vertex labels by geometry: occupied within half a cell of a
// wall, free if visible from a sampled ground-truth pose within sensor range,
// unknown otherwise. pose_stride subsamples the poses used for visibility.
inline std::vector<CellLabel> rasterize_gt_map(const World& world, const GridGeometry& geom,
                                               const std::vector<Pose2>& gt_poses,
                                               int pose_stride = 1) {
  std::vector<CellLabel> labels(geom.vertex_count(), CellLabel::kUnknown);
  const double occ_dist = 0.5 * geom.resolution();
  const double max_range = world.sensor.max_range;
  for (int v = 0; v < geom.vertex_rows(); ++v) {
    for (int u = 0; u < geom.vertex_cols(); ++u) {
      const int idx = geom.vertex_index(u, v);
      const Eigen::Vector2d p = geom.grid_to_world({static_cast<double>(u), static_cast<double>(v)});
      bool occupied = false;
      for (const Segment& s : world.segments) {
        if (detail::point_segment_distance(p, s) <= occ_dist) {
          occupied = true;
          break;
        }
      }
      if (occupied) {
        labels[idx] = CellLabel::kOccupied;
        continue;
      }
      for (std::size_t i = 0; i < gt_poses.size(); i += pose_stride) {
        const Eigen::Vector2d d = p - gt_poses[i].t;
        const double dist = d.norm();
        if (dist > max_range || dist == 0.0) continue;
        const Eigen::Vector2d dir = d / dist;
        double block = std::numeric_limits<double>::infinity();
        for (const Segment& s : world.segments) {
          const double t = detail::intersect(gt_poses[i].t, dir, s);
          if (t < block) block = t;
        }
        if (block >= dist - 1e-9) {
          labels[idx] = CellLabel::kFree;
          break;
        }
      }
    }
  }
  return labels;
}

}  // namespace occslam
