#pragma once

#include <Eigen/Core>

#include <cmath>
#include <numbers>
#include <vector>

#include "occslam/grid.hpp"

namespace occslam {

// Wraps an angle to (-pi, pi]. Idempotent; wrap(a + 2*pi) == wrap(a).
inline double wrap_angle(double a) {
  double r = std::remainder(a, 2.0 * std::numbers::pi);
  if (r <= -std::numbers::pi) r += 2.0 * std::numbers::pi;
  return r;
}

// Rotation matrix convention: R(theta) = [cos, sin; -sin, cos]. This is the
// transpose of the usual CCW matrix; every projection and Jacobian formula in
// this library uses it verbatim, so a world point is R(theta)^T q + t.
inline Eigen::Matrix2d rotation_matrix(double theta) {
  const double c = std::cos(theta), s = std::sin(theta);
  Eigen::Matrix2d r;
  r << c, s, -s, c;
  return r;
}

// dR/dtheta under the same convention.
inline Eigen::Matrix2d rotation_matrix_derivative(double theta) {
  const double c = std::cos(theta), s = std::sin(theta);
  Eigen::Matrix2d r;
  r << -s, c, -c, -s;
  return r;
}

// Planar pose (t, theta); theta stored wrapped to (-pi, pi].
struct Pose2 {
  Eigen::Vector2d t = Eigen::Vector2d::Zero();
  double theta = 0.0;

  Pose2() = default;
  Pose2(double x, double y, double th) : t(x, y), theta(wrap_angle(th)) {}
  Pose2(const Eigen::Vector2d& t_, double th) : t(t_), theta(wrap_angle(th)) {}

  Eigen::Matrix2d rotation() const { return rotation_matrix(theta); }

  // Local point (robot frame) to world meters.
  Eigen::Vector2d to_world(const Eigen::Vector2d& q) const {
    return rotation().transpose() * q + t;
  }

  // World meters to local frame.
  Eigen::Vector2d to_local(const Eigen::Vector2d& w) const { return rotation() * (w - t); }
};

// Composition: (a * b).to_world(q) == a.to_world(b.to_world(q)).
inline Pose2 compose(const Pose2& a, const Pose2& b) {
  return Pose2(a.rotation().transpose() * b.t + a.t, a.theta + b.theta);
}

inline Pose2 inverse(const Pose2& a) { return Pose2(-(a.rotation() * a.t), -a.theta); }

// b expressed in a's frame: a * relative(a, b) == b.
inline Pose2 relative(const Pose2& a, const Pose2& b) { return compose(inverse(a), b); }

// Relative motion between consecutive poses with its uncertainty.
struct OdometryEdge {
  Eigen::Vector2d dt = Eigen::Vector2d::Zero();  // translation, frame of the earlier pose
  double dtheta = 0.0;
  Eigen::Matrix3d covariance = Eigen::Matrix3d::Identity();
};

// Composes edges from a start pose; the resulting chain has exactly zero
// odometry residual: t_i = t_{i-1} + R_{i-1}^T o_t, theta_i = theta_{i-1} + o_theta.
inline std::vector<Pose2> integrate_odometry(const Pose2& start,
                                             const std::vector<OdometryEdge>& edges) {
  std::vector<Pose2> poses;
  poses.reserve(edges.size() + 1);
  poses.push_back(start);
  for (const OdometryEdge& e : edges) {
    const Pose2& prev = poses.back();
    poses.emplace_back(prev.t + prev.rotation().transpose() * e.dt, prev.theta + e.dtheta);
  }
  return poses;
}

// The exact relative measurement that makes the odometry residual vanish.
inline OdometryEdge exact_edge(const Pose2& from, const Pose2& to) {
  OdometryEdge e;
  e.dt = from.rotation() * (to.t - from.t);
  e.dtheta = wrap_angle(to.theta - from.theta);
  return e;
}

// Projection of a robot-frame point onto the vertex lattice with world origin:
// p = (R^T q + t) / s. A map with a non-zero origin subtracts origin/s afterwards.
inline GridPoint project_to_grid(const Pose2& pose, const Eigen::Vector2d& q, double s) {
  const Eigen::Vector2d w = pose.to_world(q);
  return {w.x() / s, w.y() / s};
}

}  // namespace occslam
