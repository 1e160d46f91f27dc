#pragma once

#include <Eigen/Dense>
#include <Eigen/SparseCholesky>
#include <Eigen/SparseCore>

#include <chrono>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "occslam/mapper.hpp"
#include "occslam/residuals.hpp"

namespace occslam {

struct SolveConfig {
  int max_iterations = 50;            // tau_k
  double step_norm_threshold = 1e-4;  // tau_delta, compared against ||delta||^2
  Weights weights;
  double damping = 0.0;  // Levenberg lambda; escalated x10 on factorization failure
  bool use_schur = false;
  ObservationParams observation;
};

struct IterationRecord {
  int k = 0;
  double f = 0.0, f_z = 0.0, f_o = 0.0, f_s = 0.0;
  double step_pose_norm = 0.0;
  double step_map_norm = 0.0;
  std::int64_t dropped = 0;
  double damping_used = 0.0;
};

struct SolveReport {
  std::vector<IterationRecord> iterations;
  double final_objective = 0.0;
  double final_f_z = 0.0, final_f_o = 0.0, final_f_s = 0.0;
  double final_step_squared = 0.0;
  std::int64_t total_dropped = 0;
  bool damping_escalated = false;
  bool converged = false;  // step fell below threshold before the iteration cap
  double wall_seconds = 0.0;
};

namespace detail {

struct SchurBlocks {
  Eigen::MatrixXd hpp;                          // dense np x np, symmetric
  Eigen::SparseMatrix<double, Eigen::RowMajor> hmp;  // nm x np
  Eigen::SparseMatrix<double> hmm;              // lower triangle, nm x nm
  Eigen::VectorXd bp, bm;
};

// Splits the lower-triangular normal matrix at the pose/map boundary. All
// pose-map coupling lives in the (map row, pose col) block because map
// columns come after pose columns.
inline SchurBlocks split_system(const SparseSystem& sys) {
  const int np = sys.layout.pose_vars();
  const int nm = sys.layout.map_dim;
  SchurBlocks out;
  out.hpp = Eigen::MatrixXd::Zero(np, np);
  out.hmp.resize(nm, np);
  out.hmm.resize(nm, nm);
  std::vector<Eigen::Triplet<double>> tmp, tmm;
  for (int c = 0; c < sys.normal.outerSize(); ++c) {
    for (Eigen::SparseMatrix<double>::InnerIterator it(sys.normal, c); it; ++it) {
      const int r = static_cast<int>(it.row());
      if (c < np) {
        if (r < np) {
          out.hpp(r, c) = it.value();
          if (r != c) out.hpp(c, r) = it.value();
        } else {
          tmp.emplace_back(r - np, c, it.value());
        }
      } else {
        tmm.emplace_back(r - np, c - np, it.value());
      }
    }
  }
  out.hmp.setFromTriplets(tmp.begin(), tmp.end());
  out.hmm.setFromTriplets(tmm.begin(), tmm.end());
  out.bp = sys.rhs.head(np);
  out.bm = sys.rhs.tail(nm);
  return out;
}

}  // namespace detail

struct NormalSolveResult {
  Eigen::VectorXd delta;
  bool success = false;
  double damping_used = 0.0;
  std::string message;
};

// Solves (J^T W J + lambda I) delta = -J^T W F from the assembled system.
// With use_schur the map block is eliminated first and back-substituted;
// a diagonal map block (submap joining) takes the O(map) fast path. On
// factorization failure the caller escalates damping and retries.
inline NormalSolveResult solve_normal_equations_once(const SparseSystem& sys, bool use_schur,
                                                     double damping) {
  NormalSolveResult out;
  out.damping_used = damping;
  const int dim = sys.layout.dim();
  const int np = sys.layout.pose_vars();
  const int nm = sys.layout.map_dim;

  auto finite = [](const Eigen::VectorXd& v) { return v.allFinite(); };

  if (!use_schur || np == 0 || nm == 0) {
    Eigen::SparseMatrix<double> h = sys.normal;
    if (damping > 0.0) {
      Eigen::SparseMatrix<double> id(dim, dim);
      id.setIdentity();
      h = (h + damping * id).eval();
    }
    Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>, Eigen::Lower> ldlt;
    ldlt.compute(h);
    if (ldlt.info() != Eigen::Success) {
      out.message = "sparse LDLT factorization failed";
      return out;
    }
    out.delta = ldlt.solve(sys.rhs);
    if (!finite(out.delta)) {
      out.message = "solution contains non-finite entries";
      return out;
    }
    out.success = true;
    return out;
  }

  detail::SchurBlocks blk = detail::split_system(sys);
  blk.hpp.diagonal().array() += damping;

  Eigen::MatrixXd schur = blk.hpp;
  Eigen::VectorXd rhs_p = blk.bp;
  Eigen::VectorXd delta_m(nm);

  if (sys.map_block_diagonal) {
    Eigen::VectorXd diag = Eigen::VectorXd::Zero(nm);
    for (int c = 0; c < blk.hmm.outerSize(); ++c)
      for (Eigen::SparseMatrix<double>::InnerIterator it(blk.hmm, c); it; ++it)
        if (it.row() == it.col()) diag[it.row()] = it.value();
    diag.array() += damping;
    if ((diag.array() <= 0.0).any()) {
      out.message = "map block has non-positive diagonal";
      return out;
    }
    for (int r = 0; r < nm; ++r) {
      const double inv_d = 1.0 / diag[r];
      Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(blk.hmp, r);
      if (!it) continue;
      // rank-1 downdate of the Schur complement from this map variable's row
      std::array<int, 64> cols{};
      std::array<double, 64> vals{};
      int n = 0;
      for (; it; ++it) {
        if (n == 64) throw std::runtime_error("map variable couples to too many poses for fast path");
        cols[n] = static_cast<int>(it.col());
        vals[n++] = it.value();
      }
      for (int a = 0; a < n; ++a) {
        rhs_p[cols[a]] -= vals[a] * inv_d * blk.bm[r];
        for (int b = 0; b < n; ++b) schur(cols[a], cols[b]) -= vals[a] * inv_d * vals[b];
      }
    }
    Eigen::LDLT<Eigen::MatrixXd> dense(schur);
    if (dense.info() != Eigen::Success) {
      out.message = "dense Schur factorization failed";
      return out;
    }
    const Eigen::VectorXd delta_p = dense.solve(rhs_p);
    delta_m = (blk.bm - blk.hmp * delta_p).cwiseQuotient(diag);
    out.delta.resize(dim);
    out.delta.head(np) = delta_p;
    out.delta.tail(nm) = delta_m;
    if (!finite(out.delta)) {
      out.message = "solution contains non-finite entries";
      return out;
    }
    out.success = true;
    return out;
  }

  // General map block: factor it once, then eliminate.
  Eigen::SparseMatrix<double> hmm = blk.hmm;
  if (damping > 0.0) {
    Eigen::SparseMatrix<double> id(nm, nm);
    id.setIdentity();
    hmm = (hmm + damping * id).eval();
  }
  Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>, Eigen::Lower> mldlt;
  mldlt.compute(hmm);
  if (mldlt.info() != Eigen::Success) {
    out.message = "map block factorization failed";
    return out;
  }
  const Eigen::SparseMatrix<double> hpm = Eigen::SparseMatrix<double>(blk.hmp).transpose();
  // chunk the np right-hand sides to bound memory
  const int chunk = 64;
  for (int c0 = 0; c0 < np; c0 += chunk) {
    const int nc = std::min(chunk, np - c0);
    Eigen::MatrixXd rhs = Eigen::MatrixXd(blk.hmp.middleCols(c0, nc));
    Eigen::MatrixXd x = mldlt.solve(rhs);
    schur.middleCols(c0, nc) -= hpm * x;
  }
  const Eigen::VectorXd hmm_inv_bm = mldlt.solve(blk.bm);
  rhs_p -= hpm * hmm_inv_bm;
  Eigen::LDLT<Eigen::MatrixXd> dense(schur);
  if (dense.info() != Eigen::Success) {
    out.message = "dense Schur factorization failed";
    return out;
  }
  const Eigen::VectorXd delta_p = dense.solve(rhs_p);
  delta_m = mldlt.solve(blk.bm - blk.hmp * delta_p);
  out.delta.resize(dim);
  out.delta.head(np) = delta_p;
  out.delta.tail(nm) = delta_m;
  if (!finite(out.delta)) {
    out.message = "solution contains non-finite entries";
    return out;
  }
  out.success = true;
  return out;
}

// Damping escalation wrapper: starts at config damping, multiplies by 10 up
// to 1e6 until the factorization succeeds.
inline NormalSolveResult solve_normal_equations(const SparseSystem& sys, bool use_schur,
                                                double damping) {
  double lam = damping;
  while (true) {
    NormalSolveResult r = solve_normal_equations_once(sys, use_schur, lam);
    if (r.success) return r;
    const double next = lam == 0.0 ? 1e-6 : lam * 10.0;
    if (next > 1e6) {
      r.message += " (damping exhausted at " + std::to_string(lam) + ")";
      return r;
    }
    lam = next;
  }
}

struct SolveResult {
  std::vector<Pose2> poses;
  OccupancyMap map;
  HitMap hits;
  SolveReport report;
};

namespace detail {

inline void rebuild_hits(HitMap& hits, std::span<const Pose2> poses,
                         std::span<const SampleSet> samples) {
  hits.counts().setZero();
  const GridGeometry& geom = hits.geometry();
  const double inv_s = 1.0 / geom.resolution();
  const double ou = geom.origin().x() * inv_s;
  const double ov = geom.origin().y() * inv_s;
  for (std::size_t i = 0; i < poses.size(); ++i) {
    const Eigen::Matrix2d rt = poses[i].rotation().transpose();
    const Eigen::Vector2d& t = poses[i].t;
    for (const Eigen::Vector2d& q : samples[i].points) {
      const Eigen::Vector2d w = rt * q + t;
      const GridPoint p{w.x() * inv_s - ou, w.y() * inv_s - ov};
      if (!geom.contains(p)) continue;
      const BilinearWeights bw = bilinear_weights(geom, p);
      for (int k = 0; k < 4; ++k) hits.counts()[bw.vertex[k]] += bw.weight[k];
    }
  }
}

}  // namespace detail

// The Gauss-Newton variant: iterate {evaluate with frozen N, solve the normal
// equations, update poses and map, rebuild the hit map from the new poses}.
// Pose 0 is the coordinate frame and never changes. The map lattice is fixed
// for the whole solve. Mask arguments carry the second-stage restriction:
// vertex_slot maps lattice vertices to live variables, grad_mask zeroes
// gradients at vertices outside the state.
inline SolveResult solve_masked(std::vector<Pose2> poses, std::span<const SampleSet> samples,
                                OccupancyMap map, HitMap hits,
                                const SmoothingStructure& smoothing,
                                std::span<const OdometryEdge> odometry, const SolveConfig& config,
                                const std::vector<std::int32_t>* vertex_slot,
                                const std::vector<std::int32_t>* slot_vertex) {
  const auto t_start = std::chrono::steady_clock::now();
  if (poses.size() < 1 || poses.size() != samples.size())
    throw std::invalid_argument("solve: need aligned poses and sample sets");
  if (config.max_iterations < 1) throw std::invalid_argument("solve: max_iterations must be >= 1");
  if (!(config.step_norm_threshold > 0.0))
    throw std::invalid_argument("solve: step_norm_threshold must be > 0");
  if (!odometry.empty() && odometry.size() != poses.size() - 1)
    throw std::invalid_argument("solve: need one odometry edge per consecutive pose pair");

  const GridGeometry& geom = map.geometry();
  StateLayout layout;
  layout.pose_count = static_cast<int>(poses.size());
  layout.map_dim = vertex_slot ? static_cast<int>(slot_vertex->size()) : geom.vertex_count();

  Weights weights = config.weights;
  if (odometry.empty()) weights.w_o = 0.0;

  SolveReport report;
  double lambda = config.damping;

  for (int k = 0; k < config.max_iterations; ++k) {
    Eigen::MatrixX2d grads = vertex_gradients(geom, map.values());
    if (vertex_slot) {
      for (Eigen::Index v = 0; v < grads.rows(); ++v)
        if ((*vertex_slot)[v] < 0) grads.row(v).setZero();
    }

    SystemAccumulator acc(layout, weights);
    for (std::size_t i = 0; i < poses.size(); ++i) {
      acc.add(observation_residuals(poses[i], static_cast<int>(i), samples[i], geom, map.values(),
                                    hits.counts(), grads, layout, config.observation,
                                    vertex_slot));
    }
    if (!odometry.empty()) acc.add(odometry_residuals(poses, odometry, layout));
    acc.add(smoothing.evaluate(map.values(), layout));
    SparseSystem sys = acc.finalize();

    NormalSolveResult step = solve_normal_equations(sys, config.use_schur, lambda);
    if (!step.success) {
      throw std::runtime_error("solve: normal equations unsolvable at iteration " +
                               std::to_string(k) + ": " + step.message);
    }
    if (step.damping_used > lambda) {
      report.damping_escalated = true;
      lambda = step.damping_used;
    }

    // apply the update
    for (std::size_t i = 1; i < poses.size(); ++i) {
      const int c = layout.pose_col(static_cast<int>(i), 0);
      poses[i].t.x() += step.delta[c];
      poses[i].t.y() += step.delta[c + 1];
      poses[i].theta = wrap_angle(poses[i].theta + step.delta[c + 2]);
    }
    if (vertex_slot) {
      for (int j = 0; j < layout.map_dim; ++j)
        map.values()[(*slot_vertex)[j]] += step.delta[layout.pose_vars() + j];
    } else {
      map.values() += step.delta.tail(layout.map_dim);
    }

    detail::rebuild_hits(hits, poses, samples);

    IterationRecord rec;
    rec.k = k;
    rec.f = sys.objective;
    rec.f_z = sys.f_z;
    rec.f_o = sys.f_o;
    rec.f_s = sys.f_s;
    rec.step_pose_norm = step.delta.head(layout.pose_vars()).norm();
    rec.step_map_norm = step.delta.tail(layout.map_dim).norm();
    rec.dropped = sys.dropped;
    rec.damping_used = step.damping_used;
    report.iterations.push_back(rec);
    report.total_dropped += sys.dropped;
    report.final_step_squared = step.delta.squaredNorm();
    if (report.final_step_squared < config.step_norm_threshold) {
      report.converged = true;
      break;
    }
  }

  // final objective at the returned state
  {
    Eigen::MatrixX2d grads = vertex_gradients(geom, map.values());
    SystemAccumulator acc(layout, weights);
    for (std::size_t i = 0; i < poses.size(); ++i) {
      acc.add(observation_residuals(poses[i], static_cast<int>(i), samples[i], geom, map.values(),
                                    hits.counts(), grads, layout, config.observation,
                                    vertex_slot));
    }
    if (!odometry.empty()) acc.add(odometry_residuals(poses, odometry, layout));
    acc.add(smoothing.evaluate(map.values(), layout));
    SparseSystem sys = acc.finalize();
    report.final_objective = sys.objective;
    report.final_f_z = sys.f_z;
    report.final_f_o = sys.f_o;
    report.final_f_s = sys.f_s;
  }

  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return {std::move(poses), std::move(map), std::move(hits), std::move(report)};
}

// Full joint solve: initializes the map and hit map from the initial poses,
// then runs the iteration over the complete vertex lattice.
inline SolveResult solve(std::vector<Pose2> poses, std::span<const SampleSet> samples,
                         const GridGeometry& geometry, std::span<const OdometryEdge> odometry,
                         const SolveConfig& config) {
  BuildMapResult init = build_map(poses, samples, geometry);
  SmoothingStructure smoothing = SmoothingStructure::build(geometry);
  return solve_masked(std::move(poses), samples, std::move(init.map), std::move(init.hits),
                      smoothing, odometry, config, nullptr, nullptr);
}

}  // namespace occslam
