#pragma once

#include <Eigen/Core>
#include <Eigen/SparseCore>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "occslam/grid.hpp"
#include "occslam/observations.hpp"
#include "occslam/pose2.hpp"

namespace occslam {

// Term weights of the joint objective f = w_z f^Z + w_o f^O + w_s f^S.
// w_o is zero when there is no odometry.
struct Weights {
  double w_z = 1.0;
  double w_o = 1.0;
  double w_s = 0.0;
};

// Global state ordering: poses 1..n (pose 0 fixed, 3 variables each), then
// the live map variables. Fixed here so Jacobian triplets and the Schur split
// are well-defined.
struct StateLayout {
  int pose_count = 0;  // total poses including the fixed pose 0
  int map_dim = 0;     // number of live map variables

  int pose_vars() const { return 3 * (pose_count > 0 ? pose_count - 1 : 0); }
  int dim() const { return pose_vars() + map_dim; }
  int pose_col(int pose_index, int k) const { return 3 * (pose_index - 1) + k; }
  int map_col(int slot) const { return pose_vars() + slot; }
};

enum class BlockKind : std::uint8_t { kObservation, kOdometry, kSmoothing };

// How the map gradient entering J_P is evaluated. kBlendedVertex bilinearly
// blends per-vertex central-difference gradients (the solver's model);
// kExactSurface differentiates the bilinear surface itself, which is what a
// finite difference of the residual reproduces.
enum class GradientModel : std::uint8_t { kBlendedVertex, kExactSurface };

struct ResidualBlock {
  BlockKind kind = BlockKind::kObservation;
  Eigen::VectorXd values;
  // (row local to this block, global state column, d residual / d column),
  // grouped by row in ascending row order.
  std::vector<Eigen::Triplet<double>> jacobian;
  // Odometry only: Sigma^{-1} per edge, one per 3 rows.
  std::vector<Eigen::Matrix3d> edge_information;
  std::int64_t dropped = 0;
};

struct ObservationParams {
  double n_floor = 1e-6;  // samples with N(p) <= n_floor are dropped this iteration
  GradientModel gradient_model = GradientModel::kBlendedVertex;
};

// Observation term rows for one scan: residual z - M(p)/N(p) per retained
// sample, with N frozen at its current value. Pose Jacobian is
// -(1/N) * dM/dp * (1/s)[I | (R')^T q]; map Jacobian puts -w_k/N on the four
// surrounding vertex columns. `vertex_slot` remaps full-lattice vertex
// indices to live map variables (nullptr = identity); samples whose cell has
// an unselected corner are dropped.
inline ResidualBlock observation_residuals(const Pose2& pose, int pose_index,
                                           const SampleSet& set, const GridGeometry& geom,
                                           const Eigen::VectorXd& map_values,
                                           const Eigen::VectorXd& hit_counts,
                                           const Eigen::MatrixX2d& grads,
                                           const StateLayout& layout,
                                           const ObservationParams& params = {},
                                           const std::vector<std::int32_t>* vertex_slot = nullptr) {
  ResidualBlock block;
  block.kind = BlockKind::kObservation;
  std::vector<double> values;
  values.reserve(set.size());
  block.jacobian.reserve(set.size() * 7);

  const double s = geom.resolution();
  const double inv_s = 1.0 / s;
  const double ou = geom.origin().x() * inv_s;
  const double ov = geom.origin().y() * inv_s;
  const Eigen::Matrix2d rt = pose.rotation().transpose();
  const Eigen::Matrix2d rpt = rotation_matrix_derivative(pose.theta).transpose();
  const bool pose_free = pose_index >= 1;

  for (std::size_t j = 0; j < set.size(); ++j) {
    const Eigen::Vector2d& q = set.points[j];
    const Eigen::Vector2d w = rt * q + pose.t;
    const GridPoint p{w.x() * inv_s - ou, w.y() * inv_s - ov};
    if (!geom.contains(p)) {
      ++block.dropped;
      continue;
    }
    const BilinearWeights bw = bilinear_weights(geom, p);

    std::array<std::int32_t, 4> slot;
    bool live = true;
    for (int k = 0; k < 4; ++k) {
      slot[k] = vertex_slot ? (*vertex_slot)[bw.vertex[k]]
                            : static_cast<std::int32_t>(bw.vertex[k]);
      if (slot[k] < 0) live = false;
    }
    if (!live) {
      ++block.dropped;
      continue;
    }

    double n = 0.0, m = 0.0;
    for (int k = 0; k < 4; ++k) {
      n += bw.weight[k] * hit_counts[bw.vertex[k]];
      m += bw.weight[k] * map_values[bw.vertex[k]];
    }
    if (!(n > params.n_floor)) {
      ++block.dropped;
      continue;
    }
    const double inv_n = 1.0 / n;
    const int row = static_cast<int>(values.size());
    values.push_back(set.logodds[j] - m * inv_n);

    if (pose_free) {
      Eigen::Vector2d g;
      if (params.gradient_model == GradientModel::kBlendedVertex) {
        g.setZero();
        for (int k = 0; k < 4; ++k) g += bw.weight[k] * grads.row(bw.vertex[k]).transpose();
      } else {
        g = surface_gradient_at(geom, map_values, p);
      }
      // d residual / d pose = -(1/N) g^T dp/dpose, dp/dpose = (1/s)[I | (R')^T q].
      const Eigen::Vector2d dp_dtheta = rpt * q * inv_s;
      const double c = -inv_n;
      block.jacobian.emplace_back(row, layout.pose_col(pose_index, 0), c * g.x() * inv_s);
      block.jacobian.emplace_back(row, layout.pose_col(pose_index, 1), c * g.y() * inv_s);
      block.jacobian.emplace_back(row, layout.pose_col(pose_index, 2), c * g.dot(dp_dtheta));
    }
    for (int k = 0; k < 4; ++k) {
      block.jacobian.emplace_back(row, layout.map_col(slot[k]), -bw.weight[k] * inv_n);
    }
  }
  block.values = Eigen::Map<const Eigen::VectorXd>(values.data(), values.size());
  return block;
}

// Whole-trajectory convenience form (tests and small problems).
inline ResidualBlock observation_residuals(std::span<const Pose2> poses,
                                           std::span<const SampleSet> samples,
                                           const OccupancyMap& map, const HitMap& hits,
                                           const Eigen::MatrixX2d& grads,
                                           const StateLayout& layout,
                                           const ObservationParams& params = {},
                                           const std::vector<std::int32_t>* vertex_slot = nullptr) {
  if (poses.size() != samples.size())
    throw std::invalid_argument("observation_residuals: pose/sample count mismatch");
  ResidualBlock all;
  all.kind = BlockKind::kObservation;
  std::vector<double> values;
  for (std::size_t i = 0; i < poses.size(); ++i) {
    ResidualBlock one =
        observation_residuals(poses[i], static_cast<int>(i), samples[i], map.geometry(),
                              map.values(), hits.counts(), grads, layout, params, vertex_slot);
    const int offset = static_cast<int>(values.size());
    values.insert(values.end(), one.values.data(), one.values.data() + one.values.size());
    for (const auto& t : one.jacobian)
      all.jacobian.emplace_back(t.row() + offset, t.col(), t.value());
    all.dropped += one.dropped;
  }
  all.values = Eigen::Map<const Eigen::VectorXd>(values.data(), values.size());
  return all;
}

// Odometry term rows: [o_t - R_{i-1}(t_i - t_{i-1}); wrap(o_th - th_i + th_{i-1})]
// per edge, with the 3x6 Jacobian block of the appendix form (negated, since
// the rows here are measurement minus model). Pose 0 columns are omitted.
inline ResidualBlock odometry_residuals(std::span<const Pose2> poses,
                                        std::span<const OdometryEdge> edges,
                                        const StateLayout& layout) {
  if (!edges.empty() && edges.size() != poses.size() - 1)
    throw std::invalid_argument("odometry_residuals: need one edge per consecutive pose pair");
  ResidualBlock block;
  block.kind = BlockKind::kOdometry;
  block.values.resize(3 * static_cast<Eigen::Index>(edges.size()));
  block.edge_information.reserve(edges.size());
  for (std::size_t e = 0; e < edges.size(); ++e) {
    const Pose2& a = poses[e];      // pose i-1
    const Pose2& b = poses[e + 1];  // pose i
    const Eigen::Matrix2d r = rotation_matrix(a.theta);
    const Eigen::Matrix2d rp = rotation_matrix_derivative(a.theta);
    const Eigen::Vector2d dt = b.t - a.t;
    const int row = static_cast<int>(3 * e);
    block.values.segment<2>(row) = edges[e].dt - r * dt;
    block.values[row + 2] = wrap_angle(edges[e].dtheta - b.theta + a.theta);
    block.edge_information.push_back(edges[e].covariance.inverse());

    const int ia = static_cast<int>(e);      // index of pose i-1
    const int ib = static_cast<int>(e) + 1;  // index of pose i
    if (ia >= 1) {
      const Eigen::Vector2d dth = -(rp * dt);
      for (int rr = 0; rr < 2; ++rr) {
        block.jacobian.emplace_back(row + rr, layout.pose_col(ia, 0), r(rr, 0));
        block.jacobian.emplace_back(row + rr, layout.pose_col(ia, 1), r(rr, 1));
        block.jacobian.emplace_back(row + rr, layout.pose_col(ia, 2), dth[rr]);
      }
      block.jacobian.emplace_back(row + 2, layout.pose_col(ia, 2), 1.0);
    }
    for (int rr = 0; rr < 2; ++rr) {
      block.jacobian.emplace_back(row + rr, layout.pose_col(ib, 0), -r(rr, 0));
      block.jacobian.emplace_back(row + rr, layout.pose_col(ib, 1), -r(rr, 1));
    }
    block.jacobian.emplace_back(row + 2, layout.pose_col(ib, 2), -1.0);
  }
  return block;
}

// Smoothing term structure: one row per (vertex, right neighbor) and
// (vertex, below neighbor) pair, including the border row and column, per the
// objective's last two sums. The coefficient matrix has entries +1/-1 only
// and depends only on the geometry (and mask), so it is built once.
class SmoothingStructure {
 public:
  struct Pair {
    std::int32_t vertex_a = 0;  // full-lattice vertex indices; residual = M(a) - M(b)
    std::int32_t vertex_b = 0;
    std::int32_t col_a = 0;  // live map-variable slots
    std::int32_t col_b = 0;
  };

  static SmoothingStructure build(const GridGeometry& geom) {
    return build_masked(geom, nullptr);
  }

  // Only pairs with both vertices selected survive; slots index x^{sM}.
  static SmoothingStructure build_masked(const GridGeometry& geom,
                                         const std::vector<std::int32_t>* vertex_slot) {
    SmoothingStructure s;
    auto slot_of = [&](int vertex) -> std::int32_t {
      return vertex_slot ? (*vertex_slot)[vertex] : static_cast<std::int32_t>(vertex);
    };
    auto add_pair = [&](int ua, int va, int ub, int vb) {
      const int a = geom.vertex_index(ua, va);
      const int b = geom.vertex_index(ub, vb);
      const std::int32_t ca = slot_of(a), cb = slot_of(b);
      if (ca < 0 || cb < 0) return;
      s.pairs_.push_back({static_cast<std::int32_t>(a), static_cast<std::int32_t>(b), ca, cb});
    };
    for (int w = 0; w < geom.cols(); ++w) {
      for (int h = 0; h < geom.rows(); ++h) {
        add_pair(w, h, w + 1, h);  // right neighbor
        add_pair(w, h, w, h + 1);  // below neighbor
      }
    }
    for (int h = 0; h < geom.rows(); ++h) add_pair(geom.cols(), h, geom.cols(), h + 1);
    for (int w = 0; w < geom.cols(); ++w) add_pair(w, geom.rows(), w + 1, geom.rows());
    return s;
  }

  int row_count() const { return static_cast<int>(pairs_.size()); }
  const std::vector<Pair>& pairs() const { return pairs_; }

  // Residuals A x evaluated on the full-lattice value array.
  ResidualBlock evaluate(const Eigen::VectorXd& full_values, const StateLayout& layout) const {
    ResidualBlock block;
    block.kind = BlockKind::kSmoothing;
    block.values.resize(row_count());
    block.jacobian.reserve(pairs_.size() * 2);
    for (std::size_t i = 0; i < pairs_.size(); ++i) {
      const Pair& p = pairs_[i];
      block.values[static_cast<Eigen::Index>(i)] = full_values[p.vertex_a] - full_values[p.vertex_b];
      block.jacobian.emplace_back(static_cast<int>(i), layout.map_col(p.col_a), 1.0);
      block.jacobian.emplace_back(static_cast<int>(i), layout.map_col(p.col_b), -1.0);
    }
    return block;
  }

 private:
  std::vector<Pair> pairs_;
};

// Assembled Gauss-Newton system: lower triangle of J^T W J, the gradient
// -J^T W F, and the objective breakdown. Raw rows (J, W, F) are retained only
// when requested; large solves stream blocks through SystemAccumulator
// without materializing them.
struct SparseSystem {
  StateLayout layout;
  Eigen::SparseMatrix<double> normal;  // lower triangle, dim x dim
  Eigen::VectorXd rhs;
  double objective = 0.0;
  double f_z = 0.0, f_o = 0.0, f_s = 0.0;
  bool map_block_diagonal = true;
  std::int64_t dropped = 0;

  bool rows_retained = false;
  Eigen::VectorXd residuals;
  std::vector<Eigen::Triplet<double>> jacobian;  // global rows
  Eigen::SparseMatrix<double> weight;            // block-diagonal W

  Eigen::MatrixXd dense_normal() const {
    Eigen::MatrixXd h = Eigen::MatrixXd(normal);
    return h.selfadjointView<Eigen::Lower>();
  }
};

// Streams residual blocks into normal equations. Observation rows are folded
// with their structure (one pose block, one cell of four map columns, or a
// single map column) so memory stays proportional to the state and the
// touched cells rather than to the sample count.
class SystemAccumulator {
 public:
  SystemAccumulator(const StateLayout& layout, const Weights& weights, bool retain_rows = false)
      : layout_(layout),
        weights_(weights),
        retain_rows_(retain_rows),
        rhs_(Eigen::VectorXd::Zero(layout.dim())),
        hpp_(static_cast<std::size_t>(layout.pose_count > 0 ? layout.pose_count - 1 : 0),
             Eigen::Matrix3d::Zero()),
        hmm_diag_(Eigen::VectorXd::Zero(layout.map_dim)) {}

  void add(const ResidualBlock& block) {
    switch (block.kind) {
      case BlockKind::kObservation:
        add_observation(block);
        break;
      case BlockKind::kOdometry:
        add_odometry(block);
        break;
      case BlockKind::kSmoothing:
        add_smoothing(block);
        break;
    }
    dropped_ += block.dropped;
    if (retain_rows_) retain(block);
  }

  SparseSystem finalize() {
    SparseSystem sys;
    sys.layout = layout_;
    sys.rhs = rhs_;
    sys.f_z = f_z_;
    sys.f_o = f_o_;
    sys.f_s = f_s_;
    sys.objective = weights_.w_z * f_z_ + weights_.w_o * f_o_ + weights_.w_s * f_s_;
    sys.map_block_diagonal = !map_offdiag_;
    sys.dropped = dropped_;

    std::vector<Eigen::Triplet<double>> t = std::move(triplets_);
    t.reserve(t.size() + hpp_.size() * 6 + touched_cells_.size() * 10 +
              static_cast<std::size_t>(layout_.map_dim));
    const int np = layout_.pose_vars();
    for (std::size_t i = 0; i < hpp_.size(); ++i) {
      const int base = static_cast<int>(3 * i);
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c <= r; ++c)
          if (hpp_[i](r, c) != 0.0) t.emplace_back(base + r, base + c, hpp_[i](r, c));
    }
    std::sort(touched_cells_.begin(), touched_cells_.end());
    for (const std::int32_t cell : touched_cells_) {
      const CellBlock& cb = cells_.at(cell);
      for (int r = 0; r < 4; ++r)
        for (int c = 0; c <= r; ++c)
          t.emplace_back(np + cb.cols[r], np + cb.cols[c], cb.h(r, c));
    }
    for (int j = 0; j < layout_.map_dim; ++j)
      if (hmm_diag_[j] != 0.0) t.emplace_back(np + j, np + j, hmm_diag_[j]);

    sys.normal.resize(layout_.dim(), layout_.dim());
    sys.normal.setFromTriplets(t.begin(), t.end());

    if (retain_rows_) {
      sys.rows_retained = true;
      sys.residuals = Eigen::Map<const Eigen::VectorXd>(ret_residuals_.data(),
                                                        static_cast<Eigen::Index>(ret_residuals_.size()));
      sys.jacobian = std::move(ret_jacobian_);
      sys.weight.resize(static_cast<int>(ret_residuals_.size()),
                        static_cast<int>(ret_residuals_.size()));
      sys.weight.setFromTriplets(ret_weight_.begin(), ret_weight_.end());
    }
    return sys;
  }

 private:
  struct CellBlock {
    std::array<std::int32_t, 4> cols;
    Eigen::Matrix4d h = Eigen::Matrix4d::Zero();
  };

  static void check_finite(double v) {
    if (!std::isfinite(v)) throw std::runtime_error("residual block contains non-finite entry");
  }

  void add_observation(const ResidualBlock& block) {
    const double w = weights_.w_z;
    const auto& jac = block.jacobian;
    std::size_t k = 0;
    for (Eigen::Index row = 0; row < block.values.size(); ++row) {
      const double r = block.values[row];
      check_finite(r);
      f_z_ += r * r;

      // Gather this row: up to 3 pose columns then 1 or 4 map columns.
      std::array<int, 3> pcol{};
      std::array<double, 3> pval{};
      int npc = 0;
      std::array<int, 4> mcol{};
      std::array<double, 4> mval{};
      int nmc = 0;
      for (; k < jac.size() && jac[k].row() == row; ++k) {
        const int col = jac[k].col();
        const double v = jac[k].value();
        check_finite(v);
        if (col < 0 || col >= layout_.dim())
          throw std::runtime_error("jacobian column out of range");
        if (col < layout_.pose_vars()) {
          pcol[npc] = col;
          pval[npc++] = v;
        } else {
          if (nmc == 4) throw std::runtime_error("observation row touches more than 4 map columns");
          mcol[nmc] = col - layout_.pose_vars();
          mval[nmc++] = v;
        }
      }
      for (int a = 0; a < npc; ++a) rhs_[pcol[a]] -= w * pval[a] * r;
      for (int a = 0; a < nmc; ++a) rhs_[layout_.pose_vars() + mcol[a]] -= w * mval[a] * r;

      if (npc > 0) {
        const int pose_idx = pcol[0] / 3;
        Eigen::Matrix3d& hpp = hpp_[pose_idx];
        for (int a = 0; a < npc; ++a)
          for (int b = 0; b <= a; ++b) hpp(pcol[a] - 3 * pose_idx, pcol[b] - 3 * pose_idx) += w * pval[a] * pval[b];
        // pose-map coupling, aggregated per (pose, cell) within this block
        if (nmc > 0) {
          PmKey key{pose_idx, mcol[0]};
          PmBlock& pm = pm_scratch_[key];
          if (pm.count == 0) {
            pm.ncols = nmc;
            for (int a = 0; a < nmc; ++a) pm.cols[a] = mcol[a];
          }
          ++pm.count;
          for (int a = 0; a < nmc; ++a)
            for (int b = 0; b < npc; ++b) pm.h(b, a) += w * pval[b] * mval[a];
        }
      }
      if (nmc == 1) {
        hmm_diag_[mcol[0]] += w * mval[0] * mval[0];
      } else if (nmc > 1) {
        map_offdiag_ = true;
        auto [it, inserted] = cells_.try_emplace(mcol[0]);
        CellBlock& cb = it->second;
        if (inserted) {
          touched_cells_.push_back(mcol[0]);
          cb.cols = {mcol[0], mcol[1], mcol[2], mcol[3]};
        }
        for (int a = 0; a < nmc; ++a)
          for (int b = 0; b < nmc; ++b) cb.h(a, b) += w * mval[a] * mval[b];
      }
    }
    flush_pm_scratch();
  }

  void flush_pm_scratch() {
    if (pm_scratch_.empty()) return;
    std::vector<std::pair<PmKey, PmBlock>> sorted(pm_scratch_.begin(), pm_scratch_.end());
    std::sort(sorted.begin(), sorted.end(),
              [](const auto& a, const auto& b) { return a.first.key() < b.first.key(); });
    for (const auto& [key, pm] : sorted) {
      for (int a = 0; a < pm.ncols; ++a) {
        const int col_state = layout_.pose_vars() + pm.cols[a];
        for (int b = 0; b < 3; ++b) {
          if (pm.h(b, a) != 0.0) triplets_.emplace_back(col_state, 3 * key.pose + b, pm.h(b, a));
        }
      }
    }
    pm_scratch_.clear();
  }

  void add_odometry(const ResidualBlock& block) {
    const auto& jac = block.jacobian;
    std::size_t k = 0;
    const int edges = static_cast<int>(block.values.size() / 3);
    for (int e = 0; e < edges; ++e) {
      const Eigen::Vector3d r = block.values.segment<3>(3 * e);
      for (int i = 0; i < 3; ++i) check_finite(r[i]);
      const Eigen::Matrix3d& info = block.edge_information[e];
      f_o_ += r.dot(info * r);

      // Gather the 3 rows of this edge over their column union (<= 6 columns).
      std::array<int, 6> cols{};
      int ncols = 0;
      Eigen::Matrix<double, 3, 6> j = Eigen::Matrix<double, 3, 6>::Zero();
      for (; k < jac.size() && jac[k].row() < 3 * (e + 1); ++k) {
        check_finite(jac[k].value());
        const int col = jac[k].col();
        if (col < 0 || col >= layout_.dim())
          throw std::runtime_error("jacobian column out of range");
        int slot = -1;
        for (int c = 0; c < ncols; ++c)
          if (cols[c] == col) slot = c;
        if (slot < 0) {
          if (ncols == 6) throw std::runtime_error("odometry edge touches more than 6 columns");
          cols[ncols] = col;
          slot = ncols++;
        }
        j(jac[k].row() - 3 * e, slot) += jac[k].value();
      }
      const Eigen::Matrix<double, 3, 6> wj = weights_.w_o * (info * j);
      const Eigen::Matrix<double, 6, 6> h = j.transpose() * wj;
      const Eigen::Matrix<double, 6, 1> g = wj.transpose() * r;
      for (int a = 0; a < ncols; ++a) {
        rhs_[cols[a]] -= g[a];
        for (int b = 0; b < ncols; ++b) {
          if (cols[a] >= cols[b] && h(a, b) != 0.0) triplets_.emplace_back(cols[a], cols[b], h(a, b));
        }
      }
    }
  }

  void add_smoothing(const ResidualBlock& block) {
    const double w = weights_.w_s;
    const auto& jac = block.jacobian;
    std::size_t k = 0;
    for (Eigen::Index row = 0; row < block.values.size(); ++row) {
      const double r = block.values[row];
      check_finite(r);
      f_s_ += r * r;
      std::array<int, 2> cols{};
      std::array<double, 2> vals{};
      int n = 0;
      for (; k < jac.size() && jac[k].row() == row; ++k) {
        if (n == 2) throw std::runtime_error("smoothing row must touch exactly 2 columns");
        cols[n] = jac[k].col();
        vals[n++] = jac[k].value();
      }
      for (int a = 0; a < n; ++a) rhs_[cols[a]] -= w * vals[a] * r;
      for (int a = 0; a < n; ++a)
        for (int b = 0; b < n; ++b)
          if (cols[a] >= cols[b]) triplets_.emplace_back(cols[a], cols[b], w * vals[a] * vals[b]);
      if (n == 2) map_offdiag_ = true;
    }
  }

  void retain(const ResidualBlock& block) {
    const int row0 = static_cast<int>(ret_residuals_.size());
    ret_residuals_.insert(ret_residuals_.end(), block.values.data(),
                          block.values.data() + block.values.size());
    for (const auto& t : block.jacobian)
      ret_jacobian_.emplace_back(t.row() + row0, t.col(), t.value());
    if (block.kind == BlockKind::kOdometry) {
      for (std::size_t e = 0; e < block.edge_information.size(); ++e) {
        const Eigen::Matrix3d wi = weights_.w_o * block.edge_information[e];
        for (int a = 0; a < 3; ++a)
          for (int b = 0; b < 3; ++b)
            ret_weight_.emplace_back(row0 + static_cast<int>(3 * e) + a,
                                     row0 + static_cast<int>(3 * e) + b, wi(a, b));
      }
    } else {
      const double w = block.kind == BlockKind::kObservation ? weights_.w_z : weights_.w_s;
      for (Eigen::Index i = 0; i < block.values.size(); ++i)
        ret_weight_.emplace_back(row0 + static_cast<int>(i), row0 + static_cast<int>(i), w);
    }
  }

  struct PmKey {
    int pose;
    int cell;
    bool operator==(const PmKey& o) const { return pose == o.pose && cell == o.cell; }
    std::uint64_t key() const {
      return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(pose)) << 32) |
             static_cast<std::uint32_t>(cell);
    }
  };
  struct PmKeyHash {
    std::size_t operator()(const PmKey& k) const { return std::hash<std::uint64_t>()(k.key()); }
  };
  struct PmBlock {
    Eigen::Matrix<double, 3, 4> h = Eigen::Matrix<double, 3, 4>::Zero();
    std::array<std::int32_t, 4> cols{};
    int ncols = 0;
    int count = 0;
  };

  StateLayout layout_;
  Weights weights_;
  bool retain_rows_ = false;

  Eigen::VectorXd rhs_;
  std::vector<Eigen::Matrix3d> hpp_;
  Eigen::VectorXd hmm_diag_;
  std::unordered_map<std::int32_t, CellBlock> cells_;
  std::vector<std::int32_t> touched_cells_;
  std::unordered_map<PmKey, PmBlock, PmKeyHash> pm_scratch_;
  std::vector<Eigen::Triplet<double>> triplets_;
  bool map_offdiag_ = false;

  double f_z_ = 0.0, f_o_ = 0.0, f_s_ = 0.0;
  std::int64_t dropped_ = 0;

  std::vector<double> ret_residuals_;
  std::vector<Eigen::Triplet<double>> ret_jacobian_;
  std::vector<Eigen::Triplet<double>> ret_weight_;
};

// Stacks blocks into one weighted system, retaining the raw rows.
inline SparseSystem assemble(std::span<const ResidualBlock> blocks, const StateLayout& layout,
                             const Weights& weights) {
  SystemAccumulator acc(layout, weights, /*retain_rows=*/true);
  for (const ResidualBlock& b : blocks) acc.add(b);
  return acc.finalize();
}

}  // namespace occslam
