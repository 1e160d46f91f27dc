#pragma once

#include <Eigen/Core>

#include <array>
#include <cmath>
#include <stdexcept>
#include <string>

namespace occslam {

// A position on the vertex lattice, in vertex units (world meters / resolution).
struct GridPoint {
  double u = 0.0;
  double v = 0.0;
};

// Vertex lattice over cols x rows cells: (cols+1) x (rows+1) vertices.
// origin is the world position (meters) of vertex (0,0). Vertex storage is
// row-major, v outer, u inner, so serialized maps are reproducible.
class GridGeometry {
 public:
  GridGeometry() = default;
  GridGeometry(int cols, int rows, double resolution, const Eigen::Vector2d& origin)
      : cols_(cols), rows_(rows), resolution_(resolution), origin_(origin) {
    if (cols < 1 || rows < 1 || !(resolution > 0.0)) {
      throw std::invalid_argument("GridGeometry: need cols >= 1, rows >= 1, resolution > 0");
    }
  }

  int cols() const { return cols_; }
  int rows() const { return rows_; }
  double resolution() const { return resolution_; }
  const Eigen::Vector2d& origin() const { return origin_; }

  int vertex_cols() const { return cols_ + 1; }
  int vertex_rows() const { return rows_ + 1; }
  int vertex_count() const { return vertex_cols() * vertex_rows(); }
  int cell_count() const { return cols_ * rows_; }

  int vertex_index(int u, int v) const { return v * vertex_cols() + u; }
  int cell_index(int w, int h) const { return h * cols_ + w; }

  bool contains(const GridPoint& p) const {
    return p.u >= 0.0 && p.u <= static_cast<double>(cols_) && p.v >= 0.0 &&
           p.v <= static_cast<double>(rows_) && std::isfinite(p.u) && std::isfinite(p.v);
  }

  GridPoint world_to_grid(const Eigen::Vector2d& world) const {
    return {(world.x() - origin_.x()) / resolution_, (world.y() - origin_.y()) / resolution_};
  }

  Eigen::Vector2d grid_to_world(const GridPoint& p) const {
    return origin_ + resolution_ * Eigen::Vector2d(p.u, p.v);
  }

  bool same_lattice(const GridGeometry& o) const {
    return cols_ == o.cols_ && rows_ == o.rows_ && resolution_ == o.resolution_ &&
           origin_ == o.origin_;
  }

 private:
  int cols_ = 1;
  int rows_ = 1;
  double resolution_ = 1.0;
  Eigen::Vector2d origin_ = Eigen::Vector2d::Zero();
};

inline void throw_out_of_bounds(const GridGeometry& g, const GridPoint& p) {
  throw std::out_of_range("grid point (" + std::to_string(p.u) + ", " + std::to_string(p.v) +
                          ") outside lattice [0," + std::to_string(g.cols()) + "]x[0," +
                          std::to_string(g.rows()) + "]");
}

// Interpolation footprint: the four vertices of the cell containing p, with
// weights [a1*b1, a0*b1, a1*b0, a0*b0] for vertices (w,h), (w+1,h), (w,h+1),
// (w+1,h+1) where a0 = u-w, b0 = v-h. Weights sum to 1.
struct BilinearWeights {
  std::array<int, 4> vertex;  // flat vertex indices
  std::array<double, 4> weight;
  int cell_w = 0;  // cell coordinates, w in [0, cols-1]
  int cell_h = 0;
  double a0 = 0.0;  // u - w
  double b0 = 0.0;  // v - h
};

inline BilinearWeights bilinear_weights(const GridGeometry& g, const GridPoint& p) {
  if (!g.contains(p)) throw_out_of_bounds(g, p);
  // Points on the far edges belong to the last cell so weights stay in [0,1].
  int w = static_cast<int>(std::floor(p.u));
  int h = static_cast<int>(std::floor(p.v));
  if (w > g.cols() - 1) w = g.cols() - 1;
  if (h > g.rows() - 1) h = g.rows() - 1;
  const double a0 = p.u - w;
  const double a1 = 1.0 - a0;
  const double b0 = p.v - h;
  const double b1 = 1.0 - b0;
  BilinearWeights out;
  out.vertex = {g.vertex_index(w, h), g.vertex_index(w + 1, h), g.vertex_index(w, h + 1),
                g.vertex_index(w + 1, h + 1)};
  out.weight = {a1 * b1, a0 * b1, a1 * b0, a0 * b0};
  out.cell_w = w;
  out.cell_h = h;
  out.a0 = a0;
  out.b0 = b0;
  return out;
}

// Log-odds occupancy evidence at grid vertices.
class OccupancyMap {
 public:
  OccupancyMap() = default;
  explicit OccupancyMap(const GridGeometry& geom)
      : geom_(geom), values_(Eigen::VectorXd::Zero(geom.vertex_count())) {}
  OccupancyMap(const GridGeometry& geom, Eigen::VectorXd values)
      : geom_(geom), values_(std::move(values)) {
    if (values_.size() != geom_.vertex_count()) {
      throw std::invalid_argument("OccupancyMap: value count does not match lattice");
    }
  }

  const GridGeometry& geometry() const { return geom_; }
  const Eigen::VectorXd& values() const { return values_; }
  Eigen::VectorXd& values() { return values_; }

  double lookup(const GridPoint& p) const {
    const BilinearWeights bw = bilinear_weights(geom_, p);
    double s = 0.0;
    for (int k = 0; k < 4; ++k) s += bw.weight[k] * values_[bw.vertex[k]];
    return s;
  }

 private:
  GridGeometry geom_;
  Eigen::VectorXd values_;
};

// Fractional per-vertex observation counts; rebuilt from the samples every
// solver iteration. Each scatter deposits total mass exactly 1.
class HitMap {
 public:
  HitMap() = default;
  explicit HitMap(const GridGeometry& geom)
      : geom_(geom), counts_(Eigen::VectorXd::Zero(geom.vertex_count())) {}

  const GridGeometry& geometry() const { return geom_; }
  const Eigen::VectorXd& counts() const { return counts_; }
  Eigen::VectorXd& counts() { return counts_; }

  void scatter(const GridPoint& p) {
    const BilinearWeights bw = bilinear_weights(geom_, p);
    for (int k = 0; k < 4; ++k) counts_[bw.vertex[k]] += bw.weight[k];
  }

  double lookup(const GridPoint& p) const {
    const BilinearWeights bw = bilinear_weights(geom_, p);
    double s = 0.0;
    for (int k = 0; k < 4; ++k) s += bw.weight[k] * counts_[bw.vertex[k]];
    return s;
  }

  double total() const { return counts_.sum(); }

 private:
  GridGeometry geom_;
  Eigen::VectorXd counts_;
};

// Per-vertex map gradient in vertex units: central differences in the
// interior, one-sided at the lattice border. Column 0 is d/du, column 1 d/dv.
inline Eigen::MatrixX2d vertex_gradients(const GridGeometry& g, const Eigen::VectorXd& values) {
  Eigen::MatrixX2d grads(g.vertex_count(), 2);
  const int vc = g.vertex_cols();
  const int vr = g.vertex_rows();
  for (int v = 0; v < vr; ++v) {
    for (int u = 0; u < vc; ++u) {
      const int i = g.vertex_index(u, v);
      double gx, gy;
      if (u == 0) {
        gx = values[g.vertex_index(u + 1, v)] - values[i];
      } else if (u == vc - 1) {
        gx = values[i] - values[g.vertex_index(u - 1, v)];
      } else {
        gx = 0.5 * (values[g.vertex_index(u + 1, v)] - values[g.vertex_index(u - 1, v)]);
      }
      if (v == 0) {
        gy = values[g.vertex_index(u, v + 1)] - values[i];
      } else if (v == vr - 1) {
        gy = values[i] - values[g.vertex_index(u, v - 1)];
      } else {
        gy = 0.5 * (values[g.vertex_index(u, v + 1)] - values[g.vertex_index(u, v - 1)]);
      }
      grads(i, 0) = gx;
      grads(i, 1) = gy;
    }
  }
  return grads;
}

inline Eigen::MatrixX2d vertex_gradients(const OccupancyMap& map) {
  return vertex_gradients(map.geometry(), map.values());
}

// Map gradient at p: bilinear blend of the four corner vertex gradients.
inline Eigen::Vector2d gradient_at(const GridGeometry& g, const Eigen::MatrixX2d& grads,
                                   const GridPoint& p) {
  const BilinearWeights bw = bilinear_weights(g, p);
  Eigen::Vector2d out = Eigen::Vector2d::Zero();
  for (int k = 0; k < 4; ++k) out += bw.weight[k] * grads.row(bw.vertex[k]).transpose();
  return out;
}

// Exact derivative of the bilinear surface inside the cell containing p.
// Discontinuous across cell edges; used where a finite-difference oracle of
// lookup() must be matched exactly.
inline Eigen::Vector2d surface_gradient_at(const GridGeometry& g, const Eigen::VectorXd& values,
                                           const GridPoint& p) {
  const BilinearWeights bw = bilinear_weights(g, p);
  const double m00 = values[bw.vertex[0]];
  const double m10 = values[bw.vertex[1]];
  const double m01 = values[bw.vertex[2]];
  const double m11 = values[bw.vertex[3]];
  const double b0 = bw.b0, b1 = 1.0 - bw.b0;
  const double a0 = bw.a0, a1 = 1.0 - bw.a0;
  return {b1 * (m10 - m00) + b0 * (m11 - m01), a1 * (m01 - m00) + a0 * (m11 - m10)};
}

}  // namespace occslam
