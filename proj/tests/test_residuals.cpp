#include "occslam/residuals.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numbers>
#include <random>

#include "occslam/mapper.hpp"
#include "oracles.hpp"

using namespace occslam;
using Catch::Matchers::WithinAbs;

namespace {

struct Instance {
  GridGeometry geom = GridGeometry(1, 1, 1.0, Eigen::Vector2d::Zero());
  std::vector<Pose2> poses;
  std::vector<SampleSet> samples;
  Eigen::VectorXd map_values;
  Eigen::VectorXd hit_counts;
  StateLayout layout;
};

// Random aligned instance: random map, random positive hit field, samples
// whose projections stay inside the lattice.
Instance random_instance(std::uint64_t seed, int n_poses = 3, int per_pose = 6) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> mv(-1.5, 1.5);
  std::uniform_real_distribution<double> hv(0.5, 3.0);
  std::uniform_real_distribution<double> pt(-0.15, 0.15);
  std::uniform_real_distribution<double> th(-0.3, 0.3);
  std::uniform_real_distribution<double> frac(0.15, 0.85);
  std::uniform_int_distribution<int> cell(1, 4);
  std::uniform_int_distribution<int> coin(0, 1);

  Instance in;
  in.geom = GridGeometry(6, 6, 0.5, Eigen::Vector2d(-1.5, -1.5));
  in.map_values.resize(in.geom.vertex_count());
  in.hit_counts.resize(in.geom.vertex_count());
  for (int i = 0; i < in.geom.vertex_count(); ++i) {
    in.map_values[i] = mv(gen);
    in.hit_counts[i] = hv(gen);
  }
  for (int i = 0; i < n_poses; ++i) {
    in.poses.emplace_back(pt(gen), pt(gen), th(gen));
    SampleSet set;
    set.beam_offsets = {0};
    for (int j = 0; j < per_pose; ++j) {
      // choose a target grid point in a cell interior, then pull it back to the robot frame
      const GridPoint target{cell(gen) + frac(gen), cell(gen) + frac(gen)};
      const Eigen::Vector2d world = in.geom.grid_to_world(target);
      const Eigen::Vector2d q = in.poses.back().to_local(world);
      set.points.push_back(q);
      const bool occ = coin(gen);
      set.logodds.push_back(occ ? std::log(0.7 / 0.3) : std::log(0.4 / 0.6));
      set.occupied.push_back(occ);
    }
    set.beam_offsets.push_back(per_pose);
    in.samples.push_back(std::move(set));
  }
  in.layout.pose_count = n_poses;
  in.layout.map_dim = in.geom.vertex_count();
  return in;
}

// Scalar model of one observation residual with a frozen hit value.
double residual_model(const Instance& in, const Pose2& pose, const Eigen::Vector2d& q, double z,
                      double frozen_n, const Eigen::VectorXd& map_values) {
  const double c = std::cos(pose.theta), sn = std::sin(pose.theta);
  const double wx = c * q.x() - sn * q.y() + pose.t.x();
  const double wy = sn * q.x() + c * q.y() + pose.t.y();
  const double u = (wx - in.geom.origin().x()) / in.geom.resolution();
  const double v = (wy - in.geom.origin().y()) / in.geom.resolution();
  std::vector<double> flat(map_values.data(), map_values.data() + map_values.size());
  return z - oracle::bilinear(flat, in.geom.cols(), in.geom.rows(), u, v) / frozen_n;
}

double frozen_hit(const Instance& in, const Pose2& pose, const Eigen::Vector2d& q) {
  const Eigen::Vector2d w = pose.to_world(q);
  std::vector<double> flat(in.hit_counts.data(), in.hit_counts.data() + in.hit_counts.size());
  return oracle::bilinear(flat, in.geom.cols(), in.geom.rows(),
                          (w.x() - in.geom.origin().x()) / in.geom.resolution(),
                          (w.y() - in.geom.origin().y()) / in.geom.resolution());
}

}  // namespace

TEST_CASE("observation residuals vanish when the map is built from the same samples") {
  // samples exactly on vertices: M/N collapses to z there
  const GridGeometry g(4, 4, 0.1, Eigen::Vector2d::Zero());
  SampleSet set;
  set.beam_offsets = {0};
  const double z_occ = std::log(0.7 / 0.3);
  set.points = {{0.1, 0.2}, {0.3, 0.3}, {0.1, 0.2}};
  set.logodds = {z_occ, z_occ, z_occ};
  set.occupied = {1, 1, 1};
  set.beam_offsets.push_back(3);
  const std::vector<Pose2> poses = {Pose2()};
  const std::vector<SampleSet> samples = {set};
  const BuildMapResult built = build_map(poses, samples, g);
  StateLayout layout{1, g.vertex_count()};
  const Eigen::MatrixX2d grads = vertex_gradients(built.map);
  const ResidualBlock block = observation_residuals(poses, samples, built.map, built.hits, grads, layout);
  REQUIRE(block.values.size() == 3);
  CHECK_THAT(block.values.cwiseAbs().maxCoeff(), WithinAbs(0.0, 1e-12));
}

TEST_CASE("the observation residual is affine in the map with slope -w/N") {
  Instance in = random_instance(100, 1, 1);
  const Eigen::MatrixX2d grads = vertex_gradients(in.geom, in.map_values);
  const ResidualBlock base = observation_residuals(
      in.poses[0], 0, in.samples[0], in.geom, in.map_values, in.hit_counts, grads, in.layout);
  REQUIRE(base.values.size() == 1);
  // perturb the vertex with the largest weight
  const Eigen::Vector2d w = in.poses[0].to_world(in.samples[0].points[0]);
  const GridPoint p = in.geom.world_to_grid(w);
  const BilinearWeights bw = bilinear_weights(in.geom, p);
  const double n = frozen_hit(in, in.poses[0], in.samples[0].points[0]);
  const double delta = 0.37;
  Eigen::VectorXd perturbed = in.map_values;
  perturbed[bw.vertex[2]] += delta;
  const ResidualBlock shifted = observation_residuals(
      in.poses[0], 0, in.samples[0], in.geom, perturbed, in.hit_counts, grads, in.layout);
  CHECK_THAT(shifted.values[0] - base.values[0], WithinAbs(-bw.weight[2] * delta / n, 1e-12));
}

TEST_CASE("map jacobian entries are independent of the map point (affine term)") {
  Instance in = random_instance(101);
  const Eigen::MatrixX2d grads = vertex_gradients(in.geom, in.map_values);
  Eigen::VectorXd other = in.map_values * 2.0;
  other.array() += 0.3;
  StateLayout layout = in.layout;
  const ResidualBlock a = observation_residuals(in.poses[1], 1, in.samples[1], in.geom,
                                                in.map_values, in.hit_counts, grads, layout);
  const ResidualBlock b = observation_residuals(in.poses[1], 1, in.samples[1], in.geom, other,
                                                in.hit_counts, grads, layout);
  REQUIRE(a.jacobian.size() == b.jacobian.size());
  for (std::size_t k = 0; k < a.jacobian.size(); ++k) {
    if (a.jacobian[k].col() >= layout.pose_vars()) {
      CHECK(a.jacobian[k].col() == b.jacobian[k].col());
      CHECK(a.jacobian[k].value() == b.jacobian[k].value());
    }
  }
}

TEST_CASE("map jacobian matches finite differences of the residual") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Instance in = random_instance(200 + seed);
    const Eigen::MatrixX2d grads = vertex_gradients(in.geom, in.map_values);
    const int pose_idx = 1;
    const ResidualBlock block =
        observation_residuals(in.poses[pose_idx], pose_idx, in.samples[pose_idx], in.geom,
                              in.map_values, in.hit_counts, grads, in.layout);
    // FD on the first sample's residual w.r.t. every map value it touches
    const Eigen::Vector2d& q = in.samples[pose_idx].points[0];
    const double n = frozen_hit(in, in.poses[pose_idx], q);
    const double z = in.samples[pose_idx].logodds[0];
    const double step = 1e-6;
    for (const auto& t : block.jacobian) {
      if (t.row() != 0 || t.col() < in.layout.pose_vars()) continue;
      const int vertex = t.col() - in.layout.pose_vars();
      Eigen::VectorXd vp = in.map_values, vm = in.map_values;
      vp[vertex] += step;
      vm[vertex] -= step;
      const double fd = (residual_model(in, in.poses[pose_idx], q, z, n, vp) -
                         residual_model(in, in.poses[pose_idx], q, z, n, vm)) /
                        (2 * step);
      CHECK_THAT(t.value(), WithinAbs(fd, 1e-5 * std::max(1.0, std::abs(fd))));
    }
  }
}

TEST_CASE("pose jacobian in exact-surface mode matches finite differences") {
  ObservationParams params;
  params.gradient_model = GradientModel::kExactSurface;
  int checked = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Instance in = random_instance(300 + seed, 2, 3);
    const Eigen::MatrixX2d grads = vertex_gradients(in.geom, in.map_values);
    const int pose_idx = 1;
    const ResidualBlock block =
        observation_residuals(in.poses[pose_idx], pose_idx, in.samples[pose_idx], in.geom,
                              in.map_values, in.hit_counts, grads, in.layout, params);
    REQUIRE(block.values.size() == 3);
    const double step = 1e-7;
    for (int j = 0; j < 3; ++j) {
      const Eigen::Vector2d& q = in.samples[pose_idx].points[j];
      const double n = frozen_hit(in, in.poses[pose_idx], q);
      const double z = in.samples[pose_idx].logodds[j];
      Eigen::Vector3d jac = Eigen::Vector3d::Zero();
      for (const auto& t : block.jacobian) {
        if (t.row() == j && t.col() < in.layout.pose_vars())
          jac[t.col() - in.layout.pose_col(pose_idx, 0)] = t.value();
      }
      for (int k = 0; k < 3; ++k) {
        Pose2 pp = in.poses[pose_idx], pm = in.poses[pose_idx];
        if (k < 2) {
          pp.t[k] += step;
          pm.t[k] -= step;
        } else {
          pp.theta += step;
          pm.theta -= step;
        }
        const double fd = (residual_model(in, pp, q, z, n, in.map_values) -
                           residual_model(in, pm, q, z, n, in.map_values)) /
                          (2 * step);
        CHECK_THAT(jac[k], WithinAbs(fd, 1e-5 * std::max(1.0, std::abs(fd))));
        ++checked;
      }
    }
  }
  CHECK(checked == 900);
}

TEST_CASE("blended and exact gradients agree on a globally linear map") {
  Instance in = random_instance(400, 2, 4);
  for (int v = 0; v < in.geom.vertex_rows(); ++v)
    for (int u = 0; u < in.geom.vertex_cols(); ++u)
      in.map_values[in.geom.vertex_index(u, v)] = 0.7 * u - 0.4 * v + 0.2;
  const Eigen::MatrixX2d grads = vertex_gradients(in.geom, in.map_values);
  ObservationParams blended;
  ObservationParams exact;
  exact.gradient_model = GradientModel::kExactSurface;
  const ResidualBlock a = observation_residuals(in.poses[1], 1, in.samples[1], in.geom,
                                                in.map_values, in.hit_counts, grads, in.layout,
                                                blended);
  const ResidualBlock b = observation_residuals(in.poses[1], 1, in.samples[1], in.geom,
                                                in.map_values, in.hit_counts, grads, in.layout,
                                                exact);
  REQUIRE(a.jacobian.size() == b.jacobian.size());
  for (std::size_t k = 0; k < a.jacobian.size(); ++k)
    CHECK_THAT(a.jacobian[k].value(), WithinAbs(b.jacobian[k].value(), 1e-12));
}

TEST_CASE("samples in unobserved regions are dropped with a counter") {
  Instance in = random_instance(500, 1, 4);
  in.hit_counts.setZero();
  const Eigen::MatrixX2d grads = vertex_gradients(in.geom, in.map_values);
  const ResidualBlock block = observation_residuals(
      in.poses[0], 0, in.samples[0], in.geom, in.map_values, in.hit_counts, grads, in.layout);
  CHECK(block.values.size() == 0);
  CHECK(block.dropped == 4);
}

TEST_CASE("odometry residuals vanish on an integrated chain") {
  std::mt19937_64 gen(60);
  std::uniform_real_distribution<double> d(-0.5, 0.5);
  std::vector<OdometryEdge> edges(4);
  for (auto& e : edges) {
    e.dt = {d(gen), d(gen)};
    e.dtheta = d(gen);
  }
  const auto poses = integrate_odometry(Pose2(), edges);
  StateLayout layout{static_cast<int>(poses.size()), 0};
  const ResidualBlock block = odometry_residuals(poses, edges, layout);
  CHECK_THAT(block.values.cwiseAbs().maxCoeff(), WithinAbs(0.0, 1e-12));
}

TEST_CASE("the rotation residual crosses the pi seam smoothly") {
  std::vector<Pose2> poses = {Pose2(0, 0, 3.1), Pose2(0.1, 0, -3.0)};
  std::vector<OdometryEdge> edges(1);
  edges[0].dtheta = 0.2;
  edges[0].dt = poses[0].rotation() * (poses[1].t - poses[0].t);
  StateLayout layout{2, 0};
  const ResidualBlock block = odometry_residuals(poses, edges, layout);
  CHECK_THAT(block.values[2], WithinAbs(0.016814692820414, 1e-12));
  CHECK_THAT(block.values.head<2>().cwiseAbs().maxCoeff(), WithinAbs(0.0, 1e-12));
}

TEST_CASE("odometry jacobian matches finite differences") {
  std::mt19937_64 gen(61);
  std::uniform_real_distribution<double> d(-0.8, 0.8);
  for (int rep = 0; rep < 100; ++rep) {
    std::vector<Pose2> poses = {Pose2(d(gen), d(gen), d(gen)), Pose2(d(gen), d(gen), d(gen)),
                                Pose2(d(gen), d(gen), d(gen))};
    std::vector<OdometryEdge> edges(2);
    for (auto& e : edges) {
      e.dt = {d(gen), d(gen)};
      e.dtheta = d(gen);
    }
    StateLayout layout{3, 0};
    const ResidualBlock block = odometry_residuals(poses, edges, layout);
    Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(6, 6);
    for (const auto& t : block.jacobian) jac(t.row(), t.col()) += t.value();
    const double step = 1e-7;
    for (int c = 0; c < 6; ++c) {
      std::vector<Pose2> pp = poses, pm = poses;
      const int pi = 1 + c / 3, k = c % 3;
      if (k < 2) {
        pp[pi].t[k] += step;
        pm[pi].t[k] -= step;
      } else {
        pp[pi].theta += step;
        pm[pi].theta -= step;
      }
      const ResidualBlock bp = odometry_residuals(pp, edges, layout);
      const ResidualBlock bm = odometry_residuals(pm, edges, layout);
      const Eigen::VectorXd fd = (bp.values - bm.values) / (2 * step);
      for (int r = 0; r < 6; ++r)
        CHECK_THAT(jac(r, c), WithinAbs(fd[r], 1e-6 * std::max(1.0, std::abs(fd[r]))));
    }
  }
}

TEST_CASE("smoothing structure counts and values") {
  SECTION("a single-cell lattice has 4 pairs") {
    const GridGeometry g(1, 1, 1.0, Eigen::Vector2d::Zero());
    CHECK(SmoothingStructure::build(g).row_count() == 4);
  }
  SECTION("row count is 2 cw ch + cw + ch") {
    for (auto [cw, ch] : {std::pair{3, 5}, {7, 2}, {1, 9}}) {
      const GridGeometry g(cw, ch, 1.0, Eigen::Vector2d::Zero());
      CHECK(SmoothingStructure::build(g).row_count() == 2 * cw * ch + cw + ch);
    }
  }
  SECTION("a constant map has zero smoothing residual") {
    const GridGeometry g(4, 3, 1.0, Eigen::Vector2d::Zero());
    const SmoothingStructure s = SmoothingStructure::build(g);
    StateLayout layout{1, g.vertex_count()};
    const ResidualBlock block = s.evaluate(Eigen::VectorXd::Constant(g.vertex_count(), 2.5), layout);
    CHECK(block.values.cwiseAbs().maxCoeff() == 0.0);
  }
  SECTION("a ramp M = w gives -1 on horizontal pairs and 0 on vertical pairs") {
    const GridGeometry g(4, 3, 1.0, Eigen::Vector2d::Zero());
    const SmoothingStructure s = SmoothingStructure::build(g);
    Eigen::VectorXd vals(g.vertex_count());
    for (int v = 0; v < g.vertex_rows(); ++v)
      for (int u = 0; u < g.vertex_cols(); ++u) vals[g.vertex_index(u, v)] = u;
    StateLayout layout{1, g.vertex_count()};
    const ResidualBlock block = s.evaluate(vals, layout);
    for (std::size_t i = 0; i < s.pairs().size(); ++i) {
      const auto& p = s.pairs()[i];
      const bool horizontal = (p.vertex_b - p.vertex_a) == 1;
      CHECK_THAT(block.values[static_cast<Eigen::Index>(i)],
                 WithinAbs(horizontal ? -1.0 : 0.0, 1e-15));
    }
  }
  SECTION("the residual vector equals A x for random maps") {
    const GridGeometry g(5, 4, 1.0, Eigen::Vector2d::Zero());
    const SmoothingStructure s = SmoothingStructure::build(g);
    StateLayout layout{1, g.vertex_count()};
    std::mt19937_64 gen(62);
    std::uniform_real_distribution<double> d(-2, 2);
    Eigen::VectorXd vals(g.vertex_count());
    for (int i = 0; i < g.vertex_count(); ++i) vals[i] = d(gen);
    const ResidualBlock block = s.evaluate(vals, layout);
    Eigen::SparseMatrix<double> a(s.row_count(), g.vertex_count());
    a.setFromTriplets(block.jacobian.begin(), block.jacobian.end());
    const Eigen::VectorXd ax = a * vals;
    CHECK_THAT((ax - block.values).cwiseAbs().maxCoeff(), WithinAbs(0.0, 1e-14));
  }
}

TEST_CASE("assembly reproduces the dense weighted system") {
  Instance in = random_instance(700, 3, 5);
  const Eigen::MatrixX2d grads = vertex_gradients(in.geom, in.map_values);
  std::vector<OdometryEdge> edges(2);
  std::mt19937_64 gen(63);
  std::uniform_real_distribution<double> d(-0.3, 0.3);
  for (auto& e : edges) {
    e.dt = {d(gen), d(gen)};
    e.dtheta = d(gen);
    Eigen::Matrix3d m = Eigen::Matrix3d::Random() * 0.1;
    e.covariance = Eigen::Matrix3d::Identity() * 0.2 + m * m.transpose();
  }
  const SmoothingStructure smoothing = SmoothingStructure::build(in.geom);
  OccupancyMap map(in.geom, in.map_values);
  HitMap hits(in.geom);
  hits.counts() = in.hit_counts;

  std::vector<ResidualBlock> blocks;
  blocks.push_back(observation_residuals(in.poses, in.samples, map, hits, grads, in.layout));
  blocks.push_back(odometry_residuals(in.poses, edges, in.layout));
  blocks.push_back(smoothing.evaluate(in.map_values, in.layout));

  Weights weights{1.0, 0.7, 0.25};
  const SparseSystem sys = assemble(blocks, in.layout, weights);
  REQUIRE(sys.rows_retained);

  const int rows = static_cast<int>(sys.residuals.size());
  Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(rows, in.layout.dim());
  for (const auto& t : sys.jacobian) jac(t.row(), t.col()) += t.value();
  const Eigen::MatrixXd w = Eigen::MatrixXd(sys.weight);
  const Eigen::MatrixXd h = jac.transpose() * w * jac;
  const Eigen::VectorXd rhs = -jac.transpose() * w * sys.residuals;
  const double objective = sys.residuals.dot(w * sys.residuals);

  CHECK_THAT((sys.dense_normal() - h).cwiseAbs().maxCoeff(), WithinAbs(0.0, 1e-10));
  CHECK_THAT((sys.rhs - rhs).cwiseAbs().maxCoeff(), WithinAbs(0.0, 1e-10));
  CHECK_THAT(sys.objective, WithinAbs(objective, 1e-9));
  CHECK(sys.map_block_diagonal == false);
}

TEST_CASE("assembled objective of trivial systems") {
  StateLayout layout{1, 4};
  SECTION("no residuals gives objective zero") {
    const SparseSystem sys = assemble({}, layout, Weights{1, 1, 0.5});
    CHECK(sys.objective == 0.0);
  }
  SECTION("a single observation row gives w_z r^2") {
    ResidualBlock block;
    block.kind = BlockKind::kObservation;
    block.values = Eigen::VectorXd::Constant(1, 0.8);
    block.jacobian.emplace_back(0, 0, -0.5);
    std::vector<ResidualBlock> blocks = {block};
    const SparseSystem sys = assemble(blocks, layout, Weights{2.0, 0, 0});
    CHECK_THAT(sys.objective, WithinAbs(2.0 * 0.64, 1e-14));
  }
}

TEST_CASE("streamed accumulation equals one-shot assembly") {
  Instance in = random_instance(800, 3, 7);
  const Eigen::MatrixX2d grads = vertex_gradients(in.geom, in.map_values);
  const SmoothingStructure smoothing = SmoothingStructure::build(in.geom);
  Weights weights{1.0, 0.0, 0.1};

  std::vector<ResidualBlock> blocks;
  OccupancyMap map(in.geom, in.map_values);
  HitMap hits(in.geom);
  hits.counts() = in.hit_counts;
  blocks.push_back(observation_residuals(in.poses, in.samples, map, hits, grads, in.layout));
  blocks.push_back(smoothing.evaluate(in.map_values, in.layout));
  const SparseSystem whole = assemble(blocks, in.layout, weights);

  SystemAccumulator acc(in.layout, weights);
  for (std::size_t i = 0; i < in.poses.size(); ++i) {
    acc.add(observation_residuals(in.poses[i], static_cast<int>(i), in.samples[i], in.geom,
                                  in.map_values, in.hit_counts, grads, in.layout));
  }
  acc.add(smoothing.evaluate(in.map_values, in.layout));
  const SparseSystem streamed = acc.finalize();

  CHECK_THAT((whole.dense_normal() - streamed.dense_normal()).cwiseAbs().maxCoeff(),
             WithinAbs(0.0, 1e-12));
  CHECK_THAT((whole.rhs - streamed.rhs).cwiseAbs().maxCoeff(), WithinAbs(0.0, 1e-12));
  CHECK_THAT(whole.objective, WithinAbs(streamed.objective, 1e-12));
}

TEST_CASE("the objective is invariant under adding 2 pi to a pose angle") {
  Instance in = random_instance(900, 3, 6);
  const Eigen::MatrixX2d grads = vertex_gradients(in.geom, in.map_values);
  std::vector<OdometryEdge> edges(2);
  for (auto& e : edges) {
    e.dt = {0.05, -0.02};
    e.dtheta = 0.1;
  }
  const SmoothingStructure smoothing = SmoothingStructure::build(in.geom);
  Weights weights{1.0, 1.0, 0.2};

  auto objective_at = [&](const std::vector<Pose2>& poses) {
    SystemAccumulator acc(in.layout, weights);
    for (std::size_t i = 0; i < poses.size(); ++i)
      acc.add(observation_residuals(poses[i], static_cast<int>(i), in.samples[i], in.geom,
                                    in.map_values, in.hit_counts, grads, in.layout));
    acc.add(odometry_residuals(poses, edges, in.layout));
    acc.add(smoothing.evaluate(in.map_values, in.layout));
    return acc.finalize().objective;
  };

  const double f0 = objective_at(in.poses);
  std::vector<Pose2> shifted = in.poses;
  shifted[1].theta = shifted[1].theta + 2 * std::numbers::pi;  // wraps on construction? assign raw
  const double f1 = objective_at(shifted);
  CHECK_THAT(f0, WithinAbs(f1, 1e-9));
}
