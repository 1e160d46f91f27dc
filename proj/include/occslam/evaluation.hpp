#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <vector>

#include "occslam/mapper.hpp"
#include "occslam/pose2.hpp"

namespace occslam {

struct TimedPose {
  double timestamp = 0.0;
  Pose2 pose;
};

struct PoseErrors {
  double mae_trans = 0.0;
  double rmse_trans = 0.0;
  double mae_rot = 0.0;
  double rmse_rot = 0.0;
  int matched = 0;
};

// Absolute errors in the shared pose-0 frame (no alignment step). Pairs are
// matched by timestamp within the tolerance.
inline PoseErrors pose_errors(const std::vector<TimedPose>& estimate,
                              const std::vector<TimedPose>& ground_truth,
                              double time_tolerance = 1e-6) {
  PoseErrors out;
  double sum_t = 0, sum_t2 = 0, sum_r = 0, sum_r2 = 0;
  std::size_t j = 0;
  for (const TimedPose& e : estimate) {
    while (j < ground_truth.size() && ground_truth[j].timestamp < e.timestamp - time_tolerance) ++j;
    if (j == ground_truth.size()) break;
    if (std::abs(ground_truth[j].timestamp - e.timestamp) > time_tolerance) continue;
    const double dt = (e.pose.t - ground_truth[j].pose.t).norm();
    const double dr = std::abs(wrap_angle(e.pose.theta - ground_truth[j].pose.theta));
    sum_t += dt;
    sum_t2 += dt * dt;
    sum_r += dr;
    sum_r2 += dr * dr;
    ++out.matched;
  }
  if (out.matched == 0) throw std::runtime_error("pose_errors: no matching timestamps");
  out.mae_trans = sum_t / out.matched;
  out.rmse_trans = std::sqrt(sum_t2 / out.matched);
  out.mae_rot = sum_r / out.matched;
  out.rmse_rot = std::sqrt(sum_r2 / out.matched);
  return out;
}

struct ConfusionMatrix {
  // rows: ground-truth {unknown, free, occupied}; columns: predicted.
  // Row-normalized percentages; rows with no ground-truth members stay zero.
  Eigen::Matrix3d percent = Eigen::Matrix3d::Zero();
  Eigen::Matrix<long long, 3, 3> counts = Eigen::Matrix<long long, 3, 3>::Zero();
  double precision = 0.0;  // correct fraction over non-unknown ground truth
};

inline ConfusionMatrix map_confusion(const std::vector<CellLabel>& predicted,
                                     const std::vector<CellLabel>& ground_truth) {
  if (predicted.size() != ground_truth.size())
    throw std::invalid_argument("map_confusion: label grids differ in size");
  ConfusionMatrix out;
  for (std::size_t i = 0; i < predicted.size(); ++i)
    out.counts(static_cast<int>(ground_truth[i]), static_cast<int>(predicted[i])) += 1;
  for (int r = 0; r < 3; ++r) {
    const long long total = out.counts.row(r).sum();
    if (total > 0)
      for (int c = 0; c < 3; ++c)
        out.percent(r, c) = 100.0 * static_cast<double>(out.counts(r, c)) / static_cast<double>(total);
  }
  const long long non_unknown = out.counts.row(1).sum() + out.counts.row(2).sum();
  if (non_unknown > 0)
    out.precision =
        static_cast<double>(out.counts(1, 1) + out.counts(2, 2)) / static_cast<double>(non_unknown);
  return out;
}

// Rank-based AUC (Mann-Whitney) with ties counted half, occupied as the
// positive class. Unknown ground truth must be excluded by the caller.
// Returns nullopt when only one class is present.
inline std::optional<double> map_auc(const std::vector<double>& scores,
                                     const std::vector<int>& positive) {
  if (scores.size() != positive.size())
    throw std::invalid_argument("map_auc: scores/labels differ in size");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  long long n_pos = 0, n_neg = 0;
  for (int l : positive) (l ? n_pos : n_neg) += 1;
  if (n_pos == 0 || n_neg == 0) return std::nullopt;
  // average ranks over tie groups
  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
    for (std::size_t k = i; k <= j; ++k)
      if (positive[order[k]]) rank_sum_pos += avg_rank;
    i = j + 1;
  }
  const double u = rank_sum_pos - 0.5 * static_cast<double>(n_pos) * (n_pos + 1);
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

// AUC over vertices whose ground-truth label is not unknown.
inline std::optional<double> map_auc(const Eigen::VectorXd& predicted_logodds,
                                     const std::vector<CellLabel>& ground_truth) {
  std::vector<double> scores;
  std::vector<int> labels;
  for (std::size_t i = 0; i < ground_truth.size(); ++i) {
    if (ground_truth[i] == CellLabel::kUnknown) continue;
    scores.push_back(predicted_logodds[static_cast<Eigen::Index>(i)]);
    labels.push_back(ground_truth[i] == CellLabel::kOccupied ? 1 : 0);
  }
  return map_auc(scores, labels);
}

}  // namespace occslam
