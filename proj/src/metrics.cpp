// SPDX-License-Identifier: Apache-2.0
#include "gkd/metrics.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <numeric>

namespace gkd::metrics {

ConfusionCounts& ConfusionCounts::operator+=(const ConfusionCounts& o) {
  tp += o.tp;
  fp += o.fp;
  fn += o.fn;
  tn += o.tn;
  return *this;
}

ConfusionCounts count_confusion(const Tensor& prediction, const Tensor& mask,
                                double threshold) {
  check_same_shape(prediction, mask, "count_confusion");
  check_param(prediction.size() > 0, "count_confusion: empty input");
  check_param(((mask.array() == 0.0) || (mask.array() == 1.0)).all(),
              "count_confusion: mask is not binary");
  ConfusionCounts c;
  for (Eigen::Index i = 0; i < prediction.size(); ++i) {
    const bool pos = prediction[i] > threshold;
    const bool truth = mask[i] == 1.0;
    if (pos && truth)
      ++c.tp;
    else if (pos)
      ++c.fp;
    else if (truth)
      ++c.fn;
    else
      ++c.tn;
  }
  return c;
}

SegScores scores_from_counts(const ConfusionCounts& c) {
  check_param(c.total() > 0, "scores_from_counts: empty counts");
  SegScores s;
  const double tp = static_cast<double>(c.tp);
  const double fp = static_cast<double>(c.fp);
  const double fn = static_cast<double>(c.fn);
  const double tn = static_cast<double>(c.tn);
  if (c.tp + c.fn > 0) s.se = tp / (tp + fn);
  s.acc = (tp + tn) / static_cast<double>(c.total());
  if (2 * c.tp + c.fp + c.fn > 0) s.f1 = 2 * tp / (2 * tp + fp + fn);
  std::optional<double> iou_fg, iou_bg;
  if (c.tp + c.fp + c.fn > 0) iou_fg = tp / (tp + fp + fn);
  if (c.tn + c.fp + c.fn > 0) iou_bg = tn / (tn + fp + fn);
  if (iou_fg && iou_bg)
    s.miou = 0.5 * (*iou_fg + *iou_bg);
  else if (iou_fg)
    s.miou = iou_fg;
  else if (iou_bg)
    s.miou = iou_bg;
  return s;
}

SegScores segmentation_scores(const Tensor& prediction, const Tensor& mask,
                              double threshold) {
  return scores_from_counts(count_confusion(prediction, mask, threshold));
}

std::optional<double> auc_score(const std::vector<double>& scores,
                                const std::vector<int>& labels) {
  check_param(scores.size() == labels.size(),
              "auc_score: scores/labels size mismatch");
  check_param(!scores.empty(), "auc_score: empty input");
  std::int64_t n_pos = 0;
  for (int l : labels) {
    check_param(l == 0 || l == 1, "auc_score: labels must be 0 or 1");
    n_pos += l;
  }
  const std::int64_t n = static_cast<std::int64_t>(scores.size());
  const std::int64_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) return std::nullopt;

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] < scores[b];
  });
  // midranks: tied scores share the average of their rank range
  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() &&
           scores[order[j + 1]] == scores[order[i]])
      ++j;
    const double midrank = 0.5 * (static_cast<double>(i + 1) +
                                  static_cast<double>(j + 1));
    for (std::size_t k = i; k <= j; ++k)
      if (labels[order[k]] == 1) rank_sum_pos += midrank;
    i = j + 1;
  }
  const double np = static_cast<double>(n_pos);
  const double nn = static_cast<double>(n_neg);
  return (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn);
}

double gap(double a, double b) { return std::abs(a - b); }

std::optional<double> gap(const std::optional<double>& a,
                          const std::optional<double>& b) {
  if (!a || !b) return std::nullopt;
  return gap(*a, *b);
}

MatrixX matrix_sqrt(const MatrixX& m) {
  check_param(m.rows() == m.cols() && m.rows() > 0,
              "matrix_sqrt: matrix must be square and non-empty");
  const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  check_param((m - m.transpose()).cwiseAbs().maxCoeff() <= 1e-8 * scale,
              "matrix_sqrt: matrix is not symmetric");
  Eigen::SelfAdjointEigenSolver<MatrixX> es(m);
  check_param(es.info() == Eigen::Success, "matrix_sqrt: eigensolver failed");
  VectorX ev = es.eigenvalues();
  const double tol = 1e-8 * std::max(1.0, std::abs(ev.maxCoeff()));
  if (ev.minCoeff() < -tol)
    throw NumericError("matrix_sqrt: matrix has a significantly negative "
                       "eigenvalue: " +
                       std::to_string(ev.minCoeff()));
  ev = ev.cwiseMax(0.0);
  return es.eigenvectors() * ev.cwiseSqrt().asDiagonal() *
         es.eigenvectors().transpose();
}

GaussianStats gaussian_stats(const MatrixX& rows, double eps) {
  check_param(rows.rows() >= 2, "gaussian_stats: need at least two rows");
  check_param(rows.cols() >= 1, "gaussian_stats: empty feature dimension");
  check_param(eps >= 0.0, "gaussian_stats: negative eps");
  GaussianStats g;
  g.n = rows.rows();
  g.mean = rows.colwise().mean();
  const MatrixX centered = rows.rowwise() - g.mean.transpose();
  g.cov = centered.transpose() * centered / static_cast<double>(g.n - 1);
  g.cov.diagonal().array() += eps;
  return g;
}

double fsd_from_stats(const GaussianStats& x, const GaussianStats& y) {
  check_param(x.mean.size() == y.mean.size() && x.mean.size() > 0,
              "fsd_from_stats: dimension mismatch");
  const MatrixX sx = matrix_sqrt(x.cov);
  MatrixX inner = sx * y.cov * sx;
  inner = 0.5 * (inner + inner.transpose());  // symmetrize rounding noise
  const MatrixX cross = matrix_sqrt(inner);
  const double mean_term = (x.mean - y.mean).squaredNorm();
  return mean_term + x.cov.trace() + y.cov.trace() - 2.0 * cross.trace();
}

double fsd(const MatrixX& x_rows, const MatrixX& y_rows, double eps) {
  check_param(x_rows.cols() == y_rows.cols() && x_rows.cols() > 0,
              "fsd: latent width mismatch");
  const Eigen::Index C = x_rows.cols();
  check_param(x_rows.rows() >= C + 1 && y_rows.rows() >= C + 1,
              "fsd: need at least C+1 samples per set for a C-dimensional "
              "latent, got " +
                  std::to_string(x_rows.rows()) + " and " +
                  std::to_string(y_rows.rows()) + " for C = " +
                  std::to_string(C));
  return fsd_from_stats(gaussian_stats(x_rows, eps),
                        gaussian_stats(y_rows, eps));
}

}  // namespace gkd::metrics
