// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "gkd/tensor.hpp"

namespace gkd::metrics {

/// Pixel confusion pooled over every element of a batch.
struct ConfusionCounts {
  std::int64_t tp = 0;
  std::int64_t fp = 0;
  std::int64_t fn = 0;
  std::int64_t tn = 0;

  ConfusionCounts& operator+=(const ConfusionCounts& o);
  std::int64_t total() const { return tp + fp + fn + tn; }
};

/// Thresholds predictions at `threshold` (strictly greater counts as
/// positive) against a {0,1} mask of the same shape.
ConfusionCounts count_confusion(const Tensor& prediction, const Tensor& mask,
                                double threshold);

/// Ratios that lack support (no foreground pixels, no predicted or actual
/// positives) come back empty rather than as 0/0.
struct SegScores {
  std::optional<double> se;    // sensitivity TP/(TP+FN)
  double acc = 0.0;            // (TP+TN)/total
  std::optional<double> f1;    // 2TP/(2TP+FP+FN)
  std::optional<double> miou;  // mean of foreground and background IoU
};

SegScores scores_from_counts(const ConfusionCounts& c);
SegScores segmentation_scores(const Tensor& prediction, const Tensor& mask,
                              double threshold = 0.5);

/// Area under the ROC curve via the rank statistic with midranks for ties.
/// Empty when only one class is present. Labels must be 0/1.
std::optional<double> auc_score(const std::vector<double>& scores,
                                const std::vector<int>& labels);

/// Absolute cross-domain difference of a metric.
double gap(double a, double b);
std::optional<double> gap(const std::optional<double>& a,
                          const std::optional<double>& b);

/// Principal square root of a symmetric positive semidefinite matrix.
/// Mildly negative eigenvalues (rounding noise) are clamped to zero;
/// a clearly indefinite input raises NumericError, a non-symmetric one
/// ParamError.
MatrixX matrix_sqrt(const MatrixX& m);

struct GaussianStats {
  VectorX mean;
  MatrixX cov;  // unbiased, with eps added on the diagonal
  Eigen::Index n = 0;
};

/// Row-wise sample statistics of an n x C matrix; covariance uses the
/// 1/(n-1) normalization and eps*I regularization.
GaussianStats gaussian_stats(const MatrixX& rows, double eps);

/// Fréchet distance between the Gaussian summaries of two latent sets:
///   ||mu_x - mu_y||^2 + Tr(Sx + Sy - 2 (Sx^1/2 Sy Sx^1/2)^1/2)
/// Both sets are n x C row matrices and must satisfy n >= C+1 so the
/// unbiased covariance has full support.
double fsd(const MatrixX& x_rows, const MatrixX& y_rows, double eps = 1e-6);
double fsd_from_stats(const GaussianStats& x, const GaussianStats& y);

}  // namespace gkd::metrics
