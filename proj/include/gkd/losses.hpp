// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "gkd/autodiff.hpp"
#include "gkd/graphs.hpp"
#include "gkd/tensor.hpp"

namespace gkd::losses {

/// Weights of the combined distillation objective:
///   total = ce + alpha * intra + beta * inter + gamma * dicd
/// lambda_msan balances the latent regularizer inside the alignment loss.
struct LossWeights {
  double lambda_msan = 0.5;
  double alpha = 100.0;
  double beta = 100.0;
  double gamma = 0.5;

  void validate() const;  // throws ParamError on negative weights
};

// ---- value-level losses (no gradients) ------------------------------------
// Every L1 term below is a mean over elements, not a sum; the same
// reduction is used by the tape-based builders so both paths agree.

double l1_loss(const Tensor& a, const Tensor& b);

template <typename DA, typename DB>
double l1_loss(const Eigen::MatrixBase<DA>& a, const Eigen::MatrixBase<DB>& b) {
  check_param(a.rows() == b.rows() && a.cols() == b.cols(),
              "l1_loss: shape mismatch");
  check_param(a.size() > 0, "l1_loss: empty operands");
  return (a - b).cwiseAbs().sum() / static_cast<double>(a.size());
}

/// Mean binary cross-entropy of [0,1] predictions against a {0,1} mask,
/// predictions clamped to [1e-7, 1-1e-7].
double ce_loss(const Tensor& prediction, const Tensor& mask);

/// KL(softmax(target) || softmax(approx)), natural log, summed over the
/// vector.
double kl_div_softmax(const VectorX& target_logits,
                      const VectorX& approx_logits);

/// Alignment loss: reconstruction + lambda * latent regularization.
double msan_loss(const Tensor& feat, const Tensor& feat_rec,
                 const VectorX& latent, const VectorX& mask_latent,
                 double lambda);

/// L1 over the matched nodes (anchor + augmented, averaged over the K+1
/// pairs) plus L1 over the matched edge vectors.
double intra_loss(const graphs::IntraGraph& teacher,
                  const graphs::IntraGraph& student);

/// Mean per-node KL on softmaxed latents (teacher as target) plus L1 over
/// the full K x K edge matrices.
double inter_loss(const graphs::InterGraph& teacher,
                  const graphs::InterGraph& student);

/// Both cross-reconstructed predictions are pulled toward the teacher
/// prediction.
double dicd_loss(const Tensor& teacher_pred, const Tensor& rec_teacher,
                 const Tensor& rec_student);

/// Weighted combination; throws NumericError naming the first non-finite
/// term.
double total_loss(double ce, double intra, double inter, double dicd,
                  const LossWeights& w);

// ---- tape-level builders ---------------------------------------------------
// Latents are [B,C]; each builder reduces to a scalar Var whose value
// matches the value-level formula averaged over the batch.

struct IntraGraphVars {
  ad::Var anchor_node;              // [B,C,C]
  std::vector<ad::Var> aug_nodes;   // K of [B,C,C]
  std::vector<ad::Var> edges;       // K of [B]
};

IntraGraphVars build_intra_graph_vars(const ad::Var& anchor,
                                      const std::vector<ad::Var>& augs,
                                      graphs::IntraNodeMode mode);

ad::Var intra_loss_var(const IntraGraphVars& teacher,
                       const IntraGraphVars& student);

/// KL + edge term over augmented latents only; teacher latents should be
/// constants on the tape so gradients reach just the student side.
ad::Var inter_loss_var(const std::vector<ad::Var>& teacher_augs,
                       const std::vector<ad::Var>& student_augs);

ad::Var msan_loss_var(const ad::Var& feat_rec, const Tensor& feat,
                      const ad::Var& latent, const Tensor& mask_latent,
                      double lambda);

}  // namespace gkd::losses
