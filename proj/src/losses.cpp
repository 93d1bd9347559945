// SPDX-License-Identifier: Apache-2.0
#include "gkd/losses.hpp"

#include <cmath>

namespace gkd::losses {

namespace {

constexpr double kBceEps = 1e-7;

void check_finite_term(double v, const char* term) {
  if (!std::isfinite(v))
    throw NumericError(std::string("total_loss: non-finite ") + term +
                       " term: " + std::to_string(v));
}

}  // namespace

void LossWeights::validate() const {
  check_param(lambda_msan >= 0.0 && alpha >= 0.0 && beta >= 0.0 &&
                  gamma >= 0.0,
              "LossWeights: weights must be non-negative");
}

double l1_loss(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "l1_loss");
  check_param(a.size() > 0, "l1_loss: empty operands");
  return (a.array() - b.array()).abs().mean();
}

double ce_loss(const Tensor& prediction, const Tensor& mask) {
  check_same_shape(prediction, mask, "ce_loss");
  check_param(prediction.size() > 0, "ce_loss: empty operands");
  const auto y = mask.array();
  check_param(((y == 0.0) || (y == 1.0)).all(), "ce_loss: mask is not binary");
  const auto p = prediction.array().min(1.0 - kBceEps).max(kBceEps);
  return -(y * p.log() + (1.0 - y) * (1.0 - p).log()).mean();
}

double kl_div_softmax(const VectorX& target_logits,
                      const VectorX& approx_logits) {
  check_param(target_logits.size() == approx_logits.size() &&
                  target_logits.size() > 0,
              "kl_div_softmax: size mismatch");
  const auto lp = (target_logits.array() - target_logits.maxCoeff());
  const auto lq = (approx_logits.array() - approx_logits.maxCoeff());
  const ArrayX logp = lp - std::log(lp.exp().sum());
  const ArrayX logq = lq - std::log(lq.exp().sum());
  return (logp.exp() * (logp - logq)).sum();
}

double msan_loss(const Tensor& feat, const Tensor& feat_rec,
                 const VectorX& latent, const VectorX& mask_latent,
                 double lambda) {
  check_param(lambda >= 0.0, "msan_loss: negative lambda");
  check_param(latent.size() == mask_latent.size(),
              "msan_loss: latent width mismatch");
  const double rec = l1_loss(feat, feat_rec);
  const double regu =
      (latent - mask_latent).cwiseAbs().sum() / static_cast<double>(latent.size());
  return rec + lambda * regu;
}

double intra_loss(const graphs::IntraGraph& teacher,
                  const graphs::IntraGraph& student) {
  check_param(teacher.aug_nodes.size() == student.aug_nodes.size() &&
                  !teacher.aug_nodes.empty(),
              "intra_loss: node count mismatch");
  const std::size_t K = teacher.aug_nodes.size();
  double nodes = l1_loss(teacher.anchor_node, student.anchor_node);
  for (std::size_t k = 0; k < K; ++k)
    nodes += l1_loss(teacher.aug_nodes[k], student.aug_nodes[k]);
  nodes /= static_cast<double>(K + 1);
  const double edges = l1_loss(teacher.edges, student.edges);
  return nodes + edges;
}

double inter_loss(const graphs::InterGraph& teacher,
                  const graphs::InterGraph& student) {
  check_param(teacher.nodes.rows() == student.nodes.rows() &&
                  teacher.nodes.cols() == student.nodes.cols(),
              "inter_loss: node shape mismatch");
  const Eigen::Index K = teacher.nodes.rows();
  double kl = 0.0;
  for (Eigen::Index k = 0; k < K; ++k)
    kl += kl_div_softmax(teacher.nodes.row(k).transpose(),
                         student.nodes.row(k).transpose());
  kl /= static_cast<double>(K);
  const double edges = l1_loss(teacher.edges, student.edges);
  return kl + edges;
}

double dicd_loss(const Tensor& teacher_pred, const Tensor& rec_teacher,
                 const Tensor& rec_student) {
  return l1_loss(teacher_pred, rec_teacher) + l1_loss(teacher_pred, rec_student);
}

double total_loss(double ce, double intra, double inter, double dicd,
                  const LossWeights& w) {
  w.validate();
  check_finite_term(ce, "ce");
  check_finite_term(intra, "intra");
  check_finite_term(inter, "inter");
  check_finite_term(dicd, "dicd");
  const double total =
      ce + w.alpha * intra + w.beta * inter + w.gamma * dicd;
  check_finite_term(total, "total");
  return total;
}

// ---- tape-level builders ---------------------------------------------------

IntraGraphVars build_intra_graph_vars(const ad::Var& anchor,
                                      const std::vector<ad::Var>& augs,
                                      graphs::IntraNodeMode mode) {
  check_param(!augs.empty(), "build_intra_graph_vars: no augmented latents");
  const int B = anchor.value().dim(0);
  const int C = anchor.value().dim(1);
  IntraGraphVars g;
  g.anchor_node = ad::row_outer(anchor);
  ad::Var anchor_flat = ad::reshape(g.anchor_node, {B, C * C});
  for (const ad::Var& aug : augs) {
    ad::Var node = mode == graphs::IntraNodeMode::self_product
                       ? ad::row_outer(aug)
                       : ad::row_outer(anchor, aug);
    g.edges.push_back(
        ad::row_cosine(anchor_flat, ad::reshape(node, {B, C * C})));
    g.aug_nodes.push_back(std::move(node));
  }
  return g;
}

ad::Var intra_loss_var(const IntraGraphVars& teacher,
                       const IntraGraphVars& student) {
  check_param(teacher.aug_nodes.size() == student.aug_nodes.size() &&
                  !teacher.aug_nodes.empty(),
              "intra_loss_var: node count mismatch");
  const std::size_t K = teacher.aug_nodes.size();
  ad::Var nodes = ad::l1(teacher.anchor_node, student.anchor_node);
  for (std::size_t k = 0; k < K; ++k)
    nodes = ad::add(nodes, ad::l1(teacher.aug_nodes[k], student.aug_nodes[k]));
  nodes = ad::scale(nodes, 1.0 / static_cast<double>(K + 1));
  ad::Var edges = ad::l1(teacher.edges[0], student.edges[0]);
  for (std::size_t k = 1; k < K; ++k)
    edges = ad::add(edges, ad::l1(teacher.edges[k], student.edges[k]));
  edges = ad::scale(edges, 1.0 / static_cast<double>(K));
  return ad::add(nodes, edges);
}

ad::Var inter_loss_var(const std::vector<ad::Var>& teacher_augs,
                       const std::vector<ad::Var>& student_augs) {
  check_param(teacher_augs.size() == student_augs.size() &&
                  teacher_augs.size() >= 2,
              "inter_loss_var: need matching lists of at least two latents");
  const std::size_t K = teacher_augs.size();
  ad::Var kl =
      ad::mean_all(ad::row_kl_softmax(teacher_augs[0], student_augs[0]));
  for (std::size_t k = 1; k < K; ++k)
    kl = ad::add(kl, ad::mean_all(ad::row_kl_softmax(teacher_augs[k],
                                                     student_augs[k])));
  kl = ad::scale(kl, 1.0 / static_cast<double>(K));

  // edge term matches the mean over the full K x K matrix: off-diagonal
  // pairs count twice, the diagonal once
  ad::Var edges;
  for (std::size_t i = 0; i < K; ++i)
    for (std::size_t j = i; j < K; ++j) {
      ad::Var et = ad::row_cosine(teacher_augs[i], teacher_augs[j]);
      ad::Var es = ad::row_cosine(student_augs[i], student_augs[j]);
      ad::Var term = ad::scale(ad::l1(et, es), i == j ? 1.0 : 2.0);
      edges = edges.defined() ? ad::add(edges, term) : term;
    }
  edges = ad::scale(edges, 1.0 / static_cast<double>(K * K));
  return ad::add(kl, edges);
}

ad::Var msan_loss_var(const ad::Var& feat_rec, const Tensor& feat,
                      const ad::Var& latent, const Tensor& mask_latent,
                      double lambda) {
  check_param(lambda >= 0.0, "msan_loss_var: negative lambda");
  ad::Tape& t = *feat_rec.tape();
  ad::Var rec = ad::l1(feat_rec, t.constant(feat));
  ad::Var regu = ad::l1(latent, t.constant(mask_latent));
  return ad::add(rec, ad::scale(regu, lambda));
}

}  // namespace gkd::losses
