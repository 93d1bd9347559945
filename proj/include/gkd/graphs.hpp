// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "gkd/tensor.hpp"

namespace gkd::graphs {

/// Norm floor below which a vector counts as degenerate; cosine terms
/// involving it are defined as 0.
inline constexpr double kDegenerateNorm = 1e-12;

/// Cosine similarity of two same-sized expressions, flattened. Works for
/// vectors and matrices alike.
template <typename DerivedA, typename DerivedB>
double cosine_similarity(const Eigen::MatrixBase<DerivedA>& a,
                         const Eigen::MatrixBase<DerivedB>& b) {
  check_param(a.size() == b.size(),
              "cosine_similarity: size mismatch between operands");
  check_param(a.size() > 0, "cosine_similarity: empty operands");
  const auto av = a.reshaped();
  const auto bv = b.reshaped();
  const double na = av.norm();
  const double nb = bv.norm();
  if (na < kDegenerateNorm || nb < kDegenerateNorm) return 0.0;
  return av.dot(bv) / (na * nb);
}

/// Outer product v v^T of a column vector expression.
template <typename Derived>
MatrixX outer_node(const Eigen::MatrixBase<Derived>& v) {
  check_param(v.cols() == 1 && v.rows() > 0,
              "outer_node: expected a non-empty column vector");
  return v * v.transpose();
}

/// Node construction for the anchor-coupled graph: self_product pairs each
/// latent with itself, cross_product pairs the anchor with each augmented
/// latent.
enum class IntraNodeMode { self_product, cross_product };

std::string to_string(IntraNodeMode m);
IntraNodeMode intra_node_mode_from_string(const std::string& s);

/// Anchor-coupled graph over one sample: one node per latent (anchor plus
/// K augmented views) and one edge per augmented view linking it to the
/// anchor. Edges are cosines of the flattened node matrices.
struct IntraGraph {
  MatrixX anchor_node;             // C x C
  std::vector<MatrixX> aug_nodes;  // K matrices, C x C
  VectorX edges;                   // K anchor-to-augmented similarities
};

IntraGraph build_intra_graph(const VectorX& anchor,
                             const std::vector<VectorX>& augs,
                             IntraNodeMode mode = IntraNodeMode::self_product);

/// View-coupled graph over one sample: the K augmented latents are the
/// nodes and every pair is linked by its cosine similarity, so edges form
/// a symmetric K x K matrix with unit diagonal (0 for degenerate rows).
struct InterGraph {
  MatrixX nodes;  // K x C, row k holds augmented latent k
  MatrixX edges;  // K x K
};

InterGraph build_inter_graph(const std::vector<VectorX>& augs);

}  // namespace gkd::graphs
