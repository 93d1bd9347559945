// SPDX-License-Identifier: Apache-2.0
#include "gkd/graphs.hpp"

namespace gkd::graphs {

std::string to_string(IntraNodeMode m) {
  return m == IntraNodeMode::self_product ? "self" : "cross";
}

IntraNodeMode intra_node_mode_from_string(const std::string& s) {
  if (s == "self") return IntraNodeMode::self_product;
  if (s == "cross") return IntraNodeMode::cross_product;
  throw ParamError("unknown intra node mode: " + s);
}

IntraGraph build_intra_graph(const VectorX& anchor,
                             const std::vector<VectorX>& augs,
                             IntraNodeMode mode) {
  check_param(anchor.size() > 0, "build_intra_graph: empty anchor latent");
  check_param(!augs.empty(), "build_intra_graph: no augmented latents");
  IntraGraph g;
  g.anchor_node = outer_node(anchor);
  g.aug_nodes.reserve(augs.size());
  g.edges.resize(static_cast<Eigen::Index>(augs.size()));
  for (std::size_t k = 0; k < augs.size(); ++k) {
    check_param(augs[k].size() == anchor.size(),
                "build_intra_graph: latent width mismatch");
    MatrixX node = mode == IntraNodeMode::self_product
                       ? outer_node(augs[k])
                       : MatrixX(anchor * augs[k].transpose());
    g.edges[static_cast<Eigen::Index>(k)] =
        cosine_similarity(g.anchor_node, node);
    g.aug_nodes.push_back(std::move(node));
  }
  return g;
}

InterGraph build_inter_graph(const std::vector<VectorX>& augs) {
  check_param(augs.size() >= 2,
              "build_inter_graph: need at least two augmented latents");
  const int K = static_cast<int>(augs.size());
  const Eigen::Index C = augs[0].size();
  check_param(C > 0, "build_inter_graph: empty latent");
  InterGraph g;
  g.nodes.resize(K, C);
  for (int k = 0; k < K; ++k) {
    check_param(augs[static_cast<std::size_t>(k)].size() == C,
                "build_inter_graph: latent width mismatch");
    g.nodes.row(k) = augs[static_cast<std::size_t>(k)].transpose();
  }
  g.edges.resize(K, K);
  for (int i = 0; i < K; ++i)
    for (int j = i; j < K; ++j) {
      const double c = cosine_similarity(augs[static_cast<std::size_t>(i)],
                                         augs[static_cast<std::size_t>(j)]);
      g.edges(i, j) = c;
      g.edges(j, i) = c;
    }
  return g;
}

}  // namespace gkd::graphs
