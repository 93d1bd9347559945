// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "gkd/tensor.hpp"

namespace gkd::ad {

/// Trainable tensor with gradient and optimizer slots. Setting
/// trainable=false freezes it: graphs still propagate gradients through
/// ops that consume it, but nothing accumulates into grad and the
/// optimizer skips it, so its bytes never change.
struct Param {
  std::string name;
  Tensor value;
  Tensor grad;
  Tensor m;  // Adam first moment
  Tensor v;  // Adam second moment
  bool trainable = true;

  Param() = default;
  Param(std::string n, Shape shape)
      : name(std::move(n)),
        value(shape),
        grad(shape),
        m(shape),
        v(std::move(shape)) {}

  void zero_grad() { grad.array().setZero(); }
};

class Tape;

/// Lightweight handle to a node on a tape. Copyable; valid until the
/// owning tape is cleared or destroyed.
class Var {
 public:
  Var() = default;
  bool defined() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const;

 private:
  friend class Tape;
  Var(Tape* t, int id) : tape_(t), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

using BackwardFn = std::function<void(Tape&, int)>;

/// Reverse-mode tape. Nodes are appended in evaluation order, so walking
/// ids backwards from the loss is a valid reverse topological order.
/// One tape per training step; clear() drops all nodes and closures.
class Tape {
 public:
  Var constant(Tensor value);
  Var leaf(Tensor value);         // tracked input, grad kept on the tape
  Var param(Param& p);            // copies value; accumulates into p.grad

  /// Internal node factory used by the op library.
  Var make(Tensor value, const std::vector<int>& parents, BackwardFn fn);

  /// Runs reverse sweep from a scalar loss, then flushes parameter
  /// gradients into their bound Param::grad buffers.
  void backward(const Var& loss);

  const Tensor& value(int id) const { return nodes_[check_id(id)].value; }
  bool requires_grad(int id) const {
    return nodes_[check_id(id)].requires_grad;
  }

  /// Gradient accumulator; allocates zeros on first touch.
  Tensor& grad_acc(int id);

  /// Gradient of a tracked node after backward(). Zero tensor if the node
  /// never received a contribution.
  Tensor grad(const Var& v) const;

  void clear();
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    BackwardFn backward;
    Param* bound = nullptr;
  };

  std::size_t check_id(int id) const;
  std::vector<Node> nodes_;
};

// ---- op library -----------------------------------------------------------
// All ops validate shapes and throw ParamError on mismatch. Results carry
// requires_grad if any input does.

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, Scalar s);
Var reshape(const Var& a, Shape shape);
Var detach(const Var& a);

Var matmul(const Var& a, const Var& b);             // [n,k]x[k,m] -> [n,m]
Var dense(const Var& x, const Var& w, const Var& b);  // x[B,in], w[out,in]

/// x [B,Cin,H,W], w [Cout,Cin,kh,kw], b [Cout]; zero padding.
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);

/// x [B,Cin,H,W], w [Cin,Cout,kh,kw], b [Cout].
/// Hout = (H-1)*stride - 2*pad + kh + out_pad.
Var conv_transpose2d(const Var& x, const Var& w, const Var& b, int stride,
                     int pad, int out_pad);

Var relu(const Var& a);
Var sigmoid(const Var& a);  // logits clamped to [-30, 30] before exp
Var global_avg_pool(const Var& x);                  // [B,C,H,W] -> [B,C]
Var concat_channels(const Var& a, const Var& b);    // along channel axis

Var sum_all(const Var& a);   // -> scalar [1]
Var mean_all(const Var& a);  // -> scalar [1]

/// Mean absolute difference, reduced over every element. -> scalar [1]
Var l1(const Var& a, const Var& b);

/// Mean binary cross-entropy of predictions p in [0,1] against a constant
/// 0/1 target; p is clamped to [1e-7, 1-1e-7] inside the log.
Var bce(const Var& p, const Tensor& target);

/// Per-row outer products: a [B,C], b [B,C] -> [B,C,C] with out[i] =
/// a_i b_i^T. The one-argument form is row_outer(a, a).
Var row_outer(const Var& a, const Var& b);
Var row_outer(const Var& a);

/// Per-row cosine similarity of flattened rows: [B,M],[B,M] -> [B].
/// A row whose norm falls below 1e-12 yields similarity 0 with zero
/// gradient.
Var row_cosine(const Var& a, const Var& b);

/// Per-row KL(softmax(target) || softmax(approx)), natural log, summed
/// over the row: [B,C],[B,C] -> [B]. Gradients reach both arguments.
Var row_kl_softmax(const Var& target, const Var& approx);

namespace detail {
// im2col/col2im shared by conv2d and conv_transpose2d. col is
// (C*kh*kw) x (gridH*gridW) where the grid enumerates window positions
// h = gh*stride - pad + u, w = gw*stride - pad + v over an image [C,H,W].
// Out-of-range taps read as zero / scatter nowhere.
void im2col(const Scalar* img, int C, int H, int W, int kh, int kw, int stride,
            int pad, int gridH, int gridW, MatrixX& col);
void col2im_add(const MatrixX& col, int C, int H, int W, int kh, int kw,
                int stride, int pad, int gridH, int gridW, Scalar* img);
int conv_out_size(int in, int k, int stride, int pad);
}  // namespace detail

}  // namespace gkd::ad
