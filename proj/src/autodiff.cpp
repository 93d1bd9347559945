// SPDX-License-Identifier: Apache-2.0
#include "gkd/autodiff.hpp"

#include <cmath>

namespace gkd::ad {

namespace {

constexpr Scalar kLogitClamp = 30.0;
constexpr Scalar kBceEps = 1e-7;
constexpr Scalar kNormFloor = 1e-12;

void check_same_tape(const Var& a, const Var& b, const char* who) {
  check_param(a.defined() && b.defined() && a.tape() == b.tape(),
              std::string(who) + ": operands live on different tapes");
}

}  // namespace

const Tensor& Var::value() const {
  check_param(defined(), "Var::value on undefined handle");
  return tape_->value(id_);
}

const Shape& Var::shape() const { return value().shape(); }

std::size_t Tape::check_id(int id) const {
  check_param(id >= 0 && static_cast<std::size_t>(id) < nodes_.size(),
              "Tape: node id out of range");
  return static_cast<std::size_t>(id);
}

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = false;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::leaf(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::param(Param& p) {
  Node n;
  n.value = p.value;
  n.requires_grad = p.trainable;
  n.bound = p.trainable ? &p : nullptr;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::make(Tensor value, const std::vector<int>& parents, BackwardFn fn) {
  bool rg = false;
  for (int p : parents) rg = rg || requires_grad(p);
  Node n;
  n.value = std::move(value);
  n.requires_grad = rg;
  if (rg) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Tensor& Tape::grad_acc(int id) {
  Node& n = nodes_[check_id(id)];
  if (!n.has_grad) {
    n.grad = Tensor(n.value.shape());
    n.has_grad = true;
  }
  return n.grad;
}

Tensor Tape::grad(const Var& v) const {
  const Node& n = nodes_[check_id(v.id())];
  if (n.has_grad) return n.grad;
  return Tensor(n.value.shape());
}

void Tape::backward(const Var& loss) {
  check_param(loss.defined() && loss.tape() == this,
              "Tape::backward: loss from another tape");
  check_param(loss.value().size() == 1, "Tape::backward: loss is not scalar");
  check_param(nodes_[check_id(loss.id())].requires_grad,
              "Tape::backward: loss does not depend on any tracked input");
  grad_acc(loss.id()).array().setConstant(1.0);
  for (int id = loss.id(); id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad || !n.has_grad) continue;
    if (n.backward) n.backward(*this, id);
  }
  for (Node& n : nodes_) {
    if (n.bound != nullptr && n.has_grad)
      n.bound->grad.array() += n.grad.array();
  }
}

void Tape::clear() { nodes_.clear(); }

// ---- elementwise ----------------------------------------------------------

Var add(const Var& a, const Var& b) {
  check_same_tape(a, b, "add");
  check_same_shape(a.value(), b.value(), "add");
  Tape& t = *a.tape();
  Tensor out = a.value();
  out.array() += b.value().array();
  const int pa = a.id(), pb = b.id();
  return t.make(std::move(out), {pa, pb}, [pa, pb](Tape& tp, int self) {
    const Tensor& g = tp.grad_acc(self);
    if (tp.requires_grad(pa)) tp.grad_acc(pa).array() += g.array();
    if (tp.requires_grad(pb)) tp.grad_acc(pb).array() += g.array();
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_tape(a, b, "sub");
  check_same_shape(a.value(), b.value(), "sub");
  Tape& t = *a.tape();
  Tensor out = a.value();
  out.array() -= b.value().array();
  const int pa = a.id(), pb = b.id();
  return t.make(std::move(out), {pa, pb}, [pa, pb](Tape& tp, int self) {
    const Tensor& g = tp.grad_acc(self);
    if (tp.requires_grad(pa)) tp.grad_acc(pa).array() += g.array();
    if (tp.requires_grad(pb)) tp.grad_acc(pb).array() -= g.array();
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_tape(a, b, "mul");
  check_same_shape(a.value(), b.value(), "mul");
  Tape& t = *a.tape();
  Tensor out = a.value();
  out.array() *= b.value().array();
  const int pa = a.id(), pb = b.id();
  return t.make(std::move(out), {pa, pb}, [pa, pb](Tape& tp, int self) {
    const Tensor& g = tp.grad_acc(self);
    if (tp.requires_grad(pa))
      tp.grad_acc(pa).array() += g.array() * tp.value(pb).array();
    if (tp.requires_grad(pb))
      tp.grad_acc(pb).array() += g.array() * tp.value(pa).array();
  });
}

Var scale(const Var& a, Scalar s) {
  check_param(a.defined(), "scale: undefined operand");
  Tape& t = *a.tape();
  Tensor out = a.value();
  out.array() *= s;
  const int pa = a.id();
  return t.make(std::move(out), {pa}, [pa, s](Tape& tp, int self) {
    if (tp.requires_grad(pa))
      tp.grad_acc(pa).array() += s * tp.grad_acc(self).array();
  });
}

Var reshape(const Var& a, Shape shape) {
  check_param(a.defined(), "reshape: undefined operand");
  Tape& t = *a.tape();
  Tensor out = a.value().reshaped(std::move(shape));
  const int pa = a.id();
  return t.make(std::move(out), {pa}, [pa](Tape& tp, int self) {
    if (tp.requires_grad(pa))
      tp.grad_acc(pa).array() += tp.grad_acc(self).array();
  });
}

Var detach(const Var& a) {
  check_param(a.defined(), "detach: undefined operand");
  return a.tape()->constant(a.value());
}

// ---- dense algebra --------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  check_same_tape(a, b, "matmul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  check_param(av.rank() == 2 && bv.rank() == 2 && av.dim(1) == bv.dim(0),
              "matmul: need [n,k]x[k,m], got " + shape_str(av.shape()) + " x " +
                  shape_str(bv.shape()));
  const int n = av.dim(0), k = av.dim(1), m = bv.dim(1);
  Tensor out({n, m});
  out.mat(n, m).noalias() = av.mat(n, k) * bv.mat(k, m);
  const int pa = a.id(), pb = b.id();
  return a.tape()->make(std::move(out), {pa, pb},
                        [pa, pb, n, k, m](Tape& tp, int self) {
                          auto g = tp.grad_acc(self).mat(n, m);
                          if (tp.requires_grad(pa))
                            tp.grad_acc(pa).mat(n, k).noalias() +=
                                g * tp.value(pb).mat(k, m).transpose();
                          if (tp.requires_grad(pb))
                            tp.grad_acc(pb).mat(k, m).noalias() +=
                                tp.value(pa).mat(n, k).transpose() * g;
                        });
}

Var dense(const Var& x, const Var& w, const Var& b) {
  check_same_tape(x, w, "dense");
  check_same_tape(w, b, "dense");
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const Tensor& bv = b.value();
  check_param(xv.rank() == 2 && wv.rank() == 2 && bv.rank() == 1 &&
                  xv.dim(1) == wv.dim(1) && wv.dim(0) == bv.dim(0),
              "dense: incompatible shapes " + shape_str(xv.shape()) + ", " +
                  shape_str(wv.shape()) + ", " + shape_str(bv.shape()));
  const int B = xv.dim(0), in = xv.dim(1), outw = wv.dim(0);
  Tensor out({B, outw});
  out.mat(B, outw).noalias() = xv.mat(B, in) * wv.mat(outw, in).transpose();
  for (int i = 0; i < B; ++i)
    out.mat(B, outw).row(i) +=
        Eigen::Map<const Eigen::RowVectorXd>(bv.data(), outw);
  const int px = x.id(), pw = w.id(), pb = b.id();
  return x.tape()->make(
      std::move(out), {px, pw, pb},
      [px, pw, pb, B, in, outw](Tape& tp, int self) {
        auto g = tp.grad_acc(self).mat(B, outw);
        if (tp.requires_grad(px))
          tp.grad_acc(px).mat(B, in).noalias() += g * tp.value(pw).mat(outw, in);
        if (tp.requires_grad(pw))
          tp.grad_acc(pw).mat(outw, in).noalias() +=
              g.transpose() * tp.value(px).mat(B, in);
        if (tp.requires_grad(pb)) {
          Tensor& gb = tp.grad_acc(pb);
          Eigen::Map<Eigen::RowVectorXd>(gb.data(), outw) +=
              g.colwise().sum();
        }
      });
}

// ---- convolution ----------------------------------------------------------

namespace detail {

int conv_out_size(int in, int k, int stride, int pad) {
  const int num = in + 2 * pad - k;
  check_param(stride >= 1 && num >= 0, "conv: window larger than padded input");
  return num / stride + 1;
}

void im2col(const Scalar* img, int C, int H, int W, int kh, int kw, int stride,
            int pad, int gridH, int gridW, MatrixX& col) {
  const int K = C * kh * kw;
  col.resize(K, static_cast<Eigen::Index>(gridH) * gridW);
  for (int gh = 0; gh < gridH; ++gh) {
    for (int gw = 0; gw < gridW; ++gw) {
      const Eigen::Index o = static_cast<Eigen::Index>(gh) * gridW + gw;
      Scalar* dst = col.data() + o * K;
      for (int c = 0; c < C; ++c) {
        for (int u = 0; u < kh; ++u) {
          const int h = gh * stride - pad + u;
          if (h < 0 || h >= H) {
            for (int v = 0; v < kw; ++v) *dst++ = 0.0;
            continue;
          }
          const Scalar* row = img + (static_cast<Eigen::Index>(c) * H + h) * W;
          for (int v = 0; v < kw; ++v) {
            const int w = gw * stride - pad + v;
            *dst++ = (w < 0 || w >= W) ? 0.0 : row[w];
          }
        }
      }
    }
  }
}

void col2im_add(const MatrixX& col, int C, int H, int W, int kh, int kw,
                int stride, int pad, int gridH, int gridW, Scalar* img) {
  check_param(col.rows() == static_cast<Eigen::Index>(C) * kh * kw &&
                  col.cols() == static_cast<Eigen::Index>(gridH) * gridW,
              "col2im_add: buffer shape mismatch");
  for (int gh = 0; gh < gridH; ++gh) {
    for (int gw = 0; gw < gridW; ++gw) {
      const Eigen::Index o = static_cast<Eigen::Index>(gh) * gridW + gw;
      const Scalar* src = col.data() + o * col.rows();
      for (int c = 0; c < C; ++c) {
        for (int u = 0; u < kh; ++u) {
          const int h = gh * stride - pad + u;
          if (h < 0 || h >= H) {
            src += kw;
            continue;
          }
          Scalar* row = img + (static_cast<Eigen::Index>(c) * H + h) * W;
          for (int v = 0; v < kw; ++v) {
            const int w = gw * stride - pad + v;
            if (w >= 0 && w < W) row[w] += *src;
            ++src;
          }
        }
      }
    }
  }
}

}  // namespace detail

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  check_same_tape(x, w, "conv2d");
  check_same_tape(w, b, "conv2d");
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const Tensor& bv = b.value();
  check_param(xv.rank() == 4 && wv.rank() == 4 && bv.rank() == 1,
              "conv2d: expected x[B,C,H,W], w[Co,Ci,kh,kw], b[Co]");
  check_param(xv.dim(1) == wv.dim(1) && wv.dim(0) == bv.dim(0),
              "conv2d: channel mismatch " + shape_str(xv.shape()) + " vs " +
                  shape_str(wv.shape()));
  check_param(pad >= 0, "conv2d: negative padding");
  const int B = xv.dim(0), Ci = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const int Co = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
  const int Ho = detail::conv_out_size(H, kh, stride, pad);
  const int Wo = detail::conv_out_size(W, kw, stride, pad);
  const Eigen::Index K = static_cast<Eigen::Index>(Ci) * kh * kw;
  const Eigen::Index plane_in = static_cast<Eigen::Index>(Ci) * H * W;
  const Eigen::Index plane_out = static_cast<Eigen::Index>(Co) * Ho * Wo;

  Tensor out({B, Co, Ho, Wo});
  Eigen::Map<const MatrixRM> wm(wv.data(), Co, K);
  MatrixX col;
  for (int i = 0; i < B; ++i) {
    detail::im2col(xv.data() + i * plane_in, Ci, H, W, kh, kw, stride, pad, Ho,
                   Wo, col);
    Eigen::Map<MatrixRM> om(out.data() + i * plane_out, Co,
                            static_cast<Eigen::Index>(Ho) * Wo);
    om.noalias() = wm * col;
    for (int c = 0; c < Co; ++c) om.row(c).array() += bv[c];
  }

  const int px = x.id(), pw = w.id(), pb = b.id();
  return x.tape()->make(
      std::move(out), {px, pw, pb},
      [px, pw, pb, B, Ci, H, W, Co, kh, kw, Ho, Wo, K, plane_in, plane_out,
       stride, pad](Tape& tp, int self) {
        const Tensor& gv = tp.grad_acc(self);
        const Tensor& xv2 = tp.value(px);
        Eigen::Map<const MatrixRM> wm(tp.value(pw).data(), Co, K);
        const bool need_x = tp.requires_grad(px);
        const bool need_w = tp.requires_grad(pw);
        const bool need_b = tp.requires_grad(pb);
        MatrixX col, dcol;
        for (int i = 0; i < B; ++i) {
          Eigen::Map<const MatrixRM> gm(gv.data() + i * plane_out, Co,
                                        static_cast<Eigen::Index>(Ho) * Wo);
          if (need_x) {
            dcol.noalias() = wm.transpose() * gm;
            detail::col2im_add(dcol, Ci, H, W, kh, kw, stride, pad, Ho, Wo,
                               tp.grad_acc(px).data() + i * plane_in);
          }
          if (need_w) {
            detail::im2col(xv2.data() + i * plane_in, Ci, H, W, kh, kw, stride,
                           pad, Ho, Wo, col);
            Eigen::Map<MatrixRM> gwm(tp.grad_acc(pw).data(), Co, K);
            gwm.noalias() += gm * col.transpose();
          }
          if (need_b) {
            Tensor& gb = tp.grad_acc(pb);
            for (int c = 0; c < Co; ++c) gb[c] += gm.row(c).sum();
          }
        }
      });
}

Var conv_transpose2d(const Var& x, const Var& w, const Var& b, int stride,
                     int pad, int out_pad) {
  check_same_tape(x, w, "conv_transpose2d");
  check_same_tape(w, b, "conv_transpose2d");
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const Tensor& bv = b.value();
  check_param(xv.rank() == 4 && wv.rank() == 4 && bv.rank() == 1,
              "conv_transpose2d: expected x[B,C,H,W], w[Ci,Co,kh,kw], b[Co]");
  check_param(xv.dim(1) == wv.dim(0) && wv.dim(1) == bv.dim(0),
              "conv_transpose2d: channel mismatch " + shape_str(xv.shape()) +
                  " vs " + shape_str(wv.shape()));
  check_param(stride >= 1 && pad >= 0 && out_pad >= 0 && out_pad < stride,
              "conv_transpose2d: need 0 <= out_pad < stride");
  const int B = xv.dim(0), Ci = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const int Co = wv.dim(1), kh = wv.dim(2), kw = wv.dim(3);
  const int Ho = (H - 1) * stride - 2 * pad + kh + out_pad;
  const int Wo = (W - 1) * stride - 2 * pad + kw + out_pad;
  check_param(Ho >= 1 && Wo >= 1, "conv_transpose2d: empty output");
  // The scatter below and the gathers in backward both view the output as
  // the image of a stride/pad convolution whose window grid is the input;
  // out_pad only widens the image, so the same im2col kernels apply.
  check_param(detail::conv_out_size(Ho, kh, stride, pad) == H &&
                  detail::conv_out_size(Wo, kw, stride, pad) == W,
              "conv_transpose2d: inconsistent geometry");
  const Eigen::Index K = static_cast<Eigen::Index>(Co) * kh * kw;
  const Eigen::Index plane_in = static_cast<Eigen::Index>(Ci) * H * W;
  const Eigen::Index plane_out = static_cast<Eigen::Index>(Co) * Ho * Wo;

  Tensor out({B, Co, Ho, Wo});
  Eigen::Map<const MatrixRM> wm(wv.data(), Ci, K);
  MatrixX colT;
  for (int i = 0; i < B; ++i) {
    Eigen::Map<const MatrixRM> xm(xv.data() + i * plane_in, Ci,
                                  static_cast<Eigen::Index>(H) * W);
    colT.noalias() = wm.transpose() * xm;
    detail::col2im_add(colT, Co, Ho, Wo, kh, kw, stride, pad, H, W,
                       out.data() + i * plane_out);
    Eigen::Map<MatrixRM> om(out.data() + i * plane_out, Co,
                            static_cast<Eigen::Index>(Ho) * Wo);
    for (int c = 0; c < Co; ++c) om.row(c).array() += bv[c];
  }

  const int px = x.id(), pw = w.id(), pb = b.id();
  return x.tape()->make(
      std::move(out), {px, pw, pb},
      [px, pw, pb, B, Ci, H, W, Co, kh, kw, Ho, Wo, K, plane_in, plane_out,
       stride, pad](Tape& tp, int self) {
        const Tensor& gv = tp.grad_acc(self);
        Eigen::Map<const MatrixRM> wm(tp.value(pw).data(), Ci, K);
        const bool need_x = tp.requires_grad(px);
        const bool need_w = tp.requires_grad(pw);
        const bool need_b = tp.requires_grad(pb);
        MatrixX gcol;
        for (int i = 0; i < B; ++i) {
          if (need_x || need_w)
            detail::im2col(gv.data() + i * plane_out, Co, Ho, Wo, kh, kw,
                           stride, pad, H, W, gcol);
          if (need_x) {
            Eigen::Map<MatrixRM> gx(tp.grad_acc(px).data() + i * plane_in, Ci,
                                    static_cast<Eigen::Index>(H) * W);
            gx.noalias() += wm * gcol;
          }
          if (need_w) {
            Eigen::Map<const MatrixRM> xm(tp.value(px).data() + i * plane_in,
                                          Ci, static_cast<Eigen::Index>(H) * W);
            Eigen::Map<MatrixRM> gwm(tp.grad_acc(pw).data(), Ci, K);
            gwm.noalias() += xm * gcol.transpose();
          }
          if (need_b) {
            Eigen::Map<const MatrixRM> gm(gv.data() + i * plane_out, Co,
                                          static_cast<Eigen::Index>(Ho) * Wo);
            Tensor& gb = tp.grad_acc(pb);
            for (int c = 0; c < Co; ++c) gb[c] += gm.row(c).sum();
          }
        }
      });
}

// ---- activations and pooling ----------------------------------------------

Var relu(const Var& a) {
  check_param(a.defined(), "relu: undefined operand");
  Tensor out = a.value();
  out.array() = out.array().max(0.0);
  const int pa = a.id();
  return a.tape()->make(std::move(out), {pa}, [pa](Tape& tp, int self) {
    if (!tp.requires_grad(pa)) return;
    tp.grad_acc(pa).array() +=
        tp.grad_acc(self).array() *
        (tp.value(pa).array() > 0.0).cast<Scalar>();
  });
}

Var sigmoid(const Var& a) {
  check_param(a.defined(), "sigmoid: undefined operand");
  Tensor out = a.value();
  out.array() =
      1.0 / (1.0 + (-out.array().min(kLogitClamp).max(-kLogitClamp)).exp());
  const int pa = a.id();
  return a.tape()->make(std::move(out), {pa}, [pa](Tape& tp, int self) {
    if (!tp.requires_grad(pa)) return;
    const auto y = tp.value(self).array();
    const auto inside =
        (tp.value(pa).array().abs() < kLogitClamp).cast<Scalar>();
    tp.grad_acc(pa).array() +=
        tp.grad_acc(self).array() * y * (1.0 - y) * inside;
  });
}

Var global_avg_pool(const Var& x) {
  check_param(x.defined() && x.value().rank() == 4,
              "global_avg_pool: expected [B,C,H,W]");
  const Tensor& xv = x.value();
  const int B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const Eigen::Index hw = static_cast<Eigen::Index>(H) * W;
  Tensor out({B, C});
  auto xm = xv.mat(static_cast<Eigen::Index>(B) * C, hw);
  Eigen::Map<VectorX>(out.data(), out.size()) = xm.rowwise().mean();
  const int px = x.id();
  return x.tape()->make(std::move(out), {px}, [px, B, C, hw](Tape& tp,
                                                             int self) {
    if (!tp.requires_grad(px)) return;
    auto gx = tp.grad_acc(px).mat(static_cast<Eigen::Index>(B) * C, hw);
    auto g = Eigen::Map<const VectorX>(tp.grad_acc(self).data(),
                                       static_cast<Eigen::Index>(B) * C);
    gx.colwise() += g / static_cast<Scalar>(hw);
  });
}

Var concat_channels(const Var& a, const Var& b) {
  check_same_tape(a, b, "concat_channels");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  check_param(av.rank() == 4 && bv.rank() == 4 && av.dim(0) == bv.dim(0) &&
                  av.dim(2) == bv.dim(2) && av.dim(3) == bv.dim(3),
              "concat_channels: incompatible shapes " + shape_str(av.shape()) +
                  " vs " + shape_str(bv.shape()));
  const int B = av.dim(0), Ca = av.dim(1), Cb = bv.dim(1);
  const int H = av.dim(2), W = av.dim(3);
  const Eigen::Index hw = static_cast<Eigen::Index>(H) * W;
  Tensor out({B, Ca + Cb, H, W});
  for (int i = 0; i < B; ++i) {
    std::copy(av.data() + i * Ca * hw, av.data() + (i + 1) * Ca * hw,
              out.data() + i * (Ca + Cb) * hw);
    std::copy(bv.data() + i * Cb * hw, bv.data() + (i + 1) * Cb * hw,
              out.data() + (static_cast<Eigen::Index>(i) * (Ca + Cb) + Ca) * hw);
  }
  const int pa = a.id(), pb = b.id();
  return a.tape()->make(
      std::move(out), {pa, pb}, [pa, pb, B, Ca, Cb, hw](Tape& tp, int self) {
        const Tensor& g = tp.grad_acc(self);
        for (int i = 0; i < B; ++i) {
          const Scalar* src = g.data() + static_cast<Eigen::Index>(i) * (Ca + Cb) * hw;
          if (tp.requires_grad(pa)) {
            Scalar* dst = tp.grad_acc(pa).data() + static_cast<Eigen::Index>(i) * Ca * hw;
            for (Eigen::Index j = 0; j < Ca * hw; ++j) dst[j] += src[j];
          }
          if (tp.requires_grad(pb)) {
            Scalar* dst = tp.grad_acc(pb).data() + static_cast<Eigen::Index>(i) * Cb * hw;
            for (Eigen::Index j = 0; j < Cb * hw; ++j) dst[j] += src[Ca * hw + j];
          }
        }
      });
}

// ---- reductions -----------------------------------------------------------

Var sum_all(const Var& a) {
  check_param(a.defined(), "sum_all: undefined operand");
  Tensor out({1});
  out[0] = a.value().array().sum();
  const int pa = a.id();
  return a.tape()->make(std::move(out), {pa}, [pa](Tape& tp, int self) {
    if (tp.requires_grad(pa))
      tp.grad_acc(pa).array() += tp.grad_acc(self)[0];
  });
}

Var mean_all(const Var& a) {
  check_param(a.defined() && a.value().size() > 0, "mean_all: empty operand");
  const Scalar n = static_cast<Scalar>(a.value().size());
  Tensor out({1});
  out[0] = a.value().array().mean();
  const int pa = a.id();
  return a.tape()->make(std::move(out), {pa}, [pa, n](Tape& tp, int self) {
    if (tp.requires_grad(pa))
      tp.grad_acc(pa).array() += tp.grad_acc(self)[0] / n;
  });
}

Var l1(const Var& a, const Var& b) {
  check_same_tape(a, b, "l1");
  check_same_shape(a.value(), b.value(), "l1");
  const Scalar n = static_cast<Scalar>(a.value().size());
  check_param(n > 0, "l1: empty operands");
  Tensor out({1});
  out[0] = (a.value().array() - b.value().array()).abs().mean();
  const int pa = a.id(), pb = b.id();
  return a.tape()->make(std::move(out), {pa, pb}, [pa, pb, n](Tape& tp,
                                                              int self) {
    const Scalar g = tp.grad_acc(self)[0] / n;
    const auto diff = tp.value(pa).array() - tp.value(pb).array();
    // sign() gives subgradient 0 at equality
    if (tp.requires_grad(pa)) tp.grad_acc(pa).array() += g * diff.sign();
    if (tp.requires_grad(pb)) tp.grad_acc(pb).array() -= g * diff.sign();
  });
}

Var bce(const Var& p, const Tensor& target) {
  check_param(p.defined(), "bce: undefined operand");
  check_same_shape(p.value(), target, "bce");
  const auto y = target.array();
  check_param(((y == 0.0) || (y == 1.0)).all(), "bce: target is not binary");
  const Scalar n = static_cast<Scalar>(target.size());
  check_param(n > 0, "bce: empty target");
  const auto pc = p.value().array().min(1.0 - kBceEps).max(kBceEps);
  Tensor out({1});
  out[0] = -(y * pc.log() + (1.0 - y) * (1.0 - pc).log()).mean();
  const int pp = p.id();
  Tensor tgt = target;
  return p.tape()->make(
      std::move(out), {pp}, [pp, tgt = std::move(tgt), n](Tape& tp, int self) {
        if (!tp.requires_grad(pp)) return;
        const Scalar g = tp.grad_acc(self)[0] / n;
        const auto pv = tp.value(pp).array();
        const auto pc = pv.min(1.0 - kBceEps).max(kBceEps);
        const auto inside =
            ((pv > kBceEps) && (pv < 1.0 - kBceEps)).cast<Scalar>();
        tp.grad_acc(pp).array() +=
            g * inside * (pc - tgt.array()) / (pc * (1.0 - pc));
      });
}

// ---- row-structured ops ---------------------------------------------------

Var row_outer(const Var& a, const Var& b) {
  check_same_tape(a, b, "row_outer");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  check_param(av.rank() == 2 && bv.rank() == 2 && av.dim(0) == bv.dim(0) &&
                  av.dim(1) == bv.dim(1),
              "row_outer: expected matching [B,C] operands");
  const int B = av.dim(0), C = av.dim(1);
  Tensor out({B, C, C});
  for (int i = 0; i < B; ++i) {
    Eigen::Map<const VectorX> ar(av.data() + static_cast<Eigen::Index>(i) * C, C);
    Eigen::Map<const VectorX> br(bv.data() + static_cast<Eigen::Index>(i) * C, C);
    Eigen::Map<MatrixRM> om(out.data() + static_cast<Eigen::Index>(i) * C * C, C, C);
    om.noalias() = ar * br.transpose();
  }
  const int pa = a.id(), pb = b.id();
  return a.tape()->make(
      std::move(out), {pa, pb}, [pa, pb, B, C](Tape& tp, int self) {
        const Tensor& g = tp.grad_acc(self);
        for (int i = 0; i < B; ++i) {
          Eigen::Map<const MatrixRM> gm(
              g.data() + static_cast<Eigen::Index>(i) * C * C, C, C);
          Eigen::Map<const VectorX> ar(
              tp.value(pa).data() + static_cast<Eigen::Index>(i) * C, C);
          Eigen::Map<const VectorX> br(
              tp.value(pb).data() + static_cast<Eigen::Index>(i) * C, C);
          if (tp.requires_grad(pa)) {
            Eigen::Map<VectorX> ga(
                tp.grad_acc(pa).data() + static_cast<Eigen::Index>(i) * C, C);
            ga.noalias() += gm * br;
          }
          if (tp.requires_grad(pb)) {
            Eigen::Map<VectorX> gb(
                tp.grad_acc(pb).data() + static_cast<Eigen::Index>(i) * C, C);
            gb.noalias() += gm.transpose() * ar;
          }
        }
      });
}

Var row_outer(const Var& a) { return row_outer(a, a); }

Var row_cosine(const Var& a, const Var& b) {
  check_same_tape(a, b, "row_cosine");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  check_param(av.rank() == 2 && av.same_shape(bv),
              "row_cosine: expected matching [B,M] operands");
  const int B = av.dim(0);
  const Eigen::Index M = av.dim(1);
  Tensor out({B});
  for (int i = 0; i < B; ++i) {
    Eigen::Map<const VectorX> ar(av.data() + i * M, M);
    Eigen::Map<const VectorX> br(bv.data() + i * M, M);
    const Scalar na = ar.norm(), nb = br.norm();
    out[i] = (na < kNormFloor || nb < kNormFloor) ? 0.0
                                                  : ar.dot(br) / (na * nb);
  }
  const int pa = a.id(), pb = b.id();
  return a.tape()->make(
      std::move(out), {pa, pb}, [pa, pb, B, M](Tape& tp, int self) {
        const Tensor& g = tp.grad_acc(self);
        for (int i = 0; i < B; ++i) {
          Eigen::Map<const VectorX> ar(tp.value(pa).data() + i * M, M);
          Eigen::Map<const VectorX> br(tp.value(pb).data() + i * M, M);
          const Scalar na = ar.norm(), nb = br.norm();
          if (na < kNormFloor || nb < kNormFloor) continue;
          const Scalar cosv = tp.value(self)[i];
          const Scalar gi = g[i];
          if (tp.requires_grad(pa)) {
            Eigen::Map<VectorX> ga(tp.grad_acc(pa).data() + i * M, M);
            ga.noalias() += gi * (br / (na * nb) - cosv * ar / (na * na));
          }
          if (tp.requires_grad(pb)) {
            Eigen::Map<VectorX> gb(tp.grad_acc(pb).data() + i * M, M);
            gb.noalias() += gi * (ar / (na * nb) - cosv * br / (nb * nb));
          }
        }
      });
}

namespace {

// Row-wise stable softmax and log-softmax of a [B,C] tensor.
void softmax_rows(const Tensor& z, MatrixRM& p, MatrixRM& logp) {
  const int B = z.dim(0), C = z.dim(1);
  p.resize(B, C);
  logp.resize(B, C);
  for (int i = 0; i < B; ++i) {
    Eigen::Map<const Eigen::RowVectorXd> row(
        z.data() + static_cast<Eigen::Index>(i) * C, C);
    const Scalar mx = row.maxCoeff();
    Eigen::RowVectorXd e = (row.array() - mx).exp();
    const Scalar s = e.sum();
    p.row(i) = e / s;
    logp.row(i) = (row.array() - mx) - std::log(s);
  }
}

}  // namespace

Var row_kl_softmax(const Var& target, const Var& approx) {
  check_same_tape(target, approx, "row_kl_softmax");
  const Tensor& tv = target.value();
  const Tensor& qv = approx.value();
  check_param(tv.rank() == 2 && tv.same_shape(qv),
              "row_kl_softmax: expected matching [B,C] operands");
  const int B = tv.dim(0), C = tv.dim(1);
  MatrixRM p, logp, q, logq;
  softmax_rows(tv, p, logp);
  softmax_rows(qv, q, logq);
  Tensor out({B});
  for (int i = 0; i < B; ++i)
    out[i] = (p.row(i).array() * (logp.row(i) - logq.row(i)).array()).sum();
  const int pt = target.id(), pq = approx.id();
  return target.tape()->make(
      std::move(out), {pt, pq}, [pt, pq, B, C](Tape& tp, int self) {
        MatrixRM p, logp, q, logq;
        softmax_rows(tp.value(pt), p, logp);
        softmax_rows(tp.value(pq), q, logq);
        const Tensor& g = tp.grad_acc(self);
        for (int i = 0; i < B; ++i) {
          const Scalar gi = g[i];
          const Scalar kl =
              (p.row(i).array() * (logp.row(i) - logq.row(i)).array()).sum();
          if (tp.requires_grad(pq)) {
            Eigen::Map<Eigen::RowVectorXd> gq(
                tp.grad_acc(pq).data() + static_cast<Eigen::Index>(i) * C, C);
            gq.array() += gi * (q.row(i) - p.row(i)).array();
          }
          if (tp.requires_grad(pt)) {
            Eigen::Map<Eigen::RowVectorXd> gt(
                tp.grad_acc(pt).data() + static_cast<Eigen::Index>(i) * C, C);
            gt.array() +=
                gi * p.row(i).array() *
                ((logp.row(i) - logq.row(i)).array() - kl);
          }
        }
      });
}

}  // namespace gkd::ad
