#pragma once

// Minimal reverse-mode tape over Tensor operations. Nodes append in
// evaluation order; backward walks them once in reverse, accumulating
// cotangents into whichever inputs require gradients. The selective scan
// participates through a registered custom VJP instead of being traced
// step-by-step.

#include <functional>
#include <utility>
#include <vector>

#include "rmscan/geometry.hpp"
#include "rmscan/scan.hpp"
#include "rmscan/tensor.hpp"

namespace rmscan {

class Tape;

struct Var {
  int32_t id = -1;
  Tape* tape = nullptr;

  bool valid() const { return id >= 0 && tape != nullptr; }
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true) {
    return push(std::move(value), requires_grad);
  }
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  const Tensor& val(Var v) const {
    RMSCAN_CHECK(owns(v), "tape: foreign or invalid var");
    return nodes_[static_cast<size_t>(v.id)].value;
  }

  // Gradient from the last backward(); zero if v never received one.
  const Tensor& grad(Var v) {
    RMSCAN_CHECK(owns(v), "tape: foreign or invalid var");
    Node& n = nodes_[static_cast<size_t>(v.id)];
    RMSCAN_CHECK(n.requires_grad, "tape: grad of a non-differentiable var");
    if (!n.has_grad) {
      n.grad = Tensor(n.value.shape());
      n.has_grad = true;
    }
    return n.grad;
  }

  void backward(Var loss) {
    RMSCAN_CHECK(owns(loss), "tape: foreign or invalid loss var");
    RMSCAN_CHECK(val(loss).numel() == 1, "tape: loss must be scalar");
    RMSCAN_CHECK(nodes_[static_cast<size_t>(loss.id)].requires_grad,
                 "tape: loss is detached from every differentiable leaf");
    accum(loss.id, Tensor::scalar(1.0));
    for (int32_t i = loss.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (n.has_grad && n.bwd) n.bwd();
    }
  }

  size_t size() const { return nodes_.size(); }

  // --- op-construction interface ---

  Var push(Tensor value, bool requires_grad) {
    RMSCAN_CHECK(value.all_finite(), "tape: non-finite op result");
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int32_t>(nodes_.size() - 1), this};
  }

  void set_bwd(Var v, std::function<void()> bwd) {
    RMSCAN_CHECK(owns(v), "tape: foreign or invalid var");
    nodes_[static_cast<size_t>(v.id)].bwd = std::move(bwd);
  }

  bool requires_grad(Var v) const {
    RMSCAN_CHECK(owns(v), "tape: foreign or invalid var");
    return nodes_[static_cast<size_t>(v.id)].requires_grad;
  }

  // Upstream cotangent of a node, valid while its bwd closure runs.
  const Tensor& cotangent(int32_t id) const {
    return nodes_[static_cast<size_t>(id)].grad;
  }

  void accum(int32_t id, const Tensor& g) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.requires_grad) return;
    if (!n.has_grad) {
      n.grad = Tensor(n.value.shape());
      n.has_grad = true;
    }
    RMSCAN_CHECK(n.grad.same_shape(g), "tape: gradient shape mismatch");
    n.grad.add_(g);
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool has_grad = false;
    std::function<void()> bwd;
  };

  bool owns(Var v) const {
    return v.tape == this && v.id >= 0 &&
           v.id < static_cast<int32_t>(nodes_.size());
  }

  std::vector<Node> nodes_;
};

namespace ops {

inline Tape& tape_of(Var a) {
  RMSCAN_CHECK(a.valid(), "op: invalid var");
  return *a.tape;
}

inline void check_same_tape(Var a, Var b) {
  RMSCAN_CHECK(a.valid() && b.valid() && a.tape == b.tape,
               "op: vars from different tapes");
}

// --- elementwise ---

// df(x, y) is the local derivative dy/dx given input and output values.
template <class F, class DF>
Var ew_unary(Var x, F f, DF df) {
  Tape& t = tape_of(x);
  const Tensor& xv = t.val(x);
  Tensor y(xv.shape());
  for (int64_t i = 0; i < xv.numel(); ++i) y[i] = f(xv[i]);
  Var out = t.push(std::move(y), t.requires_grad(x));
  if (t.requires_grad(x)) {
    Tape* tp = &t;
    const int32_t xid = x.id, oid = out.id;
    t.set_bwd(out, [tp, xid, oid, df]() {
      const Tensor& gy = tp->cotangent(oid);
      const Tensor& xv2 = tp->val(Var{xid, tp});
      const Tensor& yv2 = tp->val(Var{oid, tp});
      Tensor gx(xv2.shape());
      for (int64_t i = 0; i < gx.numel(); ++i)
        gx[i] = gy[i] * df(xv2[i], yv2[i]);
      tp->accum(xid, gx);
    });
  }
  return out;
}

inline Var add(Var a, Var b) {
  check_same_tape(a, b);
  Tape& t = tape_of(a);
  const Tensor& av = t.val(a);
  const Tensor& bv = t.val(b);
  RMSCAN_CHECK(av.same_shape(bv), "add: shape mismatch");
  Tensor y(av.shape());
  for (int64_t i = 0; i < y.numel(); ++i) y[i] = av[i] + bv[i];
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  Var out = t.push(std::move(y), rg);
  if (rg) {
    Tape* tp = &t;
    const int32_t aid = a.id, bid = b.id, oid = out.id;
    t.set_bwd(out, [tp, aid, bid, oid]() {
      const Tensor& gy = tp->cotangent(oid);
      tp->accum(aid, gy);
      tp->accum(bid, gy);
    });
  }
  return out;
}

inline Var sub(Var a, Var b) {
  check_same_tape(a, b);
  Tape& t = tape_of(a);
  const Tensor& av = t.val(a);
  const Tensor& bv = t.val(b);
  RMSCAN_CHECK(av.same_shape(bv), "sub: shape mismatch");
  Tensor y(av.shape());
  for (int64_t i = 0; i < y.numel(); ++i) y[i] = av[i] - bv[i];
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  Var out = t.push(std::move(y), rg);
  if (rg) {
    Tape* tp = &t;
    const int32_t aid = a.id, bid = b.id, oid = out.id;
    t.set_bwd(out, [tp, aid, bid, oid]() {
      const Tensor& gy = tp->cotangent(oid);
      tp->accum(aid, gy);
      Tensor gb(gy.shape());
      for (int64_t i = 0; i < gb.numel(); ++i) gb[i] = -gy[i];
      tp->accum(bid, gb);
    });
  }
  return out;
}

inline Var mul(Var a, Var b) {
  check_same_tape(a, b);
  Tape& t = tape_of(a);
  const Tensor& av = t.val(a);
  const Tensor& bv = t.val(b);
  RMSCAN_CHECK(av.same_shape(bv), "mul: shape mismatch");
  Tensor y(av.shape());
  for (int64_t i = 0; i < y.numel(); ++i) y[i] = av[i] * bv[i];
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  Var out = t.push(std::move(y), rg);
  if (rg) {
    Tape* tp = &t;
    const int32_t aid = a.id, bid = b.id, oid = out.id;
    t.set_bwd(out, [tp, aid, bid, oid]() {
      const Tensor& gy = tp->cotangent(oid);
      const Tensor& av2 = tp->val(Var{aid, tp});
      const Tensor& bv2 = tp->val(Var{bid, tp});
      Tensor ga(gy.shape()), gb(gy.shape());
      for (int64_t i = 0; i < gy.numel(); ++i) {
        ga[i] = gy[i] * bv2[i];
        gb[i] = gy[i] * av2[i];
      }
      tp->accum(aid, ga);
      tp->accum(bid, gb);
    });
  }
  return out;
}

inline Var scale(Var x, double c) {
  return ew_unary(
      x, [c](double v) { return c * v; },
      [c](double, double) { return c; });
}

inline Var shift(Var x, double c) {
  return ew_unary(
      x, [c](double v) { return v + c; },
      [](double, double) { return 1.0; });
}

// Elementwise multiply by a constant tensor of identical shape.
inline Var mul_const(Var x, const Tensor& c) {
  Tape& t = tape_of(x);
  const Tensor& xv = t.val(x);
  RMSCAN_CHECK(xv.same_shape(c), "mul_const: shape mismatch");
  Tensor y(xv.shape());
  for (int64_t i = 0; i < y.numel(); ++i) y[i] = xv[i] * c[i];
  Var out = t.push(std::move(y), t.requires_grad(x));
  if (t.requires_grad(x)) {
    Tape* tp = &t;
    const int32_t xid = x.id, oid = out.id;
    Tensor cc = c;
    t.set_bwd(out, [tp, xid, oid, cc]() {
      const Tensor& gy = tp->cotangent(oid);
      Tensor gx(gy.shape());
      for (int64_t i = 0; i < gx.numel(); ++i) gx[i] = gy[i] * cc[i];
      tp->accum(xid, gx);
    });
  }
  return out;
}

inline Var sigmoid_op(Var x) {
  return ew_unary(
      x, [](double v) { return sigmoid(v); },
      [](double, double y) { return y * (1.0 - y); });
}

inline Var tanh_op(Var x) {
  return ew_unary(
      x, [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

inline Var softplus_op(Var x) {
  return ew_unary(
      x, [](double v) { return softplus(v); },
      [](double v, double) { return sigmoid(v); });
}

inline Var silu_op(Var x) {
  return ew_unary(
      x, [](double v) { return v * sigmoid(v); },
      [](double v, double) {
        const double s = sigmoid(v);
        return s * (1.0 + v * (1.0 - s));
      });
}

inline Var exp_op(Var x) {
  return ew_unary(
      x, [](double v) { return std::exp(v); },
      [](double, double y) { return y; });
}

inline Var log_op(Var x) {
  Tape& t = tape_of(x);
  const Tensor& xv = t.val(x);
  for (int64_t i = 0; i < xv.numel(); ++i)
    RMSCAN_CHECK(xv[i] > 0.0, "log: non-positive input");
  return ew_unary(
      x, [](double v) { return std::log(v); },
      [](double v, double) { return 1.0 / v; });
}

inline Var neg_exp_op(Var x) {
  return ew_unary(
      x, [](double v) { return -std::exp(v); },
      [](double, double y) { return y; });
}

inline Var abs_op(Var x) {
  return ew_unary(
      x, [](double v) { return std::fabs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

inline Var clamp_op(Var x, double lo, double hi) {
  RMSCAN_CHECK(lo < hi, "clamp: empty interval");
  return ew_unary(
      x, [lo, hi](double v) { return std::min(hi, std::max(lo, v)); },
      [lo, hi](double v, double) { return (v > lo && v < hi) ? 1.0 : 0.0; });
}

// Huber penalty of a residual, elementwise.
inline Var huber_op(Var x, double delta) {
  RMSCAN_CHECK(delta > 0.0, "huber: delta must be positive");
  return ew_unary(
      x,
      [delta](double v) {
        const double a = std::fabs(v);
        return a <= delta ? 0.5 * v * v : delta * (a - 0.5 * delta);
      },
      [delta](double v, double) {
        return std::fabs(v) <= delta ? v : (v > 0.0 ? delta : -delta);
      });
}

// --- reductions / reshaping ---

inline Var sum_all(Var x) {
  Tape& t = tape_of(x);
  const Tensor& xv = t.val(x);
  double s = 0.0;
  for (int64_t i = 0; i < xv.numel(); ++i) s += xv[i];
  Var out = t.push(Tensor::scalar(s), t.requires_grad(x));
  if (t.requires_grad(x)) {
    Tape* tp = &t;
    const int32_t xid = x.id, oid = out.id;
    t.set_bwd(out, [tp, xid, oid]() {
      const double g = tp->cotangent(oid)[0];
      const Tensor& xv2 = tp->val(Var{xid, tp});
      tp->accum(xid, Tensor::full(xv2.shape(), g));
    });
  }
  return out;
}

inline Var reshape(Var x, const Shape& shape) {
  Tape& t = tape_of(x);
  Tensor y = t.val(x).reshaped(shape);
  Var out = t.push(std::move(y), t.requires_grad(x));
  if (t.requires_grad(x)) {
    Tape* tp = &t;
    const int32_t xid = x.id, oid = out.id;
    t.set_bwd(out, [tp, xid, oid]() {
      const Tensor& gy = tp->cotangent(oid);
      tp->accum(xid, gy.reshaped(tp->val(Var{xid, tp}).shape()));
    });
  }
  return out;
}

// x [R, D] gathered into [K, D] by row indices (duplicates allowed).
inline Var gather_rows(Var x, const std::vector<int64_t>& idx) {
  Tape& t = tape_of(x);
  const Tensor& xv = t.val(x);
  RMSCAN_CHECK(xv.ndim() == 2, "gather_rows: expect [R,D]");
  const int64_t rows = xv.size(0), d = xv.size(1);
  const int64_t k = static_cast<int64_t>(idx.size());
  Tensor y({k, d});
  for (int64_t i = 0; i < k; ++i) {
    const int64_t r = idx[static_cast<size_t>(i)];
    RMSCAN_CHECK(r >= 0 && r < rows, "gather_rows: index out of range");
    for (int64_t j = 0; j < d; ++j) y[i * d + j] = xv[r * d + j];
  }
  Var out = t.push(std::move(y), t.requires_grad(x));
  if (t.requires_grad(x)) {
    Tape* tp = &t;
    const int32_t xid = x.id, oid = out.id;
    auto ii = idx;
    t.set_bwd(out, [tp, xid, oid, ii, rows, d]() {
      const Tensor& gy = tp->cotangent(oid);
      Tensor gx({rows, d});
      for (size_t i = 0; i < ii.size(); ++i)
        for (int64_t j = 0; j < d; ++j)
          gx[ii[i] * d + j] += gy[static_cast<int64_t>(i) * d + j];
      tp->accum(xid, gx);
    });
  }
  return out;
}

// x [K, D] scattered (additively) into [R, D] at row indices.
inline Var scatter_add_rows(Var x, const std::vector<int64_t>& idx,
                            int64_t rows) {
  Tape& t = tape_of(x);
  const Tensor& xv = t.val(x);
  RMSCAN_CHECK(xv.ndim() == 2, "scatter_add_rows: expect [K,D]");
  RMSCAN_CHECK(xv.size(0) == static_cast<int64_t>(idx.size()),
               "scatter_add_rows: index count mismatch");
  const int64_t k = xv.size(0), d = xv.size(1);
  Tensor y({rows, d});
  for (int64_t i = 0; i < k; ++i) {
    const int64_t r = idx[static_cast<size_t>(i)];
    RMSCAN_CHECK(r >= 0 && r < rows, "scatter_add_rows: index out of range");
    for (int64_t j = 0; j < d; ++j) y[r * d + j] += xv[i * d + j];
  }
  Var out = t.push(std::move(y), t.requires_grad(x));
  if (t.requires_grad(x)) {
    Tape* tp = &t;
    const int32_t xid = x.id, oid = out.id;
    auto ii = idx;
    t.set_bwd(out, [tp, xid, oid, ii, d]() {
      const Tensor& gy = tp->cotangent(oid);
      Tensor gx({static_cast<int64_t>(ii.size()), d});
      for (size_t i = 0; i < ii.size(); ++i)
        for (int64_t j = 0; j < d; ++j)
          gx[static_cast<int64_t>(i) * d + j] = gy[ii[i] * d + j];
      tp->accum(xid, gx);
    });
  }
  return out;
}

inline Var concat_last(Var a, Var b) {
  check_same_tape(a, b);
  Tape& t = tape_of(a);
  const Tensor& av = t.val(a);
  const Tensor& bv = t.val(b);
  RMSCAN_CHECK(av.ndim() == 2 && bv.ndim() == 2 && av.size(0) == bv.size(0),
               "concat_last: expect matching [R,*]");
  const int64_t rows = av.size(0), da = av.size(1), db = bv.size(1);
  Tensor y({rows, da + db});
  for (int64_t r = 0; r < rows; ++r) {
    for (int64_t j = 0; j < da; ++j) y[r * (da + db) + j] = av[r * da + j];
    for (int64_t j = 0; j < db; ++j) y[r * (da + db) + da + j] = bv[r * db + j];
  }
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  Var out = t.push(std::move(y), rg);
  if (rg) {
    Tape* tp = &t;
    const int32_t aid = a.id, bid = b.id, oid = out.id;
    t.set_bwd(out, [tp, aid, bid, oid, rows, da, db]() {
      const Tensor& gy = tp->cotangent(oid);
      Tensor ga({rows, da}), gb({rows, db});
      for (int64_t r = 0; r < rows; ++r) {
        for (int64_t j = 0; j < da; ++j) ga[r * da + j] = gy[r * (da + db) + j];
        for (int64_t j = 0; j < db; ++j)
          gb[r * db + j] = gy[r * (da + db) + da + j];
      }
      tp->accum(aid, ga);
      tp->accum(bid, gb);
    });
  }
  return out;
}

// --- linear algebra / structured ---

// x [..., Din] times w [Dout, Din] plus optional bias [Dout].
inline Var linear(Var x, Var w, Var b = Var{}) {
  check_same_tape(x, w);
  Tape& t = tape_of(x);
  const Tensor& xv = t.val(x);
  const Tensor& wv = t.val(w);
  RMSCAN_CHECK(wv.ndim() == 2, "linear: w must be [Dout,Din]");
  const int64_t din = wv.size(1), dout = wv.size(0);
  RMSCAN_CHECK(xv.ndim() >= 1 && xv.size(xv.ndim() - 1) == din,
               "linear: input feature dim mismatch");
  const int64_t rows = xv.numel() / din;
  const bool has_b = b.valid();
  if (has_b) {
    check_same_tape(x, b);
    RMSCAN_CHECK(t.val(b).numel() == dout, "linear: bias size mismatch");
  }

  Shape out_shape = xv.shape();
  out_shape.back() = dout;
  Tensor y(out_shape);
  const double* bp = has_b ? t.val(b).data() : nullptr;
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * din;
    double* yr = y.data() + r * dout;
    for (int64_t o = 0; o < dout; ++o) {
      const double* wr = wv.data() + o * din;
      double s = bp ? bp[o] : 0.0;
      for (int64_t j = 0; j < din; ++j) s += wr[j] * xr[j];
      yr[o] = s;
    }
  }
  const bool rg = t.requires_grad(x) || t.requires_grad(w) ||
                  (has_b && t.requires_grad(b));
  Var out = t.push(std::move(y), rg);
  if (rg) {
    Tape* tp = &t;
    const int32_t xid = x.id, wid = w.id, oid = out.id;
    const int32_t bid = has_b ? b.id : -1;
    t.set_bwd(out, [tp, xid, wid, bid, oid, rows, din, dout]() {
      const Tensor& gy = tp->cotangent(oid);
      const Tensor& xv2 = tp->val(Var{xid, tp});
      const Tensor& wv2 = tp->val(Var{wid, tp});
      Tensor gx(xv2.shape());
      Tensor gw({dout, din});
      for (int64_t r = 0; r < rows; ++r) {
        const double* gyr = gy.data() + r * dout;
        const double* xr = xv2.data() + r * din;
        double* gxr = gx.data() + r * din;
        for (int64_t o = 0; o < dout; ++o) {
          const double g = gyr[o];
          const double* wr = wv2.data() + o * din;
          double* gwr = gw.data() + o * din;
          for (int64_t j = 0; j < din; ++j) {
            gxr[j] += g * wr[j];
            gwr[j] += g * xr[j];
          }
        }
      }
      tp->accum(xid, gx);
      tp->accum(wid, gw);
      if (bid >= 0) {
        Tensor gb({dout});
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t o = 0; o < dout; ++o) gb[o] += gy[r * dout + o];
        tp->accum(bid, gb);
      }
    });
  }
  return out;
}

// x [H,W,Ci] * w [Co,Kh,Kw,Ci] + b [Co], zero padding.
inline Var conv2d(Var x, Var w, Var b, int64_t stride, int64_t pad) {
  check_same_tape(x, w);
  check_same_tape(x, b);
  Tape& t = tape_of(x);
  const Tensor& xv = t.val(x);
  const Tensor& wv = t.val(w);
  const Tensor& bv = t.val(b);
  RMSCAN_CHECK(xv.ndim() == 3 && wv.ndim() == 4, "conv2d: expect [H,W,Ci], [Co,Kh,Kw,Ci]");
  const int64_t h = xv.size(0), wd = xv.size(1), ci = xv.size(2);
  const int64_t co = wv.size(0), kh = wv.size(1), kw = wv.size(2);
  RMSCAN_CHECK(wv.size(3) == ci, "conv2d: channel mismatch");
  RMSCAN_CHECK(bv.numel() == co, "conv2d: bias size mismatch");
  RMSCAN_CHECK(stride >= 1 && pad >= 0, "conv2d: bad stride/pad");
  const int64_t ho = (h + 2 * pad - kh) / stride + 1;
  const int64_t wo = (wd + 2 * pad - kw) / stride + 1;
  RMSCAN_CHECK(ho >= 1 && wo >= 1, "conv2d: empty output");

  Tensor y({ho, wo, co});
  for (int64_t r = 0; r < ho; ++r) {
    for (int64_t c = 0; c < wo; ++c) {
      for (int64_t o = 0; o < co; ++o) {
        double s = bv[o];
        for (int64_t dr = 0; dr < kh; ++dr) {
          const int64_t ir = r * stride + dr - pad;
          if (ir < 0 || ir >= h) continue;
          for (int64_t dc = 0; dc < kw; ++dc) {
            const int64_t ic = c * stride + dc - pad;
            if (ic < 0 || ic >= wd) continue;
            const double* xp = xv.data() + (ir * wd + ic) * ci;
            const double* wp = wv.data() + ((o * kh + dr) * kw + dc) * ci;
            for (int64_t k = 0; k < ci; ++k) s += xp[k] * wp[k];
          }
        }
        y.at(r, c, o) = s;
      }
    }
  }
  const bool rg = t.requires_grad(x) || t.requires_grad(w) || t.requires_grad(b);
  Var out = t.push(std::move(y), rg);
  if (rg) {
    Tape* tp = &t;
    const int32_t xid = x.id, wid = w.id, bid = b.id, oid = out.id;
    t.set_bwd(out, [tp, xid, wid, bid, oid, h, wd, ci, co, kh, kw, stride, pad,
                    ho, wo]() {
      const Tensor& gy = tp->cotangent(oid);
      const Tensor& xv2 = tp->val(Var{xid, tp});
      const Tensor& wv2 = tp->val(Var{wid, tp});
      Tensor gx({h, wd, ci});
      Tensor gw({co, kh, kw, ci});
      Tensor gb({co});
      for (int64_t r = 0; r < ho; ++r) {
        for (int64_t c = 0; c < wo; ++c) {
          for (int64_t o = 0; o < co; ++o) {
            const double g = gy.at(r, c, o);
            gb[o] += g;
            for (int64_t dr = 0; dr < kh; ++dr) {
              const int64_t ir = r * stride + dr - pad;
              if (ir < 0 || ir >= h) continue;
              for (int64_t dc = 0; dc < kw; ++dc) {
                const int64_t ic = c * stride + dc - pad;
                if (ic < 0 || ic >= wd) continue;
                const double* xp = xv2.data() + (ir * wd + ic) * ci;
                const double* wp = wv2.data() + ((o * kh + dr) * kw + dc) * ci;
                double* gxp = gx.data() + (ir * wd + ic) * ci;
                double* gwp = gw.data() + ((o * kh + dr) * kw + dc) * ci;
                for (int64_t k = 0; k < ci; ++k) {
                  gxp[k] += g * wp[k];
                  gwp[k] += g * xp[k];
                }
              }
            }
          }
        }
      }
      tp->accum(xid, gx);
      tp->accum(wid, gw);
      tp->accum(bid, gb);
    });
  }
  return out;
}

// Nearest-neighbour 2x upsample of [H,W,C].
inline Var upsample2(Var x) {
  Tape& t = tape_of(x);
  const Tensor& xv = t.val(x);
  RMSCAN_CHECK(xv.ndim() == 3, "upsample2: expect [H,W,C]");
  const int64_t h = xv.size(0), w = xv.size(1), c = xv.size(2);
  Tensor y({2 * h, 2 * w, c});
  for (int64_t r = 0; r < 2 * h; ++r)
    for (int64_t cc = 0; cc < 2 * w; ++cc)
      for (int64_t k = 0; k < c; ++k)
        y.at(r, cc, k) = xv.at(r / 2, cc / 2, k);
  Var out = t.push(std::move(y), t.requires_grad(x));
  if (t.requires_grad(x)) {
    Tape* tp = &t;
    const int32_t xid = x.id, oid = out.id;
    t.set_bwd(out, [tp, xid, oid, h, w, c]() {
      const Tensor& gy = tp->cotangent(oid);
      Tensor gx({h, w, c});
      for (int64_t r = 0; r < 2 * h; ++r)
        for (int64_t cc = 0; cc < 2 * w; ++cc)
          for (int64_t k = 0; k < c; ++k)
            gx.at(r / 2, cc / 2, k) += gy.at(r, cc, k);
      tp->accum(xid, gx);
    });
  }
  return out;
}

// 2x2 average pool, stride 2; dims must be even.
inline Var avgpool2(Var x) {
  Tape& t = tape_of(x);
  const Tensor& xv = t.val(x);
  RMSCAN_CHECK(xv.ndim() == 3, "avgpool2: expect [H,W,C]");
  const int64_t h = xv.size(0), w = xv.size(1), c = xv.size(2);
  RMSCAN_CHECK(h % 2 == 0 && w % 2 == 0, "avgpool2: dims must be even");
  Tensor y({h / 2, w / 2, c});
  for (int64_t r = 0; r < h / 2; ++r)
    for (int64_t cc = 0; cc < w / 2; ++cc)
      for (int64_t k = 0; k < c; ++k)
        y.at(r, cc, k) = 0.25 * (xv.at(2 * r, 2 * cc, k) +
                                 xv.at(2 * r, 2 * cc + 1, k) +
                                 xv.at(2 * r + 1, 2 * cc, k) +
                                 xv.at(2 * r + 1, 2 * cc + 1, k));
  Var out = t.push(std::move(y), t.requires_grad(x));
  if (t.requires_grad(x)) {
    Tape* tp = &t;
    const int32_t xid = x.id, oid = out.id;
    t.set_bwd(out, [tp, xid, oid, h, w, c]() {
      const Tensor& gy = tp->cotangent(oid);
      Tensor gx({h, w, c});
      for (int64_t r = 0; r < h / 2; ++r)
        for (int64_t cc = 0; cc < w / 2; ++cc)
          for (int64_t k = 0; k < c; ++k) {
            const double g = 0.25 * gy.at(r, cc, k);
            gx.at(2 * r, 2 * cc, k) += g;
            gx.at(2 * r, 2 * cc + 1, k) += g;
            gx.at(2 * r + 1, 2 * cc, k) += g;
            gx.at(2 * r + 1, 2 * cc + 1, k) += g;
          }
      tp->accum(xid, gx);
    });
  }
  return out;
}

// Layer norm over the last dimension with learnable gain and bias.
inline Var layer_norm(Var x, Var gain, Var bias) {
  check_same_tape(x, gain);
  check_same_tape(x, bias);
  Tape& t = tape_of(x);
  const Tensor& xv = t.val(x);
  const Tensor& gv = t.val(gain);
  const Tensor& bv = t.val(bias);
  const int64_t d = xv.size(xv.ndim() - 1);
  RMSCAN_CHECK(gv.numel() == d && bv.numel() == d,
               "layer_norm: parameter size mismatch");
  const int64_t rows = xv.numel() / d;

  Tensor y(xv.shape());
  for (int64_t r = 0; r < rows; ++r)
    rmscan::detail::layer_norm_channels(xv.data() + r * d, d, gv.data(),
                                        bv.data(), y.data() + r * d);
  const bool rg = t.requires_grad(x) || t.requires_grad(gain) ||
                  t.requires_grad(bias);
  Var out = t.push(std::move(y), rg);
  if (rg) {
    Tape* tp = &t;
    const int32_t xid = x.id, gid = gain.id, bid = bias.id, oid = out.id;
    t.set_bwd(out, [tp, xid, gid, bid, oid, rows, d]() {
      const Tensor& gy = tp->cotangent(oid);
      const Tensor& xv2 = tp->val(Var{xid, tp});
      const Tensor& gv2 = tp->val(Var{gid, tp});
      Tensor gx(xv2.shape());
      Tensor gg({d});
      Tensor gb({d});
      std::vector<double> yhat(static_cast<size_t>(d));
      for (int64_t r = 0; r < rows; ++r) {
        const double* xr = xv2.data() + r * d;
        const double* gyr = gy.data() + r * d;
        double* gxr = gx.data() + r * d;
        double mean = 0.0;
        for (int64_t k = 0; k < d; ++k) mean += xr[k];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (int64_t k = 0; k < d; ++k) {
          const double cdev = xr[k] - mean;
          var += cdev * cdev;
        }
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
        double m1 = 0.0, m2 = 0.0;
        for (int64_t k = 0; k < d; ++k) {
          yhat[static_cast<size_t>(k)] = (xr[k] - mean) * inv;
          const double gh = gyr[k] * gv2[k];
          m1 += gh;
          m2 += gh * yhat[static_cast<size_t>(k)];
          gg[k] += gyr[k] * yhat[static_cast<size_t>(k)];
          gb[k] += gyr[k];
        }
        m1 /= static_cast<double>(d);
        m2 /= static_cast<double>(d);
        for (int64_t k = 0; k < d; ++k) {
          const double gh = gyr[k] * gv2[k];
          gxr[k] = inv * (gh - m1 - yhat[static_cast<size_t>(k)] * m2);
        }
      }
      tp->accum(xid, gx);
      tp->accum(gid, gg);
      tp->accum(bid, gb);
    });
  }
  return out;
}

// --- the scan as a custom-VJP node ---

// Trainable handles for one RMS layer. log_a parameterizes A = -exp(log_a) so
// strict negativity survives unconstrained optimizer updates.
struct SsmVars {
  Var log_a;
  Var w_dt_img, w_b, w_c_img;
  Var w_dt_rad, w_c_rad, w_gate, gate_bias;
  Var dt_bias;
};

inline SsmParams materialize(Tape& t, const SsmVars& v) {
  SsmParams p;
  const Tensor& la = t.val(v.log_a);
  p.A = Tensor(la.shape());
  for (int64_t i = 0; i < la.numel(); ++i) p.A[i] = -std::exp(la[i]);
  p.w_dt_img = t.val(v.w_dt_img);
  p.w_b = t.val(v.w_b);
  p.w_c_img = t.val(v.w_c_img);
  p.w_dt_rad = t.val(v.w_dt_rad);
  p.w_c_rad = t.val(v.w_c_rad);
  p.w_gate = t.val(v.w_gate);
  p.gate_bias = t.val(v.gate_bias);
  p.dt_bias = t.val(v.dt_bias);
  return p;
}

// Full selective scan: forward through scan-core's reference kernel, backward
// through its hand-derived VJP, with the log-A chain rule applied here.
inline Var rms_scan(const SsmVars& pv, Var x_img, Var x_rad,
                    ModulationMode mode) {
  check_same_tape(x_img, x_rad);
  Tape& t = tape_of(x_img);
  SsmParams p = materialize(t, pv);
  TokenStreams st;
  st.x_img = t.val(x_img);
  st.x_rad = t.val(x_rad);
  ScanOutput fw = selective_scan_fwd(p, st, mode);

  bool rg = t.requires_grad(x_img) || t.requires_grad(x_rad);
  for (Var v : {pv.log_a, pv.w_dt_img, pv.w_b, pv.w_c_img, pv.w_dt_rad,
                pv.w_c_rad, pv.w_gate, pv.gate_bias, pv.dt_bias})
    rg = rg || t.requires_grad(v);

  Var out = t.push(std::move(fw.y), rg);
  if (rg) {
    Tape* tp = &t;
    const SsmVars pvc = pv;
    const int32_t iid = x_img.id, rid = x_rad.id, oid = out.id;
    auto saved = fw.saved;
    auto params = std::make_shared<SsmParams>(std::move(p));
    auto streams = std::make_shared<TokenStreams>(std::move(st));
    t.set_bwd(out, [tp, pvc, iid, rid, oid, saved, params, streams, mode]() {
      const Tensor& gy = tp->cotangent(oid);
      ScanGrads g = selective_scan_bwd(*params, *streams, mode, *saved, gy);
      Tensor g_log_a(params->A.shape());
      for (int64_t i = 0; i < g_log_a.numel(); ++i)
        g_log_a[i] = g.params.A[i] * params->A[i];
      tp->accum(pvc.log_a.id, g_log_a);
      tp->accum(pvc.w_dt_img.id, g.params.w_dt_img);
      tp->accum(pvc.w_b.id, g.params.w_b);
      tp->accum(pvc.w_c_img.id, g.params.w_c_img);
      tp->accum(pvc.w_dt_rad.id, g.params.w_dt_rad);
      tp->accum(pvc.w_c_rad.id, g.params.w_c_rad);
      tp->accum(pvc.w_gate.id, g.params.w_gate);
      tp->accum(pvc.gate_bias.id, g.params.gate_bias);
      tp->accum(pvc.dt_bias.id, g.params.dt_bias);
      tp->accum(iid, g.x_img);
      tp->accum(rid, g.x_rad);
    });
  }
  return out;
}

}  // namespace ops

}  // namespace rmscan
