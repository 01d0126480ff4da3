#pragma once

// Composite depth objective and evaluation metrics. The loss is built from
// tape ops so training and reporting share one implementation; metrics are
// pure functions.

#include <vector>

#include "rmscan/tape.hpp"
#include "rmscan/tensor.hpp"

namespace rmscan {

struct DepthNorm {
  double d_min = 0.5;
  double d_max = 80.0;
};

inline void validate(const DepthNorm& n) {
  RMSCAN_CHECK(n.d_min > 0.0 && n.d_min < n.d_max, "depth norm: need 0 < d_min < d_max");
}

// Affine-in-log map pinned to tilde(d_min) = -1, tilde(d_max) = +1. The
// operation order here must stay in lockstep with the tape expression in
// composite_loss_tape so identical depths normalize bit-identically.
inline double log_normalize(double d, const DepthNorm& n) {
  const double dc = std::min(n.d_max, std::max(n.d_min, d));
  const double span = std::log(n.d_max) - std::log(n.d_min);
  return (std::log(dc) - std::log(n.d_min)) * (2.0 / span) - 1.0;
}

inline double log_denormalize(double t, const DepthNorm& n) {
  const double l =
      0.5 * (t + 1.0) * (std::log(n.d_max) - std::log(n.d_min)) +
      std::log(n.d_min);
  return std::exp(l);
}

inline double huber_value(double r, double delta) {
  const double a = std::fabs(r);
  return a <= delta ? 0.5 * r * r : delta * (a - 0.5 * delta);
}

struct LossWeights {
  double lam_log = 1.0;
  double lam_lin = 1.0;
  double lam_grad = 0.5;
  double lam_sparse = 1.0;
};

constexpr double kHuberDeltaMetres = 5.0;

struct LossBreakdown {
  double total = 0.0;
  double l_log = 0.0;
  double l_lin = 0.0;
  double l_grad = 0.0;
  double l_sparse = 0.0;
};

namespace detail {

inline int64_t mask_count(const Tensor& mask) {
  int64_t n = 0;
  for (int64_t i = 0; i < mask.numel(); ++i)
    if (mask[i] != 0.0) ++n;
  return n;
}

inline Tensor tilde_of(const Tensor& d, const DepthNorm& n) {
  Tensor out(d.shape());
  for (int64_t i = 0; i < d.numel(); ++i) out[i] = log_normalize(d[i], n);
  return out;
}

// Masked mean of an elementwise residual node; empty masks contribute 0.
inline Var masked_mean(Var residual, const Tensor& mask, int64_t count) {
  Tape& t = ops::tape_of(residual);
  if (count == 0) return t.constant(Tensor::scalar(0.0));
  Var s = ops::sum_all(ops::mul_const(residual, mask));
  return ops::scale(s, 1.0 / static_cast<double>(count));
}

}  // namespace detail

// Composite objective on a dense prediction [H, W] in metres.
// main/sparse are constant targets with 0/1 validity masks; a null or
// empty-mask sparse target drops the sparse term and re-targets the log term
// at main. Returns the total as a tape node; per-term values (detached) land
// in `breakdown` if given.
inline Var composite_loss_tape(Var pred, const Tensor& main,
                               const Tensor& main_mask, const Tensor* sparse,
                               const Tensor* sparse_mask,
                               const LossWeights& w, const DepthNorm& norm,
                               LossBreakdown* breakdown = nullptr) {
  validate(norm);
  Tape& t = ops::tape_of(pred);
  const Tensor& pv = t.val(pred);
  RMSCAN_CHECK(pv.ndim() == 2, "loss: pred must be [H,W]");
  RMSCAN_CHECK(main.same_shape(pv) && main_mask.same_shape(pv),
               "loss: main target shape mismatch");
  RMSCAN_CHECK((sparse == nullptr) == (sparse_mask == nullptr),
               "loss: sparse target and mask must come together");
  const int64_t h = pv.size(0), wd = pv.size(1);

  const int64_t main_count = detail::mask_count(main_mask);
  RMSCAN_CHECK(main_count > 0, "loss: no valid pixel in main target");
  int64_t sparse_count = 0;
  if (sparse) {
    RMSCAN_CHECK(sparse->same_shape(pv) && sparse_mask->same_shape(pv),
                 "loss: sparse target shape mismatch");
    sparse_count = detail::mask_count(*sparse_mask);
  }
  const bool has_sparse = sparse_count > 0;

  Var pred_c = ops::clamp_op(pred, norm.d_min, norm.d_max);
  const double log_span = std::log(norm.d_max) - std::log(norm.d_min);
  Var tilde_pred = ops::shift(
      ops::scale(ops::shift(ops::log_op(pred_c), -std::log(norm.d_min)),
                 2.0 / log_span),
      -1.0);

  const Tensor tilde_main = detail::tilde_of(main, norm);

  // log-L1 against sparse, falling back to main.
  Var l_log = [&] {
    const Tensor& tgt = has_sparse ? detail::tilde_of(*sparse, norm) : tilde_main;
    const Tensor& mask = has_sparse ? *sparse_mask : main_mask;
    const int64_t cnt = has_sparse ? sparse_count : main_count;
    Var diff = ops::sub(tilde_pred, t.constant(tgt));
    return detail::masked_mean(ops::abs_op(diff), mask, cnt);
  }();

  // metric Huber against main, value scaled by 1/d_max.
  Var l_lin = [&] {
    Var diff = ops::sub(pred_c, t.constant(main));
    Var hub = ops::huber_op(diff, kHuberDeltaMetres);
    return ops::scale(detail::masked_mean(hub, main_mask, main_count),
                      1.0 / norm.d_max);
  }();

  // forward-difference L1 on the log-normalized error surface, pairs valid in
  // main only.
  Var l_grad = [&] {
    std::vector<int64_t> a_idx, b_idx;
    for (int64_t r = 0; r < h; ++r)
      for (int64_t c = 0; c + 1 < wd; ++c)
        if (main_mask.at(r, c) != 0.0 && main_mask.at(r, c + 1) != 0.0) {
          a_idx.push_back(r * wd + c);
          b_idx.push_back(r * wd + c + 1);
        }
    for (int64_t r = 0; r + 1 < h; ++r)
      for (int64_t c = 0; c < wd; ++c)
        if (main_mask.at(r, c) != 0.0 && main_mask.at(r + 1, c) != 0.0) {
          a_idx.push_back(r * wd + c);
          b_idx.push_back((r + 1) * wd + c);
        }
    if (a_idx.empty()) return t.constant(Tensor::scalar(0.0));
    Var f = ops::reshape(ops::sub(tilde_pred, t.constant(tilde_main)),
                         {h * wd, 1});
    Var d = ops::sub(ops::gather_rows(f, b_idx), ops::gather_rows(f, a_idx));
    Var s = ops::sum_all(ops::abs_op(d));
    return ops::scale(s, 1.0 / static_cast<double>(a_idx.size()));
  }();

  // linear-metre L1 on sparse samples only.
  Var l_sparse = [&]() -> Var {
    if (!has_sparse) return t.constant(Tensor::scalar(0.0));
    Var diff = ops::abs_op(ops::sub(pred_c, t.constant(*sparse)));
    return ops::scale(detail::masked_mean(diff, *sparse_mask, sparse_count),
                      1.0 / norm.d_max);
  }();

  Var total = ops::add(
      ops::add(ops::scale(l_log, w.lam_log), ops::scale(l_lin, w.lam_lin)),
      ops::add(ops::scale(l_grad, w.lam_grad),
               ops::scale(l_sparse, w.lam_sparse)));
  if (breakdown) {
    breakdown->l_log = t.val(l_log)[0];
    breakdown->l_lin = t.val(l_lin)[0];
    breakdown->l_grad = t.val(l_grad)[0];
    breakdown->l_sparse = t.val(l_sparse)[0];
    breakdown->total = t.val(total)[0];
  }
  return total;
}

// Pure evaluation of the same objective.
inline LossBreakdown composite_loss(const Tensor& pred, const Tensor& main,
                                    const Tensor& main_mask,
                                    const Tensor* sparse,
                                    const Tensor* sparse_mask,
                                    const LossWeights& w,
                                    const DepthNorm& norm) {
  Tape t;
  Var p = t.constant(pred);
  LossBreakdown b;
  composite_loss_tape(p, main, main_mask, sparse, sparse_mask, w, norm, &b);
  return b;
}

struct RangeMetrics {
  double range_m = 0.0;
  int64_t pixels = 0;
  bool skipped = false;
  double mae_mm = 0.0;
  double rmse_mm = 0.0;
  double imae_kminv = 0.0;
  double irmse_kminv = 0.0;
};

// Per-range depth metrics on ground-truth pixels with gt in (0, R];
// predictions are clamped before comparison. Inverse metrics are km^-1.
inline std::vector<RangeMetrics> eval_metrics(
    const Tensor& pred, const Tensor& gt, const Tensor& gt_mask,
    const std::vector<double>& ranges = {50.0, 70.0, 80.0},
    double clamp_lo = 0.5, double clamp_hi = 80.0) {
  RMSCAN_CHECK(pred.same_shape(gt) && pred.same_shape(gt_mask),
               "metrics: shape mismatch");
  RMSCAN_CHECK(clamp_lo > 0.0 && clamp_lo < clamp_hi, "metrics: bad clamp");
  std::vector<RangeMetrics> out;
  out.reserve(ranges.size());
  for (double r : ranges) {
    RangeMetrics m;
    m.range_m = r;
    double sum_abs = 0.0, sum_sq = 0.0, sum_iabs = 0.0, sum_isq = 0.0;
    for (int64_t i = 0; i < pred.numel(); ++i) {
      if (gt_mask[i] == 0.0) continue;
      const double g = gt[i];
      if (!(g > 0.0 && g <= r)) continue;
      const double p = std::min(clamp_hi, std::max(clamp_lo, pred[i]));
      const double e = p - g;
      const double ie = 1.0 / p - 1.0 / g;
      sum_abs += std::fabs(e);
      sum_sq += e * e;
      sum_iabs += std::fabs(ie);
      sum_isq += ie * ie;
      ++m.pixels;
    }
    if (m.pixels == 0) {
      m.skipped = true;
    } else {
      const double n = static_cast<double>(m.pixels);
      m.mae_mm = sum_abs / n * 1000.0;
      m.rmse_mm = std::sqrt(sum_sq / n) * 1000.0;
      m.imae_kminv = sum_iabs / n * 1000.0;
      m.irmse_kminv = std::sqrt(sum_isq / n) * 1000.0;
    }
    out.push_back(m);
  }
  return out;
}

}  // namespace rmscan
