#pragma once

// Non-scan fusion operators: FiLM feature modulation for the fine pyramid
// levels and the confidence-gated pre-scan blend used by one ablation arm.
// Both are exact identities on the image stream at init.

#include "rmscan/tape.hpp"
#include "rmscan/tensor.hpp"

namespace rmscan {

struct FilmParams {
  Tensor w_gamma;  // [D, D], zero-init
  Tensor w_beta;   // [D, D], zero-init
};

inline FilmParams make_film_params(int64_t d) {
  FilmParams p;
  p.w_gamma = Tensor({d, d});
  p.w_beta = Tensor({d, d});
  return p;
}

// out = (1 + W_gamma rad) * img + W_beta rad, elementwise over tokens.
// Bias-free projections, so rad = 0 passes img through exactly.
inline Tensor film(const FilmParams& p, const Tensor& img, const Tensor& rad,
                   int64_t* flops = nullptr) {
  RMSCAN_CHECK(img.same_shape(rad), "film: shape mismatch");
  const int64_t d = img.size(img.ndim() - 1);
  RMSCAN_CHECK(p.w_gamma.shape() == Shape({d, d}) &&
                   p.w_beta.shape() == Shape({d, d}),
               "film: parameter shape mismatch");
  const int64_t rows = img.numel() / d;
  Tensor out(img.shape());
  for (int64_t r = 0; r < rows; ++r) {
    const double* xi = img.data() + r * d;
    const double* xr = rad.data() + r * d;
    double* o = out.data() + r * d;
    for (int64_t k = 0; k < d; ++k) {
      const double* gr = p.w_gamma.data() + k * d;
      const double* br = p.w_beta.data() + k * d;
      double g = 0.0, b = 0.0;
      for (int64_t j = 0; j < d; ++j) {
        g += gr[j] * xr[j];
        b += br[j] * xr[j];
      }
      o[k] = xi[k] + (g * xi[k] + b);
    }
  }
  if (flops) *flops += rows * (4 * d * d + 3 * d);
  return out;
}

struct PreScanFusionParams {
  Tensor w_conf;  // [1, D]
  Tensor w_mix;   // [D, 2D], zero-init
};

inline PreScanFusionParams make_pre_scan_params(int64_t d, Rng& rng) {
  PreScanFusionParams p;
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  p.w_conf = Tensor::rand_uniform({1, d}, rng, -s, s);
  p.w_mix = Tensor({d, 2 * d});
  return p;
}

// fused = img + sigmoid(W_conf rad) * (W_mix [img; rad]); zero-init mixing
// makes this the identity at construction.
inline Tensor pre_scan_blend(const PreScanFusionParams& p, const Tensor& img,
                             const Tensor& rad) {
  RMSCAN_CHECK(img.same_shape(rad), "pre_scan_blend: shape mismatch");
  const int64_t d = img.size(img.ndim() - 1);
  RMSCAN_CHECK(p.w_conf.shape() == Shape({1, d}) &&
                   p.w_mix.shape() == Shape({d, 2 * d}),
               "pre_scan_blend: parameter shape mismatch");
  const int64_t rows = img.numel() / d;
  Tensor out(img.shape());
  for (int64_t r = 0; r < rows; ++r) {
    const double* xi = img.data() + r * d;
    const double* xr = rad.data() + r * d;
    double* o = out.data() + r * d;
    double c = 0.0;
    for (int64_t j = 0; j < d; ++j) c += p.w_conf[j] * xr[j];
    c = sigmoid(c);
    for (int64_t k = 0; k < d; ++k) {
      const double* mr = p.w_mix.data() + k * 2 * d;
      double m = 0.0;
      for (int64_t j = 0; j < d; ++j) m += mr[j] * xi[j];
      for (int64_t j = 0; j < d; ++j) m += mr[d + j] * xr[j];
      o[k] = xi[k] + c * m;
    }
  }
  return out;
}

namespace ops {

// Differentiable FiLM, identical arithmetic to the pure form.
inline Var film_tape(Var img, Var rad, Var w_gamma, Var w_beta) {
  Var gamma = linear(rad, w_gamma);
  Var beta = linear(rad, w_beta);
  return add(img, add(mul(gamma, img), beta));
}

// Differentiable pre-scan blend on [R, D] token matrices.
inline Var pre_scan_blend_tape(Var img, Var rad, Var w_conf, Var w_mix) {
  Tape& t = tape_of(img);
  const Tensor& iv = t.val(img);
  RMSCAN_CHECK(iv.ndim() == 2, "pre_scan_blend_tape: expect [R,D]");
  const int64_t d = iv.size(1);
  Var conf = sigmoid_op(linear(rad, w_conf));  // [R, 1]
  Var mix = linear(concat_last(img, rad), w_mix);
  Tensor ones_col({d, 1});
  ones_col.fill(1.0);
  Var conf_full = linear(conf, t.constant(ones_col));  // [R, D] broadcast
  return add(img, mul(conf_full, mix));
}

}  // namespace ops

}  // namespace rmscan
