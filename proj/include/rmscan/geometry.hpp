#pragma once

// 2-D grid <-> 1-D token-sequence geometry: four direction orders for
// scene-wide scans, radar-centred windows with serpentine interior order, and
// the Gaussian kernel used to blend overlapping window outputs back onto the
// grid.

#include <array>
#include <cstdint>
#include <set>
#include <vector>

#include "rmscan/scan.hpp"
#include "rmscan/tensor.hpp"

namespace rmscan {

enum class ScanDirection { RowFwd, RowBwd, ColFwd, ColBwd };

constexpr std::array<ScanDirection, 4> kAllDirections = {
    ScanDirection::RowFwd, ScanDirection::RowBwd, ScanDirection::ColFwd,
    ScanDirection::ColBwd};

// Sequence position -> flat grid index (row * W + col).
inline std::vector<int64_t> order_indices(int64_t h, int64_t w,
                                          ScanDirection dir) {
  RMSCAN_CHECK(h >= 1 && w >= 1, "order_indices: empty grid");
  const int64_t l = h * w;
  std::vector<int64_t> idx(static_cast<size_t>(l));
  switch (dir) {
    case ScanDirection::RowFwd:
      for (int64_t t = 0; t < l; ++t) idx[static_cast<size_t>(t)] = t;
      break;
    case ScanDirection::RowBwd:
      for (int64_t t = 0; t < l; ++t) idx[static_cast<size_t>(t)] = l - 1 - t;
      break;
    case ScanDirection::ColFwd:
      for (int64_t c = 0, t = 0; c < w; ++c)
        for (int64_t r = 0; r < h; ++r, ++t)
          idx[static_cast<size_t>(t)] = r * w + c;
      break;
    case ScanDirection::ColBwd:
      for (int64_t c = w - 1, t = 0; c >= 0; --c)
        for (int64_t r = h - 1; r >= 0; --r, ++t)
          idx[static_cast<size_t>(t)] = r * w + c;
      break;
  }
  return idx;
}

// grid [H,W,D] -> tokens [1,L,D] in the given order.
inline Tensor order_tokens(const Tensor& grid, ScanDirection dir) {
  RMSCAN_CHECK(grid.ndim() == 3, "order_tokens: grid must be [H,W,D]");
  const int64_t h = grid.size(0), w = grid.size(1), d = grid.size(2);
  const std::vector<int64_t> idx = order_indices(h, w, dir);
  Tensor out({1, h * w, d});
  for (int64_t t = 0; t < h * w; ++t)
    for (int64_t k = 0; k < d; ++k)
      out[t * d + k] = grid[idx[static_cast<size_t>(t)] * d + k];
  return out;
}

// tokens [1,L,D] back onto the grid that produced them.
inline Tensor unorder_tokens(const Tensor& tokens, int64_t h, int64_t w,
                             ScanDirection dir) {
  RMSCAN_CHECK(tokens.ndim() == 3 && tokens.size(0) == 1 &&
                   tokens.size(1) == h * w,
               "unorder_tokens: tokens must be [1,H*W,D]");
  const int64_t d = tokens.size(2);
  const std::vector<int64_t> idx = order_indices(h, w, dir);
  Tensor grid({h, w, d});
  for (int64_t t = 0; t < h * w; ++t)
    for (int64_t k = 0; k < d; ++k)
      grid[idx[static_cast<size_t>(t)] * d + k] = tokens[t * d + k];
  return grid;
}

// One sparse radar return at full image resolution.
struct RadarReturn {
  double u = 0.0;  // pixel col
  double v = 0.0;  // pixel row
  double d = 0.0;  // metric depth, metres

  std::array<double, 3> normalized(int64_t h, int64_t w, double d_max) const {
    return {v / static_cast<double>(h), u / static_cast<double>(w), d / d_max};
  }
};

struct Window {
  int64_t center_r = 0, center_c = 0;
  int64_t r0 = 0, r1 = 0, c0 = 0, c1 = 0;  // clipped, half-open

  int64_t count() const { return (r1 - r0) * (c1 - c0); }
};

// One window per in-bounds return, centred at the return projected onto the
// level grid; duplicate centers collapse to one window.
inline std::vector<Window> make_windows(const std::vector<RadarReturn>& returns,
                                        int64_t level_h, int64_t level_w,
                                        int64_t stride, int64_t w,
                                        int64_t* skipped = nullptr) {
  RMSCAN_CHECK(level_h >= 1 && level_w >= 1, "make_windows: empty level");
  RMSCAN_CHECK(stride >= 1 && w >= 1, "make_windows: bad stride or extent");
  const double full_h = static_cast<double>(level_h * stride);
  const double full_w = static_cast<double>(level_w * stride);
  std::vector<Window> out;
  std::set<std::pair<int64_t, int64_t>> seen;
  int64_t n_skipped = 0;
  for (const RadarReturn& r : returns) {
    if (r.v < 0.0 || r.v >= full_h || r.u < 0.0 || r.u >= full_w) {
      ++n_skipped;
      continue;
    }
    Window win;
    win.center_r = static_cast<int64_t>(r.v) / stride;
    win.center_c = static_cast<int64_t>(r.u) / stride;
    if (!seen.insert({win.center_r, win.center_c}).second) continue;
    win.r0 = std::max<int64_t>(0, win.center_r - w / 2);
    win.r1 = std::min<int64_t>(level_h, win.center_r - w / 2 + w);
    win.c0 = std::max<int64_t>(0, win.center_c - w / 2);
    win.c1 = std::min<int64_t>(level_w, win.center_c - w / 2 + w);
    out.push_back(win);
  }
  if (skipped) *skipped = n_skipped;
  return out;
}

// Serpentine (boustrophedon) order inside a window's clipped rectangle so
// consecutive tokens stay spatially adjacent. Returns flat grid indices.
inline std::vector<int64_t> serpentine_indices(const Window& win,
                                               int64_t level_w) {
  std::vector<int64_t> idx;
  idx.reserve(static_cast<size_t>(win.count()));
  for (int64_t r = win.r0; r < win.r1; ++r) {
    if ((r - win.r0) % 2 == 0) {
      for (int64_t c = win.c0; c < win.c1; ++c) idx.push_back(r * level_w + c);
    } else {
      for (int64_t c = win.c1 - 1; c >= win.c0; --c)
        idx.push_back(r * level_w + c);
    }
  }
  return idx;
}

// Unnormalized Gaussian blending weights over a w x w patch; the center cell
// (top-left of the central 2x2 for even w) carries weight 1.
struct ScatterKernel {
  double sigma = 0.0;
  int64_t w = 0;
  std::vector<double> weights;  // [w, w]

  double at(int64_t dr, int64_t dc) const {
    return weights[static_cast<size_t>((dr + w / 2) * w + (dc + w / 2))];
  }
};

inline ScatterKernel make_scatter_kernel(int64_t w, double sigma) {
  RMSCAN_CHECK(w >= 1 && sigma > 0.0, "scatter kernel: bad extent or sigma");
  ScatterKernel k;
  k.sigma = sigma;
  k.w = w;
  k.weights.resize(static_cast<size_t>(w * w));
  for (int64_t dr = -w / 2; dr < w - w / 2; ++dr)
    for (int64_t dc = -w / 2; dc < w - w / 2; ++dc)
      k.weights[static_cast<size_t>((dr + w / 2) * w + (dc + w / 2))] =
          std::exp(-static_cast<double>(dr * dr + dc * dc) /
                   (2.0 * sigma * sigma));
  return k;
}

inline ScatterKernel make_scatter_kernel(int64_t w) {
  return make_scatter_kernel(w, static_cast<double>(w) / 2.5);
}

struct ScanCounters {
  int64_t full_tokens = 0;
  int64_t window_tokens = 0;
  int64_t skipped_returns = 0;

  void reset() { *this = ScanCounters{}; }
};

constexpr double kLayerNormEps = 1e-5;

namespace detail {

// Per-pixel layer norm over channels; maps the all-zero vector to bias, so
// with zero bias LN(0) = 0.
inline void layer_norm_channels(const double* x, int64_t d, const double* gain,
                                const double* bias, double* out) {
  double mean = 0.0;
  for (int64_t k = 0; k < d; ++k) mean += x[k];
  mean /= static_cast<double>(d);
  double var = 0.0;
  for (int64_t k = 0; k < d; ++k) {
    const double c = x[k] - mean;
    var += c * c;
  }
  var /= static_cast<double>(d);
  const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
  for (int64_t k = 0; k < d; ++k)
    out[k] = (x[k] - mean) * inv * gain[k] + bias[k];
}

}  // namespace detail

// Reference (forward-only) scene-wide block: four directional RMS scans,
// summed, layer-normed, residual-added. The differentiable twin is composed
// from tape ops and is tested for equality against this.
inline Tensor four_direction_scan(const std::array<SsmParams, 4>& params,
                                  const Tensor& img_grid,
                                  const Tensor& rad_grid, ModulationMode mode,
                                  const Tensor* ln_gain = nullptr,
                                  const Tensor* ln_bias = nullptr,
                                  ScanCounters* counters = nullptr,
                                  Tensor* prenorm_out = nullptr) {
  RMSCAN_CHECK(img_grid.ndim() == 3 && img_grid.same_shape(rad_grid),
               "four_direction_scan: grids must be matching [H,W,D]");
  const int64_t h = img_grid.size(0), w = img_grid.size(1),
                d = img_grid.size(2);

  Tensor sum({h, w, d});
  for (size_t i = 0; i < 4; ++i) {
    const ScanDirection dir = kAllDirections[i];
    TokenStreams st;
    st.x_img = order_tokens(img_grid, dir);
    st.x_rad = order_tokens(rad_grid, dir);
    ScanOutput out = selective_scan_fwd(params[i], st, mode);
    Tensor back = unorder_tokens(out.y, h, w, dir);
    sum.add_(back);
    if (counters) counters->full_tokens += h * w;
  }
  if (prenorm_out) *prenorm_out = sum;

  Tensor gain = ln_gain ? *ln_gain : Tensor::full({d}, 1.0);
  Tensor bias = ln_bias ? *ln_bias : Tensor({d});
  RMSCAN_CHECK(gain.numel() == d && bias.numel() == d,
               "four_direction_scan: layer-norm parameter size mismatch");

  Tensor out({h, w, d});
  for (int64_t p = 0; p < h * w; ++p)
    detail::layer_norm_channels(sum.data() + p * d, d, gain.data(),
                                bias.data(), out.data() + p * d);
  out.add_(img_grid);
  return out;
}

// Reference (forward-only) radar-centred windowed RMS: serpentine scan per
// window, Gaussian-weighted average over overlapping windows, residual add.
// Pixels no window covers pass through untouched.
inline Tensor windowed_rms(const SsmParams& params, const Tensor& img_grid,
                           const Tensor& rad_grid,
                           const std::vector<Window>& windows,
                           const ScatterKernel& kernel, ModulationMode mode,
                           ScanCounters* counters = nullptr) {
  RMSCAN_CHECK(img_grid.ndim() == 3 && img_grid.same_shape(rad_grid),
               "windowed_rms: grids must be matching [H,W,D]");
  const int64_t h = img_grid.size(0), w = img_grid.size(1),
                d = img_grid.size(2);

  Tensor accum({h, w, d});
  Tensor wsum({h, w});
  for (const Window& win : windows) {
    RMSCAN_CHECK(win.r0 >= 0 && win.r1 <= h && win.c0 >= 0 && win.c1 <= w &&
                     win.count() > 0,
                 "windowed_rms: window outside grid");
    const std::vector<int64_t> idx = serpentine_indices(win, w);
    const int64_t l = static_cast<int64_t>(idx.size());
    TokenStreams st;
    st.x_img = Tensor({1, l, d});
    st.x_rad = Tensor({1, l, d});
    for (int64_t t = 0; t < l; ++t)
      for (int64_t k = 0; k < d; ++k) {
        st.x_img[t * d + k] = img_grid[idx[static_cast<size_t>(t)] * d + k];
        st.x_rad[t * d + k] = rad_grid[idx[static_cast<size_t>(t)] * d + k];
      }
    ScanOutput out = selective_scan_fwd(params, st, mode);
    for (int64_t t = 0; t < l; ++t) {
      const int64_t f = idx[static_cast<size_t>(t)];
      const int64_t r = f / w, c = f % w;
      const double kw = kernel.at(r - win.center_r, c - win.center_c);
      for (int64_t k = 0; k < d; ++k) accum[f * d + k] += kw * out.y[t * d + k];
      wsum[f] += kw;
    }
    if (counters) counters->window_tokens += l;
  }

  Tensor out = img_grid;
  for (int64_t f = 0; f < h * w; ++f) {
    if (wsum[f] > 0.0) {
      const double inv = 1.0 / wsum[f];
      for (int64_t k = 0; k < d; ++k) out[f * d + k] += accum[f * d + k] * inv;
    }
  }
  return out;
}

}  // namespace rmscan
