#pragma once

// Selective state-space scan with optional in-scan radar modulation.
//
// Per channel d the recurrence is a scalar-input, N-state linear system
//   h_t = abar_t * h_{t-1} + bbar_t * x_t,   y_t = <c_t, h_t>
// with zero-order-hold discretization
//   abar = exp(dt * a),   bbar = ((exp(dt * a) - 1) / a) * b
// where dt, b, c are produced per token from the image stream, and the radar
// stream may additively perturb the pre-softplus step size (gated, "horizon")
// and the readout vector ("readout"). All radar projections are bias-free so
// a zero radar stream reproduces the image-only scan exactly.

#include <cstring>
#include <memory>
#include <vector>

#include "rmscan/core.hpp"
#include "rmscan/tensor.hpp"

namespace rmscan {

enum class ModulationMode { ImageOnly, Horizon, Readout, Joint };

inline bool mode_has_horizon(ModulationMode m) {
  return m == ModulationMode::Horizon || m == ModulationMode::Joint;
}
inline bool mode_has_readout(ModulationMode m) {
  return m == ModulationMode::Readout || m == ModulationMode::Joint;
}

inline const char* mode_name(ModulationMode m) {
  switch (m) {
    case ModulationMode::ImageOnly: return "image_only";
    case ModulationMode::Horizon: return "horizon";
    case ModulationMode::Readout: return "readout";
    case ModulationMode::Joint: return "joint";
  }
  return "?";
}

// Guard below which the ZOH input term switches to its 2-term series to avoid
// the (exp(z)-1)/a cancellation.
constexpr double kZohSeriesGuard = 1e-6;

// Per-layer scan parameters. A must be strictly negative elementwise; the
// radar maps carry no additive bias (gate_bias enters only through the gate).
struct SsmParams {
  Tensor A;          // [D, N], entries < 0
  Tensor w_dt_img;   // [D, D]
  Tensor w_b;        // [N, D]
  Tensor w_c_img;    // [N, D]
  Tensor w_dt_rad;   // [D, D]
  Tensor w_c_rad;    // [N, D]
  Tensor w_gate;     // [1, D]
  Tensor gate_bias;  // [1]
  Tensor dt_bias;    // [D]

  int64_t channels() const { return A.size(0); }
  int64_t state_dim() const { return A.size(1); }
};

inline SsmParams make_ssm_params(int64_t d, int64_t n, Rng& rng,
                                 bool zero_init_radar = true,
                                 bool use_dt_bias = true) {
  SsmParams p;
  p.A = Tensor({d, n});
  for (int64_t i = 0; i < d; ++i)
    for (int64_t k = 0; k < n; ++k) p.A.at(i, k) = -static_cast<double>(k + 1);

  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  p.w_dt_img = Tensor::rand_uniform({d, d}, rng, -s, s);
  p.w_b = Tensor::rand_uniform({n, d}, rng, -s, s);
  p.w_c_img = Tensor::rand_uniform({n, d}, rng, -s, s);

  p.dt_bias = Tensor({d});
  if (use_dt_bias) {
    // softplus(dt_bias) lands log-uniformly in [0.001, 0.1]
    for (int64_t i = 0; i < d; ++i) {
      double dt0 = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
      p.dt_bias[i] = softplus_inv(dt0);
    }
  }

  if (zero_init_radar) {
    p.w_dt_rad = Tensor({d, d});
    p.w_c_rad = Tensor({n, d});
    p.w_gate = Tensor({1, d});
  } else {
    p.w_dt_rad = Tensor::rand_uniform({d, d}, rng, -s, s);
    p.w_c_rad = Tensor::rand_uniform({n, d}, rng, -s, s);
    p.w_gate = Tensor::rand_uniform({1, d}, rng, -s, s);
  }
  p.gate_bias = Tensor::scalar(-2.0);
  return p;
}

inline void validate_params(const SsmParams& p) {
  const int64_t d = p.channels();
  const int64_t n = p.state_dim();
  RMSCAN_CHECK(p.A.ndim() == 2, "ssm: A must be [D,N]");
  RMSCAN_CHECK(p.w_dt_img.shape() == Shape({d, d}), "ssm: w_dt_img must be [D,D]");
  RMSCAN_CHECK(p.w_b.shape() == Shape({n, d}), "ssm: w_b must be [N,D]");
  RMSCAN_CHECK(p.w_c_img.shape() == Shape({n, d}), "ssm: w_c_img must be [N,D]");
  RMSCAN_CHECK(p.w_dt_rad.shape() == Shape({d, d}), "ssm: w_dt_rad must be [D,D]");
  RMSCAN_CHECK(p.w_c_rad.shape() == Shape({n, d}), "ssm: w_c_rad must be [N,D]");
  RMSCAN_CHECK(p.w_gate.shape() == Shape({1, d}), "ssm: w_gate must be [1,D]");
  RMSCAN_CHECK(p.gate_bias.numel() == 1, "ssm: gate_bias must be scalar");
  RMSCAN_CHECK(p.dt_bias.shape() == Shape({d}), "ssm: dt_bias must be [D]");
  for (int64_t i = 0; i < p.A.numel(); ++i)
    RMSCAN_CHECK(p.A[i] < 0.0, "ssm: A must be strictly negative");
}

struct TokenStreams {
  Tensor x_img;  // [B, L, D]
  Tensor x_rad;  // [B, L, D]
};

inline void validate_streams(const SsmParams& p, const TokenStreams& s) {
  RMSCAN_CHECK(s.x_img.ndim() == 3, "scan: x_img must be [B,L,D]");
  RMSCAN_CHECK(s.x_img.same_shape(s.x_rad), "scan: stream shapes must match");
  RMSCAN_CHECK(s.x_img.size(2) == p.channels(), "scan: channel dim mismatch");
  RMSCAN_CHECK(s.x_img.all_finite() && s.x_rad.all_finite(),
               "scan: non-finite input");
}

// Exact ZOH discretization of one scalar channel-state pair.
inline void zoh_discretize(double a_entry, double dt, double b, double* abar,
                           double* bbar) {
  RMSCAN_CHECK(a_entry < 0.0, "zoh: A entry must be negative");
  RMSCAN_CHECK(dt > 0.0, "zoh: dt must be positive");
  const double z = dt * a_entry;
  const double e = std::exp(z);
  *abar = e;
  if (std::fabs(z) < kZohSeriesGuard) {
    *bbar = dt * b * (1.0 + 0.5 * z);
  } else {
    *bbar = ((e - 1.0) / a_entry) * b;
  }
}

struct Selection {
  Tensor delta;  // [B, L, D], > 0
  Tensor bsel;   // [B, L, N]
  Tensor csel;   // [B, L, N]
  Tensor alpha;  // [B, L, 1]
};

namespace detail {

// Forward residuals retained for the backward pass.
struct ScanSaved {
  int64_t batch = 0, len = 0, channels = 0, state = 0;
  ModulationMode mode = ModulationMode::ImageOnly;
  Tensor delta;   // [B, L, D]
  Tensor s_dt;    // [B, L, D]  pre-softplus
  Tensor rad_dt;  // [B, L, D]  w_dt_rad . x_rad (horizon modes only)
  Tensor alpha;   // [B, L]
  Tensor bsel;    // [B, L, N]
  Tensor csel;    // [B, L, N]
  Tensor h;       // [B, L, D, N]
  uint64_t img_hash = 0, rad_hash = 0;
};

inline uint64_t fnv1a(const double* p, int64_t n) {
  uint64_t h = 1469598103934665603ull;
  const unsigned char* b = reinterpret_cast<const unsigned char*>(p);
  for (int64_t i = 0; i < n * static_cast<int64_t>(sizeof(double)); ++i) {
    h ^= b[i];
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace detail

struct ScanOutput {
  Tensor y;        // [B, L, D]
  Tensor h_final;  // [B, D, N]
  std::shared_ptr<detail::ScanSaved> saved;
};

// Per-token selection parameters. Radar enters the step size only gated and
// pre-softplus, and the readout only additively; B stays image-only. In
// ImageOnly and Readout modes the gate is inactive and reported at its bias
// value (x_rad is never read for the step size in those modes).
inline Selection compute_selection_saved(const SsmParams& p,
                                         const TokenStreams& st,
                                         ModulationMode mode,
                                         detail::ScanSaved* saved) {
  validate_params(p);
  validate_streams(p, st);
  const int64_t batch = st.x_img.size(0);
  const int64_t len = st.x_img.size(1);
  const int64_t d_ch = p.channels();
  const int64_t n_st = p.state_dim();
  const bool horizon = mode_has_horizon(mode);
  const bool readout = mode_has_readout(mode);

  Selection sel;
  sel.delta = Tensor({batch, len, d_ch});
  sel.bsel = Tensor({batch, len, n_st});
  sel.csel = Tensor({batch, len, n_st});
  sel.alpha = Tensor({batch, len, 1});

  Tensor s_dt({batch, len, d_ch});
  Tensor rad_dt;
  if (horizon) rad_dt = Tensor({batch, len, d_ch});
  Tensor alpha_flat({batch, len});

  const double gate_bias = p.gate_bias[0];
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t t = 0; t < len; ++t) {
      const double* xi = st.x_img.data() + (b * len + t) * d_ch;
      const double* xr = st.x_rad.data() + (b * len + t) * d_ch;

      double a_t;
      if (horizon) {
        double g = gate_bias;
        const double* wg = p.w_gate.data();
        for (int64_t j = 0; j < d_ch; ++j) g += wg[j] * xr[j];
        a_t = sigmoid(g);
      } else {
        a_t = sigmoid(gate_bias);
      }
      alpha_flat.at(b, t) = a_t;
      sel.alpha.at(b, t, 0) = a_t;

      for (int64_t d = 0; d < d_ch; ++d) {
        const double* wrow = p.w_dt_img.data() + d * d_ch;
        double s = p.dt_bias[d];
        for (int64_t j = 0; j < d_ch; ++j) s += wrow[j] * xi[j];
        if (horizon) {
          const double* rrow = p.w_dt_rad.data() + d * d_ch;
          double r = 0.0;
          for (int64_t j = 0; j < d_ch; ++j) r += rrow[j] * xr[j];
          rad_dt.at(b, t, d) = r;
          s += a_t * r;
        }
        s_dt.at(b, t, d) = s;
        sel.delta.at(b, t, d) = softplus(s);
      }

      for (int64_t n = 0; n < n_st; ++n) {
        const double* brow = p.w_b.data() + n * d_ch;
        double bv = 0.0;
        for (int64_t j = 0; j < d_ch; ++j) bv += brow[j] * xi[j];
        sel.bsel.at(b, t, n) = bv;

        const double* crow = p.w_c_img.data() + n * d_ch;
        double cv = 0.0;
        for (int64_t j = 0; j < d_ch; ++j) cv += crow[j] * xi[j];
        if (readout) {
          const double* crad = p.w_c_rad.data() + n * d_ch;
          double cr = 0.0;
          for (int64_t j = 0; j < d_ch; ++j) cr += crad[j] * xr[j];
          cv += cr;
        }
        sel.csel.at(b, t, n) = cv;
      }
    }
  }

  if (saved) {
    saved->batch = batch;
    saved->len = len;
    saved->channels = d_ch;
    saved->state = n_st;
    saved->mode = mode;
    saved->delta = sel.delta;
    saved->s_dt = std::move(s_dt);
    saved->rad_dt = std::move(rad_dt);
    saved->alpha = std::move(alpha_flat);
    saved->bsel = sel.bsel;
    saved->csel = sel.csel;
    saved->img_hash = detail::fnv1a(st.x_img.data(), st.x_img.numel());
    saved->rad_hash = detail::fnv1a(st.x_rad.data(), st.x_rad.numel());
  }
  return sel;
}

inline Selection compute_selection(const SsmParams& p, const TokenStreams& st,
                                   ModulationMode mode) {
  return compute_selection_saved(p, st, mode, nullptr);
}

namespace detail {

// Strictly sequential reference recurrence, bit-deterministic. h_out (when
// non-null) receives every intermediate state [B,L,D,N].
inline void scan_reference_kernel(int64_t batch, int64_t len, int64_t d_ch,
                                  int64_t n_st, const double* delta,
                                  const double* A, const double* bsel,
                                  const double* csel, const double* x,
                                  double* y, double* h_out, double* h_final) {
  std::vector<double> h(static_cast<size_t>(d_ch * n_st));
  for (int64_t b = 0; b < batch; ++b) {
    std::fill(h.begin(), h.end(), 0.0);
    for (int64_t t = 0; t < len; ++t) {
      const double* dt_t = delta + (b * len + t) * d_ch;
      const double* b_t = bsel + (b * len + t) * n_st;
      const double* c_t = csel + (b * len + t) * n_st;
      const double* x_t = x + (b * len + t) * d_ch;
      double* y_t = y + (b * len + t) * d_ch;
      for (int64_t d = 0; d < d_ch; ++d) {
        const double dt = dt_t[d];
        const double xv = x_t[d];
        const double* a_row = A + d * n_st;
        double* h_dn = h.data() + d * n_st;
        double acc = 0.0;
        for (int64_t n = 0; n < n_st; ++n) {
          const double z = dt * a_row[n];
          const double e = std::exp(z);
          double bbar;
          if (std::fabs(z) < kZohSeriesGuard) {
            bbar = dt * b_t[n] * (1.0 + 0.5 * z);
          } else {
            bbar = ((e - 1.0) / a_row[n]) * b_t[n];
          }
          const double hn = e * h_dn[n] + bbar * xv;
          h_dn[n] = hn;
          acc += c_t[n] * hn;
        }
        y_t[d] = acc;
        if (h_out) {
          std::memcpy(h_out + ((b * len + t) * d_ch + d) * n_st, h_dn,
                      static_cast<size_t>(n_st) * sizeof(double));
        }
      }
    }
    if (h_final) {
      std::memcpy(h_final + b * d_ch * n_st, h.data(),
                  static_cast<size_t>(d_ch * n_st) * sizeof(double));
    }
  }
}

// Cache-friendly chunked variant: discretization for a whole chunk is
// precomputed into contiguous buffers, then the recurrence sweeps the chunk.
// Templated so the performance path can run in f32.
template <typename T>
inline void scan_chunked_kernel(int64_t batch, int64_t len, int64_t d_ch,
                                int64_t n_st, const double* delta,
                                const double* A, const double* bsel,
                                const double* csel, const double* x, double* y,
                                int64_t chunk) {
  const int64_t dn = d_ch * n_st;
  std::vector<T> h(static_cast<size_t>(dn));
  std::vector<T> abar_buf(static_cast<size_t>(chunk * dn));
  std::vector<T> bx_buf(static_cast<size_t>(chunk * dn));
  for (int64_t b = 0; b < batch; ++b) {
    std::fill(h.begin(), h.end(), T(0));
    for (int64_t t0 = 0; t0 < len; t0 += chunk) {
      const int64_t cl = std::min(chunk, len - t0);
      for (int64_t tt = 0; tt < cl; ++tt) {
        const int64_t t = t0 + tt;
        const double* dt_t = delta + (b * len + t) * d_ch;
        const double* b_t = bsel + (b * len + t) * n_st;
        const double* x_t = x + (b * len + t) * d_ch;
        T* ab = abar_buf.data() + tt * dn;
        T* bx = bx_buf.data() + tt * dn;
        for (int64_t d = 0; d < d_ch; ++d) {
          const T dt = static_cast<T>(dt_t[d]);
          const T xv = static_cast<T>(x_t[d]);
          const double* a_row = A + d * n_st;
          for (int64_t n = 0; n < n_st; ++n) {
            const T a = static_cast<T>(a_row[n]);
            const T z = dt * a;
            const T e = std::exp(z);
            T bbar;
            if (std::fabs(static_cast<double>(z)) < kZohSeriesGuard) {
              bbar = dt * static_cast<T>(b_t[n]) * (T(1) + T(0.5) * z);
            } else {
              bbar = ((e - T(1)) / a) * static_cast<T>(b_t[n]);
            }
            ab[d * n_st + n] = e;
            bx[d * n_st + n] = bbar * xv;
          }
        }
      }
      for (int64_t tt = 0; tt < cl; ++tt) {
        const int64_t t = t0 + tt;
        const double* c_t = csel + (b * len + t) * n_st;
        const T* ab = abar_buf.data() + tt * dn;
        const T* bx = bx_buf.data() + tt * dn;
        double* y_t = y + (b * len + t) * d_ch;
        for (int64_t d = 0; d < d_ch; ++d) {
          T* h_dn = h.data() + d * n_st;
          T acc = 0;
          for (int64_t n = 0; n < n_st; ++n) {
            const T hn = ab[d * n_st + n] * h_dn[n] + bx[d * n_st + n];
            h_dn[n] = hn;
            acc += static_cast<T>(c_t[n]) * hn;
          }
          y_t[d] = static_cast<double>(acc);
        }
      }
    }
  }
}

}  // namespace detail

// Reference forward scan: selection, ZOH discretization and the sequential
// recurrence, retaining residuals for the backward pass.
inline ScanOutput selective_scan_fwd(const SsmParams& p, const TokenStreams& st,
                                     ModulationMode mode) {
  auto saved = std::make_shared<detail::ScanSaved>();
  Selection sel = compute_selection_saved(p, st, mode, saved.get());
  const int64_t batch = saved->batch, len = saved->len;
  const int64_t d_ch = saved->channels, n_st = saved->state;

  ScanOutput out;
  out.y = Tensor({batch, len, d_ch});
  out.h_final = Tensor({batch, d_ch, n_st});
  saved->h = Tensor({batch, len, d_ch, n_st});
  detail::scan_reference_kernel(batch, len, d_ch, n_st, sel.delta.data(),
                                p.A.data(), sel.bsel.data(), sel.csel.data(),
                                st.x_img.data(), out.y.data(), saved->h.data(),
                                out.h_final.data());
  out.saved = std::move(saved);
  return out;
}

// Performance-path scan; equal to the reference to <= 1e-10 in f64. chunk == 1
// dispatches to the reference kernel itself.
inline ScanOutput selective_scan_chunked(const SsmParams& p,
                                         const TokenStreams& st,
                                         ModulationMode mode, int64_t chunk) {
  RMSCAN_CHECK(chunk >= 1, "scan: chunk must be >= 1");
  Selection sel = compute_selection(p, st, mode);
  const int64_t batch = st.x_img.size(0);
  const int64_t len = st.x_img.size(1);
  const int64_t d_ch = p.channels();
  const int64_t n_st = p.state_dim();

  ScanOutput out;
  out.y = Tensor({batch, len, d_ch});
  out.h_final = Tensor({batch, d_ch, n_st});
  if (chunk == 1) {
    detail::scan_reference_kernel(batch, len, d_ch, n_st, sel.delta.data(),
                                  p.A.data(), sel.bsel.data(), sel.csel.data(),
                                  st.x_img.data(), out.y.data(), nullptr,
                                  out.h_final.data());
  } else {
    detail::scan_chunked_kernel<double>(batch, len, d_ch, n_st,
                                        sel.delta.data(), p.A.data(),
                                        sel.bsel.data(), sel.csel.data(),
                                        st.x_img.data(), out.y.data(), chunk);
  }
  return out;
}

// f32 performance path, for throughput probes; compare at <= 1e-4 max-abs.
inline Tensor selective_scan_f32(const SsmParams& p, const TokenStreams& st,
                                 ModulationMode mode, int64_t chunk) {
  RMSCAN_CHECK(chunk >= 1, "scan: chunk must be >= 1");
  Selection sel = compute_selection(p, st, mode);
  const int64_t batch = st.x_img.size(0);
  const int64_t len = st.x_img.size(1);
  Tensor y({batch, len, p.channels()});
  detail::scan_chunked_kernel<float>(batch, len, p.channels(), p.state_dim(),
                                     sel.delta.data(), p.A.data(),
                                     sel.bsel.data(), sel.csel.data(),
                                     st.x_img.data(), y.data(), chunk);
  return y;
}

struct SsmGrads {
  Tensor A;
  Tensor w_dt_img, w_b, w_c_img;
  Tensor w_dt_rad, w_c_rad, w_gate, gate_bias;
  Tensor dt_bias;
};

struct ScanGrads {
  SsmGrads params;
  Tensor x_img;  // [B, L, D]
  Tensor x_rad;  // [B, L, D]
};

// Hand-derived vector-Jacobian product of the full scan (selection + ZOH +
// recurrence + readout) w.r.t. every parameter and both input streams.
inline ScanGrads selective_scan_bwd(const SsmParams& p, const TokenStreams& st,
                                    ModulationMode mode,
                                    const detail::ScanSaved& saved,
                                    const Tensor& grad_y) {
  const int64_t batch = saved.batch, len = saved.len;
  const int64_t d_ch = saved.channels, n_st = saved.state;
  RMSCAN_CHECK(saved.mode == mode, "scan_bwd: mode does not match saved residuals");
  RMSCAN_CHECK(st.x_img.shape() == Shape({batch, len, d_ch}) &&
                   st.x_rad.shape() == Shape({batch, len, d_ch}),
               "scan_bwd: stream shape does not match saved residuals");
  RMSCAN_CHECK(grad_y.shape() == Shape({batch, len, d_ch}),
               "scan_bwd: grad_y shape mismatch");
  RMSCAN_CHECK(detail::fnv1a(st.x_img.data(), st.x_img.numel()) == saved.img_hash &&
                   detail::fnv1a(st.x_rad.data(), st.x_rad.numel()) == saved.rad_hash,
               "scan_bwd: stale saved residuals (streams differ from forward)");

  const bool horizon = mode_has_horizon(mode);
  const bool readout = mode_has_readout(mode);

  ScanGrads g;
  g.params.A = Tensor({d_ch, n_st});
  g.params.w_dt_img = Tensor({d_ch, d_ch});
  g.params.w_b = Tensor({n_st, d_ch});
  g.params.w_c_img = Tensor({n_st, d_ch});
  g.params.w_dt_rad = Tensor({d_ch, d_ch});
  g.params.w_c_rad = Tensor({n_st, d_ch});
  g.params.w_gate = Tensor({1, d_ch});
  g.params.gate_bias = Tensor({1});
  g.params.dt_bias = Tensor({d_ch});
  g.x_img = Tensor({batch, len, d_ch});
  g.x_rad = Tensor({batch, len, d_ch});

  // Stage 1: recurrence backward -> grads w.r.t. delta, bsel, csel, A and the
  // drive term of x_img.
  Tensor g_delta({batch, len, d_ch});
  Tensor g_bsel({batch, len, n_st});
  Tensor g_csel({batch, len, n_st});
  std::vector<double> gh(static_cast<size_t>(n_st));
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t d = 0; d < d_ch; ++d) {
      std::fill(gh.begin(), gh.end(), 0.0);
      const double* a_row = p.A.data() + d * n_st;
      double* ga_row = g.params.A.data() + d * n_st;
      for (int64_t t = len - 1; t >= 0; --t) {
        const double gy = grad_y.at(b, t, d);
        const double dt = saved.delta.at(b, t, d);
        const double xv = st.x_img.at(b, t, d);
        const double* h_t = saved.h.data() + ((b * len + t) * d_ch + d) * n_st;
        const double* h_prev =
            (t > 0) ? saved.h.data() + ((b * len + t - 1) * d_ch + d) * n_st
                    : nullptr;
        const double* b_t = saved.bsel.data() + (b * len + t) * n_st;
        const double* c_t = saved.csel.data() + (b * len + t) * n_st;
        double* gb_t = g_bsel.data() + (b * len + t) * n_st;
        double* gc_t = g_csel.data() + (b * len + t) * n_st;

        double gdt = 0.0;
        double gx_drive = 0.0;
        for (int64_t n = 0; n < n_st; ++n) {
          gc_t[n] += gy * h_t[n];
          double ghn = gh[static_cast<size_t>(n)] + gy * c_t[n];

          const double a = a_row[n];
          const double z = dt * a;
          const double e = std::exp(z);
          const double hp = h_prev ? h_prev[n] : 0.0;
          const double bn = b_t[n];

          const double gabar = ghn * hp;
          double bbar;
          if (std::fabs(z) < kZohSeriesGuard) {
            bbar = dt * bn * (1.0 + 0.5 * z);
            const double gbbar = ghn * xv;
            gdt += gabar * a * e + gbbar * bn * (1.0 + z);
            ga_row[n] += gabar * dt * e + gbbar * bn * dt * dt * 0.5;
            gb_t[n] += gbbar * dt * (1.0 + 0.5 * z);
          } else {
            bbar = ((e - 1.0) / a) * bn;
            const double gbbar = ghn * xv;
            gdt += gabar * a * e + gbbar * e * bn;
            ga_row[n] += gabar * dt * e +
                         gbbar * bn * (dt * e * a - (e - 1.0)) / (a * a);
            gb_t[n] += gbbar * (e - 1.0) / a;
          }
          gx_drive += ghn * bbar;
          gh[static_cast<size_t>(n)] = ghn * e;
        }
        g_delta.at(b, t, d) = gdt;
        g.x_img.at(b, t, d) += gx_drive;
      }
    }
  }

  // Stage 2: selection backward -> parameter and stream grads.
  const double* wg = p.w_gate.data();
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t t = 0; t < len; ++t) {
      const double* xi = st.x_img.data() + (b * len + t) * d_ch;
      const double* xr = st.x_rad.data() + (b * len + t) * d_ch;
      double* gxi = g.x_img.data() + (b * len + t) * d_ch;
      double* gxr = g.x_rad.data() + (b * len + t) * d_ch;

      double galpha = 0.0;
      const double a_t = horizon ? saved.alpha.at(b, t) : 0.0;
      for (int64_t d = 0; d < d_ch; ++d) {
        const double gs = g_delta.at(b, t, d) * sigmoid(saved.s_dt.at(b, t, d));
        double* gw_row = g.params.w_dt_img.data() + d * d_ch;
        const double* w_row = p.w_dt_img.data() + d * d_ch;
        for (int64_t j = 0; j < d_ch; ++j) {
          gw_row[j] += gs * xi[j];
          gxi[j] += w_row[j] * gs;
        }
        g.params.dt_bias[d] += gs;
        if (horizon) {
          galpha += gs * saved.rad_dt.at(b, t, d);
          const double grd = gs * a_t;
          double* gwr_row = g.params.w_dt_rad.data() + d * d_ch;
          const double* wr_row = p.w_dt_rad.data() + d * d_ch;
          for (int64_t j = 0; j < d_ch; ++j) {
            gwr_row[j] += grd * xr[j];
            gxr[j] += wr_row[j] * grd;
          }
        }
      }
      if (horizon) {
        const double gsg = galpha * a_t * (1.0 - a_t);
        double* gwg = g.params.w_gate.data();
        for (int64_t j = 0; j < d_ch; ++j) {
          gwg[j] += gsg * xr[j];
          gxr[j] += wg[j] * gsg;
        }
        g.params.gate_bias[0] += gsg;
      }

      for (int64_t n = 0; n < n_st; ++n) {
        const double gb = g_bsel.at(b, t, n);
        double* gwb_row = g.params.w_b.data() + n * d_ch;
        const double* wb_row = p.w_b.data() + n * d_ch;
        const double gc = g_csel.at(b, t, n);
        double* gwc_row = g.params.w_c_img.data() + n * d_ch;
        const double* wc_row = p.w_c_img.data() + n * d_ch;
        for (int64_t j = 0; j < d_ch; ++j) {
          gwb_row[j] += gb * xi[j];
          gxi[j] += wb_row[j] * gb;
          gwc_row[j] += gc * xi[j];
          gxi[j] += wc_row[j] * gc;
        }
        if (readout) {
          double* gwcr_row = g.params.w_c_rad.data() + n * d_ch;
          const double* wcr_row = p.w_c_rad.data() + n * d_ch;
          for (int64_t j = 0; j < d_ch; ++j) {
            gwcr_row[j] += gc * xr[j];
            gxr[j] += wcr_row[j] * gc;
          }
        }
      }
    }
  }
  return g;
}

}  // namespace rmscan
