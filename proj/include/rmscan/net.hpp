#pragma once

// The full desk-scale depth network: five-level image encoder, radar point
// encoder with a scattered stride-2 feature map, per-level radar projections,
// tiered fusion (FiLM at the fine levels, radar-centred windowed scans at the
// mid level, four-direction full scans at the coarse levels), coarse-to-fine
// decoder, and the tanh depth head.

#include <array>
#include <string>
#include <vector>

#include <json.hpp>

#include "rmscan/film.hpp"
#include "rmscan/geometry.hpp"
#include "rmscan/loss.hpp"
#include "rmscan/optim.hpp"
#include "rmscan/tape.hpp"

namespace rmscan {

enum class NetMode { ImageOnly, Horizon, Readout, Joint, JointPreScan };

inline ModulationMode scan_mode_of(NetMode m) {
  switch (m) {
    case NetMode::ImageOnly:
      return ModulationMode::ImageOnly;
    case NetMode::Horizon:
      return ModulationMode::Horizon;
    case NetMode::Readout:
      return ModulationMode::Readout;
    default:
      return ModulationMode::Joint;
  }
}

inline bool mode_uses_radar(NetMode m) { return m != NetMode::ImageOnly; }
inline bool mode_uses_prescan(NetMode m) { return m == NetMode::JointPreScan; }

inline const char* net_mode_name(NetMode m) {
  switch (m) {
    case NetMode::ImageOnly:
      return "image-only";
    case NetMode::Horizon:
      return "horizon";
    case NetMode::Readout:
      return "readout";
    case NetMode::Joint:
      return "joint";
    default:
      return "joint-prescan";
  }
}

inline NetMode net_mode_from_string(const std::string& s) {
  if (s == "image-only") return NetMode::ImageOnly;
  if (s == "horizon") return NetMode::Horizon;
  if (s == "readout") return NetMode::Readout;
  if (s == "joint") return NetMode::Joint;
  if (s == "joint-prescan") return NetMode::JointPreScan;
  throw std::runtime_error("unknown mode: " + s);
}

enum class TierKind { Film, Window, Full };

using TierAssignment = std::array<TierKind, 5>;

inline TierAssignment default_tiers() {
  return {TierKind::Film, TierKind::Film, TierKind::Window, TierKind::Full,
          TierKind::Full};
}

inline TierAssignment uniform_film_tiers() {
  return {TierKind::Film, TierKind::Film, TierKind::Film, TierKind::Film,
          TierKind::Film};
}

inline const char* tier_name(TierKind t) {
  switch (t) {
    case TierKind::Film:
      return "film";
    case TierKind::Window:
      return "window";
    default:
      return "full";
  }
}

inline TierKind tier_from_string(const std::string& s) {
  if (s == "film") return TierKind::Film;
  if (s == "window") return TierKind::Window;
  if (s == "full") return TierKind::Full;
  throw std::runtime_error("unknown tier: " + s);
}

struct NetConfig {
  int64_t in_channels = 1;
  std::array<int64_t, 5> widths{8, 12, 16, 24, 32};
  int64_t state_dim = 4;
  int64_t radar_dim = 8;
  int64_t radar_hidden = 16;
  int64_t window_w = 8;
  TierAssignment tiers = default_tiers();
  double d_min = 0.5;
  double d_max = 80.0;
  bool use_dt_bias = true;
};

inline void validate(const NetConfig& c) {
  RMSCAN_CHECK(c.in_channels >= 1, "net cfg: in_channels must be positive");
  for (int64_t w : c.widths)
    RMSCAN_CHECK(w >= 1, "net cfg: widths must be positive");
  RMSCAN_CHECK(c.state_dim >= 1 && c.radar_dim >= 1 && c.radar_hidden >= 1,
               "net cfg: dims must be positive");
  RMSCAN_CHECK(c.window_w >= 1, "net cfg: window extent must be positive");
  RMSCAN_CHECK(c.d_min > 0.0 && c.d_min < c.d_max, "net cfg: bad depth range");
}

inline void to_json(nlohmann::json& j, const NetConfig& c) {
  std::vector<std::string> tiers;
  for (TierKind t : c.tiers) tiers.push_back(tier_name(t));
  j = nlohmann::json{{"in_channels", c.in_channels},
                     {"widths", c.widths},
                     {"state_dim", c.state_dim},
                     {"radar_dim", c.radar_dim},
                     {"radar_hidden", c.radar_hidden},
                     {"window_w", c.window_w},
                     {"tiers", tiers},
                     {"d_min", c.d_min},
                     {"d_max", c.d_max},
                     {"use_dt_bias", c.use_dt_bias}};
}

inline void from_json(const nlohmann::json& j, NetConfig& c) {
  j.at("in_channels").get_to(c.in_channels);
  j.at("widths").get_to(c.widths);
  j.at("state_dim").get_to(c.state_dim);
  j.at("radar_dim").get_to(c.radar_dim);
  j.at("radar_hidden").get_to(c.radar_hidden);
  j.at("window_w").get_to(c.window_w);
  const auto tiers = j.at("tiers").get<std::vector<std::string>>();
  RMSCAN_CHECK(tiers.size() == 5, "net cfg: tier map must list five levels");
  for (size_t i = 0; i < 5; ++i) c.tiers[i] = tier_from_string(tiers[i]);
  j.at("d_min").get_to(c.d_min);
  j.at("d_max").get_to(c.d_max);
  j.at("use_dt_bias").get_to(c.use_dt_bias);
}

struct NetParams {
  NetConfig cfg;
  ParamStore store;
};

namespace detail {

inline Tensor conv_init(int64_t co, int64_t kh, int64_t kw, int64_t ci,
                        Rng& rng) {
  const double s = std::sqrt(2.0 / static_cast<double>(kh * kw * ci));
  return Tensor::randn({co, kh, kw, ci}, rng, s);
}

inline void add_ssm(ParamStore& store, const std::string& prefix, int64_t d,
                    int64_t n, Rng& rng, bool use_dt_bias) {
  SsmParams p = make_ssm_params(d, n, rng, true, use_dt_bias);
  Tensor log_a(p.A.shape());
  for (int64_t i = 0; i < log_a.numel(); ++i) log_a[i] = std::log(-p.A[i]);
  store.add(prefix + ".log_a", std::move(log_a));
  store.add(prefix + ".w_dt_img", p.w_dt_img);
  store.add(prefix + ".w_b", p.w_b);
  store.add(prefix + ".w_c_img", p.w_c_img);
  store.add(prefix + ".w_dt_rad", p.w_dt_rad);
  store.add(prefix + ".w_c_rad", p.w_c_rad);
  store.add(prefix + ".w_gate", p.w_gate);
  store.add(prefix + ".gate_bias", p.gate_bias);
  store.add(prefix + ".dt_bias", p.dt_bias);
}

}  // namespace detail

inline NetParams make_net_params(const NetConfig& cfg, uint64_t seed) {
  validate(cfg);
  NetParams np;
  np.cfg = cfg;
  ParamStore& s = np.store;
  Rng rng(seed);

  int64_t cin = cfg.in_channels;
  for (int i = 0; i < 5; ++i) {
    const int64_t co = cfg.widths[static_cast<size_t>(i)];
    s.add("enc" + std::to_string(i) + ".w", detail::conv_init(co, 3, 3, cin, rng));
    s.add("enc" + std::to_string(i) + ".b", Tensor({co}));
    cin = co;
  }

  const double sm = 1.0 / std::sqrt(3.0);
  s.add("radar.mlp1.w",
        Tensor::rand_uniform({cfg.radar_hidden, 3}, rng, -sm, sm));
  s.add("radar.mlp1.b", Tensor({cfg.radar_hidden}));
  const double sh = 1.0 / std::sqrt(static_cast<double>(cfg.radar_hidden));
  s.add("radar.mlp2.w",
        Tensor::rand_uniform({cfg.radar_dim, cfg.radar_hidden}, rng, -sh, sh));
  s.add("radar.mlp2.b", Tensor({cfg.radar_dim}));
  const double sr = 1.0 / std::sqrt(static_cast<double>(cfg.radar_dim));
  for (int i = 0; i < 5; ++i)
    s.add("radar.proj" + std::to_string(i) + ".w",
          Tensor::rand_uniform({cfg.widths[static_cast<size_t>(i)], cfg.radar_dim},
                               rng, -sr, sr));

  for (int i = 0; i < 5; ++i) {
    const std::string lv = "l" + std::to_string(i);
    const int64_t d = cfg.widths[static_cast<size_t>(i)];
    switch (cfg.tiers[static_cast<size_t>(i)]) {
      case TierKind::Film:
        s.add(lv + ".film.gamma", Tensor({d, d}));
        s.add(lv + ".film.beta", Tensor({d, d}));
        break;
      case TierKind::Window:
        detail::add_ssm(s, lv + ".rms", d, cfg.state_dim, rng, cfg.use_dt_bias);
        break;
      case TierKind::Full:
        for (int layer = 0; layer < 2; ++layer) {
          for (int dir = 0; dir < 4; ++dir)
            detail::add_ssm(s,
                            lv + ".rms" + std::to_string(layer) + ".d" +
                                std::to_string(dir),
                            d, cfg.state_dim, rng, cfg.use_dt_bias);
          s.add(lv + ".ln" + std::to_string(layer) + ".gain",
                Tensor::full({d}, 1.0));
          s.add(lv + ".ln" + std::to_string(layer) + ".bias", Tensor({d}));
        }
        break;
    }
    if (cfg.tiers[static_cast<size_t>(i)] != TierKind::Film) {
      PreScanFusionParams pp = make_pre_scan_params(d, rng);
      s.add(lv + ".prescan.w_conf", pp.w_conf);
      s.add(lv + ".prescan.w_mix", pp.w_mix);
    }
  }

  const int64_t w0 = cfg.widths[0];
  for (int i = 3; i >= 0; --i) {
    const int64_t di = cfg.widths[static_cast<size_t>(i)];
    const int64_t dc = cfg.widths[static_cast<size_t>(i + 1)];
    s.add("dec" + std::to_string(i) + ".up.w", detail::conv_init(di, 3, 3, dc, rng));
    s.add("dec" + std::to_string(i) + ".up.b", Tensor({di}));
    const double smg = 1.0 / std::sqrt(static_cast<double>(2 * di));
    s.add("dec" + std::to_string(i) + ".merge.w",
          Tensor::rand_uniform({di, 2 * di}, rng, -smg, smg));
    s.add("dec" + std::to_string(i) + ".merge.b", Tensor({di}));
  }
  s.add("head.conv.w", detail::conv_init(w0, 3, 3, w0, rng));
  s.add("head.conv.b", Tensor({w0}));
  s.add("head.out.w", Tensor({1, w0}));
  s.add("head.out.b", Tensor({1}));
  return np;
}

// Parameter tensors bound to tape leaves, in store order.
struct BoundNet {
  Tape* tape = nullptr;
  const NetParams* params = nullptr;
  std::vector<Var> leaves;

  Var v(const std::string& name) const {
    auto it = params->store.index.find(name);
    RMSCAN_CHECK(it != params->store.index.end(),
                 "net: unknown parameter " + name);
    return leaves[it->second];
  }
};

inline BoundNet bind_net(Tape& tape, const NetParams& params, bool train) {
  BoundNet b;
  b.tape = &tape;
  b.params = &params;
  b.leaves.reserve(params.store.count());
  for (const Tensor& t : params.store.values)
    b.leaves.push_back(tape.leaf(t, train));
  return b;
}

namespace detail {

inline ops::SsmVars ssm_vars(const BoundNet& b, const std::string& prefix) {
  ops::SsmVars v;
  v.log_a = b.v(prefix + ".log_a");
  v.w_dt_img = b.v(prefix + ".w_dt_img");
  v.w_b = b.v(prefix + ".w_b");
  v.w_c_img = b.v(prefix + ".w_c_img");
  v.w_dt_rad = b.v(prefix + ".w_dt_rad");
  v.w_c_rad = b.v(prefix + ".w_c_rad");
  v.w_gate = b.v(prefix + ".w_gate");
  v.gate_bias = b.v(prefix + ".gate_bias");
  v.dt_bias = b.v(prefix + ".dt_bias");
  return v;
}

}  // namespace detail

namespace ops {

// Differentiable twin of four_direction_scan; identical arithmetic order.
inline Var four_direction_tape(const std::array<SsmVars, 4>& params,
                               Var img_grid, Var rad_grid, ModulationMode mode,
                               Var ln_gain, Var ln_bias,
                               ScanCounters* counters = nullptr) {
  Tape& t = tape_of(img_grid);
  const Tensor& iv = t.val(img_grid);
  RMSCAN_CHECK(iv.ndim() == 3, "four_direction_tape: expect [H,W,D]");
  const int64_t h = iv.size(0), w = iv.size(1), d = iv.size(2);
  Var img_flat = reshape(img_grid, {h * w, d});
  Var rad_flat = reshape(rad_grid, {h * w, d});

  Var sum = t.constant(Tensor({h * w, d}));
  for (size_t i = 0; i < 4; ++i) {
    const std::vector<int64_t> idx = order_indices(h, w, kAllDirections[i]);
    Var xi = reshape(gather_rows(img_flat, idx), {1, h * w, d});
    Var xr = reshape(gather_rows(rad_flat, idx), {1, h * w, d});
    Var y = rms_scan(params[i], xi, xr, mode);
    Var back = scatter_add_rows(reshape(y, {h * w, d}), idx, h * w);
    sum = add(sum, back);
    if (counters) counters->full_tokens += h * w;
  }
  Var ln = layer_norm(sum, ln_gain, ln_bias);
  return reshape(add(ln, img_flat), {h, w, d});
}

// Differentiable twin of windowed_rms; identical arithmetic order.
inline Var windowed_rms_tape(const SsmVars& params, Var img_grid, Var rad_grid,
                             const std::vector<Window>& windows,
                             const ScatterKernel& kernel, ModulationMode mode,
                             ScanCounters* counters = nullptr) {
  Tape& t = tape_of(img_grid);
  const Tensor& iv = t.val(img_grid);
  RMSCAN_CHECK(iv.ndim() == 3, "windowed_rms_tape: expect [H,W,D]");
  const int64_t h = iv.size(0), w = iv.size(1), d = iv.size(2);
  Var img_flat = reshape(img_grid, {h * w, d});
  if (windows.empty()) return img_grid;
  Var rad_flat = reshape(rad_grid, {h * w, d});

  Var accum = t.constant(Tensor({h * w, d}));
  Tensor wsum({h * w});
  for (const Window& win : windows) {
    RMSCAN_CHECK(win.r0 >= 0 && win.r1 <= h && win.c0 >= 0 && win.c1 <= w &&
                     win.count() > 0,
                 "windowed_rms_tape: window outside grid");
    const std::vector<int64_t> idx = serpentine_indices(win, w);
    const int64_t l = static_cast<int64_t>(idx.size());
    Var xi = reshape(gather_rows(img_flat, idx), {1, l, d});
    Var xr = reshape(gather_rows(rad_flat, idx), {1, l, d});
    Var y = reshape(rms_scan(params, xi, xr, mode), {l, d});
    Tensor kw_rows({l, d});
    for (int64_t tk = 0; tk < l; ++tk) {
      const int64_t f = idx[static_cast<size_t>(tk)];
      const double kw = kernel.at(f / w - win.center_r, f % w - win.center_c);
      for (int64_t k = 0; k < d; ++k) kw_rows[tk * d + k] = kw;
      wsum[f] += kw;
    }
    accum = add(accum, scatter_add_rows(mul_const(y, kw_rows), idx, h * w));
    if (counters) counters->window_tokens += l;
  }
  Tensor inv_rows({h * w, d});
  for (int64_t f = 0; f < h * w; ++f) {
    const double inv = wsum[f] > 0.0 ? 1.0 / wsum[f] : 0.0;
    for (int64_t k = 0; k < d; ++k) inv_rows[f * d + k] = inv;
  }
  Var out = add(img_flat, mul_const(accum, inv_rows));
  return reshape(out, {h, w, d});
}

}  // namespace ops

// Image pyramid at strides 2..32.
inline std::array<Var, 5> encode_pyramid(const BoundNet& b, Var image) {
  Tape& t = *b.tape;
  const Tensor& iv = t.val(image);
  RMSCAN_CHECK(iv.ndim() == 3 && iv.size(2) == b.params->cfg.in_channels,
               "encode_pyramid: image must be [H,W,Cin]");
  RMSCAN_CHECK(iv.size(0) % 32 == 0 && iv.size(1) % 32 == 0,
               "encode_pyramid: image dims must be divisible by 32");
  std::array<Var, 5> c;
  Var x = image;
  for (int i = 0; i < 5; ++i) {
    const std::string lv = "enc" + std::to_string(i);
    x = ops::silu_op(ops::conv2d(x, b.v(lv + ".w"), b.v(lv + ".b"), 2, 1));
    c[static_cast<size_t>(i)] = x;
  }
  return c;
}

// Per-point MLP features scattered onto the stride-2 grid; cell collisions
// keep the nearer return. Out-of-frame returns are dropped.
inline Var encode_radar_map(const BoundNet& b,
                            const std::vector<RadarReturn>& returns, int64_t h,
                            int64_t w) {
  Tape& t = *b.tape;
  const NetConfig& cfg = b.params->cfg;
  const int64_t hc = h / 2, wc = w / 2;
  RMSCAN_CHECK(hc >= 1 && wc >= 1, "encode_radar_map: frame too small");

  std::vector<RadarReturn> kept;
  for (const RadarReturn& r : returns)
    if (r.v >= 0.0 && r.v < static_cast<double>(h) && r.u >= 0.0 &&
        r.u < static_cast<double>(w))
      kept.push_back(r);
  if (kept.empty()) return t.constant(Tensor({hc, wc, cfg.radar_dim}));

  // One winner per cell, smallest depth; earlier return breaks ties.
  std::unordered_map<int64_t, size_t> winner;
  for (size_t i = 0; i < kept.size(); ++i) {
    const int64_t cell = (static_cast<int64_t>(kept[i].v) / 2) * wc +
                         static_cast<int64_t>(kept[i].u) / 2;
    auto it = winner.find(cell);
    if (it == winner.end() || kept[i].d < kept[it->second].d)
      winner[cell] = i;
  }
  std::vector<int64_t> cells;
  std::vector<int64_t> rows;
  for (size_t i = 0; i < kept.size(); ++i) {
    const int64_t cell = (static_cast<int64_t>(kept[i].v) / 2) * wc +
                         static_cast<int64_t>(kept[i].u) / 2;
    if (winner[cell] == i) {
      cells.push_back(cell);
      rows.push_back(static_cast<int64_t>(i));
    }
  }

  Tensor pts({static_cast<int64_t>(kept.size()), 3});
  for (size_t i = 0; i < kept.size(); ++i) {
    const std::array<double, 3> n = kept[i].normalized(h, w, cfg.d_max);
    pts[static_cast<int64_t>(i) * 3 + 0] = n[0];
    pts[static_cast<int64_t>(i) * 3 + 1] = n[1];
    pts[static_cast<int64_t>(i) * 3 + 2] = n[2];
  }
  Var feat = ops::linear(t.constant(std::move(pts)), b.v("radar.mlp1.w"),
                         b.v("radar.mlp1.b"));
  feat = ops::silu_op(feat);
  feat = ops::linear(feat, b.v("radar.mlp2.w"), b.v("radar.mlp2.b"));
  Var sel = ops::gather_rows(feat, rows);
  Var flat = ops::scatter_add_rows(sel, cells, hc * wc);
  return ops::reshape(flat, {hc, wc, cfg.radar_dim});
}

// Average-pooled copies of the stride-2 radar map, projected to each level's
// width. Projections are bias-free so an all-zero map stays all-zero.
inline std::array<Var, 5> radar_pyramid(const BoundNet& b, Var rad_map) {
  std::array<Var, 5> r;
  Var m = rad_map;
  for (int i = 0; i < 5; ++i) {
    if (i > 0) m = ops::avgpool2(m);
    r[static_cast<size_t>(i)] =
        ops::linear(m, b.v("radar.proj" + std::to_string(i) + ".w"));
  }
  return r;
}

struct NetForward {
  Var depth;  // [H, W] metres
  std::vector<Var> leaves;
  ScanCounters counters;
};

inline NetForward net_forward(Tape& tape, const NetParams& params,
                              const Tensor& image,
                              const std::vector<RadarReturn>& returns,
                              NetMode mode, bool train) {
  validate(params.cfg);
  const NetConfig& cfg = params.cfg;
  RMSCAN_CHECK(image.ndim() == 3 && image.size(2) == cfg.in_channels,
               "net: image must be [H,W,Cin]");
  const int64_t h = image.size(0), w = image.size(1);
  RMSCAN_CHECK(h % 32 == 0 && w % 32 == 0,
               "net: image dims must be divisible by 32");
  RMSCAN_CHECK(returns.size() <= 512, "net: more than 512 radar returns");

  BoundNet b = bind_net(tape, params, train);
  NetForward fw;
  fw.leaves = b.leaves;

  Var img = tape.constant(image);
  std::array<Var, 5> c = encode_pyramid(b, img);

  const bool radar = mode_uses_radar(mode);
  std::array<Var, 5> r;
  if (radar) {
    Var rad_map = encode_radar_map(b, returns, h, w);
    r = radar_pyramid(b, rad_map);
  } else {
    for (int i = 0; i < 5; ++i) {
      const Tensor& cv = tape.val(c[static_cast<size_t>(i)]);
      r[static_cast<size_t>(i)] = tape.constant(Tensor(cv.shape()));
    }
  }

  const ModulationMode smode = scan_mode_of(mode);
  const ScatterKernel kernel = make_scatter_kernel(cfg.window_w);
  std::array<Var, 5> f;
  for (int i = 0; i < 5; ++i) {
    const std::string lv = "l" + std::to_string(i);
    Var ci = c[static_cast<size_t>(i)];
    Var ri = r[static_cast<size_t>(i)];
    const Tensor& cv = tape.val(ci);
    const int64_t hi = cv.size(0), wi = cv.size(1), di = cv.size(2);
    const TierKind tier = cfg.tiers[static_cast<size_t>(i)];

    Var x = ci;
    if (tier != TierKind::Film && mode_uses_prescan(mode)) {
      Var xf = ops::pre_scan_blend_tape(
          ops::reshape(ci, {hi * wi, di}), ops::reshape(ri, {hi * wi, di}),
          b.v(lv + ".prescan.w_conf"), b.v(lv + ".prescan.w_mix"));
      x = ops::reshape(xf, {hi, wi, di});
    }

    switch (tier) {
      case TierKind::Film:
        f[static_cast<size_t>(i)] =
            radar ? ops::film_tape(ci, ri, b.v(lv + ".film.gamma"),
                                   b.v(lv + ".film.beta"))
                  : ci;
        break;
      case TierKind::Window: {
        int64_t skipped = 0;
        const std::vector<Window> windows = make_windows(
            returns, hi, wi, int64_t{2} << i, cfg.window_w, &skipped);
        fw.counters.skipped_returns += skipped;
        f[static_cast<size_t>(i)] = ops::windowed_rms_tape(
            detail::ssm_vars(b, lv + ".rms"), x, ri, windows, kernel, smode,
            &fw.counters);
        break;
      }
      case TierKind::Full: {
        Var g = x;
        for (int layer = 0; layer < 2; ++layer) {
          const std::string pf = lv + ".rms" + std::to_string(layer);
          std::array<ops::SsmVars, 4> sv;
          for (int dir = 0; dir < 4; ++dir)
            sv[static_cast<size_t>(dir)] =
                detail::ssm_vars(b, pf + ".d" + std::to_string(dir));
          g = ops::four_direction_tape(
              sv, g, ri, smode, b.v(lv + ".ln" + std::to_string(layer) + ".gain"),
              b.v(lv + ".ln" + std::to_string(layer) + ".bias"), &fw.counters);
        }
        f[static_cast<size_t>(i)] = g;
        break;
      }
    }
  }

  Var d = f[4];
  for (int i = 3; i >= 0; --i) {
    const std::string lv = "dec" + std::to_string(i);
    Var up = ops::silu_op(
        ops::conv2d(ops::upsample2(d), b.v(lv + ".up.w"), b.v(lv + ".up.b"), 1, 1));
    const Tensor& fv = tape.val(f[static_cast<size_t>(i)]);
    const int64_t hi = fv.size(0), wi = fv.size(1), di = fv.size(2);
    Var cat = ops::concat_last(ops::reshape(f[static_cast<size_t>(i)], {hi * wi, di}),
                               ops::reshape(up, {hi * wi, di}));
    Var merged =
        ops::silu_op(ops::linear(cat, b.v(lv + ".merge.w"), b.v(lv + ".merge.b")));
    d = ops::reshape(merged, {hi, wi, di});
  }

  Var u = ops::silu_op(
      ops::conv2d(ops::upsample2(d), b.v("head.conv.w"), b.v("head.conv.b"), 1, 1));
  Var pre = ops::linear(ops::reshape(u, {h * w, cfg.widths[0]}),
                        b.v("head.out.w"), b.v("head.out.b"));
  Var dt = ops::tanh_op(pre);

  const DepthNorm norm{cfg.d_min, cfg.d_max};
  const double span = std::log(norm.d_max) - std::log(norm.d_min);
  Var depth = ops::exp_op(
      ops::shift(ops::scale(ops::shift(dt, 1.0), 0.5 * span), std::log(norm.d_min)));
  depth = ops::clamp_op(depth, cfg.d_min, cfg.d_max);
  fw.depth = ops::reshape(depth, {h, w});
  return fw;
}

inline Tensor predict(const NetParams& params, const Tensor& image,
                      const std::vector<RadarReturn>& returns, NetMode mode,
                      ScanCounters* counters = nullptr) {
  Tape tape;
  NetForward fw = net_forward(tape, params, image, returns, mode, false);
  if (counters) *counters = fw.counters;
  return tape.val(fw.depth);
}

}  // namespace rmscan
