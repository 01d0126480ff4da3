#pragma once

// Deterministic synthetic radar-camera scenes. Depth is a min-composition of
// slanted planes over a ground plane, shifted by a per-scene global offset.
// The rendered image is Lambertian shading of the plane normals, which
// reveals slopes but not absolute depth, so metric anchoring must come from
// the radar returns. Radar v-coordinates are jittered to mimic height
// ambiguity; depths are sampled at the true pixel.

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "rmscan/geometry.hpp"
#include "rmscan/tensor.hpp"

namespace rmscan {

struct SceneConfig {
  int64_t h = 64;
  int64_t w = 64;
  int64_t n_planes = 4;
  int64_t n_returns = 40;
  double radar_noise_m = 0.2;
  double main_noise = 0.5;
  double img_noise = 0.01;
  double v_jitter_px = 3.0;
  double edge_bias = 0.7;
  double sparse_frac = 0.02;
  double drop_frac = 0.05;
  double offset_range = 40.0;
  double d_min = 0.5;
  double d_max = 80.0;
};

inline void validate(const SceneConfig& c) {
  RMSCAN_CHECK(c.h >= 32 && c.w >= 32 && c.h % 32 == 0 && c.w % 32 == 0,
               "scene cfg: H and W must be positive multiples of 32");
  RMSCAN_CHECK(c.n_planes >= 0 && c.n_returns >= 0 && c.n_returns <= 512,
               "scene cfg: need 0 <= n_returns <= 512");
  RMSCAN_CHECK(c.radar_noise_m >= 0.0 && c.main_noise >= 0.0 &&
                   c.img_noise >= 0.0 && c.v_jitter_px >= 0.0,
               "scene cfg: noise magnitudes must be nonnegative");
  RMSCAN_CHECK(c.edge_bias >= 0.0 && c.edge_bias <= 1.0 &&
                   c.sparse_frac >= 0.0 && c.sparse_frac <= 1.0 &&
                   c.drop_frac >= 0.0 && c.drop_frac < 1.0,
               "scene cfg: fractions out of range");
  RMSCAN_CHECK(c.d_min > 0.0 && c.d_min < c.d_max, "scene cfg: bad depth range");
}

inline void to_json(nlohmann::json& j, const SceneConfig& c) {
  j = nlohmann::json{{"h", c.h},
                     {"w", c.w},
                     {"n_planes", c.n_planes},
                     {"n_returns", c.n_returns},
                     {"radar_noise_m", c.radar_noise_m},
                     {"main_noise", c.main_noise},
                     {"img_noise", c.img_noise},
                     {"v_jitter_px", c.v_jitter_px},
                     {"edge_bias", c.edge_bias},
                     {"sparse_frac", c.sparse_frac},
                     {"drop_frac", c.drop_frac},
                     {"offset_range", c.offset_range},
                     {"d_min", c.d_min},
                     {"d_max", c.d_max}};
}

inline void from_json(const nlohmann::json& j, SceneConfig& c) {
  j.at("h").get_to(c.h);
  j.at("w").get_to(c.w);
  j.at("n_planes").get_to(c.n_planes);
  j.at("n_returns").get_to(c.n_returns);
  j.at("radar_noise_m").get_to(c.radar_noise_m);
  j.at("main_noise").get_to(c.main_noise);
  j.at("img_noise").get_to(c.img_noise);
  j.at("v_jitter_px").get_to(c.v_jitter_px);
  j.at("edge_bias").get_to(c.edge_bias);
  j.at("sparse_frac").get_to(c.sparse_frac);
  j.at("drop_frac").get_to(c.drop_frac);
  j.at("offset_range").get_to(c.offset_range);
  j.at("d_min").get_to(c.d_min);
  j.at("d_max").get_to(c.d_max);
}

struct Scene {
  uint64_t seed = 0;
  Tensor depth_gt;     // [H, W] metres
  Tensor image;        // [H, W, 1]
  Tensor main_gt;      // [H, W] noisy dense target
  Tensor main_mask;    // [H, W] 0/1
  Tensor sparse_gt;    // [H, W] clean sparse target
  Tensor sparse_mask;  // [H, W] 0/1
  std::vector<RadarReturn> returns;
};

namespace detail {

struct ScenePlane {
  double base = 0.0, gu = 0.0, gv = 0.0;  // d = base + gu*cn + gv*rn

  double depth_at(double cn, double rn) const { return base + gu * cn + gv * rn; }
};

}  // namespace detail

inline Scene generate_scene(uint64_t seed, const SceneConfig& cfg) {
  validate(cfg);
  const int64_t h = cfg.h, w = cfg.w;
  Rng rng(seed);

  Scene s;
  s.seed = seed;
  s.depth_gt = Tensor({h, w});
  s.image = Tensor({h, w, 1});
  s.main_gt = Tensor({h, w});
  s.main_mask = Tensor({h, w});
  s.sparse_gt = Tensor({h, w});
  s.sparse_mask = Tensor({h, w});

  // Plane set: ground first, then slanted foreground planes. The per-scene
  // offset shifts everything; shading cannot see it.
  const double offset = rng.uniform(0.0, cfg.offset_range);
  std::vector<detail::ScenePlane> planes;
  {
    detail::ScenePlane ground;
    const double g1 = rng.uniform(25.0, 55.0);
    ground.base = rng.uniform(6.0, 12.0) + 0.5 * g1 + offset;
    ground.gu = 0.0;
    ground.gv = -g1;
    planes.push_back(ground);
  }
  for (int64_t i = 0; i < cfg.n_planes; ++i) {
    detail::ScenePlane p;
    p.base = rng.uniform(6.0, 45.0) + offset;
    p.gu = rng.uniform(-14.0, 14.0);
    p.gv = rng.uniform(-14.0, 14.0);
    planes.push_back(p);
  }

  std::vector<int32_t> winner(static_cast<size_t>(h * w), 0);
  for (int64_t r = 0; r < h; ++r) {
    const double rn = static_cast<double>(r) / static_cast<double>(h - 1) - 0.5;
    for (int64_t c = 0; c < w; ++c) {
      const double cn = static_cast<double>(c) / static_cast<double>(w - 1) - 0.5;
      double best = planes[0].depth_at(cn, rn);
      int32_t best_i = 0;
      for (size_t i = 1; i < planes.size(); ++i) {
        const double d = planes[i].depth_at(cn, rn);
        if (d < best) {
          best = d;
          best_i = static_cast<int32_t>(i);
        }
      }
      s.depth_gt.at(r, c) = std::min(cfg.d_max, std::max(cfg.d_min, best));
      winner[static_cast<size_t>(r * w + c)] = best_i;
    }
  }

  // Lambertian shading of the winning plane's normal; slope-only, so the
  // global offset stays invisible.
  const double lu = rng.uniform(-0.5, 0.5);
  const double lv = rng.uniform(-0.5, 0.5);
  const double ln = std::sqrt(lu * lu + lv * lv + 1.0);
  for (int64_t r = 0; r < h; ++r) {
    for (int64_t c = 0; c < w; ++c) {
      const detail::ScenePlane& p =
          planes[static_cast<size_t>(winner[static_cast<size_t>(r * w + c)])];
      const double nu = -p.gu / 30.0, nv = -p.gv / 30.0;
      const double nn = std::sqrt(nu * nu + nv * nv + 1.0);
      const double lambert = (nu * lu + nv * lv + 1.0) / (nn * ln);
      s.image.at(r, c, 0) =
          0.8 * std::max(0.0, lambert) + 0.15 + cfg.img_noise * rng.normal();
    }
  }

  // Radar: sample pixels biased toward strong depth gradients, keep the true
  // column, jitter the row, perturb the depth.
  if (cfg.n_returns > 0) {
    std::vector<std::pair<double, int64_t>> grad(
        static_cast<size_t>(h * w));
    for (int64_t r = 0; r < h; ++r) {
      for (int64_t c = 0; c < w; ++c) {
        const double gx =
            (c + 1 < w) ? s.depth_gt.at(r, c + 1) - s.depth_gt.at(r, c) : 0.0;
        const double gy =
            (r + 1 < h) ? s.depth_gt.at(r + 1, c) - s.depth_gt.at(r, c) : 0.0;
        grad[static_cast<size_t>(r * w + c)] = {
            std::fabs(gx) + std::fabs(gy), r * w + c};
      }
    }
    std::sort(grad.begin(), grad.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    });
    const int64_t pool = std::max<int64_t>(1, h * w / 10);
    s.returns.reserve(static_cast<size_t>(cfg.n_returns));
    for (int64_t i = 0; i < cfg.n_returns; ++i) {
      int64_t flat;
      if (rng.uniform() < cfg.edge_bias) {
        flat = grad[static_cast<size_t>(rng.uniform_int(0, pool - 1))].second;
      } else {
        flat = rng.uniform_int(0, h * w - 1);
      }
      const int64_t r = flat / w, c = flat % w;
      RadarReturn ret;
      ret.u = static_cast<double>(c);
      double v = static_cast<double>(r);
      if (cfg.v_jitter_px > 0.0) {
        v += rng.normal(0.0, cfg.v_jitter_px);
        v = std::min(static_cast<double>(h - 1), std::max(0.0, v));
      }
      ret.v = v;
      double d = s.depth_gt.at(r, c);
      if (cfg.radar_noise_m > 0.0) d += rng.normal(0.0, cfg.radar_noise_m);
      ret.d = std::min(cfg.d_max, std::max(cfg.d_min, d));
      s.returns.push_back(ret);
    }
  }

  // Dense-but-noisy main target: low-frequency structured bumps, white
  // noise, dropout holes.
  struct Bump {
    double amp, fu, fv, phase;
  };
  std::vector<Bump> bumps;
  for (int i = 0; i < 3; ++i) {
    Bump b;
    b.amp = cfg.main_noise * rng.uniform(0.5, 1.5);
    b.fu = rng.uniform(1.0, 4.0);
    b.fv = rng.uniform(1.0, 4.0);
    b.phase = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
    bumps.push_back(b);
  }
  for (int64_t r = 0; r < h; ++r) {
    const double rn = static_cast<double>(r) / static_cast<double>(h - 1) - 0.5;
    for (int64_t c = 0; c < w; ++c) {
      const double cn = static_cast<double>(c) / static_cast<double>(w - 1) - 0.5;
      double m = s.depth_gt.at(r, c);
      for (const Bump& b : bumps)
        m += b.amp * std::cos(2.0 * 3.14159265358979323846 *
                                  (b.fu * cn + b.fv * rn) +
                              b.phase);
      m += 0.3 * cfg.main_noise * rng.normal();
      s.main_gt.at(r, c) = std::min(cfg.d_max, std::max(cfg.d_min, m));
      s.main_mask.at(r, c) = rng.uniform() < cfg.drop_frac ? 0.0 : 1.0;
    }
  }

  // Clean sparse samples straight off the ground truth.
  for (int64_t i = 0; i < h * w; ++i) {
    if (rng.uniform() < cfg.sparse_frac) {
      s.sparse_gt[i] = s.depth_gt[i];
      s.sparse_mask[i] = 1.0;
    }
  }
  return s;
}

// --- dataset container ---

constexpr uint32_t kDatasetMagic = 0x53444d52;  // "RMDS"
constexpr uint32_t kDatasetVersion = 1;

namespace detail {

inline void write_u32(std::ostream& os, uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
inline void write_u64(std::ostream& os, uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
inline uint32_t read_u32(std::istream& is) {
  uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  RMSCAN_CHECK(is.good(), "dataset: truncated file");
  return v;
}
inline uint64_t read_u64(std::istream& is) {
  uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  RMSCAN_CHECK(is.good(), "dataset: truncated file");
  return v;
}

inline void write_f32_tensor(std::ostream& os, const Tensor& t) {
  for (int64_t i = 0; i < t.numel(); ++i) {
    const float f = static_cast<float>(t[i]);
    os.write(reinterpret_cast<const char*>(&f), sizeof(f));
  }
}

inline void read_f32_tensor(std::istream& is, Tensor& t) {
  for (int64_t i = 0; i < t.numel(); ++i) {
    float f = 0.0f;
    is.read(reinterpret_cast<char*>(&f), sizeof(f));
    RMSCAN_CHECK(is.good(), "dataset: truncated file");
    t[i] = static_cast<double>(f);
  }
}

}  // namespace detail

inline void write_dataset(const std::string& path, const SceneConfig& cfg,
                          const std::vector<Scene>& scenes) {
  std::ofstream os(path, std::ios::binary);
  RMSCAN_CHECK(os.good(), "dataset: cannot open for writing: " + path);
  detail::write_u32(os, kDatasetMagic);
  detail::write_u32(os, kDatasetVersion);
  const std::string cfg_json = nlohmann::json(cfg).dump();
  detail::write_u64(os, cfg_json.size());
  os.write(cfg_json.data(), static_cast<std::streamsize>(cfg_json.size()));
  detail::write_u64(os, scenes.size());
  for (const Scene& s : scenes) {
    detail::write_u64(os, s.seed);
    detail::write_f32_tensor(os, s.depth_gt);
    detail::write_f32_tensor(os, s.image);
    detail::write_f32_tensor(os, s.main_gt);
    detail::write_f32_tensor(os, s.main_mask);
    detail::write_f32_tensor(os, s.sparse_gt);
    detail::write_f32_tensor(os, s.sparse_mask);
    detail::write_u32(os, static_cast<uint32_t>(s.returns.size()));
    for (const RadarReturn& r : s.returns) {
      const float u = static_cast<float>(r.u);
      const float v = static_cast<float>(r.v);
      const float d = static_cast<float>(r.d);
      os.write(reinterpret_cast<const char*>(&u), sizeof(u));
      os.write(reinterpret_cast<const char*>(&v), sizeof(v));
      os.write(reinterpret_cast<const char*>(&d), sizeof(d));
    }
  }
  RMSCAN_CHECK(os.good(), "dataset: write failed: " + path);
}

inline std::vector<Scene> read_dataset(const std::string& path,
                                       SceneConfig* cfg_out = nullptr) {
  std::ifstream is(path, std::ios::binary);
  RMSCAN_CHECK(is.good(), "dataset: cannot open: " + path);
  RMSCAN_CHECK(detail::read_u32(is) == kDatasetMagic,
               "dataset: bad magic in " + path);
  RMSCAN_CHECK(detail::read_u32(is) == kDatasetVersion,
               "dataset: unsupported version in " + path);
  const uint64_t cfg_len = detail::read_u64(is);
  RMSCAN_CHECK(cfg_len < (1u << 20), "dataset: implausible header");
  std::string cfg_json(cfg_len, '\0');
  is.read(cfg_json.data(), static_cast<std::streamsize>(cfg_len));
  RMSCAN_CHECK(is.good(), "dataset: truncated file");
  SceneConfig cfg = nlohmann::json::parse(cfg_json).get<SceneConfig>();
  validate(cfg);
  if (cfg_out) *cfg_out = cfg;

  const uint64_t count = detail::read_u64(is);
  std::vector<Scene> scenes;
  scenes.reserve(count);
  for (uint64_t i = 0; i < count; ++i) {
    Scene s;
    s.seed = detail::read_u64(is);
    s.depth_gt = Tensor({cfg.h, cfg.w});
    s.image = Tensor({cfg.h, cfg.w, 1});
    s.main_gt = Tensor({cfg.h, cfg.w});
    s.main_mask = Tensor({cfg.h, cfg.w});
    s.sparse_gt = Tensor({cfg.h, cfg.w});
    s.sparse_mask = Tensor({cfg.h, cfg.w});
    detail::read_f32_tensor(is, s.depth_gt);
    detail::read_f32_tensor(is, s.image);
    detail::read_f32_tensor(is, s.main_gt);
    detail::read_f32_tensor(is, s.main_mask);
    detail::read_f32_tensor(is, s.sparse_gt);
    detail::read_f32_tensor(is, s.sparse_mask);
    const uint32_t n_ret = detail::read_u32(is);
    RMSCAN_CHECK(n_ret <= 512, "dataset: scene exceeds return budget");
    s.returns.resize(n_ret);
    for (uint32_t k = 0; k < n_ret; ++k) {
      float u = 0.0f, v = 0.0f, d = 0.0f;
      is.read(reinterpret_cast<char*>(&u), sizeof(u));
      is.read(reinterpret_cast<char*>(&v), sizeof(v));
      is.read(reinterpret_cast<char*>(&d), sizeof(d));
      RMSCAN_CHECK(is.good(), "dataset: truncated file");
      s.returns[k] = RadarReturn{static_cast<double>(u),
                                 static_cast<double>(v),
                                 static_cast<double>(d)};
    }
    scenes.push_back(std::move(s));
  }
  return scenes;
}

// Plain-JSON manifest: everything needed to regenerate the dataset without
// the stored tensors.
inline void write_manifest(const std::string& path, const SceneConfig& cfg,
                           const std::vector<uint64_t>& seeds) {
  nlohmann::json j;
  j["version"] = kDatasetVersion;
  j["cfg"] = cfg;
  j["seeds"] = seeds;
  std::ofstream os(path);
  RMSCAN_CHECK(os.good(), "manifest: cannot open for writing: " + path);
  os << j.dump(2) << "\n";
  RMSCAN_CHECK(os.good(), "manifest: write failed: " + path);
}

inline std::vector<Scene> regenerate_from_manifest(const std::string& path,
                                                   SceneConfig* cfg_out = nullptr) {
  std::ifstream is(path);
  RMSCAN_CHECK(is.good(), "manifest: cannot open: " + path);
  nlohmann::json j;
  is >> j;
  RMSCAN_CHECK(j.at("version").get<uint32_t>() == kDatasetVersion,
               "manifest: unsupported version in " + path);
  const SceneConfig cfg = j.at("cfg").get<SceneConfig>();
  if (cfg_out) *cfg_out = cfg;
  std::vector<Scene> scenes;
  for (uint64_t seed : j.at("seeds").get<std::vector<uint64_t>>())
    scenes.push_back(generate_scene(seed, cfg));
  return scenes;
}

}  // namespace rmscan
