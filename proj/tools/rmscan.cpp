// Command-line front end: dataset generation, training, evaluation,
// throughput benchmarks, init-parity checks, and the ablation sweep.
//
// Exit codes: 0 success, 1 invariant violation, 2 usage or I/O error.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "rmscan/checkpoint.hpp"
#include "rmscan/train.hpp"
#include "rmscan/version.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace rmscan;

namespace {

int thread_count() {
  if (const char* env = std::getenv("RMSCAN_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) return static_cast<int>(v);
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw ? static_cast<int>(hw) : 1;
}

// Runs fn(i) for i in [0, n) on a worker pool. Each index writes only its own
// output slot, so results are identical for any thread count.
void parallel_for(int64_t n, const std::function<void(int64_t)>& fn) {
  const int workers =
      static_cast<int>(std::min<int64_t>(thread_count(), n));
  if (workers <= 1) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int64_t> next{0};
  std::exception_ptr err;
  std::mutex err_mu;
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        const int64_t i = next.fetch_add(1);
        if (i >= n) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lk(err_mu);
          if (!err) err = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (err) std::rethrow_exception(err);
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(item);
  return out;
}

std::vector<double> parse_double_csv(const std::string& s) {
  std::vector<double> out;
  for (const std::string& t : split_csv(s)) out.push_back(std::stod(t));
  return out;
}

bool ends_with(const std::string& s, const std::string& suf) {
  return s.size() >= suf.size() &&
         s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
}

// A .json path is treated as a manifest and regenerated; anything else is
// read as a packed dataset.
std::vector<Scene> load_scenes(const std::string& path, SceneConfig* cfg) {
  if (ends_with(path, ".json")) return regenerate_from_manifest(path, cfg);
  return read_dataset(path, cfg);
}

// --- depth renders -----------------------------------------------------

std::array<uint8_t, 3> jet_rgb(double t) {
  const double v = 4.0 * std::clamp(t, 0.0, 1.0);
  const auto ch = [](double x) {
    return static_cast<uint8_t>(std::lround(255.0 * std::clamp(x, 0.0, 1.0)));
  };
  return {ch(std::min(v - 1.5, 4.5 - v)), ch(std::min(v - 0.5, 3.5 - v)),
          ch(std::min(v + 0.5, 2.5 - v))};
}

void write_depth_ppm(const std::string& path, const Tensor& depth,
                     double d_max) {
  const int64_t h = depth.size(0), w = depth.size(1);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("render: cannot open " + path);
  f << "P6\n" << w << " " << h << "\n255\n";
  for (int64_t i = 0; i < h * w; ++i) {
    const double d = std::min(depth[i], d_max);
    const auto rgb = jet_rgb(d / d_max);
    f.write(reinterpret_cast<const char*>(rgb.data()), 3);
  }
  if (!f) throw std::runtime_error("render: write failed for " + path);
}

// --- run configuration -------------------------------------------------

struct RunConfig {
  std::string data;
  std::string out;
  NetMode mode = NetMode::Joint;
  int64_t epochs = 30;
  uint64_t seed = 1;
  int64_t batch = 1;
  double val_frac = 0.2;
  double val_range_m = 80.0;
  bool deterministic = true;
  NetConfig net;
  StepDecaySchedule schedule;
  LossWeights weights;
};

json run_config_to_json(const RunConfig& rc) {
  json j;
  j["version"] = kVersion;
  j["data"] = rc.data;
  j["out"] = rc.out;
  j["mode"] = net_mode_name(rc.mode);
  j["epochs"] = rc.epochs;
  j["seed"] = rc.seed;
  j["batch"] = rc.batch;
  j["val_frac"] = rc.val_frac;
  j["val_range_m"] = rc.val_range_m;
  j["deterministic"] = rc.deterministic;
  j["net"] = rc.net;
  j["schedule"] = {{"lr0", rc.schedule.lr0},
                   {"step_abs", rc.schedule.step_abs},
                   {"every_epochs", rc.schedule.every_epochs},
                   {"floor_frac", rc.schedule.floor_frac}};
  j["weights"] = {{"lam_log", rc.weights.lam_log},
                  {"lam_lin", rc.weights.lam_lin},
                  {"lam_grad", rc.weights.lam_grad},
                  {"lam_sparse", rc.weights.lam_sparse}};
  return j;
}

void apply_run_config(RunConfig& rc, const json& j) {
  if (j.contains("data")) rc.data = j.at("data").get<std::string>();
  if (j.contains("out")) rc.out = j.at("out").get<std::string>();
  if (j.contains("mode"))
    rc.mode = net_mode_from_string(j.at("mode").get<std::string>());
  if (j.contains("epochs")) rc.epochs = j.at("epochs").get<int64_t>();
  if (j.contains("seed")) rc.seed = j.at("seed").get<uint64_t>();
  if (j.contains("batch")) rc.batch = j.at("batch").get<int64_t>();
  if (j.contains("val_frac")) rc.val_frac = j.at("val_frac").get<double>();
  if (j.contains("val_range_m"))
    rc.val_range_m = j.at("val_range_m").get<double>();
  if (j.contains("deterministic"))
    rc.deterministic = j.at("deterministic").get<bool>();
  if (j.contains("net")) rc.net = j.at("net").get<NetConfig>();
  if (j.contains("schedule")) {
    const json& s = j.at("schedule");
    if (s.contains("lr0")) rc.schedule.lr0 = s.at("lr0").get<double>();
    if (s.contains("step_abs"))
      rc.schedule.step_abs = s.at("step_abs").get<double>();
    if (s.contains("every_epochs"))
      rc.schedule.every_epochs = s.at("every_epochs").get<int64_t>();
    if (s.contains("floor_frac"))
      rc.schedule.floor_frac = s.at("floor_frac").get<double>();
  }
  if (j.contains("weights")) {
    const json& w = j.at("weights");
    if (w.contains("lam_log")) rc.weights.lam_log = w.at("lam_log").get<double>();
    if (w.contains("lam_lin")) rc.weights.lam_lin = w.at("lam_lin").get<double>();
    if (w.contains("lam_grad"))
      rc.weights.lam_grad = w.at("lam_grad").get<double>();
    if (w.contains("lam_sparse"))
      rc.weights.lam_sparse = w.at("lam_sparse").get<double>();
  }
}

json load_json(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  json j;
  f >> j;
  return j;
}

// --- shared training driver ---------------------------------------------

struct TrainedRun {
  TrainResult res;
  int64_t n_train = 0;
  int64_t n_val = 0;
};

// Writes the run directory (config.json before training, log.jsonl,
// best.rmck, last.rmck) and runs the loop. Returns an exit code.
int do_train_run(const RunConfig& rc, const std::vector<Scene>& scenes,
                 TrainedRun* out, bool quiet) {
  if (rc.out.empty()) {
    std::cerr << "train: --out is required\n";
    return 2;
  }
  if (rc.batch != 1) {
    std::cerr << "train: only batch size 1 is implemented\n";
    return 2;
  }
  validate(rc.net);
  const int64_t n = static_cast<int64_t>(scenes.size());
  if (n < 1) {
    std::cerr << "train: dataset is empty\n";
    return 2;
  }
  int64_t n_val = std::llround(rc.val_frac * static_cast<double>(n));
  n_val = std::clamp<int64_t>(n_val, 0, n - 1);
  const std::vector<Scene> train_set(scenes.begin(), scenes.end() - n_val);
  const std::vector<Scene> val_set(scenes.end() - n_val, scenes.end());

  fs::create_directories(rc.out);
  {
    std::ofstream cfg_f(rc.out + "/config.json");
    if (!cfg_f) throw std::runtime_error("cannot write " + rc.out + "/config.json");
    cfg_f << run_config_to_json(rc).dump(2) << "\n";
  }
  std::ofstream log_f(rc.out + "/log.jsonl");
  if (!log_f) throw std::runtime_error("cannot write " + rc.out + "/log.jsonl");

  TrainConfig tc;
  tc.mode = rc.mode;
  tc.epochs = rc.epochs;
  tc.seed = rc.seed;
  tc.schedule = rc.schedule;
  tc.weights = rc.weights;
  tc.val_range_m = rc.val_range_m;

  const NetParams init = make_net_params(rc.net, rc.seed);
  TrainResult res =
      train_net(init, train_set, val_set, tc, [&](const EpochRecord& r) {
        log_f << json(r).dump() << "\n";
        log_f.flush();
        if (!quiet) {
          std::cout << "epoch " << r.epoch << "  lr " << r.lr << "  train "
                    << r.train_total << "  val MAE " << r.val_mae_mm
                    << " mm\n";
        }
      });

  const json base_meta = {{"version", kVersion},
                          {"mode", net_mode_name(rc.mode)}};
  json last_meta = base_meta;
  last_meta["epoch"] = res.aborted ? static_cast<int64_t>(res.log.size()) - 1
                                   : rc.epochs - 1;
  write_checkpoint(rc.out + "/last.rmck", res.last, res.adam, last_meta);

  json best_meta = base_meta;
  best_meta["epoch"] = res.best_epoch;
  if (res.best_epoch >= 0) best_meta["val_mae_mm"] = res.best_val_mae_mm;
  write_checkpoint(rc.out + "/best.rmck", res.best, res.best_adam, best_meta);

  if (out) {
    out->res = res;
    out->n_train = static_cast<int64_t>(train_set.size());
    out->n_val = n_val;
  }
  if (res.aborted) {
    std::cerr << "train: aborted (" << res.abort_reason
              << "); last completed epoch kept in " << rc.out << "/last.rmck\n";
    return 1;
  }
  if (!quiet) {
    std::cout << "trained " << rc.epochs << " epochs on " << train_set.size()
              << " scenes (" << n_val << " val)";
    if (res.best_epoch >= 0)
      std::cout << "; best epoch " << res.best_epoch << " val MAE "
                << res.best_val_mae_mm << " mm";
    std::cout << "\nwrote " << rc.out << "/best.rmck and " << rc.out
              << "/last.rmck\n";
  }
  return 0;
}

// --- eval helpers --------------------------------------------------------

json pooled_report(const std::vector<Tensor>& preds,
                   const std::vector<Scene>& scenes,
                   const std::vector<double>& ranges, double d_min,
                   double d_max) {
  struct Acc {
    double abs = 0, sq = 0, iabs = 0, isq = 0;
    int64_t px = 0;
  };
  std::vector<Acc> acc(ranges.size());
  for (size_t s = 0; s < scenes.size(); ++s) {
    const Tensor ones = Tensor::full(scenes[s].depth_gt.shape(), 1.0);
    const auto ms =
        eval_metrics(preds[s], scenes[s].depth_gt, ones, ranges, d_min, d_max);
    for (size_t r = 0; r < ms.size(); ++r) {
      if (ms[r].skipped) continue;
      const double n = static_cast<double>(ms[r].pixels);
      acc[r].abs += ms[r].mae_mm * n;
      acc[r].sq += ms[r].rmse_mm * ms[r].rmse_mm * n;
      acc[r].iabs += ms[r].imae_kminv * n;
      acc[r].isq += ms[r].irmse_kminv * ms[r].irmse_kminv * n;
      acc[r].px += ms[r].pixels;
    }
  }
  json out = json::array();
  for (size_t r = 0; r < ranges.size(); ++r) {
    json jr;
    jr["range_m"] = ranges[r];
    jr["pixels"] = acc[r].px;
    if (acc[r].px > 0) {
      const double n = static_cast<double>(acc[r].px);
      jr["mae_mm"] = acc[r].abs / n;
      jr["rmse_mm"] = std::sqrt(acc[r].sq / n);
      jr["imae_kminv"] = acc[r].iabs / n;
      jr["irmse_kminv"] = std::sqrt(acc[r].isq / n);
    } else {
      jr["skipped"] = true;
    }
    out.push_back(jr);
  }
  return out;
}

// --- parity helpers ------------------------------------------------------

void fill_tensor(Tensor& t, double v) {
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = v;
}

NetConfig parity_net_config(Rng& rng) {
  NetConfig cfg;
  if (rng.uniform_int(0, 1) == 0)
    cfg.widths = {4, 4, 6, 6, 8};
  else
    cfg.widths = {6, 6, 8, 8, 8};
  cfg.state_dim = 2 + rng.uniform_int(0, 2);
  cfg.radar_dim = 4 + rng.uniform_int(0, 2);
  return cfg;
}

// --- subcommand argument bundles -----------------------------------------

struct GenArgs {
  std::string out;
  std::string manifest;
  int64_t scenes = 200;
  uint64_t seed = 1;
  SceneConfig cfg;
};

int cmd_gen_data(const GenArgs& a) {
  if (a.out.empty() && a.manifest.empty()) {
    std::cerr << "gen-data: need --out and/or --manifest\n";
    return 2;
  }
  validate(a.cfg);
  std::vector<Scene> all(static_cast<size_t>(a.scenes));
  std::vector<uint64_t> seeds(static_cast<size_t>(a.scenes));
  for (int64_t i = 0; i < a.scenes; ++i)
    seeds[static_cast<size_t>(i)] = a.seed + static_cast<uint64_t>(i);
  parallel_for(a.scenes, [&](int64_t i) {
    all[static_cast<size_t>(i)] =
        generate_scene(seeds[static_cast<size_t>(i)], a.cfg);
  });
  if (!a.out.empty()) {
    write_dataset(a.out, a.cfg, all);
    std::cout << "wrote " << a.scenes << " scenes (" << a.cfg.h << "x"
              << a.cfg.w << ") to " << a.out << "\n";
  }
  if (!a.manifest.empty()) {
    write_manifest(a.manifest, a.cfg, seeds);
    std::cout << "wrote manifest " << a.manifest << "\n";
  }
  return 0;
}

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string mode;
  std::string out;
  std::string renders;
  std::string ranges = "50,70,80";
};

int cmd_eval(const EvalArgs& a) {
  if (a.checkpoint.empty() || a.data.empty()) {
    std::cerr << "eval: --checkpoint and --data are required\n";
    return 2;
  }
  const Checkpoint ck = read_checkpoint(a.checkpoint);
  NetMode mode = NetMode::Joint;
  if (!a.mode.empty())
    mode = net_mode_from_string(a.mode);
  else if (ck.meta.contains("mode"))
    mode = net_mode_from_string(ck.meta.at("mode").get<std::string>());

  SceneConfig scfg;
  const std::vector<Scene> scenes = load_scenes(a.data, &scfg);
  const std::vector<double> ranges = parse_double_csv(a.ranges);
  if (scenes.empty() || ranges.empty()) {
    std::cerr << "eval: empty dataset or range list\n";
    return 2;
  }

  std::vector<Tensor> preds(scenes.size());
  const std::vector<RadarReturn> no_returns;
  parallel_for(static_cast<int64_t>(scenes.size()), [&](int64_t i) {
    const Scene& s = scenes[static_cast<size_t>(i)];
    const auto& rets = mode_uses_radar(mode) ? s.returns : no_returns;
    preds[static_cast<size_t>(i)] = predict(ck.params, s.image, rets, mode);
  });

  json report;
  report["version"] = kVersion;
  report["checkpoint"] = a.checkpoint;
  report["dataset"] = a.data;
  report["mode"] = net_mode_name(mode);
  report["scenes"] = scenes.size();
  report["ranges"] = pooled_report(preds, scenes, ranges,
                                   ck.params.cfg.d_min, ck.params.cfg.d_max);

  if (!a.renders.empty()) {
    fs::create_directories(a.renders);
    for (size_t i = 0; i < scenes.size(); ++i) {
      char buf[64];
      std::snprintf(buf, sizeof(buf), "scene_%04zu", i);
      write_depth_ppm(a.renders + "/" + buf + "_pred.ppm", preds[i],
                      ck.params.cfg.d_max);
      write_depth_ppm(a.renders + "/" + buf + "_gt.ppm", scenes[i].depth_gt,
                      ck.params.cfg.d_max);
    }
    report["renders"] = a.renders;
  }

  std::cout << report.dump(2) << "\n";
  if (!a.out.empty()) {
    std::ofstream f(a.out);
    if (!f) throw std::runtime_error("cannot write " + a.out);
    f << report.dump(2) << "\n";
  }
  return 0;
}

struct ParityArgs {
  int64_t trials = 100;
  uint64_t seed = 1;
  bool negative_control = false;
  std::string checkpoint;
  std::string data;
};

int cmd_parity(const ParityArgs& a) {
  if (!a.checkpoint.empty()) {
    // Trained-checkpoint fallback: with no radar returns, the joint-mode
    // forward pass must match the radar-ablated one exactly.
    const Checkpoint ck = read_checkpoint(a.checkpoint);
    NetMode mode = NetMode::Joint;
    if (ck.meta.contains("mode")) {
      const NetMode m =
          net_mode_from_string(ck.meta.at("mode").get<std::string>());
      if (m != NetMode::ImageOnly && m != NetMode::JointPreScan) mode = m;
    }
    Tensor image;
    if (!a.data.empty()) {
      SceneConfig scfg;
      const auto scenes = load_scenes(a.data, &scfg);
      if (scenes.empty()) {
        std::cerr << "parity: dataset is empty\n";
        return 2;
      }
      image = scenes.front().image;
    } else {
      SceneConfig scfg;
      image = generate_scene(a.seed, scfg).image;
    }
    const std::vector<RadarReturn> none;
    const Tensor with = predict(ck.params, image, none, mode);
    const Tensor without = predict(ck.params, image, none, NetMode::ImageOnly);
    const double diff = max_abs_diff(with, without);
    std::cout << "checkpoint fallback (" << net_mode_name(mode)
              << " vs image-only, zero returns): max |diff| = " << diff
              << "\n";
    return diff == 0.0 ? 0 : 1;
  }

  Rng rng(a.seed);
  double max_diff = 0.0;
  for (int64_t t = 0; t < a.trials; ++t) {
    NetConfig cfg = parity_net_config(rng);
    SceneConfig scfg;
    scfg.h = 32 * (1 + rng.uniform_int(0, 1));
    scfg.w = 32 * (1 + rng.uniform_int(0, 1));
    scfg.n_returns = 8 + rng.uniform_int(0, 24);
    const uint64_t net_seed = a.seed + 1000 + static_cast<uint64_t>(t);
    NetParams np = make_net_params(cfg, net_seed);
    // The output head starts at zero, which would hide any upstream
    // difference; the parity property only requires the radar-pathway
    // weights to be zero, so give the head random weight.
    Rng head_rng(net_seed + 7777);
    np.store.at("head.out.w") = Tensor::randn({1, cfg.widths[0]}, head_rng);
    np.store.at("head.out.b") = Tensor::randn({1}, head_rng);
    if (a.negative_control) {
      fill_tensor(np.store.at("l0.film.gamma"), 0.05);
      fill_tensor(np.store.at("l2.rms.w_dt_rad"), 0.05);
    }
    const Scene sc =
        generate_scene(a.seed + 2000 + static_cast<uint64_t>(t), scfg);
    const Tensor joint = predict(np, sc.image, sc.returns, NetMode::Joint);
    const Tensor base = predict(np, sc.image, sc.returns, NetMode::ImageOnly);
    max_diff = std::max(max_diff, max_abs_diff(joint, base));
  }
  std::cout << "fresh-init parity over " << a.trials
            << " trials: max |joint - image-only| = " << max_diff << "\n";
  if (a.negative_control)
    std::cout << "(negative control: radar weights were set non-zero, a "
                 "difference is expected)\n";
  return max_diff == 0.0 ? 0 : 1;
}

struct BenchArgs {
  int64_t l = 4096;
  int64_t d = 32;
  int64_t n = 8;
  int64_t trials = 20;
  int64_t chunk = 64;
  uint64_t seed = 1;
  int64_t h = 64;
  int64_t w = 64;
  int64_t returns = 40;
};

double median_scan_ms(const SsmParams& p, const TokenStreams& st,
                      int64_t chunk, int64_t trials) {
  selective_scan_chunked(p, st, ModulationMode::Joint, chunk);
  std::vector<double> ms;
  ms.reserve(static_cast<size_t>(trials));
  for (int64_t t = 0; t < trials; ++t) {
    const auto t0 = std::chrono::steady_clock::now();
    selective_scan_chunked(p, st, ModulationMode::Joint, chunk);
    const auto t1 = std::chrono::steady_clock::now();
    ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  std::sort(ms.begin(), ms.end());
  return ms[ms.size() / 2];
}

int cmd_bench(const BenchArgs& a) {
  Rng rng(a.seed);
  SsmParams p = make_ssm_params(a.d, a.n, rng, false);
  TokenStreams st1{Tensor::randn({1, a.l, a.d}, rng),
                   Tensor::randn({1, a.l, a.d}, rng)};
  TokenStreams st2{Tensor::randn({1, 2 * a.l, a.d}, rng),
                   Tensor::randn({1, 2 * a.l, a.d}, rng)};
  const double t1 = median_scan_ms(p, st1, a.chunk, a.trials);
  const double t2 = median_scan_ms(p, st2, a.chunk, a.trials);
  const double ratio = t2 / t1;
  std::cout << "scan wall-clock (D=" << a.d << ", N=" << a.n << ", median of "
            << a.trials << "):\n"
            << "  L=" << a.l << "  " << t1 << " ms\n"
            << "  L=" << 2 * a.l << "  " << t2 << " ms\n"
            << "  doubling ratio " << ratio << " (linear cost expects ~2)\n";

  // Token accounting for one forward pass of the default pyramid.
  NetConfig cfg;
  SceneConfig scfg;
  scfg.h = a.h;
  scfg.w = a.w;
  scfg.n_returns = a.returns;
  const Scene sc = generate_scene(a.seed, scfg);
  NetParams np = make_net_params(cfg, a.seed);

  int64_t expect_full = 0, expect_window = 0, expect_skipped = 0;
  std::cout << "per-tier scan tokens at " << a.h << "x" << a.w << " with "
            << sc.returns.size() << " returns:\n";
  for (int64_t i = 0; i < 5; ++i) {
    const int64_t hi = a.h >> (i + 1), wi = a.w >> (i + 1);
    const TierKind k = cfg.tiers[static_cast<size_t>(i)];
    int64_t tokens = 0;
    if (k == TierKind::Full) {
      tokens = 2 * 4 * hi * wi;
    } else if (k == TierKind::Window) {
      int64_t skipped = 0;
      const auto wins = make_windows(sc.returns, hi, wi, int64_t{2} << i,
                                     cfg.window_w, &skipped);
      for (const Window& win : wins) tokens += win.count();
      expect_skipped += skipped;
    }
    if (k == TierKind::Full)
      expect_full += tokens;
    else
      expect_window += tokens;
    std::cout << "  L" << i << " (" << tier_name(k) << ", " << hi << "x" << wi
              << "): " << tokens << "\n";
  }

  ScanCounters counters;
  predict(np, sc.image, sc.returns, NetMode::Joint, &counters);
  std::cout << "measured: full " << counters.full_tokens << ", windowed "
            << counters.window_tokens << ", skipped returns "
            << counters.skipped_returns << "\n";

  ScanCounters empty_counters;
  predict(np, sc.image, {}, NetMode::Joint, &empty_counters);
  std::cout << "zero-return windowed tokens: " << empty_counters.window_tokens
            << "\n";

  bool ok = true;
  if (counters.full_tokens != expect_full ||
      counters.window_tokens != expect_window ||
      counters.skipped_returns != expect_skipped) {
    std::cerr << "bench: measured token counts disagree with tier accounting ("
              << "expected full " << expect_full << ", windowed "
              << expect_window << ", skipped " << expect_skipped << ")\n";
    ok = false;
  }
  if (empty_counters.window_tokens != 0) {
    std::cerr << "bench: windowed tier scanned tokens with zero returns\n";
    ok = false;
  }
  if (!(ratio >= 1.6 && ratio <= 2.6)) {
    std::cerr << "bench: L-doubling ratio " << ratio
              << " outside [1.6, 2.6]\n";
    ok = false;
  }
  return ok ? 0 : 1;
}

struct AblateArgs {
  std::string out;
  std::string data;
  std::string arms = "uniform-film,horizon,readout,joint-prescan,joint";
  int64_t scenes = 40;
  int64_t epochs = 6;
  uint64_t seed = 1;
  int64_t h = 64;
  int64_t w = 64;
  int64_t returns = 40;
  std::string widths;
};

struct ArmSpec {
  std::string name;
  NetMode mode;
  bool uniform_film;
};

const std::vector<ArmSpec>& all_arms() {
  static const std::vector<ArmSpec> arms = {
      {"uniform-film", NetMode::Joint, true},
      {"horizon", NetMode::Horizon, false},
      {"readout", NetMode::Readout, false},
      {"joint-prescan", NetMode::JointPreScan, false},
      {"joint", NetMode::Joint, false}};
  return arms;
}

int cmd_ablate(const AblateArgs& a) {
  if (a.out.empty()) {
    std::cerr << "ablate: --out is required\n";
    return 2;
  }
  std::vector<ArmSpec> arms;
  for (const std::string& name : split_csv(a.arms)) {
    bool found = false;
    for (const ArmSpec& s : all_arms())
      if (s.name == name) {
        arms.push_back(s);
        found = true;
      }
    if (!found) {
      std::cerr << "ablate: unknown arm '" << name << "'\n";
      return 2;
    }
  }
  if (arms.empty()) {
    std::cerr << "ablate: no arms selected\n";
    return 2;
  }

  fs::create_directories(a.out);
  std::string data_path = a.data;
  SceneConfig scfg;
  std::vector<Scene> scenes;
  if (data_path.empty()) {
    scfg.h = a.h;
    scfg.w = a.w;
    scfg.n_returns = a.returns;
    validate(scfg);
    scenes.resize(static_cast<size_t>(a.scenes));
    parallel_for(a.scenes, [&](int64_t i) {
      scenes[static_cast<size_t>(i)] =
          generate_scene(a.seed + static_cast<uint64_t>(i), scfg);
    });
    data_path = a.out + "/dataset.rmds";
    write_dataset(data_path, scfg, scenes);
  } else {
    scenes = load_scenes(data_path, &scfg);
  }

  RunConfig base;
  base.data = data_path;
  base.epochs = a.epochs;
  base.seed = a.seed;
  if (!a.widths.empty()) {
    const auto ws = split_csv(a.widths);
    if (ws.size() != 5) {
      std::cerr << "ablate: --widths needs 5 values\n";
      return 2;
    }
    for (size_t i = 0; i < 5; ++i) base.net.widths[i] = std::stoll(ws[i]);
  }

  json rows = json::array();
  std::vector<std::string> lines;
  for (const ArmSpec& arm : arms) {
    RunConfig rc = base;
    rc.out = a.out + "/" + arm.name;
    rc.mode = arm.mode;
    rc.net.tiers = arm.uniform_film ? uniform_film_tiers() : default_tiers();
    std::cout << "=== arm " << arm.name << " ===\n";
    TrainedRun run;
    const int code = do_train_run(rc, scenes, &run, false);
    if (code != 0) return code;

    json row;
    row["arm"] = arm.name;
    row["best_epoch"] = run.res.best_epoch;
    row["val_mae_mm"] = run.res.best_val_mae_mm;
    const EpochRecord* best_rec = nullptr;
    for (const EpochRecord& r : run.res.log)
      if (r.epoch == run.res.best_epoch) best_rec = &r;
    if (best_rec) {
      row["val_rmse_mm"] = best_rec->val_rmse_mm;
      row["val_imae_kminv"] = best_rec->val_imae_kminv;
      row["val_irmse_kminv"] = best_rec->val_irmse_kminv;
    }
    rows.push_back(row);

    char buf[160];
    std::snprintf(buf, sizeof(buf), "%-14s %12.1f %12.1f %12.3f %12.3f %6lld",
                  arm.name.c_str(), run.res.best_val_mae_mm,
                  best_rec ? best_rec->val_rmse_mm : 0.0,
                  best_rec ? best_rec->val_imae_kminv : 0.0,
                  best_rec ? best_rec->val_irmse_kminv : 0.0,
                  static_cast<long long>(run.res.best_epoch));
    lines.emplace_back(buf);
  }

  json report;
  report["version"] = kVersion;
  report["dataset"] = data_path;
  report["seed"] = a.seed;
  report["epochs"] = a.epochs;
  report["arms"] = rows;
  {
    std::ofstream f(a.out + "/ablate.json");
    if (!f) throw std::runtime_error("cannot write " + a.out + "/ablate.json");
    f << report.dump(2) << "\n";
  }

  std::cout << "\narm             MAE (mm)    RMSE (mm)  iMAE (1/km) iRMSE "
               "(1/km)  best\n";
  for (const std::string& l : lines) std::cout << l << "\n";
  std::cout << "report written to " << a.out << "/ablate.json\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"radar-modulated selective-scan depth completion toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  int exit_code = 0;

  // gen-data
  GenArgs gen;
  CLI::App* g = app.add_subcommand("gen-data", "generate a synthetic dataset");
  g->add_option("--out", gen.out, "output dataset path (.rmds)");
  g->add_option("--manifest", gen.manifest, "also write a seed manifest JSON");
  g->add_option("--scenes", gen.scenes, "number of scenes")
      ->check(CLI::PositiveNumber);
  g->add_option("--seed", gen.seed, "base seed; scene i uses seed+i");
  g->add_option("--height", gen.cfg.h, "scene height (multiple of 32)");
  g->add_option("--width", gen.cfg.w, "scene width (multiple of 32)");
  g->add_option("--planes", gen.cfg.n_planes, "plane count");
  g->add_option("--returns", gen.cfg.n_returns, "radar returns per scene");
  g->add_option("--radar-noise", gen.cfg.radar_noise_m,
                "radar range noise sigma (m)");
  g->add_option("--main-noise", gen.cfg.main_noise,
                "dense supervision corruption scale");
  g->add_option("--img-noise", gen.cfg.img_noise, "image shading noise");
  g->add_option("--v-jitter", gen.cfg.v_jitter_px,
                "vertical return jitter sigma (px)");
  g->add_option("--edge-bias", gen.cfg.edge_bias,
                "fraction of returns biased to depth edges");
  g->add_option("--sparse-frac", gen.cfg.sparse_frac,
                "clean sparse supervision fraction");
  g->add_option("--drop-frac", gen.cfg.drop_frac,
                "dense supervision dropout fraction");
  g->add_option("--offset-range", gen.cfg.offset_range,
                "global depth offset range (m)");
  g->callback([&] { exit_code = cmd_gen_data(gen); });

  // train
  RunConfig rc;
  std::string t_mode = "joint", t_tiers, t_widths, t_config;
  bool t_config_wins = false;
  CLI::App* t = app.add_subcommand("train", "train a network on a dataset");
  t->add_option("--data", rc.data, "dataset (.rmds) or manifest (.json)");
  t->add_option("--out", rc.out, "run directory");
  t->add_option("--mode", t_mode,
                "image-only | horizon | readout | joint | joint-prescan");
  t->add_option("--epochs", rc.epochs, "epoch count")->check(CLI::PositiveNumber);
  t->add_option("--seed", rc.seed, "init and shuffle seed");
  t->add_option("--batch", rc.batch, "batch size (must be 1)");
  t->add_option("--val-frac", rc.val_frac, "fraction of scenes held out");
  t->add_option("--val-range", rc.val_range_m, "validation metric range (m)");
  t->add_flag("--deterministic,!--no-deterministic", rc.deterministic,
              "record deterministic mode (training is always sequential)");
  t->add_option("--tiers", t_tiers, "5 comma-separated tiers (film|window|full)");
  t->add_option("--widths", t_widths, "5 comma-separated channel widths");
  t->add_option("--state-dim", rc.net.state_dim, "SSM state size");
  t->add_option("--radar-dim", rc.net.radar_dim, "radar feature width");
  t->add_option("--window-extent", rc.net.window_w, "windowed-scan extent");
  t->add_option("--lr0", rc.schedule.lr0, "initial learning rate");
  t->add_option("--lr-step", rc.schedule.step_abs, "absolute lr decrement");
  t->add_option("--lr-every", rc.schedule.every_epochs, "epochs per decrement");
  t->add_option("--lr-floor", rc.schedule.floor_frac, "lr floor as frac of lr0");
  t->add_option("--lam-log", rc.weights.lam_log, "log-depth loss weight");
  t->add_option("--lam-lin", rc.weights.lam_lin, "linear Huber loss weight");
  t->add_option("--lam-grad", rc.weights.lam_grad, "gradient loss weight");
  t->add_option("--lam-sparse", rc.weights.lam_sparse, "sparse loss weight");
  t->add_option("--config", t_config, "run config JSON (flags override it)");
  t->add_flag("--config-wins", t_config_wins,
              "config file overrides conflicting flags");
  t->callback([&] {
    rc.mode = net_mode_from_string(t_mode);
    if (!t_tiers.empty()) {
      const auto ts = split_csv(t_tiers);
      if (ts.size() != 5) throw std::runtime_error("--tiers needs 5 values");
      for (size_t i = 0; i < 5; ++i) rc.net.tiers[i] = tier_from_string(ts[i]);
    }
    if (!t_widths.empty()) {
      const auto ws = split_csv(t_widths);
      if (ws.size() != 5) throw std::runtime_error("--widths needs 5 values");
      for (size_t i = 0; i < 5; ++i) rc.net.widths[i] = std::stoll(ws[i]);
    }
    if (!t_config.empty()) {
      if (t_config_wins) {
        // File beats flags: overlay the full file config last.
        apply_run_config(rc, load_json(t_config));
      } else {
        // Flags beat file: start from the file, then re-apply only the
        // flags the user actually passed.
        RunConfig merged;
        apply_run_config(merged, load_json(t_config));
        auto take = [&](const char* flag, auto member) {
          if (t->count(flag) > 0) merged.*member = rc.*member;
        };
        take("--data", &RunConfig::data);
        take("--out", &RunConfig::out);
        take("--epochs", &RunConfig::epochs);
        take("--seed", &RunConfig::seed);
        take("--batch", &RunConfig::batch);
        take("--val-frac", &RunConfig::val_frac);
        take("--val-range", &RunConfig::val_range_m);
        take("--deterministic", &RunConfig::deterministic);
        if (t->count("--mode") > 0) merged.mode = rc.mode;
        if (t->count("--tiers") > 0) merged.net.tiers = rc.net.tiers;
        if (t->count("--widths") > 0) merged.net.widths = rc.net.widths;
        if (t->count("--state-dim") > 0)
          merged.net.state_dim = rc.net.state_dim;
        if (t->count("--radar-dim") > 0)
          merged.net.radar_dim = rc.net.radar_dim;
        if (t->count("--window-extent") > 0)
          merged.net.window_w = rc.net.window_w;
        if (t->count("--lr0") > 0) merged.schedule.lr0 = rc.schedule.lr0;
        if (t->count("--lr-step") > 0)
          merged.schedule.step_abs = rc.schedule.step_abs;
        if (t->count("--lr-every") > 0)
          merged.schedule.every_epochs = rc.schedule.every_epochs;
        if (t->count("--lr-floor") > 0)
          merged.schedule.floor_frac = rc.schedule.floor_frac;
        if (t->count("--lam-log") > 0) merged.weights.lam_log = rc.weights.lam_log;
        if (t->count("--lam-lin") > 0) merged.weights.lam_lin = rc.weights.lam_lin;
        if (t->count("--lam-grad") > 0)
          merged.weights.lam_grad = rc.weights.lam_grad;
        if (t->count("--lam-sparse") > 0)
          merged.weights.lam_sparse = rc.weights.lam_sparse;
        rc = merged;
      }
    }
    if (rc.data.empty()) {
      std::cerr << "train: --data is required\n";
      exit_code = 2;
      return;
    }
    SceneConfig scfg;
    const std::vector<Scene> scenes = load_scenes(rc.data, &scfg);
    exit_code = do_train_run(rc, scenes, nullptr, false);
  });

  // eval
  EvalArgs ev;
  CLI::App* e = app.add_subcommand("eval", "evaluate a checkpoint");
  e->add_option("--checkpoint", ev.checkpoint, "checkpoint (.rmck)");
  e->add_option("--data", ev.data, "dataset (.rmds) or manifest (.json)");
  e->add_option("--mode", ev.mode, "override forward mode");
  e->add_option("--out", ev.out, "write JSON report here");
  e->add_option("--renders", ev.renders, "write depth renders (PPM) here");
  e->add_option("--ranges", ev.ranges, "comma-separated ranges in metres");
  e->callback([&] { exit_code = cmd_eval(ev); });

  // parity
  ParityArgs pa;
  CLI::App* p = app.add_subcommand(
      "parity", "check that joint mode at init matches image-only exactly");
  p->add_option("--trials", pa.trials, "fresh-init trials")
      ->check(CLI::PositiveNumber);
  p->add_option("--seed", pa.seed, "base seed");
  p->add_flag("--negative-control", pa.negative_control,
              "set radar weights non-zero; a diff (exit 1) is then expected");
  p->add_option("--checkpoint", pa.checkpoint,
                "instead: zero-radar fallback check on a trained checkpoint");
  p->add_option("--data", pa.data, "image source for the checkpoint check");
  p->callback([&] { exit_code = cmd_parity(pa); });

  // bench
  BenchArgs be;
  CLI::App* b = app.add_subcommand("bench", "scan throughput and token counts");
  b->add_option("--len", be.l, "base sequence length")->check(CLI::PositiveNumber);
  b->add_option("--channels", be.d, "channels")->check(CLI::PositiveNumber);
  b->add_option("--state", be.n, "state size")->check(CLI::PositiveNumber);
  b->add_option("--trials", be.trials, "timing trials (median)")
      ->check(CLI::PositiveNumber);
  b->add_option("--chunk", be.chunk, "scan chunk length");
  b->add_option("--seed", be.seed, "seed");
  b->add_option("--height", be.h, "token-accounting scene height");
  b->add_option("--width", be.w, "token-accounting scene width");
  b->add_option("--returns", be.returns, "token-accounting returns");
  b->callback([&] { exit_code = cmd_bench(be); });

  // ablate
  AblateArgs ab;
  CLI::App* al = app.add_subcommand("ablate", "train and compare the five arms");
  al->add_option("--out", ab.out, "sweep output directory");
  al->add_option("--data", ab.data, "shared dataset (generated if omitted)");
  al->add_option("--arms", ab.arms, "comma-separated subset of arms");
  al->add_option("--scenes", ab.scenes, "scenes to generate")
      ->check(CLI::PositiveNumber);
  al->add_option("--epochs", ab.epochs, "epochs per arm")
      ->check(CLI::PositiveNumber);
  al->add_option("--seed", ab.seed, "shared seed");
  al->add_option("--height", ab.h, "generated scene height");
  al->add_option("--width", ab.w, "generated scene width");
  al->add_option("--returns", ab.returns, "returns per generated scene");
  al->add_option("--widths", ab.widths, "5 comma-separated channel widths");
  al->callback([&] { exit_code = cmd_ablate(ab); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : 2;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 2;
  }
  return exit_code;
}
