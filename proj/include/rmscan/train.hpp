#pragma once

// Single-threaded deterministic training loop: per-scene Adam steps on the
// composite loss, per-epoch validation metrics, best-checkpoint tracking, and
// a NaN abort path that keeps the last completed epoch's parameters.

#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "rmscan/loss.hpp"
#include "rmscan/net.hpp"
#include "rmscan/optim.hpp"
#include "rmscan/synth.hpp"

namespace rmscan {

struct TrainConfig {
  NetMode mode = NetMode::Joint;
  int64_t epochs = 30;
  uint64_t seed = 0;
  StepDecaySchedule schedule;
  LossWeights weights;
  double val_range_m = 80.0;
};

struct EpochRecord {
  int64_t epoch = 0;
  double lr = 0.0;
  double train_total = 0.0;
  double train_log = 0.0;
  double train_lin = 0.0;
  double train_grad = 0.0;
  double train_sparse = 0.0;
  double val_mae_mm = 0.0;
  double val_rmse_mm = 0.0;
  double val_imae_kminv = 0.0;
  double val_irmse_kminv = 0.0;
};

inline void to_json(nlohmann::json& j, const EpochRecord& r) {
  j = nlohmann::json{{"epoch", r.epoch},
                     {"lr", r.lr},
                     {"train_total", r.train_total},
                     {"train_log", r.train_log},
                     {"train_lin", r.train_lin},
                     {"train_grad", r.train_grad},
                     {"train_sparse", r.train_sparse},
                     {"val_mae_mm", r.val_mae_mm},
                     {"val_rmse_mm", r.val_rmse_mm},
                     {"val_imae_kminv", r.val_imae_kminv},
                     {"val_irmse_kminv", r.val_irmse_kminv}};
}

struct TrainResult {
  NetParams best;
  NetParams last;
  AdamState adam;
  AdamState best_adam;
  std::vector<EpochRecord> log;
  int64_t best_epoch = -1;
  double best_val_mae_mm = std::numeric_limits<double>::infinity();
  bool aborted = false;
  std::string abort_reason;
};

// Pixel-pooled metrics over a scene list at one range.
inline RangeMetrics pooled_metrics(const NetParams& params,
                                   const std::vector<Scene>& scenes,
                                   NetMode mode, double range_m) {
  RangeMetrics pooled;
  pooled.range_m = range_m;
  double sum_abs = 0.0, sum_sq = 0.0, sum_iabs = 0.0, sum_isq = 0.0;
  int64_t pixels = 0;
  const std::vector<RadarReturn> no_returns;
  for (const Scene& s : scenes) {
    const auto& rets =
        mode_uses_radar(mode) ? s.returns : no_returns;
    const Tensor pred = predict(params, s.image, rets, mode);
    const Tensor ones = Tensor::full(s.depth_gt.shape(), 1.0);
    const RangeMetrics m =
        eval_metrics(pred, s.depth_gt, ones, {range_m}, params.cfg.d_min,
                     params.cfg.d_max)[0];
    if (m.skipped) continue;
    const double n = static_cast<double>(m.pixels);
    sum_abs += m.mae_mm * n;
    sum_sq += m.rmse_mm * m.rmse_mm * n;
    sum_iabs += m.imae_kminv * n;
    sum_isq += m.irmse_kminv * m.irmse_kminv * n;
    pixels += m.pixels;
  }
  pooled.pixels = pixels;
  pooled.skipped = pixels == 0;
  if (pixels > 0) {
    const double n = static_cast<double>(pixels);
    pooled.mae_mm = sum_abs / n;
    pooled.rmse_mm = std::sqrt(sum_sq / n);
    pooled.imae_kminv = sum_iabs / n;
    pooled.irmse_kminv = std::sqrt(sum_isq / n);
  }
  return pooled;
}

using EpochCallback = std::function<void(const EpochRecord&)>;

inline TrainResult train_net(const NetParams& init,
                             const std::vector<Scene>& train_scenes,
                             const std::vector<Scene>& val_scenes,
                             const TrainConfig& cfg,
                             const EpochCallback& on_epoch = {}) {
  RMSCAN_CHECK(!train_scenes.empty(), "train: empty training set");
  RMSCAN_CHECK(cfg.epochs >= 1, "train: need at least one epoch");

  TrainResult res;
  res.best = init;
  NetParams params = init;
  NetParams last_good = init;
  AdamState adam = make_adam_state(params.store);
  AdamState adam_good = adam;
  res.best_adam = adam;
  Rng shuffle_rng(cfg.seed);
  const DepthNorm norm{params.cfg.d_min, params.cfg.d_max};
  const std::vector<RadarReturn> no_returns;

  std::vector<size_t> order(train_scenes.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at(cfg.schedule, epoch);
    for (size_t i = order.size(); i > 1; --i) {
      const auto j = static_cast<size_t>(
          shuffle_rng.uniform_int(0, static_cast<int64_t>(i) - 1));
      std::swap(order[i - 1], order[j]);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    for (size_t i : order) {
      const Scene& s = train_scenes[i];
      const auto& rets =
          mode_uses_radar(cfg.mode) ? s.returns : no_returns;
      // The tape rejects non-finite op results and the optimizer rejects
      // non-finite gradients; either throw aborts the run while the
      // parameters from the last completed epoch are kept.
      try {
        Tape tape;
        NetForward fw =
            net_forward(tape, params, s.image, rets, cfg.mode, true);
        LossBreakdown bd;
        Var loss = composite_loss_tape(fw.depth, s.main_gt, s.main_mask,
                                       &s.sparse_gt, &s.sparse_mask,
                                       cfg.weights, norm, &bd);
        tape.backward(loss);
        std::vector<Tensor> grads;
        grads.reserve(params.store.count());
        for (size_t k = 0; k < params.store.count(); ++k)
          grads.push_back(tape.grad(fw.leaves[k]));
        adam_step(adam, params.store, grads, lr);
        rec.train_total += bd.total;
        rec.train_log += bd.l_log;
        rec.train_lin += bd.l_lin;
        rec.train_grad += bd.l_grad;
        rec.train_sparse += bd.l_sparse;
      } catch (const std::runtime_error& e) {
        res.aborted = true;
        res.abort_reason = e.what();
        res.last = last_good;
        res.adam = adam_good;
        return res;
      }
    }
    const double inv_n = 1.0 / static_cast<double>(train_scenes.size());
    rec.train_total *= inv_n;
    rec.train_log *= inv_n;
    rec.train_lin *= inv_n;
    rec.train_grad *= inv_n;
    rec.train_sparse *= inv_n;

    if (!val_scenes.empty()) {
      const RangeMetrics vm =
          pooled_metrics(params, val_scenes, cfg.mode, cfg.val_range_m);
      rec.val_mae_mm = vm.mae_mm;
      rec.val_rmse_mm = vm.rmse_mm;
      rec.val_imae_kminv = vm.imae_kminv;
      rec.val_irmse_kminv = vm.irmse_kminv;
      if (vm.mae_mm < res.best_val_mae_mm) {
        res.best_val_mae_mm = vm.mae_mm;
        res.best = params;
        res.best_adam = adam;
        res.best_epoch = epoch;
      }
    }

    last_good = params;
    adam_good = adam;
    res.log.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }

  res.last = params;
  res.adam = adam;
  if (val_scenes.empty()) {
    res.best = res.last;
    res.best_adam = adam;
  }
  return res;
}

}  // namespace rmscan
