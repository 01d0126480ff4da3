#include <cmath>
#include <cstring>
#include <limits>

#include "doctest.h"
#include "rmscan/train.hpp"

using namespace rmscan;

namespace {

NetConfig tiny_net_cfg() {
  NetConfig cfg;
  cfg.widths = {4, 4, 6, 6, 8};
  cfg.state_dim = 3;
  cfg.radar_dim = 5;
  return cfg;
}

std::vector<Scene> tiny_scenes(uint64_t seed0, int n) {
  SceneConfig sc;
  sc.h = 32;
  sc.w = 32;
  sc.n_returns = 12;
  std::vector<Scene> out;
  for (int i = 0; i < n; ++i)
    out.push_back(generate_scene(seed0 + static_cast<uint64_t>(i), sc));
  return out;
}

TrainConfig smoke_cfg(NetMode mode) {
  TrainConfig tc;
  tc.mode = mode;
  tc.epochs = 2;
  tc.seed = 42;
  return tc;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.same_shape(b) &&
         std::memcmp(a.data(), b.data(),
                     sizeof(double) * static_cast<size_t>(a.numel())) == 0;
}

bool same_store(const ParamStore& a, const ParamStore& b) {
  if (a.count() != b.count()) return false;
  for (size_t i = 0; i < a.count(); ++i) {
    if (a.names[i] != b.names[i]) return false;
    if (!bitwise_equal(a.values[i], b.values[i])) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("two-epoch smoke run produces finite logs and a best checkpoint") {
  auto scenes = tiny_scenes(100, 6);
  std::vector<Scene> train(scenes.begin(), scenes.begin() + 4);
  std::vector<Scene> val(scenes.begin() + 4, scenes.end());
  NetParams np = make_net_params(tiny_net_cfg(), 7);

  int cb_calls = 0;
  TrainResult res = train_net(np, train, val, smoke_cfg(NetMode::Joint),
                              [&](const EpochRecord&) { ++cb_calls; });

  REQUIRE(res.log.size() == 2);
  CHECK(cb_calls == 2);
  CHECK_FALSE(res.aborted);
  CHECK(res.log[0].epoch == 0);
  CHECK(res.log[1].epoch == 1);
  CHECK(res.log[0].lr == doctest::Approx(1e-4));
  CHECK(res.log[1].lr == doctest::Approx(1e-4));
  for (const EpochRecord& r : res.log) {
    CHECK(std::isfinite(r.train_total));
    CHECK(r.train_total > 0.0);
    CHECK(std::isfinite(r.val_mae_mm));
    CHECK(r.val_mae_mm > 0.0);
    CHECK(r.val_rmse_mm >= r.val_mae_mm);
  }
  CHECK(res.best_epoch >= 0);
  CHECK(res.best_epoch <= 1);
  CHECK(res.best_val_mae_mm ==
        std::min(res.log[0].val_mae_mm, res.log[1].val_mae_mm));
  CHECK_FALSE(same_store(res.last.store, np.store));
}

TEST_CASE("training is deterministic across repeated runs") {
  auto scenes = tiny_scenes(200, 5);
  std::vector<Scene> train(scenes.begin(), scenes.begin() + 4);
  std::vector<Scene> val(scenes.begin() + 4, scenes.end());
  NetParams np = make_net_params(tiny_net_cfg(), 9);

  TrainResult a = train_net(np, train, val, smoke_cfg(NetMode::Joint));
  TrainResult b = train_net(np, train, val, smoke_cfg(NetMode::Joint));

  REQUIRE(a.log.size() == b.log.size());
  for (size_t i = 0; i < a.log.size(); ++i) {
    CHECK(a.log[i].train_total == b.log[i].train_total);
    CHECK(a.log[i].val_mae_mm == b.log[i].val_mae_mm);
  }
  CHECK(same_store(a.last.store, b.last.store));
  CHECK(same_store(a.best.store, b.best.store));
  CHECK(a.adam.step == b.adam.step);
  for (size_t i = 0; i < a.adam.m.size(); ++i) {
    CHECK(max_abs_diff(a.adam.m[i], b.adam.m[i]) == 0.0);
    CHECK(max_abs_diff(a.adam.v[i], b.adam.v[i]) == 0.0);
  }
}

TEST_CASE("image-only training ignores the radar returns entirely") {
  auto scenes = tiny_scenes(300, 4);
  std::vector<Scene> stripped = scenes;
  for (Scene& s : stripped) s.returns.clear();
  std::vector<Scene> val;
  NetParams np = make_net_params(tiny_net_cfg(), 3);

  TrainConfig tc = smoke_cfg(NetMode::ImageOnly);
  tc.epochs = 1;
  TrainResult a = train_net(np, scenes, val, tc);
  TrainResult b = train_net(np, stripped, val, tc);
  CHECK(same_store(a.last.store, b.last.store));
  CHECK(a.log[0].train_total == b.log[0].train_total);
}

TEST_CASE("a poisoned parameter aborts training and keeps the last good state") {
  auto scenes = tiny_scenes(400, 3);
  NetParams np = make_net_params(tiny_net_cfg(), 5);
  np.store.at("head.out.b")[0] = std::numeric_limits<double>::quiet_NaN();

  TrainResult res = train_net(np, scenes, {}, smoke_cfg(NetMode::Joint));
  CHECK(res.aborted);
  CHECK_FALSE(res.abort_reason.empty());
  CHECK(res.log.empty());
  CHECK(same_store(res.last.store, np.store));
  CHECK(res.adam.step == 0);
}
