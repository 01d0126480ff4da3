#include <doctest.h>

#include "rmscan/net.hpp"

using namespace rmscan;

namespace {

ops::SsmVars leaf_ssm(Tape& t, const SsmParams& p) {
  Tensor log_a(p.A.shape());
  for (int64_t i = 0; i < log_a.numel(); ++i) log_a[i] = std::log(-p.A[i]);
  ops::SsmVars v;
  v.log_a = t.leaf(log_a);
  v.w_dt_img = t.leaf(p.w_dt_img);
  v.w_b = t.leaf(p.w_b);
  v.w_c_img = t.leaf(p.w_c_img);
  v.w_dt_rad = t.leaf(p.w_dt_rad);
  v.w_c_rad = t.leaf(p.w_c_rad);
  v.w_gate = t.leaf(p.w_gate);
  v.gate_bias = t.leaf(p.gate_bias);
  v.dt_bias = t.leaf(p.dt_bias);
  return v;
}

std::vector<RadarReturn> some_returns(int64_t h, int64_t w, int n, Rng& rng,
                                      double d_max = 80.0) {
  std::vector<RadarReturn> out;
  for (int i = 0; i < n; ++i)
    out.push_back({rng.uniform(0.0, static_cast<double>(w) - 0.01),
                   rng.uniform(0.0, static_cast<double>(h) - 0.01),
                   rng.uniform(1.0, d_max - 1.0)});
  return out;
}

}  // namespace

TEST_CASE("encoder pyramid shapes follow the stride ladder") {
  NetConfig cfg;
  NetParams np = make_net_params(cfg, 1);

  SUBCASE("64x64") {
    Tape t;
    BoundNet b = bind_net(t, np, false);
    Rng rng(2);
    std::array<Var, 5> c = encode_pyramid(b, t.constant(Tensor::randn({64, 64, 1}, rng)));
    const int64_t want[5] = {32, 16, 8, 4, 2};
    for (int i = 0; i < 5; ++i) {
      CHECK(t.val(c[i]).size(0) == want[i]);
      CHECK(t.val(c[i]).size(1) == want[i]);
      CHECK(t.val(c[i]).size(2) == cfg.widths[i]);
    }
  }

  SUBCASE("96x64") {
    Tape t;
    BoundNet b = bind_net(t, np, false);
    Rng rng(2);
    std::array<Var, 5> c = encode_pyramid(b, t.constant(Tensor::randn({96, 64, 1}, rng)));
    const int64_t want_h[5] = {48, 24, 12, 6, 3};
    const int64_t want_w[5] = {32, 16, 8, 4, 2};
    for (int i = 0; i < 5; ++i) {
      CHECK(t.val(c[i]).size(0) == want_h[i]);
      CHECK(t.val(c[i]).size(1) == want_w[i]);
    }
  }

  SUBCASE("indivisible input is rejected") {
    Tape t;
    BoundNet b = bind_net(t, np, false);
    CHECK_THROWS_WITH_AS(encode_pyramid(b, t.constant(Tensor({60, 64, 1}))),
                         doctest::Contains("divisible"), std::runtime_error);
  }

  SUBCASE("zero image gives an all-zero pyramid at init") {
    Tape t;
    BoundNet b = bind_net(t, np, false);
    std::array<Var, 5> c = encode_pyramid(b, t.constant(Tensor({64, 64, 1})));
    for (int i = 0; i < 5; ++i) CHECK(max_abs(t.val(c[i])) == 0.0);
  }
}

TEST_CASE("radar map scatter and collision rule") {
  NetConfig cfg;
  NetParams np = make_net_params(cfg, 3);

  SUBCASE("zero returns give an all-zero map") {
    Tape t;
    BoundNet b = bind_net(t, np, false);
    Var m = encode_radar_map(b, {}, 64, 64);
    CHECK(t.val(m).shape() == Shape{32, 32, cfg.radar_dim});
    CHECK(max_abs(t.val(m)) == 0.0);
  }

  SUBCASE("one return fills exactly one cell") {
    Tape t;
    BoundNet b = bind_net(t, np, false);
    Var m = encode_radar_map(b, {{20.7, 10.2, 15.0}}, 64, 64);
    const Tensor& mv = t.val(m);
    int64_t nonzero_cells = 0;
    for (int64_t r = 0; r < 32; ++r)
      for (int64_t c = 0; c < 32; ++c) {
        bool any = false;
        for (int64_t k = 0; k < cfg.radar_dim; ++k)
          any = any || mv.at(r, c, k) != 0.0;
        if (any) {
          ++nonzero_cells;
          CHECK(r == 5);   // floor(10.2)/2
          CHECK(c == 10);  // floor(20.7)/2
        }
      }
    CHECK(nonzero_cells == 1);
  }

  SUBCASE("colliding returns keep the nearer one") {
    const RadarReturn far{20.7, 10.2, 30.0};
    const RadarReturn near{21.0, 11.9, 10.0};
    Tape t1;
    BoundNet b1 = bind_net(t1, np, false);
    const Tensor both = t1.val(encode_radar_map(b1, {far, near}, 64, 64));
    Tape t2;
    BoundNet b2 = bind_net(t2, np, false);
    const Tensor only_near = t2.val(encode_radar_map(b2, {near}, 64, 64));
    CHECK(max_abs_diff(both, only_near) == 0.0);
  }

  SUBCASE("out-of-frame returns are dropped") {
    Tape t;
    BoundNet b = bind_net(t, np, false);
    Var m = encode_radar_map(b, {{-3.0, 10.0, 5.0}, {10.0, 400.0, 5.0}}, 64, 64);
    CHECK(max_abs(t.val(m)) == 0.0);
  }
}

TEST_CASE("tape four-direction block matches the reference forward") {
  Rng rng(11);
  const int64_t h = 5, w = 4, d = 3, n = 2;
  std::array<SsmParams, 4> pure;
  Tape t;
  std::array<ops::SsmVars, 4> vars;
  for (int i = 0; i < 4; ++i) {
    vars[i] = leaf_ssm(t, make_ssm_params(d, n, rng, false, true));
    pure[i] = ops::materialize(t, vars[i]);
  }
  const Tensor img = Tensor::randn({h, w, d}, rng);
  const Tensor rad = Tensor::randn({h, w, d}, rng);
  const Tensor gain = Tensor::rand_uniform({d}, rng, 0.5, 1.5);
  const Tensor bias = Tensor::randn({d}, rng, 0.1);

  for (ModulationMode mode : {ModulationMode::ImageOnly, ModulationMode::Joint}) {
    ScanCounters cp, ct;
    const Tensor want =
        four_direction_scan(pure, img, rad, mode, &gain, &bias, &cp);
    Var got = ops::four_direction_tape(vars, t.constant(img), t.constant(rad),
                                       mode, t.leaf(gain), t.leaf(bias), &ct);
    CHECK(max_abs_diff(want, t.val(got)) == 0.0);
    CHECK(cp.full_tokens == ct.full_tokens);
  }
}

TEST_CASE("tape windowed block matches the reference forward") {
  Rng rng(12);
  const int64_t h = 12, w = 10, d = 3, n = 2;
  Tape t;
  ops::SsmVars vars = leaf_ssm(t, make_ssm_params(d, n, rng, false, true));
  const SsmParams pure = ops::materialize(t, vars);
  const Tensor img = Tensor::randn({h, w, d}, rng);
  const Tensor rad = Tensor::randn({h, w, d}, rng);

  const std::vector<RadarReturn> returns = some_returns(h * 4, w * 4, 9, rng);
  const std::vector<Window> windows = make_windows(returns, h, w, 4, 6);
  REQUIRE(!windows.empty());
  const ScatterKernel kernel = make_scatter_kernel(6);

  ScanCounters cp, ct;
  const Tensor want =
      windowed_rms(pure, img, rad, windows, kernel, ModulationMode::Joint, &cp);
  Var got = ops::windowed_rms_tape(vars, t.constant(img), t.constant(rad),
                                   windows, kernel, ModulationMode::Joint, &ct);
  CHECK(max_abs_diff(want, t.val(got)) == 0.0);
  CHECK(cp.window_tokens == ct.window_tokens);

  SUBCASE("no windows passes the image through") {
    Var id = ops::windowed_rms_tape(vars, t.constant(img), t.constant(rad), {},
                                    kernel, ModulationMode::Joint);
    CHECK(max_abs_diff(img, t.val(id)) == 0.0);
  }
}

TEST_CASE("network output is well-formed and starts at the log-midpoint") {
  NetConfig cfg;
  NetParams np = make_net_params(cfg, 5);
  Rng rng(6);
  const Tensor img = Tensor::randn({64, 64, 1}, rng);
  const std::vector<RadarReturn> returns = some_returns(64, 64, 24, rng);

  const Tensor depth = predict(np, img, returns, NetMode::Joint);
  CHECK(depth.shape() == Shape{64, 64});
  const double mid = std::sqrt(cfg.d_min * cfg.d_max);
  for (int64_t i = 0; i < depth.numel(); ++i) {
    CHECK(depth[i] >= cfg.d_min);
    CHECK(depth[i] <= cfg.d_max);
    CHECK(depth[i] == doctest::Approx(mid).epsilon(1e-12));
  }

  SUBCASE("repeat evaluation is identical") {
    const Tensor again = predict(np, img, returns, NetMode::Joint);
    CHECK(max_abs_diff(depth, again) == 0.0);
  }

  SUBCASE("return budget is enforced") {
    const std::vector<RadarReturn> many(600, RadarReturn{1.0, 1.0, 5.0});
    CHECK_THROWS_WITH_AS(predict(np, img, many, NetMode::Joint),
                         doctest::Contains("512"), std::runtime_error);
  }
}

TEST_CASE("all radar modes equal image-only at init, bitwise") {
  NetConfig cfg;
  NetParams np = make_net_params(cfg, 7);
  Rng rng(8);
  const Tensor img = Tensor::randn({64, 64, 1}, rng);
  const std::vector<RadarReturn> returns = some_returns(64, 64, 30, rng);

  const Tensor base = predict(np, img, returns, NetMode::ImageOnly);
  for (NetMode m : {NetMode::Horizon, NetMode::Readout, NetMode::Joint,
                    NetMode::JointPreScan}) {
    const Tensor out = predict(np, img, returns, m);
    CHECK(max_abs_diff(base, out) == 0.0);
  }
}

TEST_CASE("zero returns fall back to image-only behaviour after perturbing radar weights") {
  NetConfig cfg;
  NetParams np = make_net_params(cfg, 9);
  Rng rng(10);
  // Make every radar-consuming weight nonzero; fallback must come from the
  // bias-free structure, not from zero init.
  for (const char* name :
       {"l0.film.gamma", "l0.film.beta", "l1.film.gamma", "l1.film.beta"})
    np.store.at(name) = Tensor::randn(np.store.at(name).shape(), rng);
  for (size_t i = 0; i < np.store.count(); ++i) {
    const std::string& nm = np.store.names[i];
    if (nm.find("w_dt_rad") != std::string::npos ||
        nm.find("w_c_rad") != std::string::npos ||
        nm.find("w_gate") != std::string::npos)
      np.store.values[i] = Tensor::randn(np.store.values[i].shape(), rng);
  }
  // A zero-init head hides all feature differences; give it weight.
  np.store.at("head.out.w") = Tensor::randn({1, cfg.widths[0]}, rng);

  const Tensor img = Tensor::randn({64, 64, 1}, rng);
  const Tensor joint = predict(np, img, {}, NetMode::Joint);
  const Tensor image_only = predict(np, img, {}, NetMode::ImageOnly);
  CHECK(max_abs_diff(joint, image_only) == 0.0);

  // Negative control: with returns present the same weights change the output.
  Rng rng2(11);
  const std::vector<RadarReturn> returns = some_returns(64, 64, 20, rng2);
  const Tensor with_radar = predict(np, img, returns, NetMode::Joint);
  CHECK(max_abs_diff(with_radar, image_only) > 0.0);
}

TEST_CASE("uniform-FiLM tier map runs and differs from the default tiers") {
  NetConfig cfg_default;
  NetConfig cfg_film;
  cfg_film.tiers = uniform_film_tiers();
  NetParams np_default = make_net_params(cfg_default, 13);
  NetParams np_film = make_net_params(cfg_film, 13);
  // Give both nets nonzero radar influence so the tier difference shows.
  Rng rng(14);
  for (auto* np : {&np_default, &np_film}) {
    for (size_t i = 0; i < np->store.count(); ++i) {
      const std::string& nm = np->store.names[i];
      if (nm.find("film.gamma") != std::string::npos ||
          nm.find("film.beta") != std::string::npos ||
          nm.find("w_c_rad") != std::string::npos)
        np->store.values[i] =
            Tensor::randn(np->store.values[i].shape(), rng, 0.3);
    }
    np->store.at("head.out.w") = Tensor::randn({1, cfg_default.widths[0]}, rng);
  }

  const Tensor img = Tensor::randn({64, 64, 1}, rng);
  const std::vector<RadarReturn> returns = some_returns(64, 64, 25, rng);
  const Tensor a = predict(np_default, img, returns, NetMode::Joint);
  const Tensor b = predict(np_film, img, returns, NetMode::Joint);
  CHECK(a.shape() == b.shape());
  CHECK(max_abs_diff(a, b) > 0.0);

  ScanCounters counters;
  predict(np_film, img, returns, NetMode::Joint, &counters);
  CHECK(counters.full_tokens == 0);
  CHECK(counters.window_tokens == 0);
}

TEST_CASE("scan token accounting follows the tier assignment") {
  NetConfig cfg;
  NetParams np = make_net_params(cfg, 15);
  Rng rng(16);
  const Tensor img = Tensor::randn({64, 64, 1}, rng);
  const std::vector<RadarReturn> returns = some_returns(64, 64, 18, rng);

  ScanCounters counters;
  predict(np, img, returns, NetMode::Joint, &counters);

  // Full scans only at L3 (4x4) and L4 (2x2), two stacked layers of four
  // directions each.
  CHECK(counters.full_tokens == 2 * 4 * 16 + 2 * 4 * 4);

  // Window tokens only at L2 (8x8 grid, stride 8).
  int64_t expect = 0;
  for (const Window& win : make_windows(returns, 8, 8, 8, cfg.window_w))
    expect += win.count();
  CHECK(expect > 0);
  CHECK(counters.window_tokens == expect);

  ScanCounters no_radar;
  predict(np, img, {}, NetMode::Joint, &no_radar);
  CHECK(no_radar.full_tokens == counters.full_tokens);
  CHECK(no_radar.window_tokens == 0);
}

TEST_CASE("end-to-end gradients match finite differences") {
  NetConfig cfg;
  cfg.widths = {2, 3, 4, 5, 6};
  cfg.state_dim = 2;
  cfg.radar_dim = 3;
  cfg.radar_hidden = 4;
  NetParams np = make_net_params(cfg, 17);
  Rng rng(18);
  const Tensor img = Tensor::randn({32, 32, 1}, rng);
  const std::vector<RadarReturn> returns = some_returns(32, 32, 8, rng);
  const Tensor weight = Tensor::randn({32, 32}, rng);
  const NetMode mode = NetMode::JointPreScan;

  auto eval = [&](const NetParams& p) {
    const Tensor d = predict(p, img, returns, mode);
    double s = 0.0;
    for (int64_t i = 0; i < d.numel(); ++i) s += weight[i] * d[i];
    return s;
  };

  Tape tape;
  NetForward fw = net_forward(tape, np, img, returns, mode, true);
  Var loss = ops::sum_all(ops::mul_const(fw.depth, weight));
  tape.backward(loss);

  const std::pair<const char*, int64_t> picks[] = {
      {"enc0.w", 3},          {"radar.mlp1.w", 2},   {"radar.mlp2.b", 1},
      {"l0.film.gamma", 0},   {"l2.rms.w_dt_rad", 1}, {"l2.prescan.w_mix", 5},
      {"l3.rms0.d1.log_a", 2}, {"l4.ln0.gain", 3},    {"dec1.merge.w", 4},
      {"head.conv.w", 7},     {"head.out.w", 0}};
  const double step = 1e-5;
  for (const auto& [name, elem] : picks) {
    CAPTURE(name);
    const size_t idx = np.store.index.at(name);
    NetParams plus = np;
    plus.store.values[idx][elem] += step;
    NetParams minus = np;
    minus.store.values[idx][elem] -= step;
    const double fd = (eval(plus) - eval(minus)) / (2.0 * step);
    const double an = tape.grad(fw.leaves[idx])[elem];
    CHECK(std::fabs(fd - an) <=
          1e-4 * std::max({1.0, std::fabs(fd), std::fabs(an)}));
  }
}
