#include <doctest.h>

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "rmscan/scan.hpp"

using namespace rmscan;

namespace {

TokenStreams random_streams(int64_t b, int64_t l, int64_t d, Rng& rng) {
  TokenStreams st;
  st.x_img = Tensor::randn({b, l, d}, rng);
  st.x_rad = Tensor::randn({b, l, d}, rng);
  return st;
}

double scan_loss(const SsmParams& p, const TokenStreams& st, ModulationMode m,
                 const Tensor& w) {
  ScanOutput out = selective_scan_fwd(p, st, m);
  double s = 0.0;
  for (int64_t i = 0; i < w.numel(); ++i) s += w[i] * out.y[i];
  return s;
}

}  // namespace

TEST_CASE("zoh closed forms") {
  double abar = 0.0, bbar = 0.0;

  zoh_discretize(-1.0, std::log(2.0), 1.0, &abar, &bbar);
  CHECK(abar == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(bbar == doctest::Approx(0.5).epsilon(1e-14));

  zoh_discretize(-2.0, 0.5, 3.0, &abar, &bbar);
  CHECK(abar == doctest::Approx(0.36787944117144233).epsilon(1e-14));
  CHECK(bbar == doctest::Approx(0.9481808382428365).epsilon(1e-14));
}

TEST_CASE("zoh series guard matches exact branch and is continuous") {
  double abar = 0.0, bbar = 0.0;

  // Deep inside the guard the 2-term series agrees with an expm1-based
  // evaluation (the naive exp(z)-1 form cancels catastrophically there).
  zoh_discretize(-1.0, 1e-8, 2.0, &abar, &bbar);
  const double exact = (std::expm1(-1e-8) / -1.0) * 2.0;
  CHECK(std::fabs(bbar - exact) <= 1e-22);

  // Just across the threshold the two branches agree.
  double b_lo = 0.0, b_hi = 0.0, a_tmp = 0.0;
  zoh_discretize(-1.0, 0.9999999e-6, 1.0, &a_tmp, &b_lo);
  zoh_discretize(-1.0, 1.0000001e-6, 1.0, &a_tmp, &b_hi);
  CHECK(std::fabs(b_hi - b_lo) <= 1e-12);
}

TEST_CASE("zoh input validation") {
  double a = 0.0, b = 0.0;
  CHECK_THROWS_AS(zoh_discretize(0.0, 0.1, 1.0, &a, &b), std::runtime_error);
  CHECK_THROWS_AS(zoh_discretize(1.0, 0.1, 1.0, &a, &b), std::runtime_error);
  CHECK_THROWS_AS(zoh_discretize(-1.0, 0.0, 1.0, &a, &b), std::runtime_error);
  CHECK_THROWS_AS(zoh_discretize(-1.0, -0.5, 1.0, &a, &b), std::runtime_error);
}

TEST_CASE("two-step recurrence against hand unroll") {
  // D=1, N=1, A=-1, zero dt logits -> dt = softplus(0) = ln 2, so
  // abar = 0.5 and with b = 0.5 * x = 1: bbar = 0.5. With x = 2 at both
  // steps: h = 1, then 1.5; y = c * h with c = 1.
  SsmParams p;
  p.A = Tensor({1, 1}, {-1.0});
  p.w_dt_img = Tensor({1, 1});
  p.w_b = Tensor({1, 1}, {0.5});
  p.w_c_img = Tensor({1, 1}, {0.5});
  p.w_dt_rad = Tensor({1, 1});
  p.w_c_rad = Tensor({1, 1});
  p.w_gate = Tensor({1, 1});
  p.gate_bias = Tensor::scalar(-2.0);
  p.dt_bias = Tensor({1});

  TokenStreams st;
  st.x_img = Tensor({1, 2, 1}, {2.0, 2.0});
  st.x_rad = Tensor({1, 2, 1});

  ScanOutput out = selective_scan_fwd(p, st, ModulationMode::ImageOnly);
  CHECK(out.y.at(0, 0, 0) == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(out.y.at(0, 1, 0) == doctest::Approx(1.5).epsilon(1e-14));
  CHECK(out.h_final.at(0, 0, 0) == doctest::Approx(1.5).epsilon(1e-14));
  CHECK(out.saved->h.at(0, 0, 0, 0) == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("selection basics") {
  Rng rng(7);
  SsmParams p = make_ssm_params(3, 2, rng);
  TokenStreams st = random_streams(2, 5, 3, rng);

  SUBCASE("step sizes are strictly positive and decays contract") {
    Selection sel = compute_selection(p, st, ModulationMode::Joint);
    for (int64_t i = 0; i < sel.delta.numel(); ++i) CHECK(sel.delta[i] > 0.0);
    for (int64_t i = 0; i < sel.delta.numel(); ++i) {
      for (int64_t n = 0; n < p.state_dim(); ++n) {
        const double abar = std::exp(sel.delta[i] * p.A[n]);
        CHECK(abar > 0.0);
        CHECK(abar < 1.0);
      }
    }
  }

  SUBCASE("gate sits at sigmoid(bias) when radar is not routed to the step") {
    Selection sel = compute_selection(p, st, ModulationMode::ImageOnly);
    for (int64_t i = 0; i < sel.alpha.numel(); ++i)
      CHECK(sel.alpha[i] == doctest::Approx(0.11920292202211755).epsilon(1e-14));
    // Zero-init radar weights keep the gate at its bias in joint mode too.
    Selection selj = compute_selection(p, st, ModulationMode::Joint);
    CHECK(max_abs_diff(sel.alpha, selj.alpha) == 0.0);
  }

  SUBCASE("softplus(dt_bias) init lands in [0.001, 0.1]") {
    for (int64_t i = 0; i < p.dt_bias.numel(); ++i) {
      const double dt0 = softplus(p.dt_bias[i]);
      CHECK(dt0 >= 1e-3);
      CHECK(dt0 <= 1e-1);
    }
  }
}

TEST_CASE("zero-init radar weights give bitwise image-only parity") {
  Rng rng(11);
  SsmParams p = make_ssm_params(4, 3, rng, /*zero_init_radar=*/true);
  TokenStreams st = random_streams(2, 6, 4, rng);

  ScanOutput ref = selective_scan_fwd(p, st, ModulationMode::ImageOnly);
  for (ModulationMode m : {ModulationMode::Horizon, ModulationMode::Readout,
                           ModulationMode::Joint}) {
    ScanOutput out = selective_scan_fwd(p, st, m);
    CHECK(max_abs_diff(ref.y, out.y) == 0.0);
    CHECK(max_abs_diff(ref.h_final, out.h_final) == 0.0);
  }

  // Negative control: non-zero radar weights must break parity.
  SsmParams q = make_ssm_params(4, 3, rng, /*zero_init_radar=*/false);
  ScanOutput a = selective_scan_fwd(q, st, ModulationMode::ImageOnly);
  ScanOutput b = selective_scan_fwd(q, st, ModulationMode::Joint);
  CHECK(max_abs_diff(a.y, b.y) > 0.0);
}

TEST_CASE("scan gradients match central differences") {
  Rng rng(23);
  const int64_t B = 1, L = 4, D = 2, N = 3;
  SsmParams p = make_ssm_params(D, N, rng, /*zero_init_radar=*/false);
  TokenStreams st = random_streams(B, L, D, rng);
  const Tensor w = Tensor::randn({B, L, D}, rng);
  const ModulationMode mode = ModulationMode::Joint;

  ScanOutput out = selective_scan_fwd(p, st, mode);
  ScanGrads g = selective_scan_bwd(p, st, mode, *out.saved, w);

  auto check_tensor = [&](const std::string& name, Tensor* value,
                          const Tensor& analytic) {
    REQUIRE(value->same_shape(analytic));
    const double step = 1e-5;
    for (int64_t i = 0; i < value->numel(); ++i) {
      const double keep = (*value)[i];
      (*value)[i] = keep + step;
      const double up = scan_loss(p, st, mode, w);
      (*value)[i] = keep - step;
      const double dn = scan_loss(p, st, mode, w);
      (*value)[i] = keep;
      const double fd = (up - dn) / (2.0 * step);
      const double an = analytic[i];
      const double tol = 1e-5 * std::max({std::fabs(fd), std::fabs(an), 1.0});
      INFO(name, "[", i, "] fd=", fd, " an=", an);
      CHECK(std::fabs(fd - an) <= tol);
    }
  };

  check_tensor("A", &p.A, g.params.A);
  check_tensor("w_dt_img", &p.w_dt_img, g.params.w_dt_img);
  check_tensor("w_b", &p.w_b, g.params.w_b);
  check_tensor("w_c_img", &p.w_c_img, g.params.w_c_img);
  check_tensor("w_dt_rad", &p.w_dt_rad, g.params.w_dt_rad);
  check_tensor("w_c_rad", &p.w_c_rad, g.params.w_c_rad);
  check_tensor("w_gate", &p.w_gate, g.params.w_gate);
  check_tensor("gate_bias", &p.gate_bias, g.params.gate_bias);
  check_tensor("dt_bias", &p.dt_bias, g.params.dt_bias);
  check_tensor("x_img", &st.x_img, g.x_img);
  check_tensor("x_rad", &st.x_rad, g.x_rad);
}

TEST_CASE("gradients through the series-guard branch") {
  // Push dt deep below the guard threshold so the series branch is taken,
  // then finite-difference the drive input and step-size weights.
  Rng rng(31);
  const int64_t B = 1, L = 3, D = 1, N = 2;
  SsmParams p = make_ssm_params(D, N, rng);
  p.w_dt_img.fill(0.0);
  p.dt_bias[0] = softplus_inv(1e-8);
  TokenStreams st = random_streams(B, L, D, rng);
  const Tensor w = Tensor::randn({B, L, D}, rng);
  const ModulationMode mode = ModulationMode::ImageOnly;

  ScanOutput out = selective_scan_fwd(p, st, mode);
  for (int64_t i = 0; i < out.saved->delta.numel(); ++i)
    REQUIRE(out.saved->delta[i] < kZohSeriesGuard);
  ScanGrads g = selective_scan_bwd(p, st, mode, *out.saved, w);

  const double step = 1e-7;
  for (int64_t i = 0; i < st.x_img.numel(); ++i) {
    const double keep = st.x_img[i];
    st.x_img[i] = keep + step;
    const double up = scan_loss(p, st, mode, w);
    st.x_img[i] = keep - step;
    const double dn = scan_loss(p, st, mode, w);
    st.x_img[i] = keep;
    const double fd = (up - dn) / (2.0 * step);
    const double an = g.x_img[i];
    CHECK(std::fabs(fd - an) <= 1e-6 * std::max({std::fabs(fd), std::fabs(an), 1.0}));
  }
}

TEST_CASE("image-only backward leaves radar grads exactly zero") {
  Rng rng(37);
  SsmParams p = make_ssm_params(3, 2, rng);
  TokenStreams st = random_streams(2, 4, 3, rng);
  const Tensor w = Tensor::randn({2, 4, 3}, rng);

  ScanOutput out = selective_scan_fwd(p, st, ModulationMode::ImageOnly);
  ScanGrads g = selective_scan_bwd(p, st, ModulationMode::ImageOnly,
                                   *out.saved, w);
  CHECK(max_abs(g.x_rad) == 0.0);
  CHECK(max_abs(g.params.w_dt_rad) == 0.0);
  CHECK(max_abs(g.params.w_c_rad) == 0.0);
  CHECK(max_abs(g.params.w_gate) == 0.0);
  CHECK(max_abs(g.params.gate_bias) == 0.0);
}

TEST_CASE("long scans on bounded inputs stay bounded") {
  Rng rng(41);
  SsmParams p = make_ssm_params(4, 4, rng);
  TokenStreams st;
  st.x_img = Tensor::rand_uniform({1, 512, 4}, rng, -1.0, 1.0);
  st.x_rad = Tensor::rand_uniform({1, 512, 4}, rng, -1.0, 1.0);
  ScanOutput out = selective_scan_fwd(p, st, ModulationMode::Joint);
  CHECK(out.y.all_finite());
  CHECK(out.saved->h.all_finite());
  CHECK(max_abs(out.saved->h) < 1e6);
}

TEST_CASE("chunked scan matches the reference") {
  Rng rng(47);
  SsmParams p = make_ssm_params(3, 4, rng, /*zero_init_radar=*/false);
  TokenStreams st = random_streams(2, 37, 3, rng);
  ScanOutput ref = selective_scan_fwd(p, st, ModulationMode::Joint);

  // chunk == 1 routes through the reference kernel itself.
  ScanOutput c1 = selective_scan_chunked(p, st, ModulationMode::Joint, 1);
  CHECK(max_abs_diff(ref.y, c1.y) == 0.0);

  for (int64_t chunk : {2, 4, 16, 64}) {
    ScanOutput c = selective_scan_chunked(p, st, ModulationMode::Joint, chunk);
    CHECK(max_abs_diff(ref.y, c.y) <= 1e-10);
  }

  Tensor y32 = selective_scan_f32(p, st, ModulationMode::Joint, 16);
  CHECK(max_abs_diff(ref.y, y32) <= 1e-4);
}

TEST_CASE("scan input validation") {
  Rng rng(53);
  SsmParams p = make_ssm_params(3, 2, rng);
  TokenStreams st = random_streams(1, 4, 3, rng);

  SUBCASE("stream shape mismatch") {
    TokenStreams bad = st;
    bad.x_rad = Tensor({1, 5, 3});
    CHECK_THROWS_AS(selective_scan_fwd(p, bad, ModulationMode::Joint),
                    std::runtime_error);
  }
  SUBCASE("channel mismatch") {
    TokenStreams bad;
    bad.x_img = Tensor({1, 4, 2});
    bad.x_rad = Tensor({1, 4, 2});
    CHECK_THROWS_AS(selective_scan_fwd(p, bad, ModulationMode::Joint),
                    std::runtime_error);
  }
  SUBCASE("non-finite input") {
    TokenStreams bad = st;
    bad.x_img[0] = std::nan("");
    CHECK_THROWS_AS(selective_scan_fwd(p, bad, ModulationMode::Joint),
                    std::runtime_error);
  }
  SUBCASE("non-negative A entries") {
    SsmParams bad = p;
    bad.A[0] = 0.0;
    CHECK_THROWS_AS(selective_scan_fwd(bad, st, ModulationMode::Joint),
                    std::runtime_error);
  }
}

TEST_CASE("backward rejects stale residuals") {
  Rng rng(59);
  SsmParams p = make_ssm_params(2, 2, rng);
  TokenStreams st = random_streams(1, 3, 2, rng);
  const Tensor w = Tensor::randn({1, 3, 2}, rng);

  ScanOutput out = selective_scan_fwd(p, st, ModulationMode::Joint);
  st.x_img[0] += 1.0;
  CHECK_THROWS_AS(
      selective_scan_bwd(p, st, ModulationMode::Joint, *out.saved, w),
      std::runtime_error);
}

TEST_CASE("zero upstream gradient yields zero parameter gradients") {
  Rng rng(61);
  SsmParams p = make_ssm_params(3, 2, rng, /*zero_init_radar=*/false);
  TokenStreams st = random_streams(1, 5, 3, rng);
  ScanOutput out = selective_scan_fwd(p, st, ModulationMode::Joint);
  ScanGrads g = selective_scan_bwd(p, st, ModulationMode::Joint, *out.saved,
                                   Tensor({1, 5, 3}));
  CHECK(max_abs(g.params.A) == 0.0);
  CHECK(max_abs(g.params.w_dt_img) == 0.0);
  CHECK(max_abs(g.x_img) == 0.0);
  CHECK(max_abs(g.x_rad) == 0.0);
}
