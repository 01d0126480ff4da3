#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "rmscan/tape.hpp"

using namespace rmscan;

namespace {

using BuildFn = std::function<Var(Tape&, const std::vector<Var>&)>;

// Central-difference check of d(loss)/d(input) for every entry of every
// input, against the tape's reverse sweep.
void gradcheck(const char* name, std::vector<Tensor> inputs,
               const BuildFn& build, double tol = 1e-5, double step = 1e-5) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (const Tensor& in : inputs) vars.push_back(tape.leaf(in));
  Var loss = build(tape, vars);
  REQUIRE(tape.val(loss).numel() == 1);
  tape.backward(loss);
  std::vector<Tensor> analytic;
  analytic.reserve(vars.size());
  for (Var v : vars) analytic.push_back(tape.grad(v));

  auto eval = [&](const std::vector<Tensor>& xs) {
    Tape t2;
    std::vector<Var> vs;
    vs.reserve(xs.size());
    for (const Tensor& x : xs) vs.push_back(t2.leaf(x));
    return t2.val(build(t2, vs))[0];
  };

  for (size_t k = 0; k < inputs.size(); ++k) {
    for (int64_t i = 0; i < inputs[k].numel(); ++i) {
      std::vector<Tensor> xs = inputs;
      xs[k][i] = inputs[k][i] + step;
      const double up = eval(xs);
      xs[k][i] = inputs[k][i] - step;
      const double dn = eval(xs);
      const double fd = (up - dn) / (2.0 * step);
      const double an = analytic[k][i];
      const double bound = tol * std::max({std::fabs(fd), std::fabs(an), 1.0});
      INFO(name, " input ", k, " entry ", i, " fd=", fd, " an=", an);
      CHECK(std::fabs(fd - an) <= bound);
    }
  }
}

Var weighted_sum(Tape& t, Var x, const Tensor& w) {
  return ops::sum_all(ops::mul_const(x, w));
}

}  // namespace

TEST_CASE("backward basics") {
  SUBCASE("loss = sum(params) gives unit gradients") {
    Tape t;
    Var x = t.leaf(Tensor({2, 3}, {1, 2, 3, 4, 5, 6}));
    Var loss = ops::sum_all(x);
    t.backward(loss);
    const Tensor& g = t.grad(x);
    for (int64_t i = 0; i < g.numel(); ++i) CHECK(g[i] == 1.0);
  }
  SUBCASE("zero-valued loss built from params gives zero gradients") {
    Tape t;
    Var x = t.leaf(Tensor({3}, {1, 2, 3}));
    Var loss = ops::scale(ops::sum_all(x), 0.0);
    t.backward(loss);
    CHECK(max_abs(t.grad(x)) == 0.0);
  }
  SUBCASE("detached loss is rejected") {
    Tape t;
    t.leaf(Tensor({2}, {1, 1}));
    Var c = t.constant(Tensor::scalar(0.0));
    CHECK_THROWS_AS(t.backward(c), std::runtime_error);
  }
  SUBCASE("non-scalar loss is rejected") {
    Tape t;
    Var x = t.leaf(Tensor({2}, {1, 1}));
    CHECK_THROWS_AS(t.backward(x), std::runtime_error);
  }
  SUBCASE("unused parameter reads back a zero gradient") {
    Tape t;
    Var x = t.leaf(Tensor({2}, {1, 2}));
    Var y = t.leaf(Tensor({2}, {3, 4}));
    t.backward(ops::sum_all(x));
    CHECK(max_abs(t.grad(y)) == 0.0);
  }
}

TEST_CASE("gradcheck elementwise ops") {
  Rng rng(101);
  const Tensor a = Tensor::randn({2, 3}, rng);
  const Tensor b = Tensor::randn({2, 3}, rng);
  const Tensor w = Tensor::randn({2, 3}, rng);

  gradcheck("add", {a, b}, [&](Tape& t, const std::vector<Var>& v) {
    return weighted_sum(t, ops::add(v[0], v[1]), w);
  });
  gradcheck("sub", {a, b}, [&](Tape& t, const std::vector<Var>& v) {
    return weighted_sum(t, ops::sub(v[0], v[1]), w);
  });
  gradcheck("mul", {a, b}, [&](Tape& t, const std::vector<Var>& v) {
    return weighted_sum(t, ops::mul(v[0], v[1]), w);
  });
  gradcheck("scale_shift", {a}, [&](Tape& t, const std::vector<Var>& v) {
    return weighted_sum(t, ops::shift(ops::scale(v[0], -1.7), 0.3), w);
  });
  gradcheck("mul_const", {a}, [&](Tape& t, const std::vector<Var>& v) {
    return weighted_sum(t, ops::mul_const(v[0], b), w);
  });
  gradcheck("sigmoid", {a}, [&](Tape& t, const std::vector<Var>& v) {
    return weighted_sum(t, ops::sigmoid_op(v[0]), w);
  });
  gradcheck("tanh", {a}, [&](Tape& t, const std::vector<Var>& v) {
    return weighted_sum(t, ops::tanh_op(v[0]), w);
  });
  gradcheck("softplus", {a}, [&](Tape& t, const std::vector<Var>& v) {
    return weighted_sum(t, ops::softplus_op(v[0]), w);
  });
  gradcheck("silu", {a}, [&](Tape& t, const std::vector<Var>& v) {
    return weighted_sum(t, ops::silu_op(v[0]), w);
  });
  gradcheck("exp", {a}, [&](Tape& t, const std::vector<Var>& v) {
    return weighted_sum(t, ops::exp_op(v[0]), w);
  });
  gradcheck("neg_exp", {a}, [&](Tape& t, const std::vector<Var>& v) {
    return weighted_sum(t, ops::neg_exp_op(v[0]), w);
  });

  const Tensor pos = Tensor({5}, {0.2, 1.0, 3.7, 9.5, 42.0});
  const Tensor w5 = Tensor::randn({5}, rng);
  gradcheck("log", {pos}, [&](Tape& t, const std::vector<Var>& v) {
    return weighted_sum(t, ops::log_op(v[0]), w5);
  });

  const Tensor res = Tensor({5}, {-8.0, -3.0, 0.5, 2.0, 7.0});
  gradcheck("huber", {res}, [&](Tape& t, const std::vector<Var>& v) {
    return weighted_sum(t, ops::huber_op(v[0], 5.0), w5);
  });
  gradcheck("abs", {res}, [&](Tape& t, const std::vector<Var>& v) {
    return weighted_sum(t, ops::abs_op(v[0]), w5);
  });
  gradcheck("clamp", {res}, [&](Tape& t, const std::vector<Var>& v) {
    return weighted_sum(t, ops::clamp_op(v[0], -4.0, 4.0), w5);
  });
}

TEST_CASE("huber closed-form values") {
  Tape t;
  Var x = t.leaf(Tensor({2}, {2.0, 10.0}), false);
  Var h = ops::huber_op(x, 5.0);
  CHECK(t.val(h)[0] == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(t.val(h)[1] == doctest::Approx(37.5).epsilon(1e-15));
}

TEST_CASE("gradcheck shape ops") {
  Rng rng(103);
  const Tensor a = Tensor::randn({4, 3}, rng);
  const Tensor b = Tensor::randn({4, 2}, rng);

  {
    const Tensor w = Tensor::randn({3, 4}, rng);
    gradcheck("reshape", {a}, [&](Tape& t, const std::vector<Var>& v) {
      return weighted_sum(t, ops::reshape(v[0], {3, 4}), w);
    });
  }
  {
    const std::vector<int64_t> idx = {2, 0, 2, 3};
    const Tensor w = Tensor::randn({4, 3}, rng);
    gradcheck("gather_rows", {a}, [&](Tape& t, const std::vector<Var>& v) {
      return weighted_sum(t, ops::gather_rows(v[0], idx), w);
    });
  }
  {
    const std::vector<int64_t> idx = {5, 1, 5, 0};
    const Tensor w = Tensor::randn({6, 3}, rng);
    gradcheck("scatter_add_rows", {a},
              [&](Tape& t, const std::vector<Var>& v) {
                return weighted_sum(t, ops::scatter_add_rows(v[0], idx, 6), w);
              });
  }
  {
    const Tensor w = Tensor::randn({4, 5}, rng);
    gradcheck("concat_last", {a, b}, [&](Tape& t, const std::vector<Var>& v) {
      return weighted_sum(t, ops::concat_last(v[0], v[1]), w);
    });
  }
}

TEST_CASE("gradcheck structured ops") {
  Rng rng(107);

  {
    const Tensor x = Tensor::randn({5, 3}, rng);
    const Tensor wm = Tensor::randn({2, 3}, rng, 0.5);
    const Tensor bias = Tensor::randn({2}, rng, 0.5);
    const Tensor w = Tensor::randn({5, 2}, rng);
    gradcheck("linear", {x, wm, bias},
              [&](Tape& t, const std::vector<Var>& v) {
                return weighted_sum(t, ops::linear(v[0], v[1], v[2]), w);
              });
    gradcheck("linear_nobias", {x, wm},
              [&](Tape& t, const std::vector<Var>& v) {
                return weighted_sum(t, ops::linear(v[0], v[1]), w);
              });
  }
  {
    const Tensor x = Tensor::randn({5, 6, 2}, rng);
    const Tensor k = Tensor::randn({3, 3, 3, 2}, rng, 0.4);
    const Tensor bias = Tensor::randn({3}, rng, 0.2);
    const Tensor w = Tensor::randn({3, 3, 3}, rng);
    gradcheck("conv2d_s2p1", {x, k, bias},
              [&](Tape& t, const std::vector<Var>& v) {
                return weighted_sum(t, ops::conv2d(v[0], v[1], v[2], 2, 1), w);
              });
    const Tensor w2 = Tensor::randn({3, 4, 3}, rng);
    gradcheck("conv2d_s1p0", {x, k, bias},
              [&](Tape& t, const std::vector<Var>& v) {
                return weighted_sum(t, ops::conv2d(v[0], v[1], v[2], 1, 0), w2);
              });
  }
  {
    const Tensor x = Tensor::randn({3, 2, 2}, rng);
    const Tensor w = Tensor::randn({6, 4, 2}, rng);
    gradcheck("upsample2", {x}, [&](Tape& t, const std::vector<Var>& v) {
      return weighted_sum(t, ops::upsample2(v[0]), w);
    });
  }
  {
    const Tensor x = Tensor::randn({4, 6, 2}, rng);
    const Tensor w = Tensor::randn({2, 3, 2}, rng);
    gradcheck("avgpool2", {x}, [&](Tape& t, const std::vector<Var>& v) {
      return weighted_sum(t, ops::avgpool2(v[0]), w);
    });
  }
  {
    const Tensor x = Tensor::randn({3, 4}, rng);
    const Tensor gain = Tensor::rand_uniform({4}, rng, 0.5, 1.5);
    const Tensor bias = Tensor::randn({4}, rng, 0.3);
    const Tensor w = Tensor::randn({3, 4}, rng);
    gradcheck("layer_norm", {x, gain, bias},
              [&](Tape& t, const std::vector<Var>& v) {
                return weighted_sum(t, ops::layer_norm(v[0], v[1], v[2]), w);
              });
  }
}

TEST_CASE("gradcheck scan custom VJP through the tape") {
  Rng rng(109);
  const int64_t B = 1, L = 3, D = 2, N = 2;
  SsmParams p = make_ssm_params(D, N, rng, /*zero_init_radar=*/false);
  Tensor log_a(p.A.shape());
  for (int64_t i = 0; i < log_a.numel(); ++i) log_a[i] = std::log(-p.A[i]);

  std::vector<Tensor> inputs = {log_a,
                                p.w_dt_img,
                                p.w_b,
                                p.w_c_img,
                                p.w_dt_rad,
                                p.w_c_rad,
                                p.w_gate,
                                p.gate_bias,
                                p.dt_bias,
                                Tensor::randn({B, L, D}, rng),
                                Tensor::randn({B, L, D}, rng)};
  const Tensor w = Tensor::randn({B, L, D}, rng);

  gradcheck("rms_scan", inputs, [&](Tape& t, const std::vector<Var>& v) {
    ops::SsmVars pv;
    pv.log_a = v[0];
    pv.w_dt_img = v[1];
    pv.w_b = v[2];
    pv.w_c_img = v[3];
    pv.w_dt_rad = v[4];
    pv.w_c_rad = v[5];
    pv.w_gate = v[6];
    pv.gate_bias = v[7];
    pv.dt_bias = v[8];
    return weighted_sum(
        t, ops::rms_scan(pv, v[9], v[10], ModulationMode::Joint), w);
  });
}

TEST_CASE("gradcheck a small composite network") {
  Rng rng(113);
  const Tensor x = Tensor::randn({4, 3}, rng);
  const Tensor w1 = Tensor::randn({5, 3}, rng, 0.5);
  const Tensor b1 = Tensor::randn({5}, rng, 0.2);
  const Tensor w2 = Tensor::randn({2, 5}, rng, 0.5);
  const Tensor b2 = Tensor::randn({2}, rng, 0.2);
  const Tensor target = Tensor::randn({4, 2}, rng);

  gradcheck("toy_net", {x, w1, b1, w2, b2},
            [&](Tape& t, const std::vector<Var>& v) {
              Var h = ops::silu_op(ops::linear(v[0], v[1], v[2]));
              Var y = ops::linear(h, v[3], v[4]);
              Var diff = ops::sub(y, t.constant(target));
              return ops::scale(ops::sum_all(ops::huber_op(diff, 1.0)),
                                1.0 / 8.0);
            });
}

TEST_CASE("gradient accumulation across reused vars") {
  // y = x*x + x used twice; d/dx = 2x + 1.
  Tape t;
  Var x = t.leaf(Tensor({3}, {1.0, -2.0, 0.5}));
  Var loss = ops::sum_all(ops::add(ops::mul(x, x), x));
  t.backward(loss);
  const Tensor& g = t.grad(x);
  CHECK(g[0] == doctest::Approx(3.0));
  CHECK(g[1] == doctest::Approx(-3.0));
  CHECK(g[2] == doctest::Approx(2.0));
}
