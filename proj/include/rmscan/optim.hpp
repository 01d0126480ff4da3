#pragma once

// Named parameter storage, Adam, and the additive step-decay learning-rate
// schedule. Everything here is strictly deterministic: fixed iteration order,
// no hidden state beyond the moment tensors.

#include <string>
#include <unordered_map>
#include <vector>

#include "rmscan/tensor.hpp"

namespace rmscan {

struct ParamStore {
  std::vector<std::string> names;
  std::vector<Tensor> values;
  std::unordered_map<std::string, size_t> index;

  size_t add(const std::string& name, Tensor value) {
    RMSCAN_CHECK(index.find(name) == index.end(),
                 "params: duplicate name " + name);
    index.emplace(name, names.size());
    names.push_back(name);
    values.push_back(std::move(value));
    return names.size() - 1;
  }

  size_t count() const { return names.size(); }

  Tensor& at(const std::string& name) {
    auto it = index.find(name);
    RMSCAN_CHECK(it != index.end(), "params: unknown name " + name);
    return values[it->second];
  }

  const Tensor& at(const std::string& name) const {
    auto it = index.find(name);
    RMSCAN_CHECK(it != index.end(), "params: unknown name " + name);
    return values[it->second];
  }

  int64_t total_scalars() const {
    int64_t n = 0;
    for (const Tensor& v : values) n += v.numel();
    return n;
  }
};

struct StepDecaySchedule {
  double lr0 = 1e-4;
  double step_abs = 1e-5;
  int64_t every_epochs = 10;
  double floor_frac = 0.5;
};

inline double lr_at(const StepDecaySchedule& s, int64_t epoch) {
  RMSCAN_CHECK(epoch >= 0, "lr_at: negative epoch");
  RMSCAN_CHECK(s.every_epochs >= 1, "lr_at: bad decay interval");
  const double lr =
      s.lr0 - s.step_abs * static_cast<double>(epoch / s.every_epochs);
  return std::max(lr, s.floor_frac * s.lr0);
}

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  int64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

inline AdamState make_adam_state(const ParamStore& params) {
  AdamState st;
  st.m.reserve(params.count());
  st.v.reserve(params.count());
  for (const Tensor& p : params.values) {
    st.m.emplace_back(p.shape());
    st.v.emplace_back(p.shape());
  }
  return st;
}

// One bias-corrected Adam update over every parameter, in store order.
inline void adam_step(AdamState& st, ParamStore& params,
                      const std::vector<Tensor>& grads, double lr) {
  RMSCAN_CHECK(grads.size() == params.count(), "adam: gradient count mismatch");
  RMSCAN_CHECK(st.m.size() == params.count(), "adam: state size mismatch");
  st.step += 1;
  const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (size_t k = 0; k < params.count(); ++k) {
    Tensor& p = params.values[k];
    const Tensor& g = grads[k];
    RMSCAN_CHECK(p.same_shape(g),
                 "adam: gradient shape mismatch for " + params.names[k]);
    RMSCAN_CHECK(g.all_finite(),
                 "adam: non-finite gradient for " + params.names[k]);
    Tensor& m = st.m[k];
    Tensor& v = st.v[k];
    for (int64_t i = 0; i < p.numel(); ++i) {
      m[i] = st.beta1 * m[i] + (1.0 - st.beta1) * g[i];
      v[i] = st.beta2 * v[i] + (1.0 - st.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] -= lr * mhat / (std::sqrt(vhat) + st.eps);
    }
  }
}

}  // namespace rmscan
