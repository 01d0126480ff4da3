#pragma once

// Binary checkpoint container: network config and metadata as a JSON header,
// then per-parameter records carrying the f64 value plus the Adam first and
// second moments, so a resumed run continues bit-for-bit.

#include <fstream>
#include <string>

#include <json.hpp>

#include "rmscan/net.hpp"
#include "rmscan/optim.hpp"
#include "rmscan/synth.hpp"

namespace rmscan {

constexpr uint32_t kCheckpointMagic = 0x4b434d52;  // "RMCK"
constexpr uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  NetParams params;
  AdamState adam;
  nlohmann::json meta;
};

namespace detail {

inline void write_f64_tensor(std::ostream& os, const Tensor& t) {
  write_u32(os, static_cast<uint32_t>(t.ndim()));
  for (int64_t i = 0; i < t.ndim(); ++i)
    write_u64(os, static_cast<uint64_t>(t.size(i)));
  os.write(reinterpret_cast<const char*>(t.data()),
           static_cast<std::streamsize>(t.numel() * sizeof(double)));
}

inline Tensor read_f64_tensor(std::istream& is) {
  const uint32_t nd = read_u32(is);
  RMSCAN_CHECK(nd <= 8, "checkpoint: implausible tensor rank");
  Shape shape(nd);
  for (uint32_t i = 0; i < nd; ++i) {
    shape[i] = static_cast<int64_t>(read_u64(is));
    RMSCAN_CHECK(shape[i] >= 1 && shape[i] < (int64_t{1} << 32),
                 "checkpoint: implausible tensor dim");
  }
  Tensor t(shape);
  is.read(reinterpret_cast<char*>(t.data()),
          static_cast<std::streamsize>(t.numel() * sizeof(double)));
  RMSCAN_CHECK(is.good(), "checkpoint: truncated file");
  return t;
}

}  // namespace detail

inline void write_checkpoint(const std::string& path, const NetParams& params,
                             const AdamState& adam,
                             const nlohmann::json& extra_meta = {}) {
  RMSCAN_CHECK(adam.m.size() == params.store.count() &&
                   adam.v.size() == params.store.count(),
               "checkpoint: optimizer state does not match parameters");
  std::ofstream os(path, std::ios::binary);
  RMSCAN_CHECK(os.good(), "checkpoint: cannot open for writing: " + path);

  nlohmann::json meta = extra_meta;
  meta["cfg"] = params.cfg;
  meta["adam"] = {{"step", adam.step},
                  {"beta1", adam.beta1},
                  {"beta2", adam.beta2},
                  {"eps", adam.eps}};

  detail::write_u32(os, kCheckpointMagic);
  detail::write_u32(os, kCheckpointVersion);
  const std::string header = meta.dump();
  detail::write_u64(os, header.size());
  os.write(header.data(), static_cast<std::streamsize>(header.size()));

  detail::write_u64(os, params.store.count());
  for (size_t k = 0; k < params.store.count(); ++k) {
    const std::string& name = params.store.names[k];
    detail::write_u32(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_f64_tensor(os, params.store.values[k]);
    detail::write_f64_tensor(os, adam.m[k]);
    detail::write_f64_tensor(os, adam.v[k]);
  }
  RMSCAN_CHECK(os.good(), "checkpoint: write failed: " + path);
}

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  RMSCAN_CHECK(is.good(), "checkpoint: cannot open: " + path);
  RMSCAN_CHECK(detail::read_u32(is) == kCheckpointMagic,
               "checkpoint: bad magic in " + path);
  RMSCAN_CHECK(detail::read_u32(is) == kCheckpointVersion,
               "checkpoint: unsupported version in " + path);
  const uint64_t hlen = detail::read_u64(is);
  RMSCAN_CHECK(hlen < (1u << 20), "checkpoint: implausible header");
  std::string header(hlen, '\0');
  is.read(header.data(), static_cast<std::streamsize>(hlen));
  RMSCAN_CHECK(is.good(), "checkpoint: truncated file");

  Checkpoint ck;
  ck.meta = nlohmann::json::parse(header);
  ck.params.cfg = ck.meta.at("cfg").get<NetConfig>();
  validate(ck.params.cfg);
  const nlohmann::json& aj = ck.meta.at("adam");
  ck.adam.step = aj.at("step").get<int64_t>();
  ck.adam.beta1 = aj.at("beta1").get<double>();
  ck.adam.beta2 = aj.at("beta2").get<double>();
  ck.adam.eps = aj.at("eps").get<double>();

  const uint64_t n = detail::read_u64(is);
  for (uint64_t k = 0; k < n; ++k) {
    const uint32_t nlen = detail::read_u32(is);
    RMSCAN_CHECK(nlen < 256, "checkpoint: implausible name length");
    std::string name(nlen, '\0');
    is.read(name.data(), static_cast<std::streamsize>(nlen));
    RMSCAN_CHECK(is.good(), "checkpoint: truncated file");
    Tensor value = detail::read_f64_tensor(is);
    Tensor m = detail::read_f64_tensor(is);
    Tensor v = detail::read_f64_tensor(is);
    RMSCAN_CHECK(value.same_shape(m) && value.same_shape(v),
                 "checkpoint: optimizer state shape mismatch for " + name);
    ck.params.store.add(name, std::move(value));
    ck.adam.m.push_back(std::move(m));
    ck.adam.v.push_back(std::move(v));
  }
  return ck;
}

}  // namespace rmscan
