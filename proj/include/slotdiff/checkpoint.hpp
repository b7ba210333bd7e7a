#pragma once

#include <cstring>
#include <fstream>

#include "slotdiff/adam.hpp"
#include "slotdiff/config.hpp"

// Binary checkpoint: versioned header, config snapshot, iteration counter,
// named little-endian float32 parameter records, optional Adam state.
// save -> load -> save round-trips byte-identically.

namespace slotdiff {

constexpr uint32_t kCheckpointMagic = 0x53444350;  // "SDCP"
constexpr uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::ostream& o, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  o.write(reinterpret_cast<char*>(b), 4);
}
inline void put_u64(std::ostream& o, uint64_t v) {
  put_u32(o, uint32_t(v));
  put_u32(o, uint32_t(v >> 32));
}
inline uint32_t get_u32(std::istream& i, const std::string& path) {
  unsigned char b[4];
  i.read(reinterpret_cast<char*>(b), 4);
  if (!i) throw std::runtime_error("checkpoint: truncated file " + path);
  return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
}
inline uint64_t get_u64(std::istream& i, const std::string& path) {
  uint64_t lo = get_u32(i, path);
  uint64_t hi = get_u32(i, path);
  return lo | hi << 32;
}
inline void put_f32_array(std::ostream& o, const float* data, size_t n) {
  static_assert(sizeof(float) == 4);
  o.write(reinterpret_cast<const char*>(data), std::streamsize(n * 4));
}
inline void get_f32_array(std::istream& i, float* data, size_t n, const std::string& path) {
  i.read(reinterpret_cast<char*>(data), std::streamsize(n * 4));
  if (!i) throw std::runtime_error("checkpoint: truncated file " + path);
}

}  // namespace detail

inline void checkpoint_save(const std::string& path, const Config& cfg, int64_t iteration,
                            ParamSet<float>& params, Adam<float>* opt = nullptr) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
  detail::put_u32(f, kCheckpointMagic);
  detail::put_u32(f, kCheckpointVersion);
  std::string cfg_text = config_serialize(cfg);
  detail::put_u32(f, uint32_t(cfg_text.size()));
  f.write(cfg_text.data(), std::streamsize(cfg_text.size()));
  detail::put_u64(f, uint64_t(iteration));
  detail::put_u32(f, uint32_t(params.items().size()));
  for (Parameter<float>* p : params.items()) {
    detail::put_u32(f, uint32_t(p->name.size()));
    f.write(p->name.data(), std::streamsize(p->name.size()));
    detail::put_u32(f, uint32_t(p->value.shape.size()));
    for (int d : p->value.shape) detail::put_u32(f, uint32_t(d));
    detail::put_f32_array(f, p->value.data.data(), p->value.data.size());
  }
  f.put(opt != nullptr ? char(1) : char(0));
  if (opt != nullptr) {
    detail::put_u64(f, uint64_t(opt->step_count()));
    for (Parameter<float>* p : params.items()) {
      auto& m = opt->moments(p);
      detail::put_f32_array(f, m.m.data.data(), m.m.data.size());
      detail::put_f32_array(f, m.v.data.data(), m.v.data.size());
    }
  }
  if (!f) throw std::runtime_error("checkpoint: write failed " + path);
}

struct CheckpointInfo {
  Config config;
  int64_t iteration = 0;
  bool had_optimizer = false;
};

// Reads only the header: the embedded config snapshot and iteration.
inline CheckpointInfo checkpoint_peek(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
  if (detail::get_u32(f, path) != kCheckpointMagic)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  uint32_t version = detail::get_u32(f, path);
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version) +
                             " in " + path);
  CheckpointInfo info;
  uint32_t cfg_len = detail::get_u32(f, path);
  std::string cfg_text(cfg_len, '\0');
  f.read(cfg_text.data(), cfg_len);
  if (!f) throw std::runtime_error("checkpoint: truncated file " + path);
  config_parse_text(info.config, cfg_text);
  info.iteration = int64_t(detail::get_u64(f, path));
  return info;
}

// Loads into an existing parameter registry; names, ranks and dims must
// match the built model exactly.
inline CheckpointInfo checkpoint_load(const std::string& path, ParamSet<float>& params,
                                      Adam<float>* opt = nullptr) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
  if (detail::get_u32(f, path) != kCheckpointMagic)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  uint32_t version = detail::get_u32(f, path);
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version) +
                             " in " + path);
  CheckpointInfo info;
  uint32_t cfg_len = detail::get_u32(f, path);
  std::string cfg_text(cfg_len, '\0');
  f.read(cfg_text.data(), cfg_len);
  if (!f) throw std::runtime_error("checkpoint: truncated file " + path);
  config_parse_text(info.config, cfg_text);
  info.iteration = int64_t(detail::get_u64(f, path));
  uint32_t count = detail::get_u32(f, path);
  if (count != params.items().size())
    throw std::runtime_error("checkpoint: parameter count mismatch in " + path);
  for (Parameter<float>* p : params.items()) {
    uint32_t name_len = detail::get_u32(f, path);
    std::string name(name_len, '\0');
    f.read(name.data(), name_len);
    if (!f || name != p->name)
      throw std::runtime_error("checkpoint: parameter name mismatch (" + name + " vs " + p->name +
                               ") in " + path);
    uint32_t rank = detail::get_u32(f, path);
    std::vector<int> dims(rank);
    for (auto& d : dims) d = int(detail::get_u32(f, path));
    if (dims != p->value.shape)
      throw std::runtime_error("checkpoint: shape mismatch for " + name + " in " + path);
    detail::get_f32_array(f, p->value.data.data(), p->value.data.size(), path);
  }
  char has_opt = 0;
  f.get(has_opt);
  if (!f) throw std::runtime_error("checkpoint: truncated file " + path);
  info.had_optimizer = has_opt != 0;
  if (has_opt && opt != nullptr) {
    opt->set_step_count(int64_t(detail::get_u64(f, path)));
    for (Parameter<float>* p : params.items()) {
      auto& m = opt->moments(p);
      detail::get_f32_array(f, m.m.data.data(), m.m.data.size(), path);
      detail::get_f32_array(f, m.v.data.data(), m.v.data.size(), path);
    }
  }
  return info;
}

}  // namespace slotdiff
