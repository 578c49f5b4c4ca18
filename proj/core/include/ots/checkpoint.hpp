#pragma once

// Flat checkpoint archive: versioned header, then named entries mapping a
// parameter path to shape + little-endian float64 buffer, then optional
// optimizer state. Scalars are widened to f64 on disk regardless of the
// in-memory precision.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "ots/optim.hpp"
#include "ots/tensor.hpp"

namespace ots {

namespace ckpt_detail {

constexpr char kMagic[8] = {'O', 'T', 'S', 'C', 'K', 'P', 'T', '1'};

inline void write_u64(std::ostream& os, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = (unsigned char)(v >> (8 * i));
  os.write((const char*)b, 8);
}

inline uint64_t read_u64(std::istream& is) {
  unsigned char b[8];
  is.read((char*)b, 8);
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= (uint64_t)b[i] << (8 * i);
  return v;
}

inline void write_str(std::ostream& os, const std::string& s) {
  write_u64(os, s.size());
  os.write(s.data(), (std::streamsize)s.size());
}

inline std::string read_str(std::istream& is) {
  uint64_t n = read_u64(is);
  std::string s(n, '\0');
  is.read(s.data(), (std::streamsize)n);
  return s;
}

inline void write_f64_vec(std::ostream& os, const std::vector<double>& v) {
  write_u64(os, v.size());
  for (double x : v) {
    uint64_t bits;
    std::memcpy(&bits, &x, 8);
    write_u64(os, bits);
  }
}

inline std::vector<double> read_f64_vec(std::istream& is) {
  uint64_t n = read_u64(is);
  std::vector<double> v(n);
  for (auto& x : v) {
    uint64_t bits = read_u64(is);
    std::memcpy(&x, &bits, 8);
  }
  return v;
}

}  // namespace ckpt_detail

struct CheckpointEntry {
  Shape shape;
  std::vector<double> data;
};

struct Checkpoint {
  std::map<std::string, CheckpointEntry> params;
  std::map<std::string, CheckpointEntry> opt_state;  // "<name>/m", "<name>/v"
  int64_t opt_step = 0;

  void save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) tensor_fail("cannot open checkpoint for writing: " + path);
    os.write(ckpt_detail::kMagic, 8);
    ckpt_detail::write_u64(os, (uint64_t)opt_step);
    ckpt_detail::write_u64(os, params.size());
    for (const auto& [name, e] : params) write_entry(os, name, e);
    ckpt_detail::write_u64(os, opt_state.size());
    for (const auto& [name, e] : opt_state) write_entry(os, name, e);
    if (!os) tensor_fail("checkpoint write failed: " + path);
  }

  static Checkpoint load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) tensor_fail("cannot open checkpoint: " + path);
    char magic[8];
    is.read(magic, 8);
    if (std::memcmp(magic, ckpt_detail::kMagic, 8) != 0)
      tensor_fail("not a checkpoint file (bad header): " + path);
    Checkpoint ck;
    ck.opt_step = (int64_t)ckpt_detail::read_u64(is);
    uint64_t np = ckpt_detail::read_u64(is);
    for (uint64_t i = 0; i < np; ++i) read_entry(is, ck.params);
    uint64_t ns = ckpt_detail::read_u64(is);
    for (uint64_t i = 0; i < ns; ++i) read_entry(is, ck.opt_state);
    if (!is) tensor_fail("checkpoint truncated: " + path);
    return ck;
  }

 private:
  static void write_entry(std::ostream& os, const std::string& name, const CheckpointEntry& e) {
    ckpt_detail::write_str(os, name);
    ckpt_detail::write_u64(os, e.shape.size());
    for (int d : e.shape) ckpt_detail::write_u64(os, (uint64_t)d);
    ckpt_detail::write_f64_vec(os, e.data);
  }

  static void read_entry(std::istream& is, std::map<std::string, CheckpointEntry>& dst) {
    std::string name = ckpt_detail::read_str(is);
    CheckpointEntry e;
    uint64_t nd = ckpt_detail::read_u64(is);
    e.shape.resize(nd);
    for (auto& d : e.shape) d = (int)ckpt_detail::read_u64(is);
    e.data = ckpt_detail::read_f64_vec(is);
    dst[name] = std::move(e);
  }
};

template <typename T>
Checkpoint snapshot(const ParamList<T>& params, Adam<T>* opt = nullptr) {
  Checkpoint ck;
  for (auto* p : params) {
    CheckpointEntry e;
    e.shape = p->tensor.shape();
    e.data.assign(p->tensor.values().begin(), p->tensor.values().end());
    ck.params[p->name] = std::move(e);
  }
  if (opt) {
    ck.opt_step = opt->step_count();
    for (const auto& [name, slot] : opt->state()) {
      CheckpointEntry m, v;
      m.data.assign(slot.m.begin(), slot.m.end());
      v.data.assign(slot.v.begin(), slot.v.end());
      ck.opt_state[name + "/m"] = std::move(m);
      ck.opt_state[name + "/v"] = std::move(v);
    }
  }
  return ck;
}

template <typename T>
void restore(const Checkpoint& ck, const ParamList<T>& params, Adam<T>* opt = nullptr) {
  for (auto* p : params) {
    auto it = ck.params.find(p->name);
    if (it == ck.params.end()) tensor_fail("checkpoint missing parameter: " + p->name);
    check(it->second.data.size() == p->tensor.values().size(),
          "checkpoint size mismatch for " + p->name);
    auto& dst = p->tensor.values();
    for (size_t i = 0; i < dst.size(); ++i) dst[i] = (T)it->second.data[i];
  }
  if (opt) {
    opt->set_step_count(ck.opt_step);
    opt->state().clear();
    for (auto* p : params) {
      auto mi = ck.opt_state.find(p->name + "/m");
      auto vi = ck.opt_state.find(p->name + "/v");
      if (mi == ck.opt_state.end() || vi == ck.opt_state.end()) continue;
      auto& slot = opt->state()[p->name];
      slot.m.assign(mi->second.data.begin(), mi->second.data.end());
      slot.v.assign(vi->second.data.begin(), vi->second.data.end());
    }
  }
}

}  // namespace ots
