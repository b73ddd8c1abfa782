#pragma once

// Binary checkpoints. Layout, all integers little-endian:
//
//   8 bytes   magic "VLMXCKPT"
//   u32       format version
//   u64 + n   config text (key = value lines)
//   u64       tensor count, then per tensor:
//               u64 + n  name
//               u8       dtype (0 = f32)
//               u32      rank
//               u64[rank] dims
//               f32[prod(dims)] payload
//   u64       step
//   u64 + n   rng state text
//   u8        optimizer present; if 1:
//               u64 optimizer step, u64 entry count, then per entry
//               u64 + n name, u64 length, f32[length] m, f32[length] v
//
// Nothing may follow the optimizer block.

#include <array>
#include <cstdint>
#include <cstring>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "vlmix/binary_io.hpp"
#include "vlmix/encoders.hpp"
#include "vlmix/optimizer.hpp"

namespace vlmix {

inline constexpr std::array<char, 8> kCheckpointMagic{'V', 'L', 'M', 'X', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct BadMagicError : IoError {
  using IoError::IoError;
};
struct VersionError : IoError {
  using IoError::IoError;
};
struct CorruptCheckpointError : IoError {
  using IoError::IoError;
};
struct UnknownTensorError : IoError {
  using IoError::IoError;
};
struct ShapeMismatchError : IoError {
  using IoError::IoError;
};

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<float> data;
  bool operator==(const NamedTensor&) const = default;
};

struct OptimizerSnapshot {
  std::uint64_t step = 0;
  struct Entry {
    std::string name;
    std::vector<float> m, v;
    bool operator==(const Entry&) const = default;
  };
  std::vector<Entry> entries;
  bool operator==(const OptimizerSnapshot&) const = default;
};

struct Checkpoint {
  std::string config;
  std::vector<NamedTensor> tensors;
  std::uint64_t step = 0;
  std::string rng_state;
  std::optional<OptimizerSnapshot> optimizer;
  bool operator==(const Checkpoint&) const = default;
};

namespace detail {
inline void put_floats(ByteWriter& w, const std::vector<float>& v) {
  for (float f : v) w.put<float>(f);
}
inline std::vector<float> get_floats(ByteReader& r, std::uint64_t n) {
  if (n > r.remaining() / sizeof(float)) {
    throw TruncatedError("payload of " + std::to_string(n) + " floats exceeds the remaining " +
                         std::to_string(r.remaining()) + " bytes");
  }
  std::vector<float> v(n);
  for (auto& f : v) f = r.get<float>();
  return v;
}
}  // namespace detail

inline std::vector<unsigned char> serialize_checkpoint(const Checkpoint& c) {
  ByteWriter w;
  w.put_bytes(kCheckpointMagic.data(), kCheckpointMagic.size());
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put_string(c.config);
  w.put<std::uint64_t>(c.tensors.size());
  for (const auto& t : c.tensors) {
    if (shape_numel(t.shape) != t.data.size()) {
      throw ShapeError("tensor '" + t.name + "' shape " + shape_str(t.shape) + " does not match its " +
                       std::to_string(t.data.size()) + " values");
    }
    w.put_string(t.name);
    w.put<std::uint8_t>(0);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) w.put<std::uint64_t>(d);
    detail::put_floats(w, t.data);
  }
  w.put<std::uint64_t>(c.step);
  w.put_string(c.rng_state);
  w.put<std::uint8_t>(c.optimizer ? 1 : 0);
  if (c.optimizer) {
    w.put<std::uint64_t>(c.optimizer->step);
    w.put<std::uint64_t>(c.optimizer->entries.size());
    for (const auto& e : c.optimizer->entries) {
      w.put_string(e.name);
      w.put<std::uint64_t>(e.m.size());
      detail::put_floats(w, e.m);
      detail::put_floats(w, e.v);
    }
  }
  return w.bytes();
}

inline Checkpoint deserialize_checkpoint(std::vector<unsigned char> bytes) {
  ByteReader r(std::move(bytes));
  std::array<char, 8> magic{};
  if (r.size() < magic.size()) throw BadMagicError("not a checkpoint: file shorter than the magic bytes");
  r.get_bytes(magic.data(), magic.size());
  if (magic != kCheckpointMagic) throw BadMagicError("not a checkpoint: bad magic bytes");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw VersionError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                       std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint c;
  c.config = r.get_string();
  const auto count = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = r.get_string(1 << 16);
    const auto dtype = r.get<std::uint8_t>();
    if (dtype != 0) throw CorruptCheckpointError("tensor '" + t.name + "' has unknown dtype " + std::to_string(dtype));
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) throw CorruptCheckpointError("tensor '" + t.name + "' has implausible rank " + std::to_string(rank));
    std::uint64_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const auto d = r.get<std::uint64_t>();
      if (d != 0 && n > (std::uint64_t{1} << 40) / d) throw CorruptCheckpointError("tensor '" + t.name + "' is too large");
      n *= d;
      t.shape.push_back(static_cast<std::size_t>(d));
    }
    t.data = detail::get_floats(r, n);
    c.tensors.push_back(std::move(t));
  }
  c.step = r.get<std::uint64_t>();
  c.rng_state = r.get_string();
  const auto has_opt = r.get<std::uint8_t>();
  if (has_opt > 1) throw CorruptCheckpointError("bad optimizer flag " + std::to_string(has_opt));
  if (has_opt) {
    OptimizerSnapshot o;
    o.step = r.get<std::uint64_t>();
    const auto entries = r.get<std::uint64_t>();
    for (std::uint64_t i = 0; i < entries; ++i) {
      OptimizerSnapshot::Entry e;
      e.name = r.get_string(1 << 16);
      const auto n = r.get<std::uint64_t>();
      e.m = detail::get_floats(r, n);
      e.v = detail::get_floats(r, n);
      o.entries.push_back(std::move(e));
    }
    c.optimizer = std::move(o);
  }
  if (r.remaining() != 0) {
    throw CorruptCheckpointError(std::to_string(r.remaining()) + " unexpected trailing bytes after checkpoint");
  }
  return c;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& c) {
  write_file_bytes(path, serialize_checkpoint(c));
}

inline Checkpoint load_checkpoint(const std::string& path) { return deserialize_checkpoint(read_file_bytes(path)); }

// ---------------------------------------------------------------------------
// Conversion to and from live parameters.

template <typename T>
std::vector<NamedTensor> snapshot_params(const TriEncoderParams<T>& params) {
  std::vector<NamedTensor> out;
  params.for_each([&](const std::string& name, const Tensor<T>& t, ParamRole) {
    NamedTensor n{name, t.shape(), {}};
    n.data.reserve(t.numel());
    for (T v : t.data()) n.data.push_back(static_cast<float>(v));
    out.push_back(std::move(n));
  });
  return out;
}

// Every stored name must exist with the same shape, and every parameter must
// be present.
template <typename T>
void restore_params(TriEncoderParams<T>& params, const std::vector<NamedTensor>& tensors) {
  std::map<std::string, const NamedTensor*> by_name;
  for (const auto& t : tensors) by_name[t.name] = &t;
  std::size_t used = 0;
  params.for_each([&](const std::string& name, Tensor<T>& t, ParamRole) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw UnknownTensorError("checkpoint lacks parameter '" + name + "'");
    if (it->second->shape != t.shape()) {
      throw ShapeMismatchError("parameter '" + name + "' has shape " + shape_str(t.shape()) + " but checkpoint stores " +
                               shape_str(it->second->shape));
    }
    auto d = t.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<T>(it->second->data[i]);
    ++used;
  });
  if (used != by_name.size()) {
    for (const auto& t : tensors) {
      bool known = false;
      params.for_each([&](const std::string& name, const Tensor<T>&, ParamRole) { known = known || name == t.name; });
      if (!known) throw UnknownTensorError("checkpoint holds unknown tensor '" + t.name + "'");
    }
  }
}

template <typename T>
OptimizerSnapshot snapshot_optimizer(const AdamWState<T>& s) {
  OptimizerSnapshot o;
  o.step = s.step;
  for (const auto& [name, m] : s.m) {
    OptimizerSnapshot::Entry e{name, {m.begin(), m.end()}, {}};
    const auto& v = s.v.at(name);
    e.v.assign(v.begin(), v.end());
    o.entries.push_back(std::move(e));
  }
  return o;
}

template <typename T>
void restore_optimizer(AdamWState<T>& s, const OptimizerSnapshot& o) {
  s.step = o.step;
  s.m.clear();
  s.v.clear();
  for (const auto& e : o.entries) {
    s.m[e.name].assign(e.m.begin(), e.m.end());
    s.v[e.name].assign(e.v.begin(), e.v.end());
  }
}

}  // namespace vlmix
