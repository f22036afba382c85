#pragma once

// Weight checkpoint container, all integers little-endian:
//
//   magic     8 bytes  "QSRCKPT\0"
//   version   u32      (1)
//   meta_len  u32      length of a UTF-8 metadata document
//   meta      bytes
//   count     u32      number of arrays
//   per array:
//     name_len u32, name bytes
//     rank     u32, extents u64 x rank
//     values   f32 x prod(extents)
//
// Arrays are stored in insertion order, so identical bytes mean an
// identical model.

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "qsr/autodiff/tensor.hpp"

namespace qsr::ad {

inline constexpr char checkpoint_magic[8] = {'Q', 'S', 'R', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t checkpoint_version = 1;

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  std::string metadata;
  std::vector<NamedArray> arrays;

  const NamedArray& find(const std::string& name) const {
    for (const auto& a : arrays)
      if (a.name == name) return a;
    throw CheckpointError("checkpoint has no array named '" + name + "'");
  }
};

namespace ckpt_detail {

template <typename U>
void put(std::string& out, U v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<char, sizeof(U)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    out.append(bytes.data(), bytes.size());
  } else {
    char buf[sizeof(U)];
    std::memcpy(buf, &v, sizeof(U));
    out.append(buf, sizeof(U));
  }
}

class Reader {
 public:
  explicit Reader(const std::string& s) : s_(s) {}

  template <typename U>
  U get() {
    need(sizeof(U));
    U v;
    std::memcpy(&v, s_.data() + pos_, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) {
      auto bytes = std::bit_cast<std::array<char, sizeof(U)>>(v);
      std::reverse(bytes.begin(), bytes.end());
      v = std::bit_cast<U>(bytes);
    }
    pos_ += sizeof(U);
    return v;
  }

  std::string bytes(std::size_t n) {
    need(n);
    std::string out = s_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  bool done() const noexcept { return pos_ == s_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > s_.size()) throw CheckpointError("checkpoint truncated");
  }
  const std::string& s_;
  std::size_t pos_ = 0;
};

}  // namespace ckpt_detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  using ckpt_detail::put;
  std::string out(checkpoint_magic, sizeof(checkpoint_magic));
  put<std::uint32_t>(out, checkpoint_version);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ck.metadata.size()));
  out += ck.metadata;
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ck.arrays.size()));
  for (const auto& a : ck.arrays) {
    if (numel(a.shape) != a.values.size()) throw CheckpointError("array '" + a.name + "' shape/value mismatch");
    put<std::uint32_t>(out, static_cast<std::uint32_t>(a.name.size()));
    out += a.name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(a.shape.size()));
    for (auto e : a.shape) put<std::uint64_t>(out, e);
    for (float v : a.values) put<float>(out, v);
  }
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  ckpt_detail::Reader r(bytes);
  if (r.bytes(sizeof(checkpoint_magic)) != std::string(checkpoint_magic, sizeof(checkpoint_magic)))
    throw CheckpointError("not a checkpoint file (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != checkpoint_version)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  ck.metadata = r.bytes(r.get<std::uint32_t>());
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedArray a;
    a.name = r.bytes(r.get<std::uint32_t>());
    const auto rank = r.get<std::uint32_t>();
    for (std::uint32_t d = 0; d < rank; ++d) a.shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>()));
    a.values.resize(numel(a.shape));
    for (auto& v : a.values) v = r.get<float>();
    ck.arrays.push_back(std::move(a));
  }
  if (!r.done()) throw CheckpointError("trailing bytes after checkpoint");
  return ck;
}

inline void write_checkpoint(const std::string& path, const Checkpoint& ck) {
  const auto bytes = serialize_checkpoint(ck);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write '" + path + "'");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return deserialize_checkpoint(ss.str());
}

}  // namespace qsr::ad
