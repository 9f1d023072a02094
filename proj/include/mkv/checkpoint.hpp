#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "mkv/config.hpp"
#include "mkv/errors.hpp"
#include "mkv/mat.hpp"

namespace mkv {

// Binary tensor container shared by model checkpoints and projection banks.
//
//   magic "MKV1" | kind u8 | n_layers n_heads n_kv_heads head_dim vocab
//   context (all u32 LE) | rope_base f64 LE | tensor* until EOF
//   tensor := name_len u32 | name bytes | rows u32 | cols u32 | f64 LE data
//
// Doubles are serialized through their IEEE bit pattern, so a round trip is
// bit-exact.

enum class CkptKind : uint8_t { weights = 1, bank = 2 };

struct TensorEntry {
  std::string name;
  Mat mat;
};

struct TensorFile {
  CkptKind kind = CkptKind::weights;
  ModelConfig config;
  std::vector<TensorEntry> tensors;

  const Mat* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t.mat;
    return nullptr;
  }
};

namespace detail {

inline void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}
inline void put_f64(std::string& out, double d) {
  const uint64_t v = std::bit_cast<uint64_t>(d);
  for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

class ByteReader {
 public:
  ByteReader(const std::string& buf, const std::string& path) : buf_(buf), path_(path) {}
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= uint32_t(uint8_t(buf_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  double f64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= uint64_t(uint8_t(buf_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return std::bit_cast<double>(v);
  }
  uint8_t u8() {
    need(1);
    return uint8_t(buf_[pos_++]);
  }
  std::string bytes(size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool at_end() const { return pos_ == buf_.size(); }

 private:
  void need(size_t n) {
    if (pos_ + n > buf_.size()) throw IoError(path_ + ": truncated file");
  }
  const std::string& buf_;
  std::string path_;
  size_t pos_ = 0;
};

}  // namespace detail

inline void write_tensor_file(const std::string& path, CkptKind kind, const ModelConfig& cfg,
                              const std::vector<TensorEntry>& tensors) {
  std::string out;
  out += "MKV1";
  out.push_back(char(kind));
  detail::put_u32(out, uint32_t(cfg.n_layers));
  detail::put_u32(out, uint32_t(cfg.n_heads));
  detail::put_u32(out, uint32_t(cfg.n_kv_heads));
  detail::put_u32(out, uint32_t(cfg.head_dim));
  detail::put_u32(out, uint32_t(cfg.vocab));
  detail::put_u32(out, uint32_t(cfg.context));
  detail::put_f64(out, cfg.rope_base);
  for (const auto& t : tensors) {
    detail::put_u32(out, uint32_t(t.name.size()));
    out += t.name;
    detail::put_u32(out, uint32_t(t.mat.rows()));
    detail::put_u32(out, uint32_t(t.mat.cols()));
    for (double v : t.mat.data()) detail::put_f64(out, v);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError(path + ": cannot open for writing");
  f.write(out.data(), std::streamsize(out.size()));
  if (!f) throw IoError(path + ": write failed");
}

inline TensorFile read_tensor_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError(path + ": cannot open");
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  detail::ByteReader r(buf, path);

  if (r.bytes(4) != "MKV1") throw FormatVersionMismatch(path + ": bad magic, not an MKV1 file");
  TensorFile tf;
  const uint8_t kind = r.u8();
  if (kind != uint8_t(CkptKind::weights) && kind != uint8_t(CkptKind::bank))
    throw FormatVersionMismatch(path + ": unknown checkpoint kind " + std::to_string(kind));
  tf.kind = CkptKind(kind);
  tf.config.n_layers = int(r.u32());
  tf.config.n_heads = int(r.u32());
  tf.config.n_kv_heads = int(r.u32());
  tf.config.head_dim = int(r.u32());
  tf.config.vocab = int(r.u32());
  tf.config.context = int(r.u32());
  tf.config.rope_base = r.f64();
  tf.config.validate();

  while (!r.at_end()) {
    TensorEntry t;
    const uint32_t name_len = r.u32();
    if (name_len > 4096) throw IoError(path + ": implausible tensor name length");
    t.name = r.bytes(name_len);
    const uint32_t rows = r.u32();
    const uint32_t cols = r.u32();
    if (rows == 0 || cols == 0 || uint64_t(rows) * cols > (1u << 28))
      throw IoError(path + ": implausible tensor shape in " + t.name);
    t.mat = Mat(int(rows), int(cols));
    for (auto& v : t.mat.data()) v = r.f64();
    tf.tensors.push_back(std::move(t));
  }
  return tf;
}

inline TensorFile read_tensor_file(const std::string& path, CkptKind expected) {
  TensorFile tf = read_tensor_file(path);
  if (tf.kind != expected)
    throw FormatVersionMismatch(path + ": expected " +
                                (expected == CkptKind::weights ? std::string("model checkpoint")
                                                               : std::string("projection bank")) +
                                ", found the other kind");
  return tf;
}

}  // namespace mkv
