#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "mfpam/model.hpp"

namespace mfpam {

inline constexpr char kCheckpointMagic[4] = {'M', 'F', 'P', 'M'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Layout, all integers little-endian:
//   "MFPM" | u32 version | u32 config bytes | config text | u64 float count |
//   f32 values in parameter order
namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  Reader(const std::string& buf, std::string origin) : buf_(buf), origin_(std::move(origin)) {}

  const unsigned char* take(std::size_t n, const char* what) {
    if (buf_.size() - pos_ < n)
      throw FormatError(origin_ + ": truncated checkpoint while reading " + what);
    auto p = reinterpret_cast<const unsigned char*>(buf_.data() + pos_);
    pos_ += n;
    return p;
  }
  std::uint32_t u32(const char* what) {
    auto p = take(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(p[i]) << (8 * i);
    return v;
  }
  std::uint64_t u64(const char* what) {
    auto p = take(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(p[i]) << (8 * i);
    return v;
  }
  std::size_t remaining() const { return buf_.size() - pos_; }

 private:
  const std::string& buf_;
  std::string origin_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// One line per parameter: name, float offset into the blob, shape.
template <typename T>
std::string checkpoint_manifest(const MfPam<T>& model) {
  std::ostringstream os;
  os << "name,offset,shape\n";
  std::size_t offset = 0;
  for (const auto& p : model.parameters()) {
    std::string shape;
    for (std::size_t i = 0; i < p.value().rank(); ++i)
      shape += (i ? "x" : "") + std::to_string(p.value().extent(i));
    os << p.name << ',' << offset << ',' << shape << '\n';
    offset += p.numel();
  }
  return os.str();
}

template <typename T>
std::string serialize_checkpoint(const MfPam<T>& model) {
  std::string out(kCheckpointMagic, 4);
  detail::put_u32(out, kCheckpointVersion);
  const std::string cfg = model.config().to_text();
  detail::put_u32(out, std::uint32_t(cfg.size()));
  out += cfg;
  detail::put_u64(out, model.parameter_count());
  for (const auto& p : model.parameters())
    for (T v : p.value().data()) detail::put_u32(out, std::bit_cast<std::uint32_t>(float(v)));
  return out;
}

template <typename T>
MfPam<T> deserialize_checkpoint(const std::string& buf, const std::string& origin = "checkpoint") {
  detail::Reader r(buf, origin);
  auto magic = r.take(4, "magic");
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw FormatError(origin + ": bad magic (not an MF-PAM checkpoint)");
  const auto version = r.u32("version");
  if (version != kCheckpointVersion)
    throw FormatError(origin + ": unsupported checkpoint version " + std::to_string(version) +
                      " (expected " + std::to_string(kCheckpointVersion) + ")");
  const auto cfg_len = r.u32("config length");
  auto cfg_bytes = r.take(cfg_len, "config text");
  auto kv = KeyValueFile::parse(std::string(reinterpret_cast<const char*>(cfg_bytes), cfg_len),
                                origin + " config");
  ModelConfig cfg = ModelConfig::from_section(kv);
  kv.reject_unknown({"model"});
  MfPam<T> model(cfg);
  const auto count = r.u64("parameter count");
  if (count != model.parameter_count())
    throw FormatError(origin + ": blob holds " + std::to_string(count) +
                      " values but the embedded config needs " +
                      std::to_string(model.parameter_count()));
  if (r.remaining() != 4 * count)
    throw FormatError(origin + ": truncated or oversized parameter blob (" +
                      std::to_string(r.remaining()) + " bytes for " + std::to_string(count) +
                      " floats)");
  for (auto& p : model.parameters())
    for (T& v : p.value().storage()) v = T(std::bit_cast<float>(r.u32("parameters")));
  return model;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write '" + path + "'");
  out.write(bytes.data(), std::streamsize(bytes.size()));
  if (!out) throw FormatError("write failed for '" + path + "'");
}

/// Writes `path` and `path.manifest.csv`.
template <typename T>
void save_checkpoint(const MfPam<T>& model, const std::string& path) {
  write_file(path, serialize_checkpoint(model));
  write_file(path + ".manifest.csv", checkpoint_manifest(model));
}

template <typename T>
MfPam<T> load_checkpoint(const std::string& path) {
  return deserialize_checkpoint<T>(read_file(path), path);
}

}  // namespace mfpam
