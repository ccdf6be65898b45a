#pragma once

// Flat binary weight container shared by classifier and detector files.
//
//   u8  version (=1)
//   u8  kind
//   u32 dim count, then u32 dims[]
//   u32 extra count, then f32 extras[]
//   u64 parameter count, then f32 params[] in declaration order
//
// All integers and floats little-endian.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "mutdet/error.hpp"

namespace mutdet {

enum class WeightKind : std::uint8_t { Classifier = 1, Detector = 2 };

struct WeightFile {
  static constexpr std::uint8_t kVersion = 1;

  WeightKind kind = WeightKind::Classifier;
  std::vector<std::uint32_t> dims;
  std::vector<float> extras;
  std::vector<float> params;
};

namespace detail {

template <typename U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

template <typename U>
U get_le(const std::string& in, std::size_t& pos, const std::string& what) {
  if (pos + sizeof(U) > in.size()) throw ParseError("truncated weight file reading " + what);
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    v |= static_cast<U>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  }
  pos += sizeof(U);
  return v;
}

}  // namespace detail

inline std::string serialize(const WeightFile& wf) {
  std::string out;
  out.reserve(16 + 4 * (wf.dims.size() + wf.extras.size() + wf.params.size()));
  out.push_back(static_cast<char>(WeightFile::kVersion));
  out.push_back(static_cast<char>(wf.kind));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(wf.dims.size()));
  for (auto d : wf.dims) detail::put_le<std::uint32_t>(out, d);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(wf.extras.size()));
  for (float x : wf.extras) detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(x));
  detail::put_le<std::uint64_t>(out, wf.params.size());
  for (float x : wf.params) detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(x));
  return out;
}

inline WeightFile deserialize(const std::string& bytes) {
  std::size_t pos = 0;
  const auto version = detail::get_le<std::uint8_t>(bytes, pos, "version");
  if (version != WeightFile::kVersion) {
    throw ParseError("unsupported weight file version " + std::to_string(version));
  }
  WeightFile wf;
  wf.kind = static_cast<WeightKind>(detail::get_le<std::uint8_t>(bytes, pos, "kind"));
  const auto ndims = detail::get_le<std::uint32_t>(bytes, pos, "dim count");
  for (std::uint32_t i = 0; i < ndims; ++i) wf.dims.push_back(detail::get_le<std::uint32_t>(bytes, pos, "dims"));
  const auto nextra = detail::get_le<std::uint32_t>(bytes, pos, "extra count");
  for (std::uint32_t i = 0; i < nextra; ++i) {
    wf.extras.push_back(std::bit_cast<float>(detail::get_le<std::uint32_t>(bytes, pos, "extras")));
  }
  const auto nparams = detail::get_le<std::uint64_t>(bytes, pos, "parameter count");
  if (nparams > (bytes.size() - pos) / 4) throw ParseError("truncated weight file reading params");
  wf.params.reserve(nparams);
  for (std::uint64_t i = 0; i < nparams; ++i) {
    wf.params.push_back(std::bit_cast<float>(detail::get_le<std::uint32_t>(bytes, pos, "params")));
  }
  if (pos != bytes.size()) throw ParseError("trailing bytes in weight file");
  return wf;
}

inline void write_weight_file(const std::filesystem::path& path, const WeightFile& wf) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  const auto bytes = serialize(wf);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline WeightFile read_weight_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open weight file " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

}  // namespace mutdet
