#pragma once

#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "mutdet/corpus.hpp"
#include "mutdet/rng.hpp"
#include "mutdet/synth.hpp"

namespace support {

inline void write_toy_corpus(const std::filesystem::path& dir, std::size_t train_size = 2000,
                             std::size_t val_size = 1000, std::uint64_t seed = 1) {
  mutdet::synth::write_toy_corpus(dir, train_size, val_size, seed);
}

inline nlohmann::json read_json_file(const std::filesystem::path& p) {
  std::ifstream in(p);
  return nlohmann::json::parse(in);
}

inline void write_json_file(const std::filesystem::path& p, const nlohmann::json& j) {
  std::ofstream out(p);
  out << j.dump(2) << '\n';
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Fresh directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("mutdet-" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace support
