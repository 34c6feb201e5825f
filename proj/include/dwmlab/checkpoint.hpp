#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dwmlab/mlp.hpp"

namespace dwmlab {

/// Named parameter blocks plus a free-form JSON header.
///
/// File layout: 8-byte magic "DWMCKPT1", u64 little-endian header length,
/// UTF-8 JSON header, then every block's values as little-endian f64 in
/// header order. The header always carries "version", "blocks" (name and
/// count per block) and "seed".
struct Checkpoint {
  nlohmann::json header = nlohmann::json::object();
  std::vector<std::pair<std::string, std::vector<double>>> blocks;

  void add(std::string name, std::vector<double> values) { blocks.emplace_back(std::move(name), std::move(values)); }
  /// Throws FormatError(malformed_header) when absent.
  const std::vector<double>& block(const std::string& name) const;
  bool has_block(const std::string& name) const;
};

inline constexpr int kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

nlohmann::json arch_to_json(const MlpArch& arch);
MlpArch arch_from_json(const nlohmann::json& j);

namespace io {

void write_u32(std::string& out, std::uint32_t v);
void write_u64(std::string& out, std::uint64_t v);
void write_f32(std::string& out, float v);
void write_f64(std::string& out, double v);
std::uint32_t read_u32(const unsigned char* p);
std::uint64_t read_u64(const unsigned char* p);
float read_f32(const unsigned char* p);
double read_f64(const unsigned char* p);

std::string read_file(const std::filesystem::path& path);
/// Writes through a temporary file and renames, so readers never see a partial artifact.
void write_file(const std::filesystem::path& path, const std::string& bytes);

}  // namespace io
}  // namespace dwmlab
