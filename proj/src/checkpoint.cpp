#include "dwmlab/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "dwmlab/errors.hpp"

namespace dwmlab {
namespace io {

void write_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void write_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void write_f32(std::string& out, float v) { write_u32(out, std::bit_cast<std::uint32_t>(v)); }
void write_f64(std::string& out, double v) { write_u64(out, std::bit_cast<std::uint64_t>(v)); }

std::uint32_t read_u32(const unsigned char* p) {
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

std::uint64_t read_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

float read_f32(const unsigned char* p) { return std::bit_cast<float>(read_u32(p)); }
double read_f64(const unsigned char* p) { return std::bit_cast<double>(read_u64(p)); }

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace io

namespace {
constexpr char kMagic[8] = {'D', 'W', 'M', 'C', 'K', 'P', 'T', '1'};
}

const std::vector<double>& Checkpoint::block(const std::string& name) const {
  for (const auto& [n, v] : blocks)
    if (n == name) return v;
  throw FormatError(FormatError::Kind::malformed_header, "checkpoint has no block '" + name + "'");
}

bool Checkpoint::has_block(const std::string& name) const {
  for (const auto& b : blocks)
    if (b.first == name) return true;
  return false;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  nlohmann::json header = ckpt.header;
  header["version"] = kCheckpointVersion;
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& [name, values] : ckpt.blocks) blocks.push_back({{"name", name}, {"count", values.size()}});
  header["blocks"] = blocks;
  if (!header.contains("seed")) header["seed"] = 0;
  const std::string text = header.dump();

  std::string bytes(kMagic, sizeof kMagic);
  io::write_u64(bytes, text.size());
  bytes += text;
  for (const auto& b : ckpt.blocks)
    for (double v : b.second) io::write_f64(bytes, v);
  io::write_file(path, bytes);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw MissingArtifactError("checkpoint not found: " + path.string());
  const std::string bytes = io::read_file(path);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 16) throw FormatError(FormatError::Kind::truncated, "checkpoint truncated: " + path.string());
  if (std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0)
    throw FormatError(FormatError::Kind::bad_magic, "not a checkpoint: " + path.string());
  const std::uint64_t header_len = io::read_u64(p + 8);
  if (16 + header_len > bytes.size())
    throw FormatError(FormatError::Kind::truncated, "checkpoint header truncated: " + path.string());

  Checkpoint ckpt;
  try {
    ckpt.header = nlohmann::json::parse(bytes.substr(16, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatError::Kind::malformed_header, std::string("checkpoint header: ") + e.what());
  }
  if (ckpt.header.value("version", -1) != kCheckpointVersion)
    throw FormatError(FormatError::Kind::version_mismatch, "unsupported checkpoint version in " + path.string());

  std::size_t expected = 0;
  for (const auto& b : ckpt.header.at("blocks")) expected += b.at("count").get<std::size_t>();
  const std::size_t payload = bytes.size() - 16 - header_len;
  if (payload < expected * 8)
    throw FormatError(FormatError::Kind::truncated, "checkpoint payload truncated: " + path.string());
  if (payload != expected * 8)
    throw FormatError(FormatError::Kind::count_mismatch, "checkpoint payload size disagrees with header: " + path.string());

  const unsigned char* cur = p + 16 + header_len;
  for (const auto& b : ckpt.header.at("blocks")) {
    std::vector<double> values(b.at("count").get<std::size_t>());
    for (double& v : values) {
      v = io::read_f64(cur);
      cur += 8;
    }
    ckpt.blocks.emplace_back(b.at("name").get<std::string>(), std::move(values));
  }
  return ckpt;
}

nlohmann::json arch_to_json(const MlpArch& arch) {
  return {{"sizes", arch.sizes}, {"hidden", to_string(arch.hidden)}, {"output", to_string(arch.output)}};
}

MlpArch arch_from_json(const nlohmann::json& j) {
  MlpArch a;
  a.sizes = j.at("sizes").get<std::vector<std::size_t>>();
  a.hidden = activation_from_string(j.at("hidden").get<std::string>());
  a.output = activation_from_string(j.at("output").get<std::string>());
  return a;
}

}  // namespace dwmlab
