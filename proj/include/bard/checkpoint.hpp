#pragma once

// Checkpoint file:
//   "BARDCKP1"                      8 bytes
//   header length H                 u64 little-endian
//   header                          H bytes of compact JSON
//   blob length                     u64 little-endian, in bytes
//   blob                            parameters, little-endian f32 or f64
//
// The header carries the net config, stage metadata, lineage and seeds.
// Loading and re-saving reproduces the file byte for byte.

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "bard/errors.hpp"
#include "bard/net.hpp"
#include "bard/rng.hpp"

namespace bard {

inline constexpr char kCheckpointMagic[8] = {'B', 'A', 'R', 'D', 'C', 'K', 'P', '1'};
inline constexpr const char* kCheckpointFormat = "bard.checkpoint/v1";

struct StageMeta {
  int stage_index = 0;  // 0 for the AR source model
  int block_size = 0;   // 0 for the AR source model
  std::string objective = "ar";
  std::string phase = "pretrain";  // pretrain | train | distill
  std::string noise = "none";
};

struct Lineage {
  std::string id;
  std::string init;     // checkpoint this one was initialized from ("" for fresh init)
  std::string teacher;  // frozen teacher used by a distill phase ("" otherwise)
  std::vector<std::string> chain;  // ids from the root to this checkpoint
};

template <typename Scalar>
struct Checkpoint {
  Params<Scalar> params;
  StageMeta stage;
  Lineage lineage;
  nlohmann::json seeds = nlohmann::json::object();
  nlohmann::json metrics = nlohmann::json::object();
};

inline nlohmann::json to_json(const NetConfig& c) {
  return {{"layers", c.layers},       {"model_dim", c.model_dim},         {"heads", c.heads},
          {"ff_dim", c.ff_dim},       {"vocab_total", c.vocab_total},     {"max_positions", c.max_positions},
          {"init_seed", c.init_seed}, {"precision", to_string(c.precision)}};
}

inline NetConfig net_config_from_json(const nlohmann::json& j) {
  NetConfig c;
  c.layers = j.at("layers").get<int>();
  c.model_dim = j.at("model_dim").get<int>();
  c.heads = j.at("heads").get<int>();
  c.ff_dim = j.at("ff_dim").get<int>();
  c.vocab_total = j.at("vocab_total").get<int>();
  c.max_positions = j.at("max_positions").get<int>();
  c.init_seed = j.at("init_seed").get<std::uint64_t>();
  c.precision = parse_precision(j.at("precision").get<std::string>());
  c.validate();
  return c;
}

template <typename Scalar>
constexpr Precision precision_of() {
  static_assert(std::is_same_v<Scalar, float> || std::is_same_v<Scalar, double>);
  return std::is_same_v<Scalar, float> ? Precision::kF32 : Precision::kF64;
}

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64(const std::string& in, std::size_t at) {
  if (at + 8 > in.size()) throw IoError("checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + static_cast<std::size_t>(i)])) << (8 * i);
  return v;
}

template <typename Scalar>
void put_values(std::string& out, std::span<const Scalar> values) {
  using Bits = std::conditional_t<sizeof(Scalar) == 4, std::uint32_t, std::uint64_t>;
  for (Scalar x : values) {
    const Bits b = std::bit_cast<Bits>(x);
    for (std::size_t i = 0; i < sizeof(Bits); ++i) out.push_back(static_cast<char>((b >> (8 * i)) & 0xff));
  }
}

template <typename Scalar>
FlatVector<Scalar> get_values(const std::string& in, std::size_t at, std::size_t count) {
  using Bits = std::conditional_t<sizeof(Scalar) == 4, std::uint32_t, std::uint64_t>;
  if (at + count * sizeof(Bits) > in.size()) throw IoError("checkpoint blob truncated");
  FlatVector<Scalar> out(count);
  for (std::size_t k = 0; k < count; ++k) {
    Bits b = 0;
    for (std::size_t i = 0; i < sizeof(Bits); ++i)
      b |= static_cast<Bits>(static_cast<unsigned char>(in[at + k * sizeof(Bits) + i])) << (8 * i);
    out[k] = std::bit_cast<Scalar>(b);
  }
  return out;
}

}  // namespace detail

template <typename Scalar>
nlohmann::json checkpoint_header(const Checkpoint<Scalar>& ck) {
  nlohmann::json h;
  h["format"] = kCheckpointFormat;
  NetConfig net = ck.params.config;
  net.precision = precision_of<Scalar>();
  h["net"] = to_json(net);
  h["param_count"] = ck.params.values.size();
  h["stage"] = {{"stage_index", ck.stage.stage_index},
                {"block_size", ck.stage.block_size},
                {"objective", ck.stage.objective},
                {"phase", ck.stage.phase},
                {"noise", ck.stage.noise}};
  h["lineage"] = {{"id", ck.lineage.id}, {"init", ck.lineage.init}, {"teacher", ck.lineage.teacher}, {"chain", ck.lineage.chain}};
  h["seeds"] = ck.seeds;
  h["metrics"] = ck.metrics;
  return h;
}

template <typename Scalar>
std::string serialize_checkpoint(const Checkpoint<Scalar>& ck) {
  const std::string header = checkpoint_header(ck).dump();
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put_u64(out, header.size());
  out += header;
  detail::put_u64(out, ck.params.values.size() * sizeof(Scalar));
  detail::put_values(out, std::span<const Scalar>(ck.params.values));
  return out;
}

inline nlohmann::json parse_checkpoint_header(const std::string& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) throw IoError("not a checkpoint file (bad magic)");
  const std::uint64_t hlen = detail::get_u64(bytes, 8);
  if (16 + hlen > bytes.size()) throw IoError("checkpoint header truncated");
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(bytes.substr(16, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  if (h.value("format", "") != kCheckpointFormat) throw IoError("unsupported checkpoint format");
  return h;
}

template <typename Scalar>
Checkpoint<Scalar> deserialize_checkpoint(const std::string& bytes) {
  const nlohmann::json h = parse_checkpoint_header(bytes);
  Checkpoint<Scalar> ck;
  try {
    ck.params.config = net_config_from_json(h.at("net"));
    if (ck.params.config.precision != precision_of<Scalar>())
      throw IoError("checkpoint precision " + to_string(ck.params.config.precision) + " does not match the requested one");
    const auto& s = h.at("stage");
    ck.stage = {s.at("stage_index").get<int>(), s.at("block_size").get<int>(), s.at("objective").get<std::string>(),
                s.at("phase").get<std::string>(), s.at("noise").get<std::string>()};
    const auto& l = h.at("lineage");
    ck.lineage = {l.at("id").get<std::string>(), l.at("init").get<std::string>(), l.at("teacher").get<std::string>(),
                  l.at("chain").get<std::vector<std::string>>()};
    ck.seeds = h.at("seeds");
    ck.metrics = h.at("metrics");
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed checkpoint header: ") + e.what());
  }
  const std::size_t at = 16 + detail::get_u64(bytes, 8);
  const std::uint64_t blob = detail::get_u64(bytes, at);
  const std::size_t count = h.at("param_count").get<std::size_t>();
  if (blob != count * sizeof(Scalar)) throw IoError("checkpoint blob size does not match param_count");
  if (at + 8 + blob != bytes.size()) throw IoError("checkpoint has trailing bytes");
  if (count != ParamLayout(ck.params.config).total) throw IoError("param_count does not match the net config");
  ck.params.values = detail::get_values<Scalar>(bytes, at + 8, count);
  return ck;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

template <typename Scalar>
void save_checkpoint(const std::filesystem::path& path, const Checkpoint<Scalar>& ck) {
  write_file(path, serialize_checkpoint(ck));
}

template <typename Scalar>
Checkpoint<Scalar> load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint<Scalar>(read_file(path));
}

inline Precision checkpoint_precision(const std::filesystem::path& path) {
  return parse_precision(parse_checkpoint_header(read_file(path)).at("net").at("precision").get<std::string>());
}

/// Content fingerprint of a checkpoint file, hex encoded.
inline std::string file_fingerprint(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a64(bytes.data(), bytes.size())));
  return buf;
}

}  // namespace bard
