#pragma once

#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <string>

#include "bard/errors.hpp"

namespace bard {

/// Append-only JSONL log, one compact record per line, flushed per record.
class MetricsLog {
 public:
  MetricsLog() = default;
  MetricsLog(const std::filesystem::path& path, std::string run_id, std::string config_hash)
      : run_id_(std::move(run_id)), config_hash_(std::move(config_hash)) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    out_.open(path, std::ios::app | std::ios::binary);
    if (!out_) throw IoError("cannot open metrics log " + path.string());
  }

  bool is_open() const { return out_.is_open(); }

  void write(const std::string& phase, int step, const nlohmann::json& metrics, double wall_ms) {
    if (!out_.is_open()) return;
    nlohmann::json rec = {{"run_id", run_id_},   {"phase", phase},        {"step", step},
                          {"metrics", metrics},  {"wall_ms", wall_ms},    {"config_hash", config_hash_}};
    out_ << rec.dump() << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
  std::string run_id_;
  std::string config_hash_;
};

}  // namespace bard
