#pragma once

// Run configuration: one JSON document with a versioned schema id. Every
// object is read strictly; an unknown key anywhere is a configuration error.
// Missing keys keep their defaults, and the fully resolved document is what
// gets written next to a run's outputs.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <set>
#include <string>
#include <vector>

#include "bard/bridge.hpp"
#include "bard/decode.hpp"
#include "bard/errors.hpp"
#include "bard/rng.hpp"

namespace bard {

inline constexpr const char* kRunSchema = "bard.run/v1";

struct NamedPolicy {
  std::string id;
  DecodePolicy policy;
};

struct RunConfig {
  BridgeConfig bridge{};
  std::vector<NamedPolicy> policies;
  std::string output_dir = "runs/default";
  std::string run_id = "default";
};

namespace detail {

using nlohmann::json;

class StrictObject {
 public:
  StrictObject(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
  }
  ~StrictObject() = default;

  template <typename T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError(where_ + ": unknown key '" + it.key() + "'");
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

inline void read_phase(const json& j, const std::string& where, PhaseSettings& p) {
  StrictObject o(j, where);
  o.read("batch", p.batch);
  o.read("peak_lr", p.peak_lr);
  o.read("floor_lr", p.floor_lr);
  o.read("warmup", p.warmup);
  o.read("weight_decay", p.adam.weight_decay);
  o.read("clip_norm", p.adam.clip_norm);
  o.read("beta1", p.adam.beta1);
  o.read("beta2", p.adam.beta2);
  o.finish();
}

inline json phase_json(const PhaseSettings& p) {
  return {{"batch", p.batch},       {"peak_lr", p.peak_lr},      {"floor_lr", p.floor_lr},
          {"warmup", p.warmup},     {"weight_decay", p.adam.weight_decay}, {"clip_norm", p.adam.clip_norm},
          {"beta1", p.adam.beta1},  {"beta2", p.adam.beta2}};
}

}  // namespace detail

/// Sizes the net's vocabulary and position table from the task.
inline void fit_net_to_task(BridgeConfig& b) {
  b.net.vocab_total = b.task.vocab.total();
  b.net.max_positions = b.task.context_len() + b.task.response_len();
}

inline RunConfig parse_run_config(const nlohmann::json& j) {
  using detail::StrictObject;
  RunConfig rc;
  BridgeConfig& b = rc.bridge;
  StrictObject root(j, "config");
  std::string schema;
  root.read("schema", schema);
  if (schema != kRunSchema) throw ConfigError("config: schema must be \"" + std::string(kRunSchema) + "\", got \"" + schema + "\"");
  root.read("output_dir", rc.output_dir);
  root.read("run_id", rc.run_id);

  if (const auto* t = root.child("task")) {
    StrictObject o(*t, "task");
    o.read("num_pairs", b.task.num_pairs);
    o.read("num_queries", b.task.num_queries);
    o.read("value_len", b.task.value_len);
    o.read("echo_key", b.task.echo_key);
    o.read("vocab_size", b.task.vocab.size);
    o.read("seed", b.task.seed);
    o.finish();
  }
  if (const auto* n = root.child("net")) {
    StrictObject o(*n, "net");
    o.read("layers", b.net.layers);
    o.read("model_dim", b.net.model_dim);
    o.read("heads", b.net.heads);
    o.read("ff_dim", b.net.ff_dim);
    std::string precision = to_string(b.net.precision);
    o.read("precision", precision);
    b.net.precision = parse_precision(precision);
    o.finish();
  }
  if (const auto* s = root.child("seeds")) {
    StrictObject o(*s, "seeds");
    o.read("init", b.seeds.init);
    o.read("data", b.seeds.data);
    o.read("noise", b.seeds.noise);
    o.finish();
  }
  if (const auto* br = root.child("bridge")) {
    StrictObject o(*br, "bridge");
    o.read("block_schedule", b.block_schedule);
    o.read("ar_steps", b.ar_steps);
    o.read("stage_steps", b.stage_steps);
    o.read("distill_steps", b.distill_steps);
    if (const auto* d = o.child("direct_steps"); d && !d->is_null()) {
      try {
        b.direct_steps = d->get<std::vector<int>>();
      } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bridge.direct_steps: ") + e.what());
      }
    }
    std::string noise = to_string(b.noise), objective = to_string(b.stage_objective), strategy = to_string(b.strategy),
                teacher = to_string(b.distill_teacher);
    o.read("noise", noise);
    o.read("objective", objective);
    o.read("strategy", strategy);
    o.read("distill_teacher", teacher);
    b.noise = parse_noise_mode(noise);
    b.stage_objective = parse_objective(objective);
    b.strategy = parse_strategy(strategy);
    b.distill_teacher = parse_distill_teacher(teacher);
    o.read("tau", b.kd.tau);
    o.read("stages", b.stages);
    o.read("train_size", b.train_size);
    o.read("distill_fraction", b.distill_fraction);
    o.read("eval_examples", b.eval_examples);
    o.read("eval_threshold", b.eval_threshold);
    o.read("log_every", b.log_every);
    if (const auto* ph = o.child("phases")) {
      StrictObject po(*ph, "bridge.phases");
      if (const auto* a = po.child("ar")) detail::read_phase(*a, "bridge.phases.ar", b.ar_phase);
      if (const auto* a = po.child("stage")) detail::read_phase(*a, "bridge.phases.stage", b.stage_phase);
      if (const auto* a = po.child("distill")) detail::read_phase(*a, "bridge.phases.distill", b.distill_phase);
      po.finish();
    }
    o.finish();
  }
  if (const auto* d = root.child("decode")) {
    if (!d->is_array()) throw ConfigError("decode: expected an array of policies");
    for (std::size_t i = 0; i < d->size(); ++i) {
      StrictObject o((*d)[i], "decode[" + std::to_string(i) + "]");
      NamedPolicy np;
      o.read("id", np.id);
      o.read("block_size", np.policy.block_size);
      o.read("threshold", np.policy.threshold);
      o.read("max_steps", np.policy.max_steps_per_block);
      o.read("revision", np.policy.revision_enabled);
      o.finish();
      if (np.id.empty()) np.id = "B" + std::to_string(np.policy.block_size) + "_eta" + std::to_string(np.policy.threshold);
      rc.policies.push_back(np);
    }
  }
  root.finish();

  if (!b.block_schedule.empty()) b.kd.teacher_block = b.block_schedule.front();
  fit_net_to_task(b);
  b.validate();
  for (const auto& p : rc.policies) p.policy.validate(b.task.response_len());
  return rc;
}

inline nlohmann::json to_json(const RunConfig& rc) {
  const BridgeConfig& b = rc.bridge;
  nlohmann::json policies = nlohmann::json::array();
  for (const auto& p : rc.policies)
    policies.push_back({{"id", p.id},
                        {"block_size", p.policy.block_size},
                        {"threshold", p.policy.threshold},
                        {"max_steps", p.policy.max_steps_per_block},
                        {"revision", p.policy.revision_enabled}});
  return {
      {"schema", kRunSchema},
      {"run_id", rc.run_id},
      {"output_dir", rc.output_dir},
      {"task",
       {{"num_pairs", b.task.num_pairs},
        {"num_queries", b.task.num_queries},
        {"value_len", b.task.value_len},
        {"echo_key", b.task.echo_key},
        {"vocab_size", b.task.vocab.size},
        {"seed", b.task.seed}}},
      {"net",
       {{"layers", b.net.layers},
        {"model_dim", b.net.model_dim},
        {"heads", b.net.heads},
        {"ff_dim", b.net.ff_dim},
        {"precision", to_string(b.net.precision)}}},
      {"seeds", {{"init", b.seeds.init}, {"data", b.seeds.data}, {"noise", b.seeds.noise}}},
      {"bridge",
       {{"block_schedule", b.block_schedule},
        {"ar_steps", b.ar_steps},
        {"stage_steps", b.stage_steps},
        {"distill_steps", b.distill_steps},
        {"direct_steps", b.direct_steps ? nlohmann::json(*b.direct_steps) : nlohmann::json(nullptr)},
        {"noise", to_string(b.noise)},
        {"objective", to_string(b.stage_objective)},
        {"strategy", to_string(b.strategy)},
        {"distill_teacher", to_string(b.distill_teacher)},
        {"tau", b.kd.tau},
        {"stages", b.stages},
        {"train_size", b.train_size},
        {"distill_fraction", b.distill_fraction},
        {"eval_examples", b.eval_examples},
        {"eval_threshold", b.eval_threshold},
        {"log_every", b.log_every},
        {"phases",
         {{"ar", detail::phase_json(b.ar_phase)},
          {"stage", detail::phase_json(b.stage_phase)},
          {"distill", detail::phase_json(b.distill_phase)}}}}},
      {"decode", policies},
  };
}

inline RunConfig default_run_config() { return parse_run_config({{"schema", kRunSchema}}); }

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_run_config(j);
}

/// Short stable hash of the resolved config, recorded with every metric.
inline std::string config_hash(const RunConfig& rc) {
  const std::string s = to_json(rc).dump();
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(s.data(), s.size())));
  return buf;
}

}  // namespace bard
