#pragma once

// Autoregressive-to-block-diffusion bridge:
//
//   phi        AR pretraining with next-token loss
//   theta(1)   phi trained at the anchor block size B_1
//   for k >= 2:
//     theta~(k)  theta(k-1) trained at B_k
//     theta(k)   theta~(k) distilled from the frozen theta(1) at B_k
//
// Every random choice (example order, t, corruption, init) is a pure function
// of a seed and a counter tuple, so a phase can be re-run or resumed from any
// stored checkpoint and reproduce the same bytes.

#include <chrono>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "bard/checkpoint.hpp"
#include "bard/errors.hpp"
#include "bard/eval.hpp"
#include "bard/noise.hpp"
#include "bard/objectives.hpp"
#include "bard/optimizer.hpp"
#include "bard/synth_task.hpp"
#include "bard/training.hpp"

namespace bard {

struct PhaseSettings {
  int batch = 32;
  double peak_lr = 3e-3;
  double floor_lr = 1e-5;
  int warmup = 100;
  AdamWConfig adam{};

  LrSchedule schedule(int steps) const { return {peak_lr, floor_lr, std::min(warmup, std::max(steps, 1)), steps}; }
};

struct Seeds {
  std::uint64_t init = 1;
  std::uint64_t data = 2;
  std::uint64_t noise = 3;
};

enum class Strategy { kWarm, kDirect };
enum class DistillTeacher { kNone, kAnchor, kAr };

inline std::string to_string(Strategy s) { return s == Strategy::kWarm ? "warm" : "direct"; }
inline std::string to_string(DistillTeacher t) {
  switch (t) {
    case DistillTeacher::kNone: return "none";
    case DistillTeacher::kAnchor: return "anchor";
    case DistillTeacher::kAr: return "ar";
  }
  return "anchor";
}
inline Strategy parse_strategy(const std::string& s) {
  if (s == "warm") return Strategy::kWarm;
  if (s == "direct") return Strategy::kDirect;
  throw ConfigError("unknown strategy '" + s + "' (expected warm or direct)");
}
inline DistillTeacher parse_distill_teacher(const std::string& s) {
  if (s == "none") return DistillTeacher::kNone;
  if (s == "anchor") return DistillTeacher::kAnchor;
  if (s == "ar") return DistillTeacher::kAr;
  throw ConfigError("unknown distill teacher '" + s + "' (expected none, anchor or ar)");
}

struct BridgeConfig {
  TaskParams task{};
  NetConfig net{};
  Seeds seeds{};
  std::vector<int> block_schedule{4, 8, 16, 32};
  int ar_steps = 3000;
  std::vector<int> stage_steps{2000, 600, 600, 600};    // T_k
  std::vector<int> distill_steps{0, 300, 300, 300};     // S_k; S_1 is unused
  std::optional<std::vector<int>> direct_steps;         // per stage; see direct_steps_for
  PhaseSettings ar_phase{};
  PhaseSettings stage_phase{};
  PhaseSettings distill_phase{};
  NoiseMode noise = NoiseMode::kMixture;
  Objective stage_objective = Objective::kMix;
  KDConfig kd{};
  Strategy strategy = Strategy::kWarm;
  DistillTeacher distill_teacher = DistillTeacher::kAnchor;
  std::vector<int> stages;  // 1-based stage subset to run; empty means all
  std::uint64_t train_size = 200000;
  int distill_fraction = 40;  // the distillation loop draws from the first train_size / distill_fraction examples
  int eval_examples = 200;
  double eval_threshold = 0.9;
  int log_every = 50;

  int num_stages() const noexcept { return static_cast<int>(block_schedule.size()); }

  /// Default: the warm chain's cumulative training plus distillation steps up
  /// to this stage, so both strategies see the same number of updates.
  int direct_steps_for(int stage) const {
    if (direct_steps) return direct_steps->at(static_cast<std::size_t>(stage - 1));
    int total = 0;
    for (int k = 0; k < stage; ++k) {
      total += stage_steps.at(static_cast<std::size_t>(k));
      if (k > 0) total += distill_steps.at(static_cast<std::size_t>(k));
    }
    return total;
  }

  bool runs_stage(int stage) const {
    return stages.empty() || std::find(stages.begin(), stages.end(), stage) != stages.end();
  }

  void validate() const {
    task.validate();
    net.validate();
    if (net.vocab_total != task.vocab.total()) throw ConfigError("net vocab_total must equal task vocab size + 1");
    if (net.max_positions < task.context_len() + task.response_len())
      throw ConfigError("net max_positions is shorter than context + response");
    if (block_schedule.empty()) throw ConfigError("block schedule must not be empty");
    for (std::size_t k = 0; k < block_schedule.size(); ++k) {
      check_block_size(task.response_len(), block_schedule[k]);
      if (k > 0 && block_schedule[k] != 2 * block_schedule[k - 1])
        throw ConfigError("block schedule must double at every stage (B_k = 2 B_{k-1})");
    }
    if (stage_steps.size() != block_schedule.size()) throw ConfigError("stage_steps needs one entry per stage");
    if (distill_steps.size() != block_schedule.size()) throw ConfigError("distill_steps needs one entry per stage");
    if (direct_steps && direct_steps->size() != block_schedule.size())
      throw ConfigError("direct_steps needs one entry per stage");
    for (int s : stage_steps)
      if (s < 0) throw ConfigError("stage steps must be >= 0");
    for (int s : distill_steps)
      if (s < 0) throw ConfigError("distill steps must be >= 0");
    if (ar_steps < 0) throw ConfigError("ar_steps must be >= 0");
    for (int s : stages)
      if (s < 1 || s > num_stages()) throw ConfigError("stage index " + std::to_string(s) + " outside the schedule");
    if (stage_objective != Objective::kMix && stage_objective != Objective::kMask)
      throw ConfigError("stage objective must be mask or mix");
    for (const auto* ph : {&ar_phase, &stage_phase, &distill_phase})
      if (ph->batch < 1 || !(ph->peak_lr > 0.0)) throw ConfigError("phase batch and learning rate must be positive");
    kd.validate();
    if (kd.teacher_block != block_schedule.front()) throw ConfigError("distillation teacher block must equal B_1");
    if (train_size < 1 || distill_fraction < 1) throw ConfigError("train_size and distill_fraction must be positive");
    if (eval_examples < 0) throw ConfigError("eval_examples must be >= 0");
  }
};

struct MetricsRecord {
  std::string phase;
  int step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
  double wall_ms = 0.0;
};

using MetricsSink = std::function<void(const MetricsRecord&)>;

struct StageRecord {
  int stage = 0;
  int block_size = 0;
  std::string phase;  // pretrain | train | distill
  std::string checkpoint_id;
  std::string init_id;
  std::string teacher_id;
  std::vector<std::pair<int, double>> loss_curve;
  double exact_match = 0.0;
  double fwd_per_token = 0.0;
  std::string teacher_fingerprint_before;
  std::string teacher_fingerprint_after;
  bool resumed = false;
};

/// Trains one phase. Holds the shared configuration; all methods are pure
/// functions of their arguments and the config.
template <typename Scalar>
class BridgeTrainer {
 public:
  explicit BridgeTrainer(BridgeConfig config, MetricsSink sink = {})
      : config_(std::move(config)), net_(config_.net), sink_(std::move(sink)) {
    config_.validate();
  }

  const BridgeConfig& config() const noexcept { return config_; }
  const Transformer<Scalar>& net() const noexcept { return net_; }

  Checkpoint<Scalar> fresh_init() const {
    Checkpoint<Scalar> ck;
    ck.params = init_params<Scalar>(config_.net, config_.seeds.init);
    ck.params.config.precision = precision_of<Scalar>();
    ck.lineage.id = "init";
    ck.lineage.chain = {"init"};
    return ck;
  }

  Checkpoint<Scalar> train_ar(int steps) const {
    Checkpoint<Scalar> ck = fresh_init();
    const auto losses = run_phase("phi", ck.params, steps, config_.ar_phase, [&](int step, std::vector<TrainItem>& items) {
      sample_items(items, "phi", step, config_.ar_phase.batch, config_.train_size, NoiseMode::kMixture, false);
      return ObjectiveSpec{Objective::kAr, 0, 1.0};
    }, {});
    ck.stage = {0, 0, "ar", "pretrain", "none"};
    ck.lineage = {"phi", "init", "", {"init", "phi"}};
    stamp(ck, losses, steps);
    return ck;
  }

  /// Teacher-forcing stage training at block size `block` from `init`.
  Checkpoint<Scalar> train_stage(const Checkpoint<Scalar>& init, int stage, int block, int steps, const std::string& id,
                                 NoiseMode noise, Objective objective) const {
    check_block_size(config_.task.response_len(), block);
    if (!init.params.config.same_shape(config_.net)) throw ConfigError("initializer does not match the net config");
    Checkpoint<Scalar> ck = init;
    const auto losses = run_phase(id, ck.params, steps, config_.stage_phase, [&](int step, std::vector<TrainItem>& items) {
      sample_items(items, id, step, config_.stage_phase.batch, config_.train_size, noise, true);
      return ObjectiveSpec{objective, block, 1.0};
    }, {});
    ck.stage = {stage, block, to_string(objective), "train", to_string(noise)};
    ck.lineage.init = init.lineage.id;
    ck.lineage.id = id;
    ck.lineage.teacher.clear();
    ck.lineage.chain = init.lineage.chain;
    ck.lineage.chain.push_back(id);
    stamp(ck, losses, steps);
    return ck;
  }

  /// Distills `student` toward the frozen `teacher` on the shared corruption.
  Checkpoint<Scalar> distill_stage(const Checkpoint<Scalar>& student, const Checkpoint<Scalar>& teacher, int stage, int block,
                                   int steps, const std::string& id, NoiseMode noise, TeacherKind kind) const {
    check_block_size(config_.task.response_len(), block);
    if (!student.params.config.same_shape(teacher.params.config) ||
        student.params.config.vocab_total != teacher.params.config.vocab_total)
      throw ConfigError("teacher and student vocabularies or shapes differ");
    Checkpoint<Scalar> ck = student;
    const std::uint64_t subset = std::max<std::uint64_t>(1, config_.train_size / static_cast<std::uint64_t>(config_.distill_fraction));
    std::vector<Matrix<Scalar>> teacher_logits;
    const auto losses = run_phase(id, ck.params, steps, config_.distill_phase, [&](int step, std::vector<TrainItem>& items) {
      sample_items(items, id, step, config_.distill_phase.batch, subset, noise, true);
      teacher_logits = kind == TeacherKind::kDiffusionAnchor
                           ? anchor_teacher_logits(net_, teacher.params, items, config_.kd.teacher_block)
                           : ar_teacher_logits(net_, teacher.params, items);
      return ObjectiveSpec{Objective::kKd, block, config_.kd.tau};
    }, std::ref(teacher_logits));
    ck.stage = {stage, block, "kd", "distill", to_string(noise)};
    ck.lineage.init = student.lineage.id;
    ck.lineage.id = id;
    ck.lineage.teacher = teacher.lineage.id;
    ck.lineage.chain = student.lineage.chain;
    ck.lineage.chain.push_back(id);
    ck.metrics["teacher_kind"] = to_string(kind);
    stamp(ck, losses, steps);
    return ck;
  }

  /// Exact match of block decoding at (block, eval_threshold) on held-out examples.
  PolicyReport evaluate_block(const Params<Scalar>& params, int block, double threshold) const {
    const auto examples = eval_examples(config_.task, config_.eval_examples);
    DecodePolicy policy{block, threshold, 0, true};
    return evaluate_policy(net_, params, examples, policy, config_.task.vocab.mask_id(), "B" + std::to_string(block)).report;
  }

  PolicyReport evaluate_greedy(const Params<Scalar>& params) const {
    const auto examples = eval_examples(config_.task, config_.eval_examples);
    return evaluate_ar(net_, params, examples, config_.task.vocab.mask_id()).report;
  }

  std::vector<std::pair<int, double>> last_losses() const { return last_losses_; }

 private:
  using Curve = std::vector<std::pair<int, double>>;

  void sample_items(std::vector<TrainItem>& items, const std::string& phase, int step, int batch, std::uint64_t pool,
                    NoiseMode noise, bool corrupt_items) const {
    items.clear();
    const std::uint64_t tag = fnv1a64(phase.data(), phase.size());
    for (int b = 0; b < batch; ++b) {
      Rng pick(derive_seed(config_.seeds.data, {tag, static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(b)}));
      TrainItem it;
      it.example = gen_example(config_.task, pick.below(pool));
      if (corrupt_items) {
        const std::uint64_t ns = derive_seed(config_.seeds.noise, {tag, static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(b)});
        it.sample = corrupt(it.example.x1, sample_t(ns), config_.task.vocab, ns, noise);
      }
      items.push_back(std::move(it));
    }
  }

  template <typename MakeBatch>
  Curve run_phase(const std::string& phase, Params<Scalar>& params, int steps, const PhaseSettings& settings, MakeBatch make_batch,
                  std::optional<std::reference_wrapper<std::vector<Matrix<Scalar>>>> teacher) const {
    Curve curve;
    if (steps <= 0) return curve;
    AdamWState<Scalar> state;  // fresh optimizer state per phase
    const auto decay = decay_mask(config_.net);
    const LrSchedule schedule = settings.schedule(steps);
    const auto start = std::chrono::steady_clock::now();
    std::vector<TrainItem> items;
    double window = 0.0;
    int window_n = 0;
    for (int step = 1; step <= steps; ++step) {
      const ObjectiveSpec spec = make_batch(step, items);
      std::span<const Matrix<Scalar>> t;
      if (teacher) t = teacher->get();
      auto lg = loss_and_grad(net_, params, std::span<const TrainItem>(items), spec, t);
      const StepInfo info = optimizer_step<Scalar>(state, params.values, lg.grad, settings.adam, schedule, decay);
      if (!all_finite<Scalar>(params.values)) throw NumericError("parameters diverged in phase " + phase + " at step " + std::to_string(step));
      window += lg.loss;
      ++window_n;
      if (step % std::max(1, config_.log_every) == 0 || step == steps) {
        const double mean = window / window_n;
        curve.emplace_back(step, mean);
        if (sink_) {
          const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
          sink_({phase, step, mean, info.lr, info.grad_norm, ms});
        }
        window = 0.0;
        window_n = 0;
      }
    }
    return curve;
  }

  void stamp(Checkpoint<Scalar>& ck, const Curve& losses, int steps) const {
    ck.params.config.precision = precision_of<Scalar>();
    ck.seeds = {{"init", config_.seeds.init}, {"data", config_.seeds.data}, {"noise", config_.seeds.noise}};
    ck.metrics["steps"] = steps;
    ck.metrics["final_loss"] = losses.empty() ? nlohmann::json(nullptr) : nlohmann::json(losses.back().second);
    last_losses_ = losses;
  }

  BridgeConfig config_;
  Transformer<Scalar> net_;
  MetricsSink sink_;
  mutable Curve last_losses_;
};


inline nlohmann::json to_json(const StageRecord& r) {
  nlohmann::json curve = nlohmann::json::array();
  for (const auto& [step, loss] : r.loss_curve) curve.push_back({step, loss});
  return {{"stage", r.stage},
          {"block_size", r.block_size},
          {"phase", r.phase},
          {"checkpoint", r.checkpoint_id},
          {"init", r.init_id},
          {"teacher", r.teacher_id},
          {"loss_curve", curve},
          {"exact_match", r.exact_match},
          {"fwd_per_token", r.fwd_per_token},
          {"teacher_fingerprint_before", r.teacher_fingerprint_before},
          {"teacher_fingerprint_after", r.teacher_fingerprint_after},
          {"resumed", r.resumed}};
}

struct BridgeResult {
  std::vector<std::filesystem::path> checkpoints;  // in Alg. order
  std::vector<StageRecord> records;
};

/// Runs the bridge into `dir`. Checkpoint files:
///   phi.ckpt, stage1.ckpt, stage{k}_train.ckpt, stage{k}.ckpt   (warm)
///   direct_B{B}.ckpt                                            (direct)
/// Phase selection: with an empty stage subset every phase runs, phi first.
/// With a subset only the named stages run, and their upstream checkpoints
/// must already be in `dir`. With `resume`, a selected phase whose
/// checkpoint is already present (and whose lineage checks out) is loaded
/// instead of retrained; determinism makes the two indistinguishable.
template <typename Scalar>
BridgeResult run_bridge(const BridgeConfig& config, const std::filesystem::path& dir, bool resume,
                        MetricsSink sink = {}, std::function<void(const StageRecord&)> on_record = {}) {
  namespace fs = std::filesystem;
  const BridgeTrainer<Scalar> trainer(config, std::move(sink));
  fs::create_directories(dir);
  BridgeResult out;

  auto path_of = [&](const std::string& id) { return dir / (id + ".ckpt"); };

  auto load_checked = [&](const std::string& id, const std::string& init, int block) {
    const fs::path p = path_of(id);
    if (!fs::exists(p)) throw LineageError("missing upstream checkpoint " + p.string());
    Checkpoint<Scalar> ck = load_checkpoint<Scalar>(p);
    if (ck.lineage.id != id) throw LineageError(p.string() + " records id '" + ck.lineage.id + "', expected '" + id + "'");
    if (!init.empty() && ck.lineage.init != init)
      throw LineageError(p.string() + " was initialized from '" + ck.lineage.init + "', expected '" + init + "'");
    if (ck.stage.block_size != block)
      throw LineageError(p.string() + " has block size " + std::to_string(ck.stage.block_size) + ", expected " + std::to_string(block));
    if (!ck.params.config.same_shape(config.net)) throw LineageError(p.string() + " does not match the configured net");
    return ck;
  };

  auto record = [&](const Checkpoint<Scalar>& ck, bool resumed, int eval_block, std::string fp_before = "",
                    std::string fp_after = "") {
    StageRecord r;
    r.stage = ck.stage.stage_index;
    r.block_size = ck.stage.block_size;
    r.phase = ck.stage.phase;
    r.checkpoint_id = ck.lineage.id;
    r.init_id = ck.lineage.init;
    r.teacher_id = ck.lineage.teacher;
    r.resumed = resumed;
    r.teacher_fingerprint_before = std::move(fp_before);
    r.teacher_fingerprint_after = std::move(fp_after);
    if (!resumed) r.loss_curve = trainer.last_losses();
    if (config.eval_examples > 0) {
      const PolicyReport rep = eval_block == 0 ? trainer.evaluate_greedy(ck.params)
                                               : trainer.evaluate_block(ck.params, eval_block, config.eval_threshold);
      r.exact_match = rep.exact_match;
      r.fwd_per_token = rep.fwd_per_token;
    }
    out.checkpoints.push_back(path_of(ck.lineage.id));
    out.records.push_back(r);
    if (on_record) on_record(r);
  };

  // Returns the checkpoint for `id`, producing it with `make` unless resuming
  // finds it on disk.
  auto produce = [&](const std::string& id, const std::string& init, int block, auto make) {
    if (resume && fs::exists(path_of(id))) return std::make_pair(load_checked(id, init, block), true);
    Checkpoint<Scalar> ck = make();
    save_checkpoint(path_of(id), ck);
    return std::make_pair(std::move(ck), false);
  };

  const bool full = config.stages.empty();
  const auto& sched = config.block_schedule;

  Checkpoint<Scalar> phi;
  if (full) {
    auto [ck, resumed] = produce("phi", "init", 0, [&] { return trainer.train_ar(config.ar_steps); });
    phi = std::move(ck);
    record(phi, resumed, 0);
  } else {
    phi = load_checked("phi", "init", 0);
  }

  if (config.strategy == Strategy::kDirect) {
    for (int k = 1; k <= config.num_stages(); ++k) {
      if (!config.runs_stage(k)) continue;
      const int B = sched[static_cast<std::size_t>(k - 1)];
      const std::string id = "direct_B" + std::to_string(B);
      auto [ck, resumed] = produce(id, "phi", B, [&] {
        return trainer.train_stage(phi, k, B, config.direct_steps_for(k), id, config.noise, config.stage_objective);
      });
      record(ck, resumed, B);
    }
    return out;
  }

  const TeacherKind kind = config.distill_teacher == DistillTeacher::kAr ? TeacherKind::kAutoregressive
                                                                         : TeacherKind::kDiffusionAnchor;
  std::optional<Checkpoint<Scalar>> prev;  // theta(k-1)
  for (int k = 1; k <= config.num_stages(); ++k) {
    const int B = sched[static_cast<std::size_t>(k - 1)];
    const std::string id = "stage" + std::to_string(k);
    if (!config.runs_stage(k)) {
      prev.reset();
      continue;
    }
    if (k == 1) {
      auto [ck, resumed] = produce(id, "phi", B, [&] {
        return trainer.train_stage(phi, 1, B, config.stage_steps[0], id, config.noise, config.stage_objective);
      });
      record(ck, resumed, B);
      prev = std::move(ck);
      continue;
    }
    const std::string up = "stage" + std::to_string(k - 1);
    const int up_block = sched[static_cast<std::size_t>(k - 2)];
    if (!prev) prev = load_checked(up, "", up_block);

    const std::string train_id = id + "_train";
    auto [tilde, tilde_resumed] = produce(train_id, up, B, [&] {
      return trainer.train_stage(*prev, k, B, config.stage_steps[static_cast<std::size_t>(k - 1)], train_id, config.noise,
                                 config.stage_objective);
    });
    record(tilde, tilde_resumed, B);

    const int steps = config.distill_teacher == DistillTeacher::kNone ? 0 : config.distill_steps[static_cast<std::size_t>(k - 1)];
    const std::string teacher_id = config.distill_teacher == DistillTeacher::kAr ? "phi" : "stage1";
    const fs::path teacher_path = path_of(teacher_id);
    std::string fp_before, fp_after;
    auto [ck, resumed] = produce(id, train_id, B, [&] {
      if (steps == 0) {
        Checkpoint<Scalar> copy = tilde;
        copy.stage.phase = "distill";
        copy.stage.objective = "none";
        copy.lineage.init = train_id;
        copy.lineage.id = id;
        copy.lineage.teacher.clear();
        copy.lineage.chain.push_back(id);
        copy.metrics["steps"] = 0;
        return copy;
      }
      const Checkpoint<Scalar> teacher =
          teacher_id == "phi" ? load_checked("phi", "init", 0) : load_checked("stage1", "phi", sched.front());
      fp_before = file_fingerprint(teacher_path);
      Checkpoint<Scalar> d = trainer.distill_stage(tilde, teacher, k, B, steps, id, config.noise, kind);
      fp_after = file_fingerprint(teacher_path);
      if (fp_before != fp_after) throw LineageError("teacher checkpoint " + teacher_path.string() + " changed during distillation");
      d.metrics["teacher_fingerprint"] = fp_before;
      return d;
    });
    record(ck, resumed, B, fp_before, fp_after);
    prev = std::move(ck);
  }
  return out;
}

}  // namespace bard
