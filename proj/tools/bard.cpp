// bard: command-line driver for the AR -> block-diffusion bridge.
//
// Exit codes: 0 ok, 1 verification failure, 2 config/usage, 3 lineage,
// 4 numeric, 5 input, 6 I/O. Relative output paths are resolved against
// $BARD_OUTPUT_ROOT (default: the working directory).

#include <CLI11.hpp>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "bard/bridge.hpp"
#include "bard/checkpoint.hpp"
#include "bard/eval.hpp"
#include "bard/metrics.hpp"
#include "bard/run_config.hpp"
#include "bard/verify.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace bard;

namespace {

fs::path output_root() {
  const char* env = std::getenv("BARD_OUTPUT_ROOT");
  return env && *env ? fs::path(env) : fs::current_path();
}

fs::path resolve_out(const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : output_root() / path;
}

RunConfig load_or_default(const std::string& path) {
  return path.empty() ? default_run_config() : load_run_config(path);
}

void write_resolved_config(const RunConfig& rc, const fs::path& dir) {
  write_file(dir / "config.json", to_json(rc).dump(2) + "\n");
}

void print(const json& j) { std::cout << j.dump(2) << std::endl; }

MetricsSink sink_for(MetricsLog& log) {
  return [&log](const MetricsRecord& m) {
    log.write(m.phase, m.step, {{"loss", m.loss}, {"lr", m.lr}, {"grad_norm", m.grad_norm}}, m.wall_ms);
  };
}

json report_json(const PolicyReport& r) {
  return {{"policy_id", r.policy_id}, {"B", r.block_size},           {"eta", r.threshold}, {"exact_match", r.exact_match},
          {"fwd_per_token", r.fwd_per_token}, {"speedup", r.speedup}, {"wall_ms", r.wall_ms}};
}

// ---- gen-data -------------------------------------------------------------

struct GenDataArgs {
  std::string config, out = "data.jsonl";
  long long n = 10;
  unsigned long long start = 0;
  std::optional<unsigned long long> seed;
};

int cmd_gen_data(const GenDataArgs& a) {
  RunConfig rc = load_or_default(a.config);
  if (a.seed) rc.bridge.task.seed = *a.seed;
  rc.bridge.task.validate();
  if (a.n < 0) throw ConfigError("--n must be >= 0");
  std::ostringstream os;
  for (long long i = 0; i < a.n; ++i) {
    const std::uint64_t index = a.start + static_cast<std::uint64_t>(i);
    const Example ex = gen_example(rc.bridge.task, index);
    os << json{{"index", index}, {"q", ex.q}, {"x1", ex.x1}}.dump() << '\n';
  }
  write_file(resolve_out(a.out), os.str());
  return 0;
}

// ---- train-ar / bridge / distill -------------------------------------------

template <typename Scalar>
int train_ar_impl(RunConfig rc, std::optional<int> steps) {
  if (steps) rc.bridge.ar_steps = *steps;
  const fs::path dir = resolve_out(rc.output_dir);
  fs::create_directories(dir);
  write_resolved_config(rc, dir);
  MetricsLog log(dir / "metrics.jsonl", rc.run_id, config_hash(rc));
  const BridgeTrainer<Scalar> trainer(rc.bridge, sink_for(log));
  Checkpoint<Scalar> phi = trainer.train_ar(rc.bridge.ar_steps);
  json summary = {{"checkpoint", (dir / "phi.ckpt").string()}, {"steps", rc.bridge.ar_steps}};
  if (rc.bridge.eval_examples > 0) {
    const PolicyReport rep = trainer.evaluate_greedy(phi.params);
    phi.metrics["greedy_exact_match"] = rep.exact_match;
    summary["greedy_exact_match"] = rep.exact_match;
    log.write("phi_eval", rc.bridge.ar_steps, {{"greedy_exact_match", rep.exact_match}}, 0.0);
  }
  save_checkpoint(dir / "phi.ckpt", phi);
  print(summary);
  return 0;
}

struct BridgeArgs {
  std::string config;
  bool resume = false;
  std::vector<int> stages;
  std::string noise, distill_teacher, strategy;
};

template <typename Scalar>
int bridge_impl(RunConfig rc, const BridgeArgs& a) {
  if (!a.stages.empty()) rc.bridge.stages = a.stages;
  if (!a.noise.empty()) rc.bridge.noise = parse_noise_mode(a.noise);
  if (!a.distill_teacher.empty()) rc.bridge.distill_teacher = parse_distill_teacher(a.distill_teacher);
  if (!a.strategy.empty()) rc.bridge.strategy = parse_strategy(a.strategy);
  rc.bridge.validate();
  const fs::path dir = resolve_out(rc.output_dir);
  fs::create_directories(dir);
  write_resolved_config(rc, dir);
  MetricsLog log(dir / "metrics.jsonl", rc.run_id, config_hash(rc));
  std::ofstream records(dir / "records.jsonl", std::ios::app);
  const auto result = run_bridge<Scalar>(rc.bridge, dir, a.resume, sink_for(log), [&](const StageRecord& r) {
    records << to_json(r).dump() << '\n';
    records.flush();
    std::cerr << r.checkpoint_id << ": exact_match " << r.exact_match << (r.resumed ? " (resumed)" : "") << '\n';
  });
  json out = {{"output_dir", dir.string()}, {"checkpoints", json::array()}, {"records", json::array()}};
  for (const auto& p : result.checkpoints) out["checkpoints"].push_back(p.string());
  for (const auto& r : result.records) out["records"].push_back(to_json(r));
  print(out);
  return 0;
}

struct DistillArgs {
  std::string config, student, teacher, out, teacher_kind = "anchor";
  int block = 0;
  std::optional<int> steps;
};

template <typename Scalar>
int distill_impl(const RunConfig& rc, const DistillArgs& a) {
  const Checkpoint<Scalar> student = load_checkpoint<Scalar>(a.student);
  const fs::path teacher_path(a.teacher);
  const std::string fp_before = file_fingerprint(teacher_path);
  const Checkpoint<Scalar> teacher = load_checkpoint<Scalar>(teacher_path);
  if (student.params.config.vocab_total != teacher.params.config.vocab_total)
    throw ConfigError("teacher and student vocabularies differ");
  const int block = a.block > 0 ? a.block : student.stage.block_size;
  if (block <= 0) throw ConfigError("--block is required when the student has no block size");
  int steps = rc.bridge.distill_steps.back();
  for (std::size_t k = 0; k < rc.bridge.block_schedule.size(); ++k)
    if (rc.bridge.block_schedule[k] == block) steps = rc.bridge.distill_steps[k];
  if (a.steps) steps = *a.steps;
  const fs::path out = resolve_out(a.out);
  MetricsLog log(out.parent_path() / "metrics.jsonl", rc.run_id, config_hash(rc));
  BridgeConfig cfg = rc.bridge;
  cfg.net = student.params.config;
  const BridgeTrainer<Scalar> trainer(cfg, sink_for(log));
  const TeacherKind kind = a.teacher_kind == "ar" ? TeacherKind::kAutoregressive : TeacherKind::kDiffusionAnchor;
  if (a.teacher_kind != "ar" && a.teacher_kind != "anchor") throw ConfigError("--teacher-kind must be anchor or ar");
  Checkpoint<Scalar> d = trainer.distill_stage(student, teacher, student.stage.stage_index, block, steps, out.stem().string(),
                                               rc.bridge.noise, kind);
  const std::string fp_after = file_fingerprint(teacher_path);
  if (fp_before != fp_after) throw LineageError("teacher checkpoint changed during distillation");
  d.metrics["teacher_fingerprint"] = fp_before;
  save_checkpoint(out, d);
  json summary = {{"checkpoint", out.string()}, {"steps", steps}, {"block_size", block},
                  {"teacher_fingerprint_before", fp_before}, {"teacher_fingerprint_after", fp_after}};
  if (rc.bridge.eval_examples > 0)
    summary["exact_match"] = trainer.evaluate_block(d.params, block, rc.bridge.eval_threshold).exact_match;
  print(summary);
  return 0;
}

// ---- decode / bench ---------------------------------------------------------

struct DecodeArgs {
  std::string config, checkpoint;
  int block = 0, max_steps = 0, n = 1;
  double eta = 0.9;
  bool no_revision = false, ar = false, trace = false;
  unsigned long long start = kEvalIndexBase;
};

json trace_json(const DecodeTrace& t) {
  json steps = json::array();
  for (const auto& s : t.steps) {
    json mat = json::array(), rev = json::array();
    for (const auto& m : s.materialized)
      mat.push_back({{"pos", m.position}, {"token", m.token}, {"conf", m.confidence}, {"forced", m.forced}});
    for (const auto& r : s.revised)
      rev.push_back({{"pos", r.position}, {"old", r.old_token}, {"new", r.new_token}, {"old_conf", r.old_confidence},
                     {"new_conf", r.new_confidence}});
    steps.push_back({{"block", s.block}, {"step", s.step}, {"materialized", mat}, {"revised", rev}});
  }
  return steps;
}

template <typename Scalar>
int decode_impl(const RunConfig& rc, const DecodeArgs& a) {
  const Checkpoint<Scalar> ck = load_checkpoint<Scalar>(a.checkpoint);
  const Transformer<Scalar> net(ck.params.config);
  const TaskParams& task = rc.bridge.task;
  if (ck.params.config.vocab_total != task.vocab.total()) throw ConfigError("checkpoint vocabulary does not match the task");
  const DecodePolicy policy{a.block > 0 ? a.block : std::max(1, ck.stage.block_size), a.eta, a.max_steps, !a.no_revision};
  for (int i = 0; i < a.n; ++i) {
    const std::uint64_t index = a.start + static_cast<std::uint64_t>(i);
    const Example ex = gen_example(task, index);
    json line = {{"index", index}, {"gold", ex.x1}};
    if (a.ar) {
      const auto r = greedy_ar(net, ck.params, ex.q, task.response_len(), task.vocab.mask_id());
      line["response"] = r.response;
      line["forward_passes"] = r.forward_passes;
      line["exact_match"] = exact_match(r.response, ex.x1);
    } else {
      const auto [resp, trace] = generate(net, ck.params, ex.q, task.response_len(), policy, task.vocab.mask_id());
      line["response"] = resp;
      line["forward_passes"] = trace.forward_passes;
      line["exact_match"] = exact_match(resp, ex.x1);
      if (a.trace) line["trace"] = trace_json(trace);
    }
    std::cout << line.dump() << '\n';
  }
  return 0;
}

struct BenchArgs {
  std::string config, out = "bench";
  std::vector<std::string> checkpoints;
  std::vector<int> blocks;
  std::vector<double> etas;
  int n = 200;
};

template <typename Scalar>
void bench_checkpoint(const RunConfig& rc, const BenchArgs& a, const std::string& path, std::vector<NamedPolicy> policies,
                      std::vector<PolicyReport>& rows, json& summary) {
  const Checkpoint<Scalar> ck = load_checkpoint<Scalar>(path);
  const Transformer<Scalar> net(ck.params.config);
  const auto examples = eval_examples(rc.bridge.task, a.n);
  const TokenId mask = rc.bridge.task.vocab.mask_id();
  const std::string label = fs::path(path).stem().string();
  json entry = {{"checkpoint", path}, {"policies", json::array()}};
  if (ck.stage.phase == "pretrain") {
    PolicyReport r = evaluate_ar(net, ck.params, examples, mask).report;
    r.policy_id = label + ":ar";
    rows.push_back(r);
    entry["policies"].push_back(report_json(r));
  } else {
    for (const auto& p : policies) {
      PolicyReport r = evaluate_policy(net, ck.params, examples, p.policy, mask, label + ":" + p.id).report;
      rows.push_back(r);
      entry["policies"].push_back(report_json(r));
    }
  }
  summary["checkpoints"].push_back(entry);
}

int cmd_bench(const BenchArgs& a) {
  const RunConfig rc = load_or_default(a.config);
  std::vector<NamedPolicy> policies = rc.policies;
  for (int b : a.blocks)
    for (double eta : a.etas) {
      std::ostringstream id;
      id << "B" << b << "_eta" << eta;
      policies.push_back({id.str(), DecodePolicy{b, eta, 0, true}});
    }
  for (const auto& p : policies) p.policy.validate(rc.bridge.task.response_len());
  std::vector<PolicyReport> rows;
  json summary = {{"examples", a.n}, {"checkpoints", json::array()}};
  for (const auto& path : a.checkpoints) {
    if (!fs::exists(path)) throw IoError("missing checkpoint " + path);
    if (checkpoint_precision(path) == Precision::kF64)
      bench_checkpoint<double>(rc, a, path, policies, rows, summary);
    else
      bench_checkpoint<float>(rc, a, path, policies, rows, summary);
  }
  std::ostringstream csv;
  csv << "policy_id,B,eta,exact_match,fwd_per_token,speedup,wall_ms\n";
  for (const auto& r : rows)
    csv << r.policy_id << ',' << r.block_size << ',' << r.threshold << ',' << r.exact_match << ',' << r.fwd_per_token << ','
        << r.speedup << ',' << r.wall_ms << '\n';
  const fs::path out = resolve_out(a.out);
  write_file(fs::path(out.string() + ".csv"), csv.str());
  write_file(fs::path(out.string() + ".json"), summary.dump(2) + "\n");
  print({{"csv", out.string() + ".csv"}, {"json", out.string() + ".json"}, {"rows", rows.size()}});
  return 0;
}

// ---- verification -----------------------------------------------------------

int cmd_verify(const std::string& suite, bool inject_mask_fault) {
  VerifyOptions opt;
  opt.inject_mask_fault = inject_mask_fault;
  const auto results = run_suites(suite, opt);
  bool ok = true;
  json out = {{"suites", json::array()}};
  for (const auto& r : results) {
    ok = ok && r.passed;
    out["suites"].push_back(to_json(r));
  }
  out["passed"] = ok;
  print(out);
  return ok ? 0 : static_cast<int>(ExitCode::kFailure);
}

int cmd_dump_mask(int ctx, int len, int block, const std::string& out) {
  if (ctx < 0 || len < 1) throw ConfigError("--context-len must be >= 0 and --response-len >= 1");
  const TokenSequence q(static_cast<std::size_t>(ctx), Vocab::kFirstContent);
  const TokenSequence x(static_cast<std::size_t>(len), Vocab::kFirstContent);
  const PackedBatch batch = build_packed(q, x, x, block);
  const AttentionMaskSpec mask = build_packed_mask(batch);
  std::ostringstream os;
  write_mask_csv(os, mask);
  if (out == "-")
    std::cout << os.str();
  else
    write_file(resolve_out(out), os.str());
  return 0;
}

int cmd_verify_noise(const std::vector<double>& ts, int n, const std::string& mode, unsigned long long seed) {
  VerifyOptions opt;
  opt.noise_samples = n;
  opt.seed = seed;
  for (double t : ts)
    if (!(t >= 0.0 && t <= 1.0)) throw ConfigError("--t values must lie in [0, 1]");
  const SuiteResult r = verify_noise(opt, ts, parse_noise_mode(mode));
  print(to_json(r));
  return r.passed ? 0 : static_cast<int>(ExitCode::kFailure);
}

template <template <typename> class F, typename... Args>
int dispatch(Precision p, Args&&... args) {
  return p == Precision::kF64 ? F<double>{}(std::forward<Args>(args)...) : F<float>{}(std::forward<Args>(args)...);
}

template <typename S>
struct TrainAr {
  int operator()(const RunConfig& rc, std::optional<int> steps) const { return train_ar_impl<S>(rc, steps); }
};
template <typename S>
struct Bridge {
  int operator()(const RunConfig& rc, const BridgeArgs& a) const { return bridge_impl<S>(rc, a); }
};
template <typename S>
struct Distill {
  int operator()(const RunConfig& rc, const DistillArgs& a) const { return distill_impl<S>(rc, a); }
};
template <typename S>
struct Decode {
  int operator()(const RunConfig& rc, const DecodeArgs& a) const { return decode_impl<S>(rc, a); }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bard: autoregressive to block-diffusion bridge"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* c_gen = app.add_subcommand("gen-data", "write synthetic examples as JSONL");
  c_gen->add_option("--config", gen.config, "run config (JSON)");
  c_gen->add_option("--n", gen.n, "number of examples");
  c_gen->add_option("--start", gen.start, "first example index");
  c_gen->add_option("--seed", gen.seed, "override task.seed");
  c_gen->add_option("--out", gen.out, "output file");

  std::string ar_config;
  std::optional<int> ar_steps;
  auto* c_ar = app.add_subcommand("train-ar", "pretrain the causal source model phi");
  c_ar->add_option("--config", ar_config, "run config (JSON)");
  c_ar->add_option("--steps", ar_steps, "override bridge.ar_steps");

  BridgeArgs br;
  auto* c_br = app.add_subcommand("bridge", "run the staged bridge");
  c_br->add_option("--config", br.config, "run config (JSON)");
  c_br->add_flag("--resume", br.resume, "reuse checkpoints already in the output directory");
  c_br->add_option("--stages", br.stages, "1-based stages to run (comma separated)")->delimiter(',');
  c_br->add_option("--noise", br.noise, "mask | uniform | mixture")->check(CLI::IsMember({"mask", "uniform", "mixture"}));
  c_br->add_option("--distill-teacher", br.distill_teacher, "none | anchor | ar")->check(CLI::IsMember({"none", "anchor", "ar"}));
  c_br->add_option("--strategy", br.strategy, "direct | warm")->check(CLI::IsMember({"direct", "warm"}));

  DistillArgs ds;
  auto* c_ds = app.add_subcommand("distill", "distill a student checkpoint from a frozen teacher");
  c_ds->add_option("--config", ds.config, "run config (JSON)");
  c_ds->add_option("--student", ds.student, "student checkpoint")->required();
  c_ds->add_option("--teacher", ds.teacher, "teacher checkpoint")->required();
  c_ds->add_option("--out", ds.out, "output checkpoint")->required();
  c_ds->add_option("--block", ds.block, "student block size (default: the student's)");
  c_ds->add_option("--steps", ds.steps, "distillation steps");
  c_ds->add_option("--teacher-kind", ds.teacher_kind, "anchor | ar")->check(CLI::IsMember({"anchor", "ar"}));

  DecodeArgs dc;
  auto* c_dc = app.add_subcommand("decode", "decode held-out examples with a checkpoint");
  c_dc->add_option("--config", dc.config, "run config (JSON)");
  c_dc->add_option("--checkpoint", dc.checkpoint, "checkpoint")->required();
  c_dc->add_option("--block", dc.block, "block size (default: the checkpoint's)");
  c_dc->add_option("--eta", dc.eta, "confidence threshold");
  c_dc->add_option("--max-steps", dc.max_steps, "refinement passes per block (0: 2B)");
  c_dc->add_flag("--no-revision", dc.no_revision, "never overwrite a materialized token");
  c_dc->add_flag("--ar", dc.ar, "greedy autoregressive decoding");
  c_dc->add_flag("--trace", dc.trace, "include the per-step trace");
  c_dc->add_option("--n", dc.n, "number of examples");
  c_dc->add_option("--start", dc.start, "first example index");

  BenchArgs bn;
  auto* c_bn = app.add_subcommand("bench", "accuracy / throughput sweep over checkpoints and policies");
  c_bn->add_option("--config", bn.config, "run config (JSON); its decode list supplies policies");
  c_bn->add_option("--checkpoint", bn.checkpoints, "checkpoint (repeatable)");
  c_bn->add_option("--blocks", bn.blocks, "extra grid: block sizes")->delimiter(',');
  c_bn->add_option("--etas", bn.etas, "extra grid: thresholds")->delimiter(',');
  c_bn->add_option("--n", bn.n, "held-out examples");
  c_bn->add_option("--out", bn.out, "output prefix (.csv and .json are appended)");

  std::string suite = "all";
  auto* c_vf = app.add_subcommand("verify", "run invariant suites");
  c_vf->add_option("suite", suite, "all | " + [] {
    std::string s;
    for (const auto& n : suite_names()) s += (s.empty() ? "" : " | ") + n;
    return s;
  }());
  std::string inject_name;
  c_vf->add_option("--inject-fault", inject_name, "test hook: 'mask' corrupts every built mask")
      ->check(CLI::IsMember({"mask"}));

  int m_ctx = 4, m_len = 8, m_block = 4;
  std::string m_out = "-";
  auto* c_dm = app.add_subcommand("dump-mask", "write the packed training mask as 0/1 CSV");
  c_dm->add_option("--context-len", m_ctx, "|Q|");
  c_dm->add_option("--response-len", m_len, "L");
  c_dm->add_option("--block-size", m_block, "B");
  c_dm->add_option("--out", m_out, "output file ('-' for stdout)");

  std::vector<double> n_ts = {0.1, 0.3, 0.5, 0.7, 0.9};
  int n_samples = 200000;
  std::string n_mode = "mixture";
  unsigned long long n_seed = 0;
  auto* c_vn = app.add_subcommand("verify-noise", "empirical corruption frequencies against kappa(t)");
  c_vn->add_option("--t", n_ts, "corruption levels")->delimiter(',');
  c_vn->add_option("--n", n_samples, "positions per t");
  c_vn->add_option("--mode", n_mode, "mask | uniform | mixture")->check(CLI::IsMember({"mask", "uniform", "mixture"}));
  c_vn->add_option("--seed", n_seed, "seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(ExitCode::kConfig);
  }

  try {
    if (*c_gen) return cmd_gen_data(gen);
    if (*c_ar) {
      const RunConfig rc = load_or_default(ar_config);
      return dispatch<TrainAr>(rc.bridge.net.precision, rc, ar_steps);
    }
    if (*c_br) {
      const RunConfig rc = load_or_default(br.config);
      return dispatch<Bridge>(rc.bridge.net.precision, rc, br);
    }
    if (*c_ds) {
      const RunConfig rc = load_or_default(ds.config);
      return dispatch<Distill>(checkpoint_precision(ds.student), rc, ds);
    }
    if (*c_dc) {
      const RunConfig rc = load_or_default(dc.config);
      return dispatch<Decode>(checkpoint_precision(dc.checkpoint), rc, dc);
    }
    if (*c_bn) return cmd_bench(bn);
    if (*c_vf) return cmd_verify(suite, inject_name == "mask");
    if (*c_dm) return cmd_dump_mask(m_ctx, m_len, m_block, m_out);
    if (*c_vn) return cmd_verify_noise(n_ts, n_samples, n_mode, n_seed);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::kFailure);
  }
  return 0;
}
