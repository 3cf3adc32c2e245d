#include <gtest/gtest.h>
#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>
#include <string>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CliRun {
  int code = -1;
  std::string out;
};

fs::path work_dir() {
  static const fs::path d = [] {
    const fs::path p = fs::temp_directory_path() / "bard_cli_test";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return d;
}

CliRun bard(const std::string& args) {
  const std::string cmd = "BARD_OUTPUT_ROOT='" + work_dir().string() + "' '" BARD_CLI_PATH "' " + args + " 2>/dev/null";
  CliRun r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  std::array<char, 4096> buf{};
  std::size_t n;
  while ((n = fread(buf.data(), 1, buf.size(), p)) > 0) r.out.append(buf.data(), n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream(p) << s;
}

// A config small enough to train in a few seconds.
std::string tiny_config(const std::string& out_dir) {
  const json j = {
      {"schema", "bard.run/v1"},
      {"output_dir", out_dir},
      {"task", {{"num_pairs", 3}, {"num_queries", 2}, {"value_len", 1}, {"vocab_size", 12}}},
      {"net", {{"layers", 1}, {"model_dim", 16}, {"heads", 2}, {"ff_dim", 24}}},
      {"bridge",
       {{"block_schedule", {1, 2}},
        {"ar_steps", 4},
        {"stage_steps", {3, 3}},
        {"distill_steps", {0, 2}},
        {"eval_examples", 4},
        {"train_size", 40},
        {"distill_fraction", 4},
        {"phases", {{"ar", {{"batch", 2}}}, {"stage", {{"batch", 2}}}, {"distill", {{"batch", 2}}}}}}},
  };
  const fs::path p = work_dir() / (out_dir + ".json");
  write_text(p, j.dump());
  return p.string();
}

}  // namespace

TEST(Cli, GenDataIsByteIdenticalAcrossRuns) {
  ASSERT_EQ(bard("gen-data --n 20 --seed 7 --out a.jsonl").code, 0);
  ASSERT_EQ(bard("gen-data --n 20 --seed 7 --out b.jsonl").code, 0);
  const std::string a = slurp(work_dir() / "a.jsonl");
  EXPECT_EQ(a, slurp(work_dir() / "b.jsonl"));
  std::istringstream lines(a);
  std::string line;
  int count = 0;
  while (std::getline(lines, line)) {
    const json j = json::parse(line);
    EXPECT_EQ(j["index"].get<int>(), count);
    EXPECT_EQ(j["q"].size(), 35u);
    EXPECT_EQ(j["x1"].size(), 32u);
    ++count;
  }
  EXPECT_EQ(count, 20);
  ASSERT_EQ(bard("gen-data --n 1 --start 3 --seed 7 --out g.jsonl").code, 0);
  const json g = json::parse(slurp(work_dir() / "g.jsonl"));
  const json golden = json::parse(slurp(fs::path(BARD_TEST_DATA) / "golden_seed7_index3.json"));
  EXPECT_EQ(g["q"], golden["q"]);
  EXPECT_EQ(g["x1"], golden["x1"]);
}

TEST(Cli, GenDataEdgeCases) {
  EXPECT_EQ(bard("gen-data --n 0 --out empty.jsonl").code, 0);
  EXPECT_TRUE(fs::exists(work_dir() / "empty.jsonl"));
  EXPECT_EQ(fs::file_size(work_dir() / "empty.jsonl"), 0u);

  write_text(work_dir() / "bad.json", R"({"schema":"bard.run/v1","task":{"num_pairs":2,"num_queries":3}})");
  EXPECT_EQ(bard("gen-data --config '" + (work_dir() / "bad.json").string() + "' --out x.jsonl").code, 2);
  write_text(work_dir() / "unknown.json", R"({"schema":"bard.run/v1","colour":1})");
  EXPECT_EQ(bard("gen-data --config '" + (work_dir() / "unknown.json").string() + "'").code, 2);
  EXPECT_EQ(bard("gen-data --bogus").code, 2);
}

TEST(Cli, VerifySuites) {
  const CliRun all = bard("verify");
  EXPECT_EQ(all.code, 0) << all.out;
  EXPECT_NE(all.out.find("ar_equivalence"), std::string::npos);
  EXPECT_NE(bard("verify mask --inject-fault mask").code, 0);
  EXPECT_EQ(bard("verify mask").code, 0);
  EXPECT_EQ(bard("verify nonsense").code, 2);
}

TEST(Cli, DumpMaskAndVerifyNoise) {
  const CliRun m = bard("dump-mask --context-len 1 --response-len 2 --block-size 1");
  ASSERT_EQ(m.code, 0);
  EXPECT_EQ(m.out, "1,0,0,0,0\n1,1,0,0,0\n1,1,1,0,0\n1,0,0,1,0\n1,1,0,0,1\n");
  EXPECT_EQ(bard("dump-mask --context-len 2 --response-len 6 --block-size 4").code, 2);

  const CliRun n = bard("verify-noise --t 0.25,0.75 --n 4000");
  ASSERT_EQ(n.code, 0) << n.out;
  const json j = json::parse(n.out);
  EXPECT_TRUE(j["passed"].get<bool>());
  EXPECT_EQ(bard("verify-noise --t 1.5").code, 2);
}

TEST(Cli, TrainBridgeDecodeBench) {
  const std::string cfg = tiny_config("tiny");
  ASSERT_EQ(bard("train-ar --config '" + cfg + "'").code, 0);
  const fs::path dir = work_dir() / "tiny";
  EXPECT_TRUE(fs::exists(dir / "phi.ckpt"));
  EXPECT_TRUE(fs::exists(dir / "config.json"));
  const std::string metrics = slurp(dir / "metrics.jsonl");
  std::istringstream lines(metrics);
  std::string line;
  int n = 0;
  while (std::getline(lines, line)) {
    const json j = json::parse(line);
    EXPECT_TRUE(j.contains("config_hash"));
    ++n;
  }
  EXPECT_GT(n, 0);

  // stage 2 alone needs stage1 upstream
  EXPECT_EQ(bard("bridge --config '" + cfg + "' --stages 2").code, 3);
  const CliRun br = bard("bridge --config '" + cfg + "' --resume");
  ASSERT_EQ(br.code, 0) << br.out;
  EXPECT_TRUE(fs::exists(dir / "stage2.ckpt"));

  const std::string ck = (dir / "stage2.ckpt").string();
  const CliRun dec = bard("decode --config '" + cfg + "' --checkpoint '" + ck + "' --block 2 --eta 0.5 --n 2 --trace");
  ASSERT_EQ(dec.code, 0) << dec.out;
  EXPECT_EQ(bard("decode --config '" + cfg + "' --checkpoint '" + ck + "' --block 4").code, 2);
  EXPECT_EQ(bard("decode --config '" + cfg + "' --checkpoint '" + (dir / "missing.ckpt").string() + "' --block 2").code, 6);

  const std::string phi = (dir / "phi.ckpt").string();
  ASSERT_EQ(bard("bench --config '" + cfg + "' --checkpoint '" + phi + "' --checkpoint '" + ck + "' --blocks 1,2 --etas 0,0.9 --n 3 --out bench").code, 0);
  const std::string csv = slurp(work_dir() / "bench.csv");
  EXPECT_EQ(csv.rfind("policy_id,B,eta,exact_match,fwd_per_token,speedup,wall_ms\n", 0), 0u);
  std::istringstream rows(csv);
  int r = 0;
  bool ar_row = false;
  while (std::getline(rows, line)) {
    if (r++ == 0) continue;
    if (line.find(":ar,") != std::string::npos) {
      ar_row = true;
      EXPECT_NE(line.find(",1,1,"), std::string::npos) << line;  // fwd_per_token 1, speedup 1
    }
  }
  EXPECT_TRUE(ar_row);
  EXPECT_EQ(r, 1 + 1 + 2 * 2);

  ASSERT_EQ(bard("bench --out empty").code, 0);
  EXPECT_EQ(slurp(work_dir() / "empty.csv"), "policy_id,B,eta,exact_match,fwd_per_token,speedup,wall_ms\n");
  EXPECT_NE(bard("bench --checkpoint '" + (dir / "missing.ckpt").string() + "' --blocks 2 --out m").code, 0);
}

TEST(Cli, DistillChecksTeacher) {
  const std::string cfg = tiny_config("dist");
  ASSERT_EQ(bard("bridge --config '" + cfg + "'").code, 0);
  const fs::path dir = work_dir() / "dist";
  const std::string before = slurp(dir / "stage1.ckpt");
  const CliRun r = bard("distill --config '" + cfg + "' --student '" + (dir / "stage2_train.ckpt").string() + "' --teacher '" +
                     (dir / "stage1.ckpt").string() + "' --block 2 --steps 2 --out d.ckpt");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(slurp(dir / "stage1.ckpt"), before);
  const json j = json::parse(r.out);
  EXPECT_EQ(j["teacher_fingerprint_before"], j["teacher_fingerprint_after"]);
}
