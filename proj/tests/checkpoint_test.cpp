#include <gtest/gtest.h>

#include <filesystem>

#include "bard/checkpoint.hpp"

using namespace bard;
namespace fs = std::filesystem;

namespace {

NetConfig small(Precision p) {
  NetConfig c;
  c.layers = 1;
  c.model_dim = 8;
  c.heads = 2;
  c.ff_dim = 12;
  c.vocab_total = 9;
  c.max_positions = 10;
  c.precision = p;
  return c;
}

template <typename Scalar>
Checkpoint<Scalar> sample_checkpoint() {
  Checkpoint<Scalar> ck;
  ck.params = init_params<Scalar>(small(precision_of<Scalar>()), 5);
  ck.stage = {2, 8, "kd", "distill", "mixture"};
  ck.lineage = {"stage2", "stage2_train", "stage1", {"init", "phi", "stage1", "stage2_train", "stage2"}};
  ck.seeds = {{"init", 1}};
  ck.metrics = {{"steps", 10}};
  return ck;
}

fs::path temp_file(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("bard_ckpt_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()));
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

template <typename T>
class RoundTrip : public ::testing::Test {};
using Scalars = ::testing::Types<float, double>;
TYPED_TEST_SUITE(RoundTrip, Scalars);

TYPED_TEST(RoundTrip, ByteExact) {
  const auto ck = sample_checkpoint<TypeParam>();
  const std::string bytes = serialize_checkpoint(ck);
  const auto back = deserialize_checkpoint<TypeParam>(bytes);
  EXPECT_EQ(back.params.values, ck.params.values);
  EXPECT_EQ(back.lineage.chain, ck.lineage.chain);
  EXPECT_EQ(back.stage.block_size, 8);
  EXPECT_EQ(serialize_checkpoint(back), bytes);

  const fs::path p = temp_file(std::string("rt_") + (sizeof(TypeParam) == 4 ? "f32" : "f64") + ".ckpt");
  save_checkpoint(p, ck);
  EXPECT_EQ(read_file(p), bytes);
  EXPECT_EQ(checkpoint_precision(p), precision_of<TypeParam>());
  EXPECT_EQ(load_checkpoint<TypeParam>(p).params.values, ck.params.values);
  EXPECT_EQ(file_fingerprint(p).size(), 16u);
}

TEST(Checkpoint, CorruptionIsIoError) {
  const std::string bytes = serialize_checkpoint(sample_checkpoint<float>());
  std::string bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(deserialize_checkpoint<float>(bad), IoError);
  EXPECT_THROW(deserialize_checkpoint<float>(bytes.substr(0, bytes.size() - 3)), IoError);
  EXPECT_THROW(deserialize_checkpoint<float>(bytes.substr(0, 12)), IoError);
  EXPECT_THROW(deserialize_checkpoint<float>(bytes + "x"), IoError);
  EXPECT_THROW(deserialize_checkpoint<double>(bytes), IoError);
  EXPECT_THROW(load_checkpoint<float>(temp_file("does_not_exist.ckpt")), IoError);
}

TEST(Checkpoint, FingerprintTracksContent) {
  const fs::path a = temp_file("fa.ckpt"), b = temp_file("fb.ckpt");
  auto ck = sample_checkpoint<float>();
  save_checkpoint(a, ck);
  ck.params.values[3] += 1.0f;
  save_checkpoint(b, ck);
  EXPECT_NE(file_fingerprint(a), file_fingerprint(b));
  save_checkpoint(b, sample_checkpoint<float>());
  EXPECT_EQ(file_fingerprint(a), file_fingerprint(b));
}
