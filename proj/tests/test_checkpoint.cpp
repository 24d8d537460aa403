#include <gtest/gtest.h>

#include <random>

#include "lrdb/checkpoint.hpp"
#include "lrdb/errors.hpp"
#include "lrdb/io.hpp"
#include "test_util.hpp"

using namespace lrdb;
using lrdb::testing::random_tensor;
using lrdb::testing::TempDir;

namespace {

Network<float> trained_looking(const char* spec, std::uint64_t seed) {
  Network<float> net = Network<float>::build(parse_spec(spec), seed);
  std::mt19937_64 rng(seed);
  net.forward(nullptr, random_tensor<float>({4, 3, 32, 32}, rng), Mode::train);
  return net;
}

}  // namespace

TEST(Checkpoint, NetworkRoundTripIsBitExact) {
  TempDir dir("ckpt");
  Network<float> net = trained_looking("r20-2-1-2", 3);
  Sgd<float> opt(0.9, 1e-4);
  for (const auto& name : net.parameter_names()) opt.add(name, net.parameter(name), net.decays(name));
  std::mt19937_64 rng(1);
  for (auto& slot : opt.slots()) {
    for (auto& v : slot.velocity) v = static_cast<float>(rng() % 1000) / 7.0f;
  }
  const Checkpoint ckpt = make_checkpoint(net, 1234, 0.625, "abc123", &opt);
  save_checkpoint(ckpt, dir / "a.lrdb");
  EXPECT_FALSE(std::filesystem::exists(dir / "a.lrdb.tmp"));
  const Checkpoint back = load_checkpoint(dir / "a.lrdb");
  EXPECT_EQ(back.spec, "r20-2-1-2");
  EXPECT_EQ(back.step, 1234);
  EXPECT_EQ(back.best_accuracy, 0.625);
  EXPECT_EQ(back.fingerprint, "abc123");
  EXPECT_EQ(serialize_checkpoint(back), serialize_checkpoint(ckpt));

  Network<float> restored = network_from_checkpoint<float>(back);
  EXPECT_EQ(state_hash(restored), state_hash(net));
  Sgd<float> opt2(0.9, 1e-4);
  for (const auto& name : restored.parameter_names()) opt2.add(name, restored.parameter(name), restored.decays(name));
  apply_checkpoint(back, restored, &opt2);
  for (std::size_t k = 0; k < opt.slots().size(); ++k) EXPECT_EQ(opt2.slots()[k].velocity, opt.slots()[k].velocity);

  std::mt19937_64 r2(5);
  auto x = random_tensor<float>({2, 3, 32, 32}, r2);
  const auto a = net.forward(nullptr, x, Mode::eval).logits, b = restored.forward(nullptr, x, Mode::eval).logits;
  EXPECT_TRUE(std::equal(a->values().begin(), a->values().end(), b->values().begin()));
}

TEST(Checkpoint, HeaderLayout) {
  const Checkpoint ckpt = make_checkpoint(Network<float>::build(parse_spec("r8-1-1-1"), 0), 7, 0.5, "fp");
  const auto bytes = serialize_checkpoint(ckpt);
  ASSERT_GT(bytes.size(), 16u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "LRDB");
  EXPECT_EQ(bytes[4] | (bytes[5] << 8), kCheckpointVersion);
  EXPECT_EQ(bytes[6], 8);  // spec length, little-endian
  EXPECT_EQ(std::string(bytes.begin() + 10, bytes.begin() + 18), "r8-1-1-1");
}

TEST(Checkpoint, EveryTruncationRejected) {
  const auto bytes = serialize_checkpoint(make_checkpoint(Network<float>::build(parse_spec("r8-1-1-1"), 0), 1, 0, "x"));
  for (std::size_t len = 0; len < bytes.size(); len += 1 + len / 50) {
    EXPECT_THROW(parse_checkpoint(std::span(bytes.data(), len)), FormatError) << len;
  }
  EXPECT_THROW(parse_checkpoint(std::span(bytes.data(), bytes.size() - 1)), FormatError);
  auto longer = bytes;
  longer.push_back(0);
  EXPECT_THROW(parse_checkpoint(longer), FormatError);
}

TEST(Checkpoint, TruncatedFileLeavesNoNetwork) {
  TempDir dir("ckpt_trunc");
  auto bytes = serialize_checkpoint(make_checkpoint(Network<float>::build(parse_spec("r8-1-1-1"), 0), 1, 0, "x"));
  bytes.resize(bytes.size() / 2);
  write_file_atomic(dir / "t.lrdb", bytes);
  try {
    network_from_checkpoint<float>(load_checkpoint(dir / "t.lrdb"));
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("t.lrdb"), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, BadMagicAndVersion) {
  auto bytes = serialize_checkpoint(make_checkpoint(Network<float>::build(parse_spec("r8-1-1-1"), 0), 1, 0, "x"));
  auto magic = bytes;
  magic[0] = 'X';
  EXPECT_THROW(parse_checkpoint(magic), FormatError);
  auto version = bytes;
  version[4] = 9;
  EXPECT_THROW(parse_checkpoint(version), FormatError);
}

TEST(Checkpoint, SpecMismatchRejected) {
  const Checkpoint ckpt = make_checkpoint(Network<float>::build(parse_spec("r20-2-1-1"), 0), 1, 0, "x");
  Network<float> other = Network<float>::build(parse_spec("r20-2-1-2"), 0);
  try {
    apply_checkpoint(ckpt, other);
    FAIL();
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("r20-2-1-1"), std::string::npos) << msg;
    EXPECT_NE(msg.find("r20-2-1-2"), std::string::npos) << msg;
  }
}

TEST(Checkpoint, UnknownAndDuplicateNamesRejected) {
  Checkpoint ckpt = make_checkpoint(Network<float>::build(parse_spec("r8-1-1-1"), 0), 1, 0, "x");
  Checkpoint unknown = ckpt;
  unknown.tensors.emplace_back("block9.0.mystery", Tensor<float>(Shape{1}));
  try {
    network_from_checkpoint<float>(parse_checkpoint(serialize_checkpoint(unknown)));
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("block9.0.mystery"), std::string::npos) << e.what();
  }
  Checkpoint dup = ckpt;
  dup.tensors.push_back(dup.tensors.front());
  EXPECT_THROW(parse_checkpoint(serialize_checkpoint(dup)), FormatError);
  Checkpoint missing = ckpt;
  missing.tensors.pop_back();
  EXPECT_THROW(network_from_checkpoint<float>(missing), FormatError);
}

TEST(Checkpoint, StateHashCoversRunningStats) {
  Network<float> net = Network<float>::build(parse_spec("r8-1-1-1"), 0);
  const std::string before = state_hash(net);
  std::mt19937_64 rng(0);
  net.forward(nullptr, random_tensor<float>({2, 3, 32, 32}, rng), Mode::eval);
  EXPECT_EQ(state_hash(net), before);
  net.forward(nullptr, random_tensor<float>({2, 3, 32, 32}, rng), Mode::train);
  EXPECT_NE(state_hash(net), before);
}
