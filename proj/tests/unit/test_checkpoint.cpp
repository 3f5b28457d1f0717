#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "vfm/ad/checkpoint.hpp"
#include "vfm/binary_io.hpp"
#include "vfm/error.hpp"

using namespace vfm;
using namespace vfm::ad;

namespace {

ParamStore sample_store() {
  ParamStore s;
  s.add("layer.w", Tensor(2, 3, {1, 2, 3, 4, 5, 6}));
  s.add("layer.b", Tensor(1, 3, {0.1, -0.2, 1e-300}));
  s[0].adam_m = Tensor(2, 3, 0.25);
  s[1].adam_v = Tensor(1, 3, 7.0);
  s.set_step(42);
  return s;
}

CheckpointHeader sample_header() {
  CheckpointHeader h;
  h.seed = 9;
  h.config_hash = "00112233aabbccdd";
  h.step = 42;
  h.rng_state = "1 2 3";
  h.config_json = R"({"a":1})";
  return h;
}

}  // namespace

TEST(Checkpoint, RoundTripIsExact) {
  const ParamStore s = sample_store();
  const std::string bytes = serialize_checkpoint(sample_header(), s);
  const Checkpoint ck = parse_checkpoint(bytes);
  EXPECT_EQ(ck.header.seed, 9u);
  EXPECT_EQ(ck.header.config_hash, "00112233aabbccdd");
  EXPECT_EQ(ck.header.step, 42u);
  EXPECT_EQ(ck.header.rng_state, "1 2 3");
  EXPECT_EQ(ck.header.config_json, R"({"a":1})");
  ASSERT_EQ(ck.params.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(ck.params[i].name, s[i].name);
    EXPECT_EQ(ck.params[i].value, s[i].value);
    EXPECT_EQ(ck.params[i].adam_m, s[i].adam_m);
    EXPECT_EQ(ck.params[i].adam_v, s[i].adam_v);
  }
  EXPECT_EQ(serialize_checkpoint(ck.header, ck.params), bytes);
}

TEST(Checkpoint, HeaderIsText) {
  const std::string bytes = serialize_checkpoint(sample_header(), sample_store());
  EXPECT_EQ(bytes.rfind("vfm-checkpoint\nversion 1\n", 0), 0u);
  EXPECT_NE(bytes.find("tensor layer.w 2 3\n"), std::string::npos);
  EXPECT_NE(bytes.find("tensor adam_v/layer.b 1 3\n"), std::string::npos);
}

TEST(Checkpoint, RejectsCorruption) {
  const std::string good = serialize_checkpoint(sample_header(), sample_store());
  std::string bad_magic = good;
  bad_magic[0] = 'x';
  EXPECT_THROW(parse_checkpoint(bad_magic), FormatError);

  std::string bad_version = good;
  bad_version.replace(bad_version.find("version 1"), 9, "version 7");
  try {
    parse_checkpoint(bad_version);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
  }

  EXPECT_THROW(parse_checkpoint(good.substr(0, good.size() - 5)), FormatError);
  EXPECT_THROW(parse_checkpoint(good + "x"), FormatError);
  EXPECT_THROW(parse_checkpoint(""), FormatError);
}

TEST(Checkpoint, MissingFile) {
  EXPECT_THROW(load_checkpoint("/nonexistent/ck.bin"), ConfigError);
}

TEST(Checkpoint, SaveLoadThroughFile) {
  const auto dir = std::filesystem::temp_directory_path() / "vfm_ck_test";
  std::filesystem::create_directories(dir);
  save_checkpoint(dir / "a.ckpt", sample_header(), sample_store());
  const Checkpoint ck = load_checkpoint(dir / "a.ckpt");
  EXPECT_EQ(ck.params[0].value, sample_store()[0].value);
  std::filesystem::remove_all(dir);
}

TEST(BinaryIo, LittleEndianRoundTrip) {
  std::ostringstream os;
  const std::vector<double> v{1.0, -0.0, 3.5e-310, 1e308};
  io::write_f64_le(os, v);
  const std::string bytes = os.str();
  ASSERT_EQ(bytes.size(), 32u);
  // 1.0 = 0x3FF0000000000000, least significant byte first.
  EXPECT_EQ(static_cast<unsigned char>(bytes[7]), 0x3F);
  EXPECT_EQ(static_cast<unsigned char>(bytes[6]), 0xF0);
  std::istringstream is(bytes);
  EXPECT_EQ(io::read_f64_le(is, 4), v);
  std::istringstream short_is(bytes.substr(0, 20));
  EXPECT_THROW(io::read_f64_le(short_is, 3), FormatError);
}

TEST(BinaryIo, Fnv1aKnownValues) {
  EXPECT_EQ(io::fnv1a_hex(""), "cbf29ce484222325");
  EXPECT_EQ(io::fnv1a_hex("a"), "af63dc4c8601ec8c");
}

TEST(BinaryIo, SplitKey) {
  EXPECT_EQ(io::split_key("seed 12"), (std::pair<std::string, std::string>{"seed", "12"}));
  EXPECT_EQ(io::split_key("end"), (std::pair<std::string, std::string>{"end", ""}));
}
