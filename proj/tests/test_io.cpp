#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <limits>
#include <random>

#include "vadepth/io.hpp"

using namespace vadepth;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() /
            ("vadepth_io_" + std::to_string(std::random_device{}()) + "_" + std::to_string(counter_++));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
  static inline int counter_ = 0;
};

DepthMap float_valued(int h, int w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> ud(-100.0f, 100.0f);
  DepthMap d(h, w);
  for (double& v : d.values.flat()) v = static_cast<double>(ud(rng));
  return d;
}

std::string be_float(float f) {
  const auto u = std::bit_cast<std::uint32_t>(f);
  std::string s(4, '\0');
  for (int k = 0; k < 4; ++k) s[static_cast<std::size_t>(k)] = static_cast<char>((u >> (24 - 8 * k)) & 0xff);
  return s;
}

}  // namespace

TEST(Digest, KnownValues) {
  EXPECT_EQ(digest(""), "fnv1a64:cbf29ce484222325");
  EXPECT_EQ(digest("a"), "fnv1a64:af63dc4c8601ec8c");
  EXPECT_NE(digest("ab"), digest("ba"));
}

TEST(Files, AtomicWriteAndRead) {
  TempDir dir;
  const auto p = dir.path() / "x.bin";
  write_file_atomic(p, std::string("a\0b", 3));
  EXPECT_EQ(read_file(p), std::string("a\0b", 3));
  EXPECT_FALSE(fs::exists(dir.path() / "x.bin.tmp"));
  EXPECT_THROW(read_file(dir.path() / "missing"), IoError);
  EXPECT_THROW(write_file_atomic(dir.path() / "no" / "such" / "dir", "x"), IoError);
}

TEST(Pfm, HeaderAndSize) {
  const auto bytes = encode_pfm(float_valued(7, 5, 1));
  const std::string header = "Pf\n5 7\n-1.0\n";
  ASSERT_EQ(bytes.substr(0, header.size()), header);
  EXPECT_EQ(bytes.size(), header.size() + 140);
}

TEST(Pfm, RoundTripIsExactForFloatValues) {
  TempDir dir;
  const auto map = float_valued(7, 5, 2);
  write_pfm(dir.path() / "m.pfm", map);
  const auto back = read_pfm(dir.path() / "m.pfm");
  EXPECT_EQ(back.values, map.values);
  EXPECT_EQ(back.valid, map.valid);
  EXPECT_EQ(encode_pfm(back), encode_pfm(map));
}

TEST(Pfm, RowsAreStoredBottomUp) {
  DepthMap m(2, 1);
  m(0, 0) = 1.0;
  m(1, 0) = 2.0;
  const auto bytes = encode_pfm(m);
  const std::size_t header = std::string("Pf\n1 2\n-1.0\n").size();
  float first = 0.0f;
  std::memcpy(&first, bytes.data() + header, 4);
  if constexpr (std::endian::native == std::endian::little) EXPECT_EQ(first, 2.0f);
}

TEST(Pfm, InvalidPixelsBecomeNan) {
  auto m = float_valued(3, 3, 3);
  m.valid(1, 2) = 0;
  const auto back = parse_pfm(encode_pfm(m));
  EXPECT_EQ(back.valid(1, 2), 0);
  EXPECT_EQ(back.valid(0, 0), 1);
  EXPECT_EQ(back(1, 2), 0.0);
}

// Positive scale means big-endian samples; built byte by byte here.
TEST(Pfm, ReadsBigEndian) {
  std::string bytes = "Pf\n2 2\n1.0\n";
  // bottom row first: (1,0) (1,1), then (0,0) (0,1)
  for (float f : {3.5f, -4.25f, 1.0f, 2.0f}) bytes += be_float(f);
  const auto m = parse_pfm(bytes);
  EXPECT_EQ(m(0, 0), 1.0);
  EXPECT_EQ(m(0, 1), 2.0);
  EXPECT_EQ(m(1, 0), 3.5);
  EXPECT_EQ(m(1, 1), -4.25);
}

TEST(Pfm, RejectsMalformedInput) {
  const std::string payload(16, '\0');
  EXPECT_THROW(parse_pfm("PF\n2 2\n-1.0\n" + payload), IoError);
  EXPECT_THROW(parse_pfm("P5\n2 2\n-1.0\n" + payload), IoError);
  EXPECT_THROW(parse_pfm("Pf\n2 2\n-1.0\n" + payload.substr(0, 15)), IoError);
  EXPECT_THROW(parse_pfm("Pf\n2 x\n-1.0\n" + payload), IoError);
  EXPECT_THROW(parse_pfm("Pf\n0 2\n-1.0\n" + payload), IoError);
  EXPECT_THROW(parse_pfm("Pf\n2 2\n0.0\n" + payload), IoError);
  EXPECT_THROW(parse_pfm("Pf\n2 2"), IoError);
  EXPECT_THROW(parse_pfm(""), IoError);
  try {
    parse_pfm("PF\n2 2\n-1.0\n" + payload);
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("PF"), std::string::npos);
  }
}

TEST(Csv, ParsesNanAsInvalid) {
  const auto m = parse_csv_map("1,2\n3,nan\n");
  ASSERT_EQ(m.height(), 2);
  ASSERT_EQ(m.width(), 2);
  EXPECT_EQ(m(0, 1), 2.0);
  EXPECT_EQ(m(1, 0), 3.0);
  EXPECT_EQ(m.valid(1, 1), 0);
  EXPECT_EQ(m.valid(0, 0), 1);
  EXPECT_EQ(encode_csv_map(m), "1,2\n3,nan\n");
}

TEST(Csv, RoundTripIsExact) {
  TempDir dir;
  std::mt19937_64 rng(4);
  std::normal_distribution<double> nd(0.0, 1e3);
  DepthMap m(6, 4);
  for (double& v : m.values.flat()) v = nd(rng);
  m(0, 0) = 1e-300;
  m(0, 1) = -0.0;
  m(0, 2) = std::numeric_limits<double>::max();
  m(0, 3) = std::numeric_limits<double>::denorm_min();
  m.valid(5, 3) = 0;
  m(5, 3) = 0.0;
  write_csv_map(dir.path() / "m.csv", m);
  const auto back = read_map(dir.path() / "m.csv");
  EXPECT_EQ(back.values, m.values);
  EXPECT_EQ(back.valid, m.valid);
  EXPECT_TRUE(std::signbit(back(0, 1)));
}

TEST(Csv, RejectsBadInput) {
  EXPECT_THROW(parse_csv_map(""), IoError);
  EXPECT_THROW(parse_csv_map("\n\n"), IoError);
  EXPECT_THROW(parse_csv_map("1,2\n3\n"), IoError);
  EXPECT_THROW(parse_csv_map("1,x\n"), IoError);
  EXPECT_THROW(parse_csv_map("1,,2\n"), IoError);
  EXPECT_THROW(parse_csv_map("1,2,\n"), IoError);
  try {
    parse_csv_map("");
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("ragged/empty"), std::string::npos);
  }
}

TEST(Csv, ToleratesCrlfAndSpaces) {
  const auto m = parse_csv_map("1, 2\r\n 3 ,4\r\n");
  EXPECT_EQ(m(1, 0), 3.0);
  EXPECT_EQ(m(0, 1), 2.0);
}

TEST(Gauge, ParseAndFormat) {
  const auto a = parse_gauge("anchor:1,2,0.5");
  ASSERT_TRUE(std::holds_alternative<AnchorGauge>(a));
  EXPECT_EQ(std::get<AnchorGauge>(a).row, 1);
  EXPECT_EQ(std::get<AnchorGauge>(a).col, 2);
  EXPECT_EQ(std::get<AnchorGauge>(a).value, 0.5);
  EXPECT_EQ(std::get<AnchorGauge>(a).weight, 1.0);
  EXPECT_EQ(format_gauge(a), "anchor:1,2,0.5,1");
  for (const std::string text : {"anchor:0,3,-2.25,4", "mean:0.10000000000000001", "tikhonov:0.001"})
    EXPECT_EQ(format_gauge(parse_gauge(format_gauge(parse_gauge(text)))), format_gauge(parse_gauge(text)));
  EXPECT_EQ(std::get<MeanGauge>(parse_gauge("mean:0.1")).value, 0.1);
  for (const char* bad : {"anchor:1,2", "anchor:1.5,2,0", "mean:", "mean:x", "tikhonov:1,2", "cubic:1", ""})
    EXPECT_THROW(parse_gauge(bad), InvalidArgument) << bad;
}

TEST(TrainConfigJson, RoundTripAndDefaults) {
  TrainConfig c;
  c.shape.channels = 16;
  c.shape.mode = LayerMode::conv_replacement;
  c.epochs = 7;
  c.loss.lambda = 0.25;
  c.data.train_scenes = 40;
  c.seed = 12;
  const auto back = train_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  const auto defaults = train_config_from_json(json{{"schema_version", 1}});
  EXPECT_EQ(to_json(defaults), to_json(TrainConfig{}));
}

TEST(TrainConfigJson, RejectsBadConfigs) {
  EXPECT_THROW(train_config_from_json(json::object()), InvalidArgument);
  EXPECT_THROW(train_config_from_json(json{{"schema_version", 2}}), InvalidArgument);
  EXPECT_THROW(train_config_from_json(json{{"schema_version", 1}, {"epochs", "many"}}), InvalidArgument);
  EXPECT_THROW(train_config_from_json(json{{"schema_version", 1}, {"mode", "mlp"}}), InvalidArgument);
  EXPECT_THROW(train_config_from_json(json{{"schema_version", 1}, {"data", {{"train_scenes", 4}}}}), InvalidArgument);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto model = init_model(ToyShape{4, 3, LayerMode::conv_replacement}, 9);
  const auto bytes = encode_checkpoint(model, json{{"a", 1}}, 9);
  EXPECT_EQ(bytes.substr(0, 8), "VADCKPT1");
  const auto ck = decode_checkpoint(bytes);
  EXPECT_EQ(ck.model.shape.mode, LayerMode::conv_replacement);
  EXPECT_EQ(ck.model.shape.channels, 3);
  EXPECT_EQ(ck.model.params, model.params);
  EXPECT_EQ(ck.header.at("seed").get<std::uint64_t>(), 9u);
  EXPECT_EQ(encode_checkpoint(ck.model, json{{"a", 1}}, 9), bytes);
}

TEST(Checkpoint, RejectsCorruption) {
  const auto bytes = encode_checkpoint(init_model({}, 1), json::object(), 1);
  EXPECT_THROW(decode_checkpoint("VADCKPT0" + bytes.substr(8)), IoError);
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 1)), IoError);
  EXPECT_THROW(decode_checkpoint(bytes + "x"), IoError);
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, 20)), IoError);
  EXPECT_THROW(decode_checkpoint(""), IoError);
}

TEST(Manifest, JsonRoundTrip) {
  RunManifest m;
  m.command = "solve";
  m.argv = {"solve", "--gx", "gx.pfm"};
  m.config = json{{"backend", "direct"}};
  m.seeds = json{{"seed", 3}};
  m.input_digests["gx.pfm"] = digest("x");
  m.output_digests["z.csv"] = digest("y");
  m.timings = json{{"total_s", 0.5}};
  const auto back = manifest_from_json(json::parse(to_json(m).dump()));
  EXPECT_EQ(to_json(back), to_json(m));
  EXPECT_EQ(back.tool_version, kToolVersion);
  EXPECT_THROW(manifest_from_json(json{{"argv", json::array()}}), IoError);
}

TEST(MetricsJson, HasAllFields) {
  const auto j = to_json(MetricsReport{});
  for (const char* k : {"silog", "abs_rel", "sq_rel", "rms", "rms_log", "d1", "d2", "d3", "n_valid"})
    EXPECT_TRUE(j.contains(k)) << k;
}
