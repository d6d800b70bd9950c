#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "bisenet/bt2.hpp"
#include "bisenet/image_io.hpp"
#include "bisenet/run_config.hpp"
#include "oracles.hpp"

using namespace bisenet;
namespace fs = std::filesystem;

namespace {

std::string bytes_of(const Tensor<float>& t) {
  std::ostringstream os(std::ios::binary);
  bt2::write(os, t);
  return os.str();
}

fs::path tmp(const std::string& name) { return fs::temp_directory_path() / ("bisenet_io_" + name); }

}  // namespace

TEST(Bt2, ByteLayout) {
  const Tensor<float> t({1, 2, 1, 3}, {1, 2, 3, 4, 5, 6});
  const std::string b = bytes_of(t);
  ASSERT_EQ(b.size(), 4u + 1 + 1 + 16 + 24);
  EXPECT_EQ(std::memcmp(b.data(), "BT2\0", 4), 0);
  EXPECT_EQ(b[4], 0);  // f32
  EXPECT_EQ(b[5], 4);  // rank
  const unsigned char dims[16] = {1, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0, 3, 0, 0, 0};
  EXPECT_EQ(std::memcmp(b.data() + 6, dims, 16), 0);
  // 1.0f little-endian.
  const unsigned char one[4] = {0x00, 0x00, 0x80, 0x3f};
  EXPECT_EQ(std::memcmp(b.data() + 22, one, 4), 0);
}

TEST(Bt2, RoundTripBothTypes) {
  const auto f = oracle::random_tensor<float>({2, 3, 4, 5}, 1, -10, 10);
  std::stringstream ss(std::ios::in | std::ios::out | std::ios::binary);
  bt2::write(ss, f);
  bt2::DType dt{};
  EXPECT_EQ(bt2::read<float>(ss, &dt), f);
  EXPECT_EQ(dt, bt2::DType::F32);

  const auto d = oracle::random_tensor<double>({1, 1, 7, 3}, 2, -1, 1);
  const fs::path p = tmp("rt.bt2");
  bt2::save(p, d);
  EXPECT_EQ(bt2::load<double>(p, &dt), d);
  EXPECT_EQ(dt, bt2::DType::F64);
  fs::remove(p);
}

TEST(Bt2, LowerRankIsRightAligned) {
  std::string b("BT2\0", 4);
  b += '\x01';  // f64
  b += '\x02';  // rank 2
  const unsigned char dims[8] = {2, 0, 0, 0, 3, 0, 0, 0};
  b.append(reinterpret_cast<const char*>(dims), 8);
  for (int i = 0; i < 6; ++i) {
    const double v = i * 0.5;
    b.append(reinterpret_cast<const char*>(&v), 8);
  }
  std::istringstream is(b);
  const auto t = bt2::read<float>(is);
  EXPECT_EQ(t.shape(), (Shape{1, 1, 2, 3}));
  EXPECT_EQ(t[5], 2.5f);
}

TEST(Bt2, CorruptInputs) {
  std::istringstream bad_magic(std::string("XXXX\0\x04", 6));
  EXPECT_THROW(bt2::read<float>(bad_magic), ConfigError);
  std::string b = bytes_of(Tensor<float>({1, 1, 2, 2}, 1.0f));
  std::istringstream truncated(b.substr(0, b.size() - 2));
  EXPECT_THROW(bt2::read<float>(truncated), ConfigError);
  EXPECT_THROW(bt2::load<float>(tmp("does_not_exist.bt2")), ConfigError);
}

TEST(Pnm, RoundTrip) {
  Tensor<float> img({1, 3, 5, 7});
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<float>(i % 256) / 255.0f;
  const fs::path p = tmp("img.ppm");
  image::write_pnm(p, img);
  const auto back = image::read_pnm(p);
  ASSERT_EQ(back.shape(), img.shape());
  for (std::size_t i = 0; i < img.size(); ++i) EXPECT_NEAR(back[i], img[i], 0.5f / 255);
  fs::remove(p);
}

TEST(Pnm, HeaderCommentsAnd16Bit) {
  const fs::path p = tmp("g16.pgm");
  {
    std::ofstream os(p, std::ios::binary);
    os << "P5\n# comment\n2 1\n65535\n";
    const unsigned char px[4] = {0xff, 0xff, 0x00, 0x00};
    os.write(reinterpret_cast<const char*>(px), 4);
  }
  const auto t = image::read_pnm(p);
  EXPECT_EQ(t.shape(), (Shape{1, 1, 1, 2}));
  EXPECT_EQ(t[0], 1.0f);
  EXPECT_EQ(t[1], 0.0f);
  fs::remove(p);
}

TEST(Pnm, LabelRoundTrip) {
  LabelMap l(1, 3, 4);
  for (std::size_t i = 0; i < l.data.size(); ++i) l.data[i] = static_cast<int>(i * 20);
  const fs::path p = tmp("labels.pgm");
  image::write_label_pgm(p, l);
  EXPECT_EQ(image::read_label_pgm(p), l);
  l.data[0] = 300;
  EXPECT_THROW(image::write_label_pgm(p, l), ConfigError);
  fs::remove(p);
}

TEST(RunConfigTest, Defaults) {
  std::istringstream empty("");
  const RunConfig c = parse_run_config(empty);
  EXPECT_EQ(c, RunConfig{});
  EXPECT_EQ(c.checkpoint_path(), fs::path("run") / "checkpoint");
}

TEST(RunConfigTest, SerializeIsFixedPoint) {
  std::istringstream in(
      "# toy\n"
      "alpha = 0.125\n"
      "num_classes = 3\n"
      "input_hw = 64x64\n"
      "aggregation = concat\n"
      "boosters = stage3,stage5_5\n"
      "lambda = 1/8\n"
      "base_lr = 0.01\n"
      "scales = 1.0, 1.5\n"
      "ohem = false\n"
      "crop_hw = 32x64\n"
      "output_dir = out/x\n"
      "threads = 2\n");
  const RunConfig c = parse_run_config(in);
  EXPECT_EQ(c.arch.alpha, 0.125);
  EXPECT_EQ(c.arch.lambda, 0.125);
  EXPECT_EQ(c.arch.aggregation, Aggregation::Concat);
  EXPECT_EQ(c.arch.boosters, (std::vector<std::string>{"stage3", "stage5_5"}));
  EXPECT_EQ(c.train.crop_h, 32);
  EXPECT_EQ(c.train.scales, (std::vector<double>{1.0, 1.5}));
  EXPECT_FALSE(c.train.ohem);
  const std::string s1 = serialize_run_config(c);
  std::istringstream in2(s1);
  const RunConfig c2 = parse_run_config(in2);
  EXPECT_EQ(c2, c);
  EXPECT_EQ(serialize_run_config(c2), s1);
}

TEST(RunConfigTest, ErrorsNameTheLine) {
  std::istringstream unknown("alpha = 1\n\nfoo = 3\n");
  try {
    parse_run_config(unknown, "x.cfg");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("x.cfg:3"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("foo"), std::string::npos) << e.what();
  }
  std::istringstream bad_value("batch = many\n");
  EXPECT_THROW(parse_run_config(bad_value), ConfigError);
  std::istringstream bad_arch("input_hw = 50x64\n");
  EXPECT_THROW(parse_run_config(bad_arch), ConfigError);
  std::istringstream no_equals("alpha 1\n");
  EXPECT_THROW(parse_run_config(no_equals), ConfigError);
  EXPECT_THROW(load_run_config(tmp("missing.cfg")), ConfigError);
}
