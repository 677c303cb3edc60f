#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <set>

#include "fixtures.hpp"
#include "segkit/data.hpp"
#include "segkit/error.hpp"
#include "segkit/image_io.hpp"
#include "segkit/nn.hpp"
#include "segkit/ops.hpp"

using namespace segkit;
using namespace segkit::data;
using segkit::testing::random_labels;
using segkit::testing::TempDir;
using segkit::testing::WarningCapture;

namespace {

template <class F>
void expect_error(Errc code, F&& f) {
  try {
    f();
    ADD_FAILURE() << "expected " << to_string(code);
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), code) << e.what();
  }
}

RgbImage solid(std::size_t h, std::size_t w, Rgb c) {
  RgbImage img{h, w, {}};
  for (std::size_t i = 0; i < h * w; ++i) img.pixels.insert(img.pixels.end(), {c.r, c.g, c.b});
  return img;
}

RgbImage random_image(nn::Rng& rng, std::size_t h, std::size_t w) {
  RgbImage img{h, w, std::vector<std::uint8_t>(h * w * 3)};
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng.below(256));
  return img;
}

}  // namespace

TEST(Hex, Examples) {
  EXPECT_EQ(hex_to_rgb("3C1098"), (Rgb{60, 16, 152}));
  EXPECT_EQ(hex_to_rgb("#3C1098"), (Rgb{60, 16, 152}));
  EXPECT_EQ(hex_to_rgb("3c1098"), (Rgb{60, 16, 152}));
  EXPECT_EQ(hex_to_rgb("000000"), (Rgb{0, 0, 0}));
  EXPECT_EQ(hex_to_rgb("FFFFFF"), (Rgb{255, 255, 255}));
}

// 16 * high + low on every channel, for every byte value.
TEST(Hex, DigitOracle) {
  const char* digits = "0123456789ABCDEF";
  for (int v = 0; v < 256; ++v) {
    std::string h = {digits[v / 16], digits[v % 16], digits[(255 - v) / 16], digits[(255 - v) % 16], '0', '7'};
    const Rgb c = hex_to_rgb(h);
    EXPECT_EQ(c.r, v);
    EXPECT_EQ(c.g, 255 - v);
    EXPECT_EQ(c.b, 7);
  }
}

TEST(Hex, Errors) {
  for (const char* bad : {"", "3C109", "3C10988", "GG0000", "#", "##3C1098", "3C 098"})
    expect_error(Errc::kBadHex, [&] { hex_to_rgb(bad); });
}

TEST(Palette, Bdd22Lookups) {
  const auto p = LabelPalette::bdd22();
  EXPECT_EQ(p.size(), 22u);
  EXPECT_EQ(p.lookup({128, 64, 128}), 2);
  EXPECT_EQ(p.lookup({0, 0, 0}), 0);  // never 1, which shares the colour
  EXPECT_FALSE(p.lookup({1, 2, 3}));
  EXPECT_EQ(p.color(2), (Rgb{128, 64, 128}));
  ASSERT_EQ(p.duplicates().size(), 1u);
  EXPECT_EQ(p.duplicates()[0], (std::pair<int, int>{0, 1}));
  expect_error(Errc::kLabelOutOfRange, [&] { p.color(22); });
  expect_error(Errc::kLabelOutOfRange, [&] { p.color(-1); });
}

TEST(Palette, Eval19HasNoDuplicates) {
  const auto p = LabelPalette::eval19();
  EXPECT_EQ(p.size(), 19u);
  EXPECT_TRUE(p.duplicates().empty());
  EXPECT_EQ(p.lookup({128, 64, 128}), 0);
}

TEST(Palette, IdsMustBeContiguous) {
  expect_error(Errc::kBadFormat, [] { LabelPalette({{0, "a", {0, 0, 0}}, {2, "b", {1, 1, 1}}}, "x"); });
  expect_error(Errc::kBadFormat, [] { LabelPalette({{1, "a", {0, 0, 0}}}, "x"); });
}

TEST(Palette, FileRoundTrip) {
  TempDir dir("palette");
  const auto p = LabelPalette::bdd22();
  p.save(dir / "bdd.txt");
  const auto q = LabelPalette::load(dir / "bdd.txt");
  ASSERT_EQ(q.size(), p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    EXPECT_EQ(q.entries()[i].id, p.entries()[i].id);
    EXPECT_EQ(q.entries()[i].name, p.entries()[i].name);
    EXPECT_EQ(q.entries()[i].rgb, p.entries()[i].rgb);
  }
  EXPECT_EQ(LabelPalette::resolve((dir / "bdd.txt").string()).size(), 22u);
  EXPECT_EQ(LabelPalette::resolve("eval19").name(), "eval19");
}

TEST(Palette, FileErrors) {
  TempDir dir("palette_err");
  expect_error(Errc::kMissingFile, [&] { LabelPalette::load(dir / "nope.txt"); });
  {
    std::ofstream(dir / "bad.txt") << "# comment\n0 bg 0 0 0\n1 fg 300 0 0\n";
  }
  expect_error(Errc::kBadFormat, [&] { LabelPalette::load(dir / "bad.txt"); });
  {
    std::ofstream(dir / "short.txt") << "0 bg 0 0\n";
  }
  expect_error(Errc::kBadFormat, [&] { LabelPalette::load(dir / "short.txt"); });
  {
    std::ofstream(dir / "ok.txt") << "# two classes\n\n0 bg 0 0 0   # background\n1 fg 9 8 7\n";
  }
  EXPECT_EQ(LabelPalette::load(dir / "ok.txt").lookup({9, 8, 7}), 1);
}

TEST(Masks, KnownColours) {
  const auto p = LabelPalette::bdd22();
  RgbImage m = solid(2, 3, {128, 64, 128});
  m.pixels[0] = m.pixels[1] = m.pixels[2] = 0;
  const auto l = rgb_mask_to_labels(m, p, UnknownColorPolicy::kStrict);
  EXPECT_EQ(l.height, 2u);
  EXPECT_EQ(l.width, 3u);
  EXPECT_EQ(l.labels, (std::vector<int>{0, 2, 2, 2, 2, 2}));
}

TEST(Masks, UnknownColourPolicies) {
  const auto p = LabelPalette::bdd22();
  RgbImage m = solid(2, 2, {128, 64, 128});
  m.pixels[3] = 1, m.pixels[4] = 2, m.pixels[5] = 3;
  try {
    rgb_mask_to_labels(m, p, UnknownColorPolicy::kStrict);
    ADD_FAILURE();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::kUnknownColor);
    EXPECT_NE(std::string(e.what()).find("(1,2,3) x1"), std::string::npos) << e.what();
  }

  WarningCapture warnings;
  MaskReport report;
  const auto l = rgb_mask_to_labels(m, p, UnknownColorPolicy::kMapToZero, &report);
  EXPECT_EQ(l.labels, (std::vector<int>{2, 0, 2, 2}));
  EXPECT_EQ(report.unknown_pixels, 1u);
  EXPECT_EQ(report.unknown_colors.at({1, 2, 3}), 1u);
  EXPECT_EQ(warnings.messages().size(), 1u);

  EXPECT_EQ(parse_unknown_color_policy("strict"), UnknownColorPolicy::kStrict);
  EXPECT_EQ(parse_unknown_color_policy("map_to_zero"), UnknownColorPolicy::kMapToZero);
  expect_error(Errc::kBadConfig, [] { parse_unknown_color_policy("ignore"); });
}

TEST(Masks, ClassToColour) {
  const auto p = LabelPalette::bdd22();
  const LabelMap l{2, 2, {2, 2, 2, 2}};
  const auto img = labels_to_rgb(l, p);
  for (std::size_t y = 0; y < 2; ++y)
    for (std::size_t x = 0; x < 2; ++x) EXPECT_EQ(img.at(y, x), (Rgb{128, 64, 128}));
  expect_error(Errc::kLabelOutOfRange, [&] { labels_to_rgb(LabelMap{1, 1, {22}}, p); });
}

// Exact identity on maps that avoid the shadowed class.
TEST(Masks, RoundTripIdentity) {
  nn::Rng rng(3);
  const auto p = LabelPalette::bdd22();
  for (int trial = 0; trial < 20; ++trial) {
    auto l = random_labels(rng, 7, 9, 22);
    for (auto& v : l.labels)
      if (v == 1) v = 0;
    const auto back = rgb_mask_to_labels(labels_to_rgb(l, p), p, UnknownColorPolicy::kStrict);
    EXPECT_EQ(back.labels, l.labels);
  }
  const auto e = LabelPalette::eval19();
  const auto l = random_labels(rng, 5, 5, 19);
  EXPECT_EQ(rgb_mask_to_labels(labels_to_rgb(l, e), e).labels, l.labels);
}

TEST(Masks, ShadowedClassCollapsesToZero) {
  const auto p = LabelPalette::bdd22();
  const LabelMap l{1, 2, {1, 1}};
  EXPECT_EQ(rgb_mask_to_labels(labels_to_rgb(l, p), p).labels, (std::vector<int>{0, 0}));
}

TEST(OneHot, Definition) {
  const auto t = labels_to_onehot(LabelMap{1, 2, {1, 0}}, 2);
  EXPECT_EQ(t.shape(), (Shape{2, 1, 2}));
  EXPECT_EQ(t.data()[0], 0.0);
  EXPECT_EQ(t.data()[1], 1.0);
  EXPECT_EQ(t.data()[2], 1.0);
  EXPECT_EQ(t.data()[3], 0.0);
  expect_error(Errc::kLabelOutOfRange, [] { labels_to_onehot(LabelMap{1, 1, {2}}, 2); });
  expect_error(Errc::kLabelOutOfRange, [] { labels_to_onehot(LabelMap{1, 1, {-1}}, 2); });
}

TEST(OneHot, SumsToOneAndArgmaxInverts) {
  nn::Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    const auto l = random_labels(rng, 6, 5, 7);
    const auto t = labels_to_onehot(l, 7);
    for (std::size_t q = 0; q < 30; ++q) {
      double s = 0;
      for (std::size_t c = 0; c < 7; ++c) s += t.data()[c * 30 + q];
      ASSERT_EQ(s, 1.0);
    }
    EXPECT_EQ(nn::argmax_channel(ops::reshape(t, {1, 7, 6, 5})), l.labels);
  }
}

TEST(Histogram, SumsToPixelCount) {
  nn::Rng rng(5);
  const auto l = random_labels(rng, 13, 11, 5);
  const auto h = class_histogram(l, 5);
  ASSERT_EQ(h.size(), 5u);
  std::uint64_t total = 0;
  for (std::size_t c = 0; c < 5; ++c) {
    EXPECT_EQ(h[c], static_cast<std::uint64_t>(std::count(l.labels.begin(), l.labels.end(), int(c))));
    total += h[c];
  }
  EXPECT_EQ(total, 13u * 11u);
  expect_error(Errc::kLabelOutOfRange, [&] { class_histogram(l, 4); });
}

TEST(ResizeNearest, Examples) {
  const LabelMap l{2, 2, {1, 2, 3, 4}};
  const auto up = resize_nearest(l, 4, 4);
  EXPECT_EQ(up.labels, (std::vector<int>{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4}));
  EXPECT_EQ(resize_nearest(up, 2, 2).labels, l.labels);
}

TEST(ResizeNearest, NeverInventsLabels) {
  nn::Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const auto l = random_labels(rng, 5 + rng.below(20), 5 + rng.below(20), 22);
    const std::set<int> before(l.labels.begin(), l.labels.end());
    const auto r = resize_nearest(l, 1 + rng.below(40), 1 + rng.below(40));
    EXPECT_EQ(r.labels.size(), r.height * r.width);
    for (int v : r.labels) ASSERT_TRUE(before.count(v)) << v;
  }
}

TEST(ImageTensor, RoundTripIsExact) {
  nn::Rng rng(7);
  const auto img = random_image(rng, 5, 7);
  const auto t = image_to_tensor(img);
  EXPECT_EQ(t.shape(), (Shape{3, 5, 7}));
  for (double v : t.data()) {
    ASSERT_GE(v, 0.0);
    ASSERT_LE(v, 1.0);
  }
  EXPECT_EQ(t.at({0, 1, 2}), img.at(1, 2).r / 255.0);
  EXPECT_EQ(t.at({2, 4, 6}), img.at(4, 6).b / 255.0);
  EXPECT_EQ(tensor_to_image(t).pixels, img.pixels);
}

TEST(ImageTensor, ClampsOutOfRange) {
  const auto img = tensor_to_image(Tensor::create({3, 1, 1}, {-0.5, 2.0, 0.5}));
  EXPECT_EQ(img.at(0, 0), (Rgb{0, 255, 128}));
}

TEST(ImageIo, PpmAndPngRoundTrip) {
  TempDir dir("imgio");
  nn::Rng rng(8);
  const auto img = random_image(rng, 9, 13);
  write_image(dir / "a.ppm", img);
  write_image(dir / "a.png", img);
  for (const char* name : {"a.ppm", "a.png"}) {
    const auto back = read_image(dir / name);
    EXPECT_EQ(back.height, 9u) << name;
    EXPECT_EQ(back.width, 13u) << name;
    EXPECT_EQ(back.pixels, img.pixels) << name;
  }
  // format follows the signature, not the extension
  write_png(dir / "png_named.ppm", img);
  EXPECT_EQ(read_image(dir / "png_named.ppm").pixels, img.pixels);
}

TEST(ImageIo, PpmHeaderComments) {
  TempDir dir("ppmc");
  {
    std::ofstream out(dir / "c.ppm", std::ios::binary);
    out << "P6\n# a comment\n2 1\n255\n";
    const unsigned char px[6] = {1, 2, 3, 4, 5, 6};
    out.write(reinterpret_cast<const char*>(px), 6);
  }
  const auto img = read_image(dir / "c.ppm");
  EXPECT_EQ(img.at(0, 1), (Rgb{4, 5, 6}));
}

TEST(ImageIo, Errors) {
  TempDir dir("imgio_err");
  try {
    read_image(dir / "missing.png");
    ADD_FAILURE();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::kMissingFile);
    EXPECT_NE(std::string(e.what()).find("missing.png"), std::string::npos);
  }
  {
    std::ofstream(dir / "junk.png") << "definitely not an image";
  }
  expect_error(Errc::kBadFormat, [&] { read_image(dir / "junk.png"); });
  {
    std::ofstream(dir / "trunc.ppm", std::ios::binary) << "P6\n4 4\n255\nabc";
  }
  expect_error(Errc::kBadFormat, [&] { read_image(dir / "trunc.ppm"); });
  {
    std::ofstream(dir / "deep.ppm", std::ios::binary) << "P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00";
  }
  expect_error(Errc::kBadFormat, [&] { read_image(dir / "deep.ppm"); });
  {
    // a valid signature followed by garbage
    std::ofstream out(dir / "cut.png", std::ios::binary);
    const unsigned char sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    out.write(reinterpret_cast<const char*>(sig), 8);
    out << "garbage";
  }
  expect_error(Errc::kBadFormat, [&] { read_image(dir / "cut.png"); });
}
