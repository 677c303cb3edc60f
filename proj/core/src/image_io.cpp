#include "segkit/image_io.hpp"

#include <png.h>

#include <cctype>
#include <cstdio>
#include <fstream>
#include <memory>

#include "segkit/error.hpp"

namespace segkit::data {

namespace {

[[noreturn]] void bad(const std::filesystem::path& path, const std::string& what) {
  fail(Errc::kBadFormat, path.string() + ": " + what);
}

// Next whitespace-delimited header token, skipping '#' comments.
std::string ppm_token(std::istream& in) {
  std::string tok;
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {}
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  return tok;
}

RgbImage read_ppm(const std::filesystem::path& path, std::istream& in) {
  if (ppm_token(in) != "P6") bad(path, "not a binary PPM (P6)");
  RgbImage img;
  std::size_t maxval = 0;
  try {
    img.width = std::stoul(ppm_token(in));
    img.height = std::stoul(ppm_token(in));
    maxval = std::stoul(ppm_token(in));
  } catch (const std::exception&) {
    bad(path, "malformed PPM header");
  }
  if (img.width == 0 || img.height == 0) bad(path, "empty PPM");
  if (maxval != 255) bad(path, "only 8-bit PPM (maxval 255) is supported");
  img.pixels.resize(img.width * img.height * 3);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (static_cast<std::size_t>(in.gcount()) != img.pixels.size()) bad(path, "truncated PPM data");
  return img;
}

struct PngReadGuard {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngReadGuard() { png_destroy_read_struct(&png, info ? &info : nullptr, nullptr); }
};

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};

RgbImage read_png(const std::filesystem::path& path) {
  std::unique_ptr<std::FILE, FileCloser> file(std::fopen(path.c_str(), "rb"));
  if (!file) fail(Errc::kMissingFile, path.string());
  PngReadGuard g;
  g.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!g.png) bad(path, "libpng initialisation failed");
  g.info = png_create_info_struct(g.png);
  if (!g.info) bad(path, "libpng initialisation failed");

  RgbImage img;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(g.png))) bad(path, "corrupt PNG");
  png_init_io(g.png, file.get());
  png_read_info(g.png, g.info);
  const png_byte color = png_get_color_type(g.png, g.info);
  const png_byte depth = png_get_bit_depth(g.png, g.info);
  if (depth == 16) png_set_strip_16(g.png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(g.png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(g.png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(g.png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(g.png);
  if (png_get_valid(g.png, g.info, PNG_INFO_tRNS)) png_set_strip_alpha(g.png);
  png_read_update_info(g.png, g.info);
  img.width = png_get_image_width(g.png, g.info);
  img.height = png_get_image_height(g.png, g.info);
  if (png_get_rowbytes(g.png, g.info) != img.width * 3) bad(path, "unsupported PNG layout");
  img.pixels.resize(img.width * img.height * 3);
  rows.resize(img.height);
  for (std::size_t y = 0; y < img.height; ++y) rows[y] = img.pixels.data() + y * img.width * 3;
  png_read_image(g.png, rows.data());
  png_read_end(g.png, nullptr);
  return img;
}

void check_buffer(const RgbImage& image) {
  if (image.width == 0 || image.height == 0 || image.pixels.size() != image.width * image.height * 3) {
    fail(Errc::kShapeMismatch, "image buffer does not match its dimensions");
  }
}

}  // namespace

RgbImage read_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::kMissingFile, path.string());
  unsigned char sig[8] = {};
  in.read(reinterpret_cast<char*>(sig), 8);
  if (in.gcount() == 8 && png_sig_cmp(sig, 0, 8) == 0) return read_png(path);
  in.clear();
  in.seekg(0);
  return read_ppm(path, in);
}

void write_ppm(const std::filesystem::path& path, const RgbImage& image) {
  check_buffer(image);
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(Errc::kMissingFile, "cannot write " + path.string());
  out << "P6\n" << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()),
            static_cast<std::streamsize>(image.pixels.size()));
}

void write_png(const std::filesystem::path& path, const RgbImage& image) {
  check_buffer(image);
  std::unique_ptr<std::FILE, FileCloser> file(std::fopen(path.c_str(), "wb"));
  if (!file) fail(Errc::kMissingFile, "cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, nullptr);
    fail(Errc::kBadFormat, "libpng initialisation failed");
  }
  std::vector<png_bytep> rows(image.height);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    fail(Errc::kBadFormat, "failed writing " + path.string());
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < image.height; ++y) {
    rows[y] = const_cast<png_bytep>(image.pixels.data() + y * image.width * 3);
  }
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

void write_image(const std::filesystem::path& path, const RgbImage& image) {
  if (path.extension() == ".png") {
    write_png(path, image);
  } else {
    write_ppm(path, image);
  }
}

}  // namespace segkit::data
