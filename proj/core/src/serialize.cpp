#include "segkit/serialize.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "segkit/error.hpp"

namespace segkit {

namespace {

static_assert(sizeof(double) == 8);

void put_u32(std::ostream& out, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                              static_cast<char>((v >> 16) & 0xff),
                              static_cast<char>((v >> 24) & 0xff)};
  out.write(b.data(), 4);
}

std::uint32_t get_u32(std::istream& in) {
  std::array<unsigned char, 4> b{};
  if (!in.read(reinterpret_cast<char*>(b.data()), 4)) fail(Errc::kBadFormat, "truncated header");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void write_tensor(std::ostream& out, const Tensor& t) {
  out.write(kTensorMagic.data(), static_cast<std::streamsize>(kTensorMagic.size()));
  put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
  std::array<char, 8> bytes{};
  for (double v : t.data()) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
    out.write(bytes.data(), 8);
  }
}

Tensor read_tensor(std::istream& in) {
  std::array<char, 6> magic{};
  if (!in.read(magic.data(), 6) || std::string_view(magic.data(), 6) != kTensorMagic) {
    fail(Errc::kBadFormat, "missing SEGKT1 magic");
  }
  const std::uint32_t rank = get_u32(in);
  if (rank == 0 || rank > kMaxRank) fail(Errc::kBadFormat, "bad rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) d = get_u32(in);
  const std::size_t n = shape_numel(shape);
  std::vector<double> data(n);
  std::array<unsigned char, 8> bytes{};
  for (double& v : data) {
    if (!in.read(reinterpret_cast<char*>(bytes.data()), 8)) {
      fail(Errc::kBadFormat, "truncated tensor payload");
    }
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
    v = std::bit_cast<double>(bits);
  }
  try {
    return Tensor::from_vector(std::move(shape), std::move(data));
  } catch (const Error& e) {
    fail(Errc::kBadFormat, e.what());
  }
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(Errc::kMissingFile, "cannot write " + path.string());
  write_tensor(out, t);
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::kMissingFile, path.string());
  return read_tensor(in);
}

}  // namespace segkit
