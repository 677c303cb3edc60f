#pragma once

#include <filesystem>
#include <iosfwd>
#include <string_view>

#include "segkit/tensor.hpp"

namespace segkit {

// SEGKT1 container: the 6-byte magic "SEGKT1", rank as u32 little-endian,
// one u32 per shape entry, then numel little-endian IEEE-754 doubles.
inline constexpr std::string_view kTensorMagic = "SEGKT1";

void write_tensor(std::ostream& out, const Tensor& t);
// Throws kBadFormat on a bad magic, rank, or truncated payload.
Tensor read_tensor(std::istream& in);

void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

}  // namespace segkit
