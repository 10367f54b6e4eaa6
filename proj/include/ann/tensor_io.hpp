#pragma once

#include <filesystem>
#include <iosfwd>

#include "ann/tensor.hpp"

namespace ann {

// Binary tensor file: "ANNT", u32 version (1), u32 rank, rank x u64 dims,
// then the values as little-endian IEEE-754 doubles in row-major order.
inline constexpr std::uint32_t kTensorFormatVersion = 1;

void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);
void write_tensor_file(const std::filesystem::path& path, const Tensor& t);
Tensor read_tensor_file(const std::filesystem::path& path);

}  // namespace ann
