#include "ann/tensor_io.hpp"

#include <array>
#include <bit>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>

namespace ann {

namespace {

constexpr std::array<char, 4> kMagic{'A', 'N', 'N', 'T'};

template <typename U>
void put_le(std::ostream& out, U value) {
  std::array<char, sizeof(U)> bytes;
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((value >> (8 * i)) & 0xFF);
  out.write(bytes.data(), bytes.size());
}

template <typename U>
U get_le(std::istream& in) {
  std::array<unsigned char, sizeof(U)> bytes;
  if (!in.read(reinterpret_cast<char*>(bytes.data()), bytes.size())) {
    throw std::runtime_error("tensor file truncated");
  }
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(bytes[i]) << (8 * i);
  return value;
}

}  // namespace

void write_tensor(std::ostream& out, const Tensor& t) {
  out.write(kMagic.data(), kMagic.size());
  put_le<std::uint32_t>(out, kTensorFormatVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.dims()) put_le<std::uint64_t>(out, d);
  for (double v : t.data()) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  if (!out) throw std::runtime_error("failed to write tensor");
}

Tensor read_tensor(std::istream& in) {
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kMagic) throw std::runtime_error("not an ANNT tensor file");
  const auto version = get_le<std::uint32_t>(in);
  if (version != kTensorFormatVersion) {
    throw std::runtime_error("unsupported tensor file version " + std::to_string(version));
  }
  const auto rank = get_le<std::uint32_t>(in);
  if (rank < 1 || rank > 3) throw std::runtime_error("tensor file has invalid rank " + std::to_string(rank));
  Dims dims(rank);
  std::size_t count = 1;
  for (auto& d : dims) {
    d = static_cast<std::size_t>(get_le<std::uint64_t>(in));
    count *= d;
  }
  Tensor::Storage values(count);
  for (auto& v : values) v = std::bit_cast<double>(get_le<std::uint64_t>(in));
  return Tensor(std::move(dims), std::move(values));
}

void write_tensor_file(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_tensor(out, t);
}

Tensor read_tensor_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return read_tensor(in);
}

}  // namespace ann
