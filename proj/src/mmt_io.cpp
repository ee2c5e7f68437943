#include "clinfuse/mmt_io.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>

#include "clinfuse/error.hpp"

namespace clinfuse {
namespace {

constexpr std::array<char, 4> kMagic{'M', 'M', 'T', '1'};

template <typename U>
void put_le(std::ostream& out, U v) {
  std::array<char, sizeof(U)> bytes{};
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(bytes.data(), bytes.size());
}

template <typename U>
U get_le(std::istream& in, const char* what) {
  std::array<unsigned char, sizeof(U)> bytes{};
  in.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) {
    throw FormatError(std::string("MMT1: truncated ") + what);
  }
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(bytes[i]) << (8 * i);
  return v;
}

}  // namespace

std::size_t mmt_encoded_size(const Shape& shape) {
  return 4 + 1 + 4 * shape.size() + 8 * static_cast<std::size_t>(shape_numel(shape));
}

void write_mmt(std::ostream& out, const Shape& shape, const Eigen::VectorXd& values) {
  if (shape.empty() || shape.size() > 255) throw ShapeError("MMT1: rank must be in [1,255]");
  if (shape_numel(shape) != values.size()) throw ShapeError("MMT1: value count does not match shape");
  out.write(kMagic.data(), kMagic.size());
  put_le<std::uint8_t>(out, static_cast<std::uint8_t>(shape.size()));
  for (const Index d : shape) {
    if (d <= 0 || d > std::numeric_limits<std::uint32_t>::max()) throw ShapeError("MMT1: dimension out of range");
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  }
  for (Index i = 0; i < values.size(); ++i) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(values(i)));
  if (!out) throw FormatError("MMT1: write failed");
}

void write_mmt_file(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  write_mmt(out, t);
}

MmtBlob read_mmt(std::istream& in) {
  std::array<char, 4> magic{};
  in.read(magic.data(), magic.size());
  if (in.gcount() != 4 || magic != kMagic) throw FormatError("MMT1: bad magic");
  const auto rank = get_le<std::uint8_t>(in, "rank");
  if (rank == 0) throw FormatError("MMT1: rank 0");
  MmtBlob blob;
  blob.shape.resize(rank);
  for (auto& d : blob.shape) {
    d = static_cast<Index>(get_le<std::uint32_t>(in, "dims"));
    if (d == 0) throw FormatError("MMT1: zero dimension");
  }
  blob.values.resize(shape_numel(blob.shape));
  for (Index i = 0; i < blob.values.size(); ++i) {
    blob.values(i) = std::bit_cast<double>(get_le<std::uint64_t>(in, "values"));
  }
  return blob;
}

MmtBlob read_mmt_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  try {
    return read_mmt(in);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace clinfuse
