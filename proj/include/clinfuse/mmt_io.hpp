#pragma once

#include <filesystem>
#include <iosfwd>

#include "clinfuse/tensor.hpp"

namespace clinfuse {

/// MMT1 tensor blob: magic "MMT1", u8 rank, rank x u32 LE dims, then
/// product(dims) x f64 LE values.
struct MmtBlob {
  Shape shape;
  Eigen::VectorXd values;

  Tensor to_tensor() const { return Tensor(shape, values); }
};

/// Encoded size in bytes of a blob with this shape.
std::size_t mmt_encoded_size(const Shape& shape);

void write_mmt(std::ostream& out, const Shape& shape, const Eigen::VectorXd& values);
inline void write_mmt(std::ostream& out, const Tensor& t) { write_mmt(out, t.shape(), t.value()); }
void write_mmt_file(const std::filesystem::path& path, const Tensor& t);

/// Throws FormatError on bad magic, zero dimensions or truncation.
MmtBlob read_mmt(std::istream& in);
MmtBlob read_mmt_file(const std::filesystem::path& path);

}  // namespace clinfuse
