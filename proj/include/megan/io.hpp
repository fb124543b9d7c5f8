#ifndef MEGAN_IO_HPP
#define MEGAN_IO_HPP

#include <string>
#include <vector>

#include "megan/tensor.hpp"

namespace megan {

// Raw tensor file format "MGT1":
//   bytes 0-3  magic 'M' 'G' 'T' '1'
//   byte  4    dtype code (0 = f32, 1 = f64)
//   byte  5    rank R (1..5)
//   R x u32    dims, little-endian
//   payload    row-major values, little-endian, in the stored dtype
// No alignment padding anywhere.

enum class Dtype : uint8_t { f32 = 0, f64 = 1 };

void mgt_encode(const Tensor& t, Dtype dtype, std::vector<uint8_t>& out);

/// Decode one tensor starting at `pos`; advances `pos` past it.
Tensor mgt_decode(const std::vector<uint8_t>& bytes, size_t& pos);

void mgt_write(const Tensor& t, const std::string& path, Dtype dtype = Dtype::f64);
Tensor mgt_read(const std::string& path);

std::vector<uint8_t> read_file(const std::string& path);

/// Write via temp file + rename so failures never leave partial output.
void write_file_atomic(const std::string& path, const void* data, size_t size);

}  // namespace megan

#endif
