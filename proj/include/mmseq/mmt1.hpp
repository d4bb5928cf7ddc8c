#pragma once

#include <filesystem>
#include <iosfwd>

#include "mmseq/tensor.hpp"

namespace mmseq::mmt1 {

// Flat binary tensor format used by checkpoints and test fixtures:
// magic "MMT1", rank as u32 little-endian, one u32 extent per axis,
// then the data as little-endian f64 in row-major order.

void write(std::ostream& os, const Tensor& t);
Tensor read(std::istream& is);

void save(const std::filesystem::path& path, const Tensor& t);
Tensor load(const std::filesystem::path& path);

}  // namespace mmseq::mmt1
