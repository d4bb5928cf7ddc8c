#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace mmseq::refk {

// Serial reference kernels. Same accumulation order as the OpenMP
// kernels in ops.cpp (k innermost for matmul, per-row loops for the
// row-wise ops), so results must match them bitwise. Tests and the
// benchmark compare the two paths.

void matmul(std::span<const double> a, std::span<const double> b,
            std::span<double> out, std::size_t m, std::size_t k, std::size_t n);

void softmax_rows(std::span<const double> x, std::span<double> out,
                  std::size_t rows, std::size_t cols);

void layer_norm_rows(std::span<const double> x, std::span<const double> gain,
                     std::span<const double> bias, double eps,
                     std::span<double> out, std::size_t rows, std::size_t cols);

void gelu(std::span<const double> x, std::span<double> out);

}  // namespace mmseq::refk
