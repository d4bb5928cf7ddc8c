#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mmseq/tape.hpp"
#include "mmseq/tensor.hpp"

namespace mmseq::ops {

// Differentiable tensor operations. Each op computes its value eagerly
// and, when any input requires grad, records a reverse entry on the
// tape. Inner loops are OpenMP-parallel over independent output rows,
// which keeps results bitwise identical to the serial reference
// kernels regardless of thread count.

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
/// [m x n] + [n], the vector added to every row.
Tensor add_rowvec(Tape& tape, const Tensor& x, const Tensor& v);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& x, double c);

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor transpose(Tape& tape, const Tensor& x);

/// Softmax over the last axis, max-subtracted for stability.
Tensor softmax(Tape& tape, const Tensor& x);
/// Normalizes the last axis to zero mean / unit variance, then applies
/// the per-column affine gain and bias.
Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain,
                  const Tensor& bias, double eps = 1e-5);
Tensor gelu(Tape& tape, const Tensor& x);

Tensor gather_rows(Tape& tape, const Tensor& table,
                   const std::vector<std::size_t>& rows);
Tensor slice_rows(Tape& tape, const Tensor& x, std::size_t r0, std::size_t r1);
Tensor slice_cols(Tape& tape, const Tensor& x, std::size_t c0, std::size_t c1);
Tensor concat_rows(Tape& tape, std::span<const Tensor> parts);
Tensor concat_cols(Tape& tape, std::span<const Tensor> parts);
Tensor reshape(Tape& tape, const Tensor& x, Shape shape);

Tensor sum(Tape& tape, const Tensor& x);
Tensor mean(Tape& tape, const Tensor& x);

/// Mean squared element difference; shapes must match exactly.
Tensor mse(Tape& tape, const Tensor& pred, const Tensor& target);

struct CeTarget {
    std::size_t position;  // row of the logits matrix
    std::uint32_t token;   // column index of the correct class
};

/// Mean negative log-softmax probability of the given (row, class)
/// pairs over a [T x V] logits matrix. An empty target list yields a
/// constant 0 with no gradient.
Tensor cross_entropy(Tape& tape, const Tensor& logits,
                     std::span<const CeTarget> targets);

/// 2-D convolution, stride 1, zero padding to "same" size.
/// x: [Cin x h x w], w: [Cout x Cin x k x k] (k odd), b: [Cout].
Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b);

}  // namespace mmseq::ops
