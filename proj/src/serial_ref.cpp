#include "mmseq/serial_ref.hpp"

#include <cmath>

namespace mmseq::refk {

void matmul(std::span<const double> a, std::span<const double> b,
            std::span<double> out, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t kk = 0; kk < k; ++kk) {
                acc += a[i * k + kk] * b[kk * n + j];
            }
            out[i * n + j] = acc;
        }
    }
}

void softmax_rows(std::span<const double> x, std::span<double> out,
                  std::size_t rows, std::size_t cols) {
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data() + r * cols;
        double* yr = out.data() + r * cols;
        double mx = xr[0];
        for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, xr[c]);
        double sum = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            yr[c] = std::exp(xr[c] - mx);
            sum += yr[c];
        }
        for (std::size_t c = 0; c < cols; ++c) yr[c] /= sum;
    }
}

void layer_norm_rows(std::span<const double> x, std::span<const double> gain,
                     std::span<const double> bias, double eps,
                     std::span<double> out, std::size_t rows, std::size_t cols) {
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data() + r * cols;
        double* yr = out.data() + r * cols;
        double mean = 0.0;
        for (std::size_t c = 0; c < cols; ++c) mean += xr[c];
        mean /= static_cast<double>(cols);
        double var = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            double d = xr[c] - mean;
            var += d * d;
        }
        var /= static_cast<double>(cols);
        double inv = 1.0 / std::sqrt(var + eps);
        for (std::size_t c = 0; c < cols; ++c) {
            yr[c] = (xr[c] - mean) * inv * gain[c] + bias[c];
        }
    }
}

void gelu(std::span<const double> x, std::span<double> out) {
    constexpr double inv_sqrt2 = 0.7071067811865476;
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = 0.5 * x[i] * (1.0 + std::erf(x[i] * inv_sqrt2));
    }
}

}  // namespace mmseq::refk
