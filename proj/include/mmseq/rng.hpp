#pragma once

#include <cstdint>
#include <random>
#include <string>

#include "mmseq/tensor.hpp"

namespace mmseq {

/// Seeded random source with fully explicit state: every draw is a
/// fixed function of the mt19937_64 engine, so serializing the engine
/// captures the whole stream (needed for bitwise checkpoint resume).
class RandomSource {
public:
    explicit RandomSource(std::uint64_t seed) : engine_(seed) {}

    /// Uniform in [0, 1).
    double uniform();
    /// Uniform in [lo, hi).
    double uniform(double lo, double hi);
    /// Standard normal via Box-Muller (no cached second value).
    double gauss();
    /// Unbiased integer in [0, n) via rejection sampling.
    std::uint64_t below(std::uint64_t n);

    Tensor normal_tensor(Shape shape, double stddev, bool requires_grad = false);
    Tensor uniform_tensor(Shape shape, double lo, double hi, bool requires_grad = false);

    std::string serialize() const;
    void restore(const std::string& state);

private:
    std::mt19937_64 engine_;
};

}  // namespace mmseq
