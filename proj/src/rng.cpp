#include "mmseq/rng.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "mmseq/common.hpp"

namespace mmseq {

double RandomSource::uniform() {
    // 53 random bits -> double in [0, 1)
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double RandomSource::uniform(double lo, double hi) {
    return lo + (hi - lo) * uniform();
}

double RandomSource::gauss() {
    double u1 = uniform();
    double u2 = uniform();
    // keep u1 away from zero so log stays finite
    u1 = 1.0 - u1;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t RandomSource::below(std::uint64_t n) {
    MMSEQ_CHECK(n > 0, "below: n must be positive");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t v = engine_();
    while (v >= limit) v = engine_();
    return v % n;
}

Tensor RandomSource::normal_tensor(Shape shape, double stddev, bool requires_grad) {
    Tensor t = Tensor::zeros(std::move(shape), requires_grad);
    for (double& v : t.mutable_data()) v = gauss() * stddev;
    return t;
}

Tensor RandomSource::uniform_tensor(Shape shape, double lo, double hi,
                                    bool requires_grad) {
    Tensor t = Tensor::zeros(std::move(shape), requires_grad);
    for (double& v : t.mutable_data()) v = uniform(lo, hi);
    return t;
}

std::string RandomSource::serialize() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
}

void RandomSource::restore(const std::string& state) {
    std::istringstream is(state);
    is >> engine_;
    MMSEQ_CHECK(!is.fail(), "invalid random engine state string");
}

}  // namespace mmseq
