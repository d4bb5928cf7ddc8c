#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mmseq/rng.hpp"
#include "mmseq/tensor.hpp"

namespace mmseq {

/// Central finite-difference gradient of a scalar-valued function,
/// (f(x+h*e) - f(x-h*e)) / 2h per element. Forward evaluations only —
/// independent of the tape machinery it is used to check.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f,
                        const Tensor& x, double h = 1e-5);

/// |a-b| / max(|a|, |b|, floor); the floor keeps near-zero gradients
/// from inflating the ratio beyond finite-difference noise.
double grad_rel_err(double autodiff, double fd, double floor = 1e-4);

struct GradcheckResult {
    std::string name;
    double worst_rel_err = 0.0;
    bool ok = true;
};

/// Compares the populated gradient of every listed parameter against
/// central finite differences of `f`, which must recompute the loss
/// from the parameters' current values on every call. When
/// coords_per_param > 0 only that many elements per parameter are
/// probed (chosen with `rng`), otherwise all of them.
GradcheckResult check_gradients(const std::string& name,
                                const std::function<double()>& f,
                                std::vector<Tensor> params, double h,
                                double tolerance,
                                std::size_t coords_per_param = 0,
                                RandomSource* rng = nullptr);

}  // namespace mmseq
