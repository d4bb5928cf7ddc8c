#include "mmseq/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "mmseq/common.hpp"

namespace mmseq {

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f,
                        const Tensor& x, double h) {
    Tensor work = x.clone();
    Tensor g = Tensor::zeros(x.shape());
    auto wd = work.mutable_data();
    auto gd = g.mutable_data();
    for (std::size_t i = 0; i < wd.size(); ++i) {
        const double orig = wd[i];
        wd[i] = orig + h;
        const double fp = f(work);
        wd[i] = orig - h;
        const double fm = f(work);
        wd[i] = orig;
        gd[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

double grad_rel_err(double autodiff, double fd, double floor) {
    const double denom = std::max({std::abs(autodiff), std::abs(fd), floor});
    return std::abs(autodiff - fd) / denom;
}

GradcheckResult check_gradients(const std::string& name,
                                const std::function<double()>& f,
                                std::vector<Tensor> params, double h,
                                double tolerance, std::size_t coords_per_param,
                                RandomSource* rng) {
    GradcheckResult result;
    result.name = name;
    for (Tensor& p : params) {
        MMSEQ_CHECK(p.has_grad(), "gradcheck: parameter has no populated gradient");
        auto grad = p.grad();
        auto data = p.mutable_data();
        std::vector<std::size_t> coords;
        if (coords_per_param == 0 || coords_per_param >= data.size()) {
            coords.resize(data.size());
            for (std::size_t i = 0; i < data.size(); ++i) coords[i] = i;
        } else {
            MMSEQ_CHECK(rng != nullptr, "gradcheck: sampling requires an rng");
            for (std::size_t i = 0; i < coords_per_param; ++i) {
                coords.push_back(static_cast<std::size_t>(rng->below(data.size())));
            }
        }
        for (std::size_t i : coords) {
            const double orig = data[i];
            data[i] = orig + h;
            const double fp = f();
            data[i] = orig - h;
            const double fm = f();
            data[i] = orig;
            const double fd = (fp - fm) / (2.0 * h);
            result.worst_rel_err = std::max(result.worst_rel_err,
                                            grad_rel_err(grad[i], fd));
        }
    }
    result.ok = result.worst_rel_err < tolerance;
    return result;
}

}  // namespace mmseq
