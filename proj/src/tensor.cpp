#include "mmseq/tensor.hpp"

#include <cmath>
#include <sstream>

#include "mmseq/common.hpp"

namespace mmseq {

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    for (std::size_t e : shape) {
        MMSEQ_CHECK(e > 0, "tensor extents must be positive, got ", shape_str(shape));
    }
    auto impl = std::make_shared<Impl>();
    impl->data.assign(shape_numel(shape), value);
    impl->shape = std::move(shape);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    for (std::size_t e : shape) {
        MMSEQ_CHECK(e > 0, "tensor extents must be positive, got ", shape_str(shape));
    }
    MMSEQ_CHECK(shape_numel(shape) == data.size(), "tensor data length ", data.size(),
                " does not match shape ", shape_str(shape));
    auto impl = std::make_shared<Impl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from_data({1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const {
    MMSEQ_CHECK(impl_, "tensor is not defined");
    return impl_->shape;
}

std::size_t Tensor::size() const {
    MMSEQ_CHECK(impl_, "tensor is not defined");
    return impl_->data.size();
}

std::size_t Tensor::extent(std::size_t axis) const {
    const Shape& s = shape();
    MMSEQ_CHECK(axis < s.size(), "axis ", axis, " out of range for shape ", shape_str(s));
    return s[axis];
}

std::span<const double> Tensor::data() const {
    MMSEQ_CHECK(impl_, "tensor is not defined");
    return impl_->data;
}

std::span<double> Tensor::mutable_data() {
    MMSEQ_CHECK(impl_, "tensor is not defined");
    return impl_->data;
}

double Tensor::value() const {
    MMSEQ_CHECK(size() == 1, "value() requires a scalar tensor, got shape ",
                shape_str(shape()));
    return impl_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> idx) const {
    const Shape& s = shape();
    MMSEQ_CHECK(idx.size() == s.size(), "index rank ", idx.size(),
                " does not match tensor rank ", s.size());
    std::size_t flat = 0;
    std::size_t axis = 0;
    for (std::size_t i : idx) {
        MMSEQ_CHECK(i < s[axis], "index out of range");
        flat = flat * s[axis] + i;
        ++axis;
    }
    return impl_->data[flat];
}

bool Tensor::requires_grad() const {
    return impl_ && impl_->requires_grad;
}

void Tensor::set_requires_grad(bool v) {
    MMSEQ_CHECK(impl_, "tensor is not defined");
    impl_->requires_grad = v;
}

bool Tensor::has_grad() const {
    return impl_ && impl_->grad.has_value();
}

std::span<const double> Tensor::grad() const {
    MMSEQ_CHECK(has_grad(), "tensor has no gradient buffer");
    return *impl_->grad;
}

std::span<double> Tensor::grad_or_alloc() {
    MMSEQ_CHECK(impl_, "tensor is not defined");
    if (!impl_->grad) impl_->grad.emplace(impl_->data.size(), 0.0);
    return *impl_->grad;
}

void Tensor::accumulate_grad(std::span<const double> delta) {
    MMSEQ_CHECK(delta.size() == size(), "gradient length ", delta.size(),
                " does not match tensor size ", size());
    auto g = grad_or_alloc();
    for (std::size_t i = 0; i < delta.size(); ++i) g[i] += delta[i];
}

void Tensor::zero_grad() {
    MMSEQ_CHECK(impl_, "tensor is not defined");
    impl_->grad.reset();
}

Tensor Tensor::clone() const {
    MMSEQ_CHECK(impl_, "tensor is not defined");
    return from_data(impl_->shape, impl_->data, impl_->requires_grad);
}

bool Tensor::all_finite() const {
    for (double v : data()) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

}  // namespace mmseq
