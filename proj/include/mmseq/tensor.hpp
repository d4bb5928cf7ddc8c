#pragma once

#include <cstddef>
#include <initializer_list>
#include <memory>
#include <optional>
#include <span>
#include <vector>

namespace mmseq {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major tensor of 64-bit floats with an optional gradient
/// buffer. Copies are shallow handles sharing the same storage; use
/// clone() for an independent deep copy.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data,
                            bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }

    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t size() const;
    std::size_t extent(std::size_t axis) const;

    std::span<const double> data() const;
    std::span<double> mutable_data();

    /// Value of a rank-0/size-1 tensor.
    double value() const;
    double at(std::initializer_list<std::size_t> idx) const;

    bool requires_grad() const;
    void set_requires_grad(bool v);

    bool has_grad() const;
    std::span<const double> grad() const;
    /// Grad buffer, allocated zero-filled on first use.
    std::span<double> grad_or_alloc();
    void accumulate_grad(std::span<const double> delta);
    /// Drops the grad buffer entirely (grad becomes absent).
    void zero_grad();

    /// Deep copy of the values; grad not copied, requires_grad preserved.
    Tensor clone() const;

    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }
    const void* id() const { return impl_.get(); }

    bool all_finite() const;

private:
    struct Impl {
        Shape shape;
        std::vector<double> data;
        bool requires_grad = false;
        std::optional<std::vector<double>> grad;
    };

    explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}

    std::shared_ptr<Impl> impl_;
};

}  // namespace mmseq
