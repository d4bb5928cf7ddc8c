#include "mmseq/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>

#include "mmseq/common.hpp"

namespace mmseq::ops {

namespace {

constexpr std::int64_t kOmpMin = 4096;  // skip thread fan-out on tiny ops

constexpr double kInvSqrt2 = 0.7071067811865476;
constexpr double kInvSqrt2Pi = 0.3989422804014327;

void record_if_needed(Tape& tape, std::vector<Tensor> inputs, const Tensor& out,
                      std::function<void(const Tape::Entry&)> fn) {
    if (out.requires_grad()) {
        tape.record(std::move(inputs), out, std::move(fn));
    }
}

bool any_grad(std::initializer_list<const Tensor*> ts) {
    for (const Tensor* t : ts) {
        if (t->requires_grad()) return true;
    }
    return false;
}

std::size_t last_extent(const Tensor& x) {
    MMSEQ_CHECK(x.rank() >= 1, "op requires rank >= 1");
    return x.shape().back();
}

}  // namespace

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
    MMSEQ_CHECK(a.shape() == b.shape(), "add: shape mismatch ", shape_str(a.shape()),
                " vs ", shape_str(b.shape()));
    const std::int64_t n = static_cast<std::int64_t>(a.size());
    Tensor out = Tensor::zeros(a.shape(), any_grad({&a, &b}));
    auto ad = a.data();
    auto bd = b.data();
    auto od = out.mutable_data();
#pragma omp parallel for schedule(static) if (n >= kOmpMin)
    for (std::int64_t i = 0; i < n; ++i) od[i] = ad[i] + bd[i];

    record_if_needed(tape, {a, b}, out, [](const Tape::Entry& e) {
        auto gy = e.output.grad();
        for (Tensor input : {e.inputs[0], e.inputs[1]}) {
            if (input.requires_grad()) input.accumulate_grad(gy);
        }
    });
    return out;
}

Tensor add_rowvec(Tape& tape, const Tensor& x, const Tensor& v) {
    MMSEQ_CHECK(x.rank() == 2 && v.rank() == 1, "add_rowvec: expected [m x n] + [n]");
    MMSEQ_CHECK(x.extent(1) == v.extent(0), "add_rowvec: width mismatch ",
                shape_str(x.shape()), " vs ", shape_str(v.shape()));
    const std::int64_t m = static_cast<std::int64_t>(x.extent(0));
    const std::int64_t n = static_cast<std::int64_t>(x.extent(1));
    Tensor out = Tensor::zeros(x.shape(), any_grad({&x, &v}));
    auto xd = x.data();
    auto vd = v.data();
    auto od = out.mutable_data();
#pragma omp parallel for schedule(static) if (m * n >= kOmpMin)
    for (std::int64_t r = 0; r < m; ++r) {
        for (std::int64_t c = 0; c < n; ++c) od[r * n + c] = xd[r * n + c] + vd[c];
    }

    record_if_needed(tape, {x, v}, out, [m, n](const Tape::Entry& e) {
        auto gy = e.output.grad();
        Tensor gx = e.inputs[0];
        Tensor gv = e.inputs[1];
        if (gx.requires_grad()) gx.accumulate_grad(gy);
        if (gv.requires_grad()) {
            auto g = gv.grad_or_alloc();
#pragma omp parallel for schedule(static) if (m * n >= kOmpMin)
            for (std::int64_t c = 0; c < n; ++c) {
                double acc = 0.0;
                for (std::int64_t r = 0; r < m; ++r) acc += gy[r * n + c];
                g[c] += acc;
            }
        }
    });
    return out;
}

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
    MMSEQ_CHECK(a.shape() == b.shape(), "sub: shape mismatch ", shape_str(a.shape()),
                " vs ", shape_str(b.shape()));
    const std::int64_t n = static_cast<std::int64_t>(a.size());
    Tensor out = Tensor::zeros(a.shape(), any_grad({&a, &b}));
    auto ad = a.data();
    auto bd = b.data();
    auto od = out.mutable_data();
#pragma omp parallel for schedule(static) if (n >= kOmpMin)
    for (std::int64_t i = 0; i < n; ++i) od[i] = ad[i] - bd[i];

    record_if_needed(tape, {a, b}, out, [n](const Tape::Entry& e) {
        auto gy = e.output.grad();
        Tensor ga = e.inputs[0];
        Tensor gb = e.inputs[1];
        if (ga.requires_grad()) ga.accumulate_grad(gy);
        if (gb.requires_grad()) {
            auto g = gb.grad_or_alloc();
            for (std::int64_t i = 0; i < n; ++i) g[i] -= gy[i];
        }
    });
    return out;
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
    MMSEQ_CHECK(a.shape() == b.shape(), "mul: shape mismatch ", shape_str(a.shape()),
                " vs ", shape_str(b.shape()));
    const std::int64_t n = static_cast<std::int64_t>(a.size());
    Tensor out = Tensor::zeros(a.shape(), any_grad({&a, &b}));
    auto ad = a.data();
    auto bd = b.data();
    auto od = out.mutable_data();
#pragma omp parallel for schedule(static) if (n >= kOmpMin)
    for (std::int64_t i = 0; i < n; ++i) od[i] = ad[i] * bd[i];

    record_if_needed(tape, {a, b}, out, [n](const Tape::Entry& e) {
        auto gy = e.output.grad();
        Tensor a = e.inputs[0];
        Tensor b = e.inputs[1];
        if (a.requires_grad()) {
            auto g = a.grad_or_alloc();
            auto bd = b.data();
            for (std::int64_t i = 0; i < n; ++i) g[i] += gy[i] * bd[i];
        }
        if (b.requires_grad()) {
            auto g = b.grad_or_alloc();
            auto ad = a.data();
            for (std::int64_t i = 0; i < n; ++i) g[i] += gy[i] * ad[i];
        }
    });
    return out;
}

Tensor scale(Tape& tape, const Tensor& x, double c) {
    const std::int64_t n = static_cast<std::int64_t>(x.size());
    Tensor out = Tensor::zeros(x.shape(), x.requires_grad());
    auto xd = x.data();
    auto od = out.mutable_data();
#pragma omp parallel for schedule(static) if (n >= kOmpMin)
    for (std::int64_t i = 0; i < n; ++i) od[i] = xd[i] * c;

    record_if_needed(tape, {x}, out, [c, n](const Tape::Entry& e) {
        auto gy = e.output.grad();
        Tensor x = e.inputs[0];
        auto g = x.grad_or_alloc();
        for (std::int64_t i = 0; i < n; ++i) g[i] += gy[i] * c;
    });
    return out;
}

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
    MMSEQ_CHECK(a.rank() == 2 && b.rank() == 2, "matmul: expects 2-D operands, got ",
                shape_str(a.shape()), " x ", shape_str(b.shape()));
    MMSEQ_CHECK(a.extent(1) == b.extent(0), "matmul: inner dimensions differ: ",
                shape_str(a.shape()), " x ", shape_str(b.shape()));
    const std::int64_t m = static_cast<std::int64_t>(a.extent(0));
    const std::int64_t k = static_cast<std::int64_t>(a.extent(1));
    const std::int64_t n = static_cast<std::int64_t>(b.extent(1));
    Tensor out = Tensor::zeros({a.extent(0), b.extent(1)}, any_grad({&a, &b}));
    auto ad = a.data();
    auto bd = b.data();
    auto od = out.mutable_data();
#pragma omp parallel for schedule(static) if (m * n * k >= kOmpMin)
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::int64_t kk = 0; kk < k; ++kk) acc += ad[i * k + kk] * bd[kk * n + j];
            od[i * n + j] = acc;
        }
    }

    record_if_needed(tape, {a, b}, out, [m, k, n](const Tape::Entry& e) {
        auto gy = e.output.grad();
        Tensor a = e.inputs[0];
        Tensor b = e.inputs[1];
        if (a.requires_grad()) {
            auto ga = a.grad_or_alloc();
            auto bd = b.data();
#pragma omp parallel for schedule(static) if (m * n * k >= kOmpMin)
            for (std::int64_t i = 0; i < m; ++i) {
                for (std::int64_t kk = 0; kk < k; ++kk) {
                    double acc = 0.0;
                    for (std::int64_t j = 0; j < n; ++j) acc += gy[i * n + j] * bd[kk * n + j];
                    ga[i * k + kk] += acc;
                }
            }
        }
        if (b.requires_grad()) {
            auto gb = b.grad_or_alloc();
            auto ad = a.data();
#pragma omp parallel for schedule(static) if (m * n * k >= kOmpMin)
            for (std::int64_t kk = 0; kk < k; ++kk) {
                for (std::int64_t j = 0; j < n; ++j) {
                    double acc = 0.0;
                    for (std::int64_t i = 0; i < m; ++i) acc += ad[i * k + kk] * gy[i * n + j];
                    gb[kk * n + j] += acc;
                }
            }
        }
    });
    return out;
}

Tensor transpose(Tape& tape, const Tensor& x) {
    MMSEQ_CHECK(x.rank() == 2, "transpose: expects a 2-D tensor, got ",
                shape_str(x.shape()));
    const std::int64_t m = static_cast<std::int64_t>(x.extent(0));
    const std::int64_t n = static_cast<std::int64_t>(x.extent(1));
    Tensor out = Tensor::zeros({x.extent(1), x.extent(0)}, x.requires_grad());
    auto xd = x.data();
    auto od = out.mutable_data();
#pragma omp parallel for schedule(static) if (m * n >= kOmpMin)
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t j = 0; j < n; ++j) od[j * m + i] = xd[i * n + j];
    }

    record_if_needed(tape, {x}, out, [m, n](const Tape::Entry& e) {
        auto gy = e.output.grad();
        Tensor x = e.inputs[0];
        auto g = x.grad_or_alloc();
        for (std::int64_t i = 0; i < m; ++i) {
            for (std::int64_t j = 0; j < n; ++j) g[i * n + j] += gy[j * m + i];
        }
    });
    return out;
}

Tensor softmax(Tape& tape, const Tensor& x) {
    const std::int64_t cols = static_cast<std::int64_t>(last_extent(x));
    const std::int64_t rows = static_cast<std::int64_t>(x.size()) / cols;
    Tensor out = Tensor::zeros(x.shape(), x.requires_grad());
    auto xd = x.data();
    auto od = out.mutable_data();
#pragma omp parallel for schedule(static) if (rows * cols >= kOmpMin)
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* xr = xd.data() + r * cols;
        double* yr = od.data() + r * cols;
        double mx = xr[0];
        for (std::int64_t c = 1; c < cols; ++c) mx = std::max(mx, xr[c]);
        double sum = 0.0;
        for (std::int64_t c = 0; c < cols; ++c) {
            yr[c] = std::exp(xr[c] - mx);
            sum += yr[c];
        }
        for (std::int64_t c = 0; c < cols; ++c) yr[c] /= sum;
    }

    record_if_needed(tape, {x}, out, [rows, cols](const Tape::Entry& e) {
        auto gy = e.output.grad();
        auto p = e.output.data();
        Tensor x = e.inputs[0];
        auto g = x.grad_or_alloc();
#pragma omp parallel for schedule(static) if (rows * cols >= kOmpMin)
        for (std::int64_t r = 0; r < rows; ++r) {
            const double* pr = p.data() + r * cols;
            const double* gr = gy.data() + r * cols;
            double dot = 0.0;
            for (std::int64_t c = 0; c < cols; ++c) dot += gr[c] * pr[c];
            for (std::int64_t c = 0; c < cols; ++c) {
                g[r * cols + c] += pr[c] * (gr[c] - dot);
            }
        }
    });
    return out;
}

Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain,
                  const Tensor& bias, double eps) {
    const std::int64_t cols = static_cast<std::int64_t>(last_extent(x));
    MMSEQ_CHECK(gain.rank() == 1 && bias.rank() == 1, "layer_norm: gain/bias must be rank 1");
    MMSEQ_CHECK(static_cast<std::int64_t>(gain.extent(0)) == cols &&
                    static_cast<std::int64_t>(bias.extent(0)) == cols,
                "layer_norm: gain/bias must match the last axis extent ", cols);
    const std::int64_t rows = static_cast<std::int64_t>(x.size()) / cols;
    Tensor out = Tensor::zeros(x.shape(), any_grad({&x, &gain, &bias}));
    // normalized values and inverse stddev cached for the backward pass
    auto xhat = std::make_shared<std::vector<double>>(x.size());
    auto inv_std = std::make_shared<std::vector<double>>(rows);
    auto xd = x.data();
    auto gd = gain.data();
    auto bd = bias.data();
    auto od = out.mutable_data();
#pragma omp parallel for schedule(static) if (rows * cols >= kOmpMin)
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* xr = xd.data() + r * cols;
        double mean = 0.0;
        for (std::int64_t c = 0; c < cols; ++c) mean += xr[c];
        mean /= static_cast<double>(cols);
        double var = 0.0;
        for (std::int64_t c = 0; c < cols; ++c) {
            double d = xr[c] - mean;
            var += d * d;
        }
        var /= static_cast<double>(cols);
        double inv = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = inv;
        for (std::int64_t c = 0; c < cols; ++c) {
            double xh = (xr[c] - mean) * inv;
            (*xhat)[r * cols + c] = xh;
            od[r * cols + c] = xh * gd[c] + bd[c];
        }
    }

    record_if_needed(tape, {x, gain, bias}, out,
                     [rows, cols, xhat, inv_std](const Tape::Entry& e) {
        auto gy = e.output.grad();
        Tensor x = e.inputs[0];
        Tensor gain = e.inputs[1];
        Tensor bias = e.inputs[2];
        auto gaind = gain.data();
        if (x.requires_grad()) {
            auto g = x.grad_or_alloc();
#pragma omp parallel for schedule(static) if (rows * cols >= kOmpMin)
            for (std::int64_t r = 0; r < rows; ++r) {
                const double* gr = gy.data() + r * cols;
                const double* xh = xhat->data() + r * cols;
                double mean_d = 0.0;
                double mean_dxh = 0.0;
                for (std::int64_t c = 0; c < cols; ++c) {
                    double d = gr[c] * gaind[c];
                    mean_d += d;
                    mean_dxh += d * xh[c];
                }
                mean_d /= static_cast<double>(cols);
                mean_dxh /= static_cast<double>(cols);
                double inv = (*inv_std)[r];
                for (std::int64_t c = 0; c < cols; ++c) {
                    double d = gr[c] * gaind[c];
                    g[r * cols + c] += inv * (d - mean_d - xh[c] * mean_dxh);
                }
            }
        }
        if (gain.requires_grad()) {
            auto g = gain.grad_or_alloc();
#pragma omp parallel for schedule(static) if (rows * cols >= kOmpMin)
            for (std::int64_t c = 0; c < cols; ++c) {
                double acc = 0.0;
                for (std::int64_t r = 0; r < rows; ++r) {
                    acc += gy[r * cols + c] * (*xhat)[r * cols + c];
                }
                g[c] += acc;
            }
        }
        if (bias.requires_grad()) {
            auto g = bias.grad_or_alloc();
#pragma omp parallel for schedule(static) if (rows * cols >= kOmpMin)
            for (std::int64_t c = 0; c < cols; ++c) {
                double acc = 0.0;
                for (std::int64_t r = 0; r < rows; ++r) acc += gy[r * cols + c];
                g[c] += acc;
            }
        }
    });
    return out;
}

Tensor gelu(Tape& tape, const Tensor& x) {
    const std::int64_t n = static_cast<std::int64_t>(x.size());
    Tensor out = Tensor::zeros(x.shape(), x.requires_grad());
    auto xd = x.data();
    auto od = out.mutable_data();
#pragma omp parallel for schedule(static) if (n >= kOmpMin)
    for (std::int64_t i = 0; i < n; ++i) {
        od[i] = 0.5 * xd[i] * (1.0 + std::erf(xd[i] * kInvSqrt2));
    }

    record_if_needed(tape, {x}, out, [n](const Tape::Entry& e) {
        auto gy = e.output.grad();
        Tensor x = e.inputs[0];
        auto xd = x.data();
        auto g = x.grad_or_alloc();
#pragma omp parallel for schedule(static) if (n >= kOmpMin)
        for (std::int64_t i = 0; i < n; ++i) {
            double cdf = 0.5 * (1.0 + std::erf(xd[i] * kInvSqrt2));
            double pdf = kInvSqrt2Pi * std::exp(-0.5 * xd[i] * xd[i]);
            g[i] += gy[i] * (cdf + xd[i] * pdf);
        }
    });
    return out;
}

Tensor gather_rows(Tape& tape, const Tensor& table,
                   const std::vector<std::size_t>& rows) {
    MMSEQ_CHECK(table.rank() == 2, "gather_rows: table must be 2-D");
    MMSEQ_CHECK(!rows.empty(), "gather_rows: empty row list");
    const std::size_t v = table.extent(0);
    const std::size_t d = table.extent(1);
    for (std::size_t r : rows) {
        MMSEQ_CHECK(r < v, "gather_rows: row ", r, " out of range [0,", v, ")");
    }
    Tensor out = Tensor::zeros({rows.size(), d}, table.requires_grad());
    auto td = table.data();
    auto od = out.mutable_data();
    for (std::size_t i = 0; i < rows.size(); ++i) {
        std::copy_n(td.data() + rows[i] * d, d, od.data() + i * d);
    }

    record_if_needed(tape, {table}, out, [rows, d](const Tape::Entry& e) {
        auto gy = e.output.grad();
        Tensor table = e.inputs[0];
        auto g = table.grad_or_alloc();
        // serial: the same table row may appear more than once
        for (std::size_t i = 0; i < rows.size(); ++i) {
            for (std::size_t c = 0; c < d; ++c) g[rows[i] * d + c] += gy[i * d + c];
        }
    });
    return out;
}

Tensor slice_rows(Tape& tape, const Tensor& x, std::size_t r0, std::size_t r1) {
    MMSEQ_CHECK(x.rank() == 2, "slice_rows: expects a 2-D tensor");
    MMSEQ_CHECK(r0 < r1 && r1 <= x.extent(0), "slice_rows: bad range [", r0, ",", r1,
                ") for ", shape_str(x.shape()));
    const std::size_t n = x.extent(1);
    Tensor out = Tensor::zeros({r1 - r0, n}, x.requires_grad());
    auto xd = x.data();
    auto od = out.mutable_data();
    std::copy_n(xd.data() + r0 * n, (r1 - r0) * n, od.data());

    record_if_needed(tape, {x}, out, [r0, r1, n](const Tape::Entry& e) {
        auto gy = e.output.grad();
        Tensor x = e.inputs[0];
        auto g = x.grad_or_alloc();
        for (std::size_t i = 0; i < (r1 - r0) * n; ++i) g[r0 * n + i] += gy[i];
    });
    return out;
}

Tensor slice_cols(Tape& tape, const Tensor& x, std::size_t c0, std::size_t c1) {
    MMSEQ_CHECK(x.rank() == 2, "slice_cols: expects a 2-D tensor");
    MMSEQ_CHECK(c0 < c1 && c1 <= x.extent(1), "slice_cols: bad range [", c0, ",", c1,
                ") for ", shape_str(x.shape()));
    const std::size_t m = x.extent(0);
    const std::size_t n = x.extent(1);
    const std::size_t w = c1 - c0;
    Tensor out = Tensor::zeros({m, w}, x.requires_grad());
    auto xd = x.data();
    auto od = out.mutable_data();
    for (std::size_t r = 0; r < m; ++r) {
        std::copy_n(xd.data() + r * n + c0, w, od.data() + r * w);
    }

    record_if_needed(tape, {x}, out, [m, n, c0, w](const Tape::Entry& e) {
        auto gy = e.output.grad();
        Tensor x = e.inputs[0];
        auto g = x.grad_or_alloc();
        for (std::size_t r = 0; r < m; ++r) {
            for (std::size_t c = 0; c < w; ++c) g[r * n + c0 + c] += gy[r * w + c];
        }
    });
    return out;
}

Tensor concat_rows(Tape& tape, std::span<const Tensor> parts) {
    MMSEQ_CHECK(!parts.empty(), "concat_rows: no parts");
    const std::size_t n = parts[0].extent(1);
    std::size_t total = 0;
    bool rg = false;
    for (const Tensor& p : parts) {
        MMSEQ_CHECK(p.rank() == 2 && p.extent(1) == n,
                    "concat_rows: all parts need matching width ", n, ", got ",
                    shape_str(p.shape()));
        total += p.extent(0);
        rg = rg || p.requires_grad();
    }
    Tensor out = Tensor::zeros({total, n}, rg);
    auto od = out.mutable_data();
    std::size_t row = 0;
    std::vector<std::size_t> offsets;
    std::vector<Tensor> inputs;
    for (const Tensor& p : parts) {
        offsets.push_back(row);
        std::copy_n(p.data().data(), p.size(), od.data() + row * n);
        row += p.extent(0);
        inputs.push_back(p);
    }

    record_if_needed(tape, std::move(inputs), out, [offsets, n](const Tape::Entry& e) {
        auto gy = e.output.grad();
        for (std::size_t i = 0; i < e.inputs.size(); ++i) {
            Tensor p = e.inputs[i];
            if (!p.requires_grad()) continue;
            auto g = p.grad_or_alloc();
            const double* src = gy.data() + offsets[i] * n;
            for (std::size_t j = 0; j < p.size(); ++j) g[j] += src[j];
        }
    });
    return out;
}

Tensor concat_cols(Tape& tape, std::span<const Tensor> parts) {
    MMSEQ_CHECK(!parts.empty(), "concat_cols: no parts");
    const std::size_t m = parts[0].extent(0);
    std::size_t total = 0;
    bool rg = false;
    for (const Tensor& p : parts) {
        MMSEQ_CHECK(p.rank() == 2 && p.extent(0) == m,
                    "concat_cols: all parts need matching height ", m, ", got ",
                    shape_str(p.shape()));
        total += p.extent(1);
        rg = rg || p.requires_grad();
    }
    Tensor out = Tensor::zeros({m, total}, rg);
    auto od = out.mutable_data();
    std::size_t col = 0;
    std::vector<std::size_t> offsets;
    std::vector<Tensor> inputs;
    for (const Tensor& p : parts) {
        offsets.push_back(col);
        const std::size_t w = p.extent(1);
        auto pd = p.data();
        for (std::size_t r = 0; r < m; ++r) {
            std::copy_n(pd.data() + r * w, w, od.data() + r * total + col);
        }
        col += w;
        inputs.push_back(p);
    }

    record_if_needed(tape, std::move(inputs), out, [offsets, m, total](const Tape::Entry& e) {
        auto gy = e.output.grad();
        for (std::size_t i = 0; i < e.inputs.size(); ++i) {
            Tensor p = e.inputs[i];
            if (!p.requires_grad()) continue;
            const std::size_t w = p.extent(1);
            auto g = p.grad_or_alloc();
            for (std::size_t r = 0; r < m; ++r) {
                for (std::size_t c = 0; c < w; ++c) {
                    g[r * w + c] += gy[r * total + offsets[i] + c];
                }
            }
        }
    });
    return out;
}

Tensor reshape(Tape& tape, const Tensor& x, Shape shape) {
    MMSEQ_CHECK(shape_numel(shape) == x.size(), "reshape: ", shape_str(x.shape()),
                " has ", x.size(), " elements, target ", shape_str(shape), " has ",
                shape_numel(shape));
    Tensor out = Tensor::from_data(std::move(shape),
                                   std::vector<double>(x.data().begin(), x.data().end()),
                                   x.requires_grad());
    record_if_needed(tape, {x}, out, [](const Tape::Entry& e) {
        Tensor x = e.inputs[0];
        x.accumulate_grad(e.output.grad());
    });
    return out;
}

Tensor sum(Tape& tape, const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    Tensor out = Tensor::scalar(acc, x.requires_grad());
    record_if_needed(tape, {x}, out, [](const Tape::Entry& e) {
        double gy = e.output.grad()[0];
        Tensor x = e.inputs[0];
        auto g = x.grad_or_alloc();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy;
    });
    return out;
}

Tensor mean(Tape& tape, const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    const double inv = 1.0 / static_cast<double>(x.size());
    Tensor out = Tensor::scalar(acc * inv, x.requires_grad());
    record_if_needed(tape, {x}, out, [inv](const Tape::Entry& e) {
        double gy = e.output.grad()[0] * inv;
        Tensor x = e.inputs[0];
        auto g = x.grad_or_alloc();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy;
    });
    return out;
}

Tensor mse(Tape& tape, const Tensor& pred, const Tensor& target) {
    MMSEQ_CHECK(pred.shape() == target.shape(), "mse: shape mismatch ",
                shape_str(pred.shape()), " vs ", shape_str(target.shape()));
    const std::size_t n = pred.size();
    auto pd = pred.data();
    auto td = target.data();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double d = pd[i] - td[i];
        acc += d * d;
    }
    Tensor out = Tensor::scalar(acc / static_cast<double>(n),
                                any_grad({&pred, &target}));
    record_if_needed(tape, {pred, target}, out, [n](const Tape::Entry& e) {
        double gy = e.output.grad()[0];
        Tensor pred = e.inputs[0];
        Tensor target = e.inputs[1];
        auto pd = pred.data();
        auto td = target.data();
        // kept as c*(p-t)/n so the unit-seed gradient is exactly 2(p-t)/n
        const double c = 2.0 * gy;
        const double dn = static_cast<double>(n);
        if (pred.requires_grad()) {
            auto g = pred.grad_or_alloc();
            for (std::size_t i = 0; i < n; ++i) g[i] += c * (pd[i] - td[i]) / dn;
        }
        if (target.requires_grad()) {
            auto g = target.grad_or_alloc();
            for (std::size_t i = 0; i < n; ++i) g[i] -= c * (pd[i] - td[i]) / dn;
        }
    });
    return out;
}

Tensor cross_entropy(Tape& tape, const Tensor& logits,
                     std::span<const CeTarget> targets) {
    MMSEQ_CHECK(logits.rank() == 2, "cross_entropy: logits must be [T x V]");
    const std::size_t t_len = logits.extent(0);
    const std::size_t v = logits.extent(1);
    if (targets.empty()) return Tensor::scalar(0.0);  // defined as 0, no gradient

    for (const CeTarget& t : targets) {
        MMSEQ_CHECK(t.position < t_len, "cross_entropy: position ", t.position,
                    " out of range [0,", t_len, ")");
        MMSEQ_CHECK(t.token < v, "cross_entropy: token id ", t.token,
                    " out of range [0,", v, ")");
    }

    auto ld = logits.data();
    // per-target softmax rows cached for the backward pass
    auto probs = std::make_shared<std::vector<double>>(targets.size() * v);
    double loss = 0.0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        const double* row = ld.data() + targets[i].position * v;
        double mx = row[0];
        for (std::size_t c = 1; c < v; ++c) mx = std::max(mx, row[c]);
        double sum = 0.0;
        double* pr = probs->data() + i * v;
        for (std::size_t c = 0; c < v; ++c) {
            pr[c] = std::exp(row[c] - mx);
            sum += pr[c];
        }
        for (std::size_t c = 0; c < v; ++c) pr[c] /= sum;
        loss -= row[targets[i].token] - mx - std::log(sum);
    }
    loss /= static_cast<double>(targets.size());

    Tensor out = Tensor::scalar(loss, logits.requires_grad());
    std::vector<CeTarget> tgt(targets.begin(), targets.end());
    record_if_needed(tape, {logits}, out, [tgt, probs, v](const Tape::Entry& e) {
        double gy = e.output.grad()[0] / static_cast<double>(tgt.size());
        Tensor logits = e.inputs[0];
        auto g = logits.grad_or_alloc();
        for (std::size_t i = 0; i < tgt.size(); ++i) {
            const double* pr = probs->data() + i * v;
            double* gr = g.data() + tgt[i].position * v;
            for (std::size_t c = 0; c < v; ++c) gr[c] += gy * pr[c];
            gr[tgt[i].token] -= gy;
        }
    });
    return out;
}

Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b) {
    MMSEQ_CHECK(x.rank() == 3, "conv2d: input must be [C x h x w]");
    MMSEQ_CHECK(w.rank() == 4, "conv2d: weight must be [Cout x Cin x k x k]");
    MMSEQ_CHECK(b.rank() == 1, "conv2d: bias must be [Cout]");
    const std::int64_t cin = static_cast<std::int64_t>(x.extent(0));
    const std::int64_t h = static_cast<std::int64_t>(x.extent(1));
    const std::int64_t wd = static_cast<std::int64_t>(x.extent(2));
    const std::int64_t cout = static_cast<std::int64_t>(w.extent(0));
    const std::int64_t k = static_cast<std::int64_t>(w.extent(2));
    MMSEQ_CHECK(static_cast<std::int64_t>(w.extent(1)) == cin,
                "conv2d: weight input channels ", w.extent(1),
                " do not match input channels ", cin);
    MMSEQ_CHECK(w.extent(2) == w.extent(3) && (k % 2) == 1,
                "conv2d: kernel must be square with odd size");
    MMSEQ_CHECK(static_cast<std::int64_t>(b.extent(0)) == cout,
                "conv2d: bias size must equal output channels");
    const std::int64_t pad = k / 2;

    Tensor out = Tensor::zeros({static_cast<std::size_t>(cout),
                                static_cast<std::size_t>(h),
                                static_cast<std::size_t>(wd)},
                               any_grad({&x, &w, &b}));
    auto xd = x.data();
    auto wdat = w.data();
    auto bd = b.data();
    auto od = out.mutable_data();
#pragma omp parallel for schedule(static) if (cout * h * wd * cin * k * k >= kOmpMin)
    for (std::int64_t co = 0; co < cout; ++co) {
        for (std::int64_t i = 0; i < h; ++i) {
            for (std::int64_t j = 0; j < wd; ++j) {
                double acc = bd[co];
                for (std::int64_t ci = 0; ci < cin; ++ci) {
                    for (std::int64_t dy = 0; dy < k; ++dy) {
                        const std::int64_t y = i + dy - pad;
                        if (y < 0 || y >= h) continue;
                        for (std::int64_t dx = 0; dx < k; ++dx) {
                            const std::int64_t xx = j + dx - pad;
                            if (xx < 0 || xx >= wd) continue;
                            acc += wdat[((co * cin + ci) * k + dy) * k + dx] *
                                   xd[(ci * h + y) * wd + xx];
                        }
                    }
                }
                od[(co * h + i) * wd + j] = acc;
            }
        }
    }

    record_if_needed(tape, {x, w, b}, out,
                     [cin, h, wd, cout, k, pad](const Tape::Entry& e) {
        auto gy = e.output.grad();
        Tensor x = e.inputs[0];
        Tensor w = e.inputs[1];
        Tensor b = e.inputs[2];
        auto xd = x.data();
        auto wdat = w.data();
        if (x.requires_grad()) {
            auto g = x.grad_or_alloc();
#pragma omp parallel for schedule(static) if (cin * h * wd * cout * k * k >= kOmpMin)
            for (std::int64_t ci = 0; ci < cin; ++ci) {
                for (std::int64_t y = 0; y < h; ++y) {
                    for (std::int64_t xx = 0; xx < wd; ++xx) {
                        double acc = 0.0;
                        for (std::int64_t co = 0; co < cout; ++co) {
                            for (std::int64_t dy = 0; dy < k; ++dy) {
                                const std::int64_t i = y - dy + pad;
                                if (i < 0 || i >= h) continue;
                                for (std::int64_t dx = 0; dx < k; ++dx) {
                                    const std::int64_t j = xx - dx + pad;
                                    if (j < 0 || j >= wd) continue;
                                    acc += wdat[((co * cin + ci) * k + dy) * k + dx] *
                                           gy[(co * h + i) * wd + j];
                                }
                            }
                        }
                        g[(ci * h + y) * wd + xx] += acc;
                    }
                }
            }
        }
        if (w.requires_grad()) {
            auto g = w.grad_or_alloc();
#pragma omp parallel for schedule(static) if (cout * cin * k * k * h * wd >= kOmpMin)
            for (std::int64_t co = 0; co < cout; ++co) {
                for (std::int64_t ci = 0; ci < cin; ++ci) {
                    for (std::int64_t dy = 0; dy < k; ++dy) {
                        for (std::int64_t dx = 0; dx < k; ++dx) {
                            double acc = 0.0;
                            for (std::int64_t i = 0; i < h; ++i) {
                                const std::int64_t y = i + dy - pad;
                                if (y < 0 || y >= h) continue;
                                for (std::int64_t j = 0; j < wd; ++j) {
                                    const std::int64_t xx = j + dx - pad;
                                    if (xx < 0 || xx >= wd) continue;
                                    acc += gy[(co * h + i) * wd + j] * xd[(ci * h + y) * wd + xx];
                                }
                            }
                            g[((co * cin + ci) * k + dy) * k + dx] += acc;
                        }
                    }
                }
            }
        }
        if (b.requires_grad()) {
            auto g = b.grad_or_alloc();
            for (std::int64_t co = 0; co < cout; ++co) {
                double acc = 0.0;
                for (std::int64_t i = 0; i < h * wd; ++i) acc += gy[co * h * wd + i];
                g[co] += acc;
            }
        }
    });
    return out;
}

}  // namespace mmseq::ops
