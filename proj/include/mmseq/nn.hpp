#pragma once

#include <optional>

#include "mmseq/ops.hpp"
#include "mmseq/rng.hpp"
#include "mmseq/tape.hpp"
#include "mmseq/tensor.hpp"

namespace mmseq::nn {

/// Low-rank additive delta on a linear map. Stored in the same
/// orientation as Linear::w, so the effective weight is
/// w + (alpha/rank) * down * up with down [in x r] and up [r x out].
/// `up` starts at zero, making a fresh adapter an exact identity.
struct LoraAdapter {
    Tensor down;  // [in x r]
    Tensor up;    // [r x out]
    std::size_t rank = 0;
    double alpha = 0.0;

    double scaling() const { return alpha / static_cast<double>(rank); }
};

struct Linear {
    Tensor w;  // [in x out]
    Tensor b;  // [out]
    std::optional<LoraAdapter> lora;

    static Linear init(RandomSource& rng, std::size_t in, std::size_t out,
                       double stddev = 0.02);

    std::size_t in_dim() const { return w.extent(0); }
    std::size_t out_dim() const { return w.extent(1); }

    /// x [m x in] -> [m x out]; applies the adapter delta when present.
    Tensor forward(Tape& tape, const Tensor& x) const;
};

struct LayerNorm {
    Tensor g;
    Tensor b;

    static LayerNorm init(std::size_t dim);
    Tensor forward(Tape& tape, const Tensor& x) const;
};

/// Learned-latent cross-attention: n_out query latents attend over the
/// source rows, producing exactly n_out output rows regardless of the
/// source length. Single-head.
struct CrossAttention {
    Tensor latents;  // [n_out x latent_dim]
    Linear wq;       // latent_dim -> att_dim
    Linear wk;       // src_dim -> att_dim
    Linear wv;       // src_dim -> att_dim
    Linear wo;       // att_dim -> out_dim

    static CrossAttention init(RandomSource& rng, std::size_t n_out,
                               std::size_t latent_dim, std::size_t src_dim,
                               std::size_t att_dim, std::size_t out_dim);

    Tensor forward(Tape& tape, const Tensor& source) const;
};

/// Additive causal mask [t x t]: 0 at or below the diagonal, a large
/// negative elsewhere (underflows to exactly zero probability).
Tensor causal_mask(std::size_t t);

}  // namespace mmseq::nn
