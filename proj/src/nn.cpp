#include "mmseq/nn.hpp"

#include <cmath>

#include "mmseq/common.hpp"

namespace mmseq::nn {

Linear Linear::init(RandomSource& rng, std::size_t in, std::size_t out,
                    double stddev) {
    Linear l;
    l.w = rng.normal_tensor({in, out}, stddev, true);
    l.b = Tensor::zeros({out}, true);
    return l;
}

Tensor Linear::forward(Tape& tape, const Tensor& x) const {
    MMSEQ_CHECK(x.rank() == 2 && x.extent(1) == in_dim(),
                "linear: input ", shape_str(x.shape()), " does not match weight ",
                shape_str(w.shape()));
    Tensor y = ops::add_rowvec(tape, ops::matmul(tape, x, w), b);
    if (lora) {
        Tensor delta = ops::matmul(tape, ops::matmul(tape, x, lora->down), lora->up);
        y = ops::add(tape, y, ops::scale(tape, delta, lora->scaling()));
    }
    return y;
}

LayerNorm LayerNorm::init(std::size_t dim) {
    LayerNorm ln;
    ln.g = Tensor::full({dim}, 1.0, true);
    ln.b = Tensor::zeros({dim}, true);
    return ln;
}

Tensor LayerNorm::forward(Tape& tape, const Tensor& x) const {
    return ops::layer_norm(tape, x, g, b, 1e-5);
}

CrossAttention CrossAttention::init(RandomSource& rng, std::size_t n_out,
                                    std::size_t latent_dim, std::size_t src_dim,
                                    std::size_t att_dim, std::size_t out_dim) {
    CrossAttention ca;
    ca.latents = rng.normal_tensor({n_out, latent_dim}, 0.02, true);
    ca.wq = Linear::init(rng, latent_dim, att_dim);
    ca.wk = Linear::init(rng, src_dim, att_dim);
    ca.wv = Linear::init(rng, src_dim, att_dim);
    ca.wo = Linear::init(rng, att_dim, out_dim);
    return ca;
}

Tensor CrossAttention::forward(Tape& tape, const Tensor& source) const {
    Tensor q = wq.forward(tape, latents);
    Tensor k = wk.forward(tape, source);
    Tensor v = wv.forward(tape, source);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(q.extent(1)));
    Tensor scores = ops::scale(tape, ops::matmul(tape, q, ops::transpose(tape, k)),
                               inv_sqrt);
    Tensor attn = ops::softmax(tape, scores);
    return wo.forward(tape, ops::matmul(tape, attn, v));
}

Tensor causal_mask(std::size_t t) {
    Tensor mask = Tensor::zeros({t, t});
    auto md = mask.mutable_data();
    for (std::size_t i = 0; i < t; ++i) {
        for (std::size_t j = i + 1; j < t; ++j) md[i * t + j] = -1e30;
    }
    return mask;
}

}  // namespace mmseq::nn
