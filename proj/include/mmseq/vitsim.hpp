#pragma once

#include <cstdint>

#include "mmseq/image.hpp"
#include "mmseq/tensor.hpp"

namespace mmseq::vitsim {

inline constexpr std::size_t kPooledCount = 64;

/// Configuration of the frozen visual tokenizer. The tile must split
/// evenly into patches and the patch count must split evenly into the
/// 64 pooled groups; both are validated at construction.
struct VisualTokenizerConfig {
    std::size_t tile_h = 224;
    std::size_t tile_w = 224;
    std::size_t patch_size = 14;
    std::size_t channels = 3;
    std::size_t embed_dim = 32;  // d_v
    std::uint64_t seed = 0x5eedu;

    std::size_t patches_per_tile() const {
        return (tile_h / patch_size) * (tile_w / patch_size);
    }
    std::size_t patch_dim() const { return patch_size * patch_size * channels; }
    void validate() const;
};

struct VisualEmbeddingSet {
    std::string source;     // image identity, informational
    Tensor embeddings;      // [64 x d_v]
};

/// Row-major patch extraction: out[p] holds patch pixels in (y, x,
/// channel) order; p runs over patch rows then patch cols.
Tensor patchify(const Image& img, std::size_t patch_size);
/// Exact inverse of patchify.
Image unpatchify(const Tensor& patches, std::size_t h, std::size_t w,
                 std::size_t channels, std::size_t patch_size);

/// Row g is the mean of rows [g*P/64, (g+1)*P/64).
Tensor avg_pool_1d(const Tensor& x, std::size_t groups = kPooledCount);

/// Frozen stand-in for a pre-trained ViT: a fixed seeded zero-bias
/// linear projection of each patch followed by 1D average pooling to
/// exactly 64 embeddings. Linear in the pixels and deterministic for a
/// given seed, which is all downstream consumers rely on.
class VisualTokenizer {
public:
    explicit VisualTokenizer(VisualTokenizerConfig cfg);

    const VisualTokenizerConfig& config() const { return cfg_; }
    /// The projection matrix [patch_dim x d_v]; persisted with
    /// checkpoints so regression targets stay reproducible.
    const Tensor& projection() const { return projection_; }
    /// FNV-1a over the projection bytes; training asserts it frozen.
    std::uint64_t projection_checksum() const;

    VisualEmbeddingSet tokenize(const Image& img, std::string source = {}) const;

private:
    VisualTokenizerConfig cfg_;
    Tensor projection_;
};

}  // namespace mmseq::vitsim
