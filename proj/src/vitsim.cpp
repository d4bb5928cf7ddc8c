#include "mmseq/vitsim.hpp"

#include <cmath>

#include "mmseq/common.hpp"
#include "mmseq/ops.hpp"
#include "mmseq/rng.hpp"
#include "mmseq/tape.hpp"

namespace mmseq::vitsim {

void VisualTokenizerConfig::validate() const {
    MMSEQ_CHECK(patch_size > 0 && embed_dim > 0, "tokenizer config: zero sizes");
    MMSEQ_CHECK(channels == 1 || channels == 3, "tokenizer config: channels must be 1 or 3");
    if (tile_h % patch_size != 0 || tile_w % patch_size != 0) {
        throw ConfigError(detail::format_msg(
            "tokenizer config: tile ", tile_h, "x", tile_w,
            " not divisible by patch size ", patch_size));
    }
    if (patches_per_tile() % kPooledCount != 0) {
        throw ConfigError(detail::format_msg(
            "tokenizer config: patch count ", patches_per_tile(),
            " not divisible by ", kPooledCount, " pooled groups"));
    }
}

Tensor patchify(const Image& img, std::size_t patch_size) {
    MMSEQ_CHECK(patch_size > 0, "patchify: patch size must be positive");
    MMSEQ_CHECK(img.height % patch_size == 0 && img.width % patch_size == 0,
                "patchify: image ", img.height, "x", img.width,
                " not divisible by patch size ", patch_size, "; tile first");
    const std::size_t rows = img.height / patch_size;
    const std::size_t cols = img.width / patch_size;
    const std::size_t dim = patch_size * patch_size * img.channels;
    Tensor out = Tensor::zeros({rows * cols, dim});
    auto od = out.mutable_data();
    for (std::size_t pr = 0; pr < rows; ++pr) {
        for (std::size_t pc = 0; pc < cols; ++pc) {
            double* dst = od.data() + (pr * cols + pc) * dim;
            std::size_t k = 0;
            for (std::size_t y = 0; y < patch_size; ++y) {
                for (std::size_t x = 0; x < patch_size; ++x) {
                    for (std::size_t c = 0; c < img.channels; ++c) {
                        dst[k++] = img.at(pr * patch_size + y, pc * patch_size + x, c);
                    }
                }
            }
        }
    }
    return out;
}

Image unpatchify(const Tensor& patches, std::size_t h, std::size_t w,
                 std::size_t channels, std::size_t patch_size) {
    MMSEQ_CHECK(h % patch_size == 0 && w % patch_size == 0,
                "unpatchify: dims not divisible by patch size");
    const std::size_t rows = h / patch_size;
    const std::size_t cols = w / patch_size;
    const std::size_t dim = patch_size * patch_size * channels;
    MMSEQ_CHECK(patches.rank() == 2 && patches.extent(0) == rows * cols &&
                    patches.extent(1) == dim,
                "unpatchify: patch tensor shape mismatch");
    Image img = Image::create(h, w, channels);
    auto pd = patches.data();
    for (std::size_t pr = 0; pr < rows; ++pr) {
        for (std::size_t pc = 0; pc < cols; ++pc) {
            const double* src = pd.data() + (pr * cols + pc) * dim;
            std::size_t k = 0;
            for (std::size_t y = 0; y < patch_size; ++y) {
                for (std::size_t x = 0; x < patch_size; ++x) {
                    for (std::size_t c = 0; c < channels; ++c) {
                        img.at(pr * patch_size + y, pc * patch_size + x, c) = src[k++];
                    }
                }
            }
        }
    }
    return img;
}

Tensor avg_pool_1d(const Tensor& x, std::size_t groups) {
    MMSEQ_CHECK(x.rank() == 2, "avg_pool_1d: expects [P x d]");
    const std::size_t p = x.extent(0);
    const std::size_t d = x.extent(1);
    MMSEQ_CHECK(groups > 0 && p % groups == 0, "avg_pool_1d: row count ", p,
                " not divisible by ", groups, " groups");
    const std::size_t span = p / groups;
    Tensor out = Tensor::zeros({groups, d});
    auto xd = x.data();
    auto od = out.mutable_data();
    for (std::size_t g = 0; g < groups; ++g) {
        for (std::size_t c = 0; c < d; ++c) {
            double acc = 0.0;
            for (std::size_t r = 0; r < span; ++r) {
                acc += xd[(g * span + r) * d + c];
            }
            od[g * d + c] = acc / static_cast<double>(span);
        }
    }
    return out;
}

VisualTokenizer::VisualTokenizer(VisualTokenizerConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    RandomSource rng(cfg_.seed);
    const double stddev = 1.0 / std::sqrt(static_cast<double>(cfg_.patch_dim()));
    projection_ = rng.normal_tensor({cfg_.patch_dim(), cfg_.embed_dim}, stddev);
}

std::uint64_t VisualTokenizer::projection_checksum() const {
    std::uint64_t h = 1469598103934665603ull;
    for (double v : projection_.data()) {
        std::uint64_t bits = 0;
        static_assert(sizeof bits == sizeof v);
        __builtin_memcpy(&bits, &v, sizeof bits);
        for (int b = 0; b < 8; ++b) {
            h ^= (bits >> (8 * b)) & 0xffu;
            h *= 1099511628211ull;
        }
    }
    return h;
}

VisualEmbeddingSet VisualTokenizer::tokenize(const Image& img, std::string source) const {
    MMSEQ_CHECK(img.height == cfg_.tile_h && img.width == cfg_.tile_w,
                "vit_tokenize: image ", img.height, "x", img.width,
                " is not one tile (", cfg_.tile_h, "x", cfg_.tile_w, ")");
    MMSEQ_CHECK(img.channels == cfg_.channels, "vit_tokenize: expected ",
                cfg_.channels, " channels, got ", img.channels);
    Tensor patches = patchify(img, cfg_.patch_size);
    Tape scratch;  // nothing requires grad, nothing is recorded
    Tensor projected = ops::matmul(scratch, patches, projection_);
    VisualEmbeddingSet set;
    set.source = std::move(source);
    set.embeddings = avg_pool_1d(projected, kPooledCount);
    return set;
}

}  // namespace mmseq::vitsim
