#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "mmseq/codec.hpp"
#include "mmseq/image.hpp"
#include "mmseq/tensor.hpp"
#include "mmseq/vitsim.hpp"

namespace mmseq::seqpack {

// ---- documents ----------------------------------------------------------

struct TextItem {
    std::string text;
};

struct ImageItem {
    std::string ref;
    bool is_target = false;  // input (conditioning) vs target (generated)
};

/// Caption text with inline box annotations, serialized in reading order.
struct BoxedPart {
    std::optional<std::string> text;
    std::optional<codec::BBox> box;
};

struct BoxedCaptionItem {
    std::vector<BoxedPart> parts;
};

using DocumentItem = std::variant<TextItem, ImageItem, BoxedCaptionItem>;

struct MultimodalDocument {
    std::vector<DocumentItem> items;
};

// ---- packed sequences ----------------------------------------------------

struct TokenSegment {
    std::vector<codec::TokenId> ids;
};

struct VisualTile {
    double center_x = 0.0;
    double center_y = 0.0;
    Tensor embeddings;  // [64 x d_v], raw tokenizer output; the model adds
                        // its 2D positional embedding from the center
};

struct VisualSegment {
    std::string source_ref;
    std::vector<VisualTile> tiles;  // row-major sub-images, global tile last
};

struct QuerySegment {
    std::size_t slots = vitsim::kPooledCount;
};

using Segment = std::variant<TokenSegment, VisualSegment, QuerySegment>;

std::size_t segment_len(const Segment& seg);

struct RegressionTarget {
    std::size_t segment_index = 0;  // index of the query segment
    Tensor target;                  // [64 x d_v]
};

struct PackedSequence {
    static constexpr std::int32_t kNoTarget = -1;

    std::vector<Segment> segments;
    std::vector<std::int32_t> lm_targets;  // per position; kNoTarget = masked out
    std::vector<RegressionTarget> regression_targets;
    std::size_t total_len = 0;

    /// Token id per position; nullopt on visual and query positions.
    std::vector<std::optional<codec::TokenId>> token_layout() const;
};

/// A token is an LM target iff its class is predictable text-side
/// content: bytes, loc tokens, box delimiters, and the image-start
/// marker (which the model learns to emit where an image belongs).
bool lm_maskable(codec::TokenId id);

// ---- operations ----------------------------------------------------------

using ImageResolver = std::function<Image(const std::string& ref)>;

struct PackContext {
    const vitsim::VisualTokenizer* vit = nullptr;
    ImageResolver resolve;
};

/// Assembles one document into a training-ready sequence: text and box
/// tokens with next-token targets, input images as tiled visual
/// segments, target images as an <IMG>-framed block of 64 query slots
/// with the tokenizer features of the globally resized image as the
/// regression target.
PackedSequence pack(const MultimodalDocument& doc, const PackContext& ctx);

struct Violation {
    std::string code;
    std::string message;
};

/// Checks every PackedSequence invariant; empty list iff valid.
std::vector<Violation> validate(const PackedSequence& seq);

struct Batch {
    std::vector<PackedSequence> items;       // right-padded to pad_to
    std::vector<std::vector<std::uint8_t>> attention_mask;  // 1 = real position
    std::vector<std::size_t> real_lens;
    std::size_t pad_to = 0;
};

/// Right-pads with PAD tokens; padded positions carry no LM target and
/// are excluded from both losses.
Batch collate(const std::vector<PackedSequence>& seqs, std::size_t pad_to);

}  // namespace mmseq::seqpack
