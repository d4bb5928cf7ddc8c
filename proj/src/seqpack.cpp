#include "mmseq/seqpack.hpp"

#include <set>

#include "mmseq/common.hpp"
#include "mmseq/dynres.hpp"

namespace mmseq::seqpack {

std::size_t segment_len(const Segment& seg) {
    return std::visit(
        [](const auto& s) -> std::size_t {
            using T = std::decay_t<decltype(s)>;
            if constexpr (std::is_same_v<T, TokenSegment>) {
                return s.ids.size();
            } else if constexpr (std::is_same_v<T, VisualSegment>) {
                return s.tiles.size() * vitsim::kPooledCount;
            } else {
                return s.slots;
            }
        },
        seg);
}

std::vector<std::optional<codec::TokenId>> PackedSequence::token_layout() const {
    std::vector<std::optional<codec::TokenId>> layout;
    layout.reserve(total_len);
    for (const Segment& seg : segments) {
        if (const auto* tok = std::get_if<TokenSegment>(&seg)) {
            for (codec::TokenId id : tok->ids) layout.emplace_back(id);
        } else {
            layout.insert(layout.end(), segment_len(seg), std::nullopt);
        }
    }
    return layout;
}

bool lm_maskable(codec::TokenId id) {
    if (id < 256) return true;                       // byte tokens
    if (codec::is_loc(id)) return true;              // loc tokens
    return id == codec::kBoxStart || id == codec::kBoxEnd || id == codec::kImgStart;
}

namespace {

Image resolve_to_channels(const PackContext& ctx, const std::string& ref,
                          std::size_t channels) {
    MMSEQ_CHECK(ctx.resolve, "pack: no image resolver configured");
    Image img;
    try {
        img = ctx.resolve(ref);
    } catch (const std::exception& e) {
        throw IoError(detail::format_msg("pack: cannot resolve image ref '", ref,
                                         "': ", e.what()));
    }
    if (img.channels == 1 && channels == 3) img = img.to_rgb();
    MMSEQ_CHECK(img.channels == channels, "pack: image '", ref, "' has ",
                img.channels, " channels, tokenizer expects ", channels);
    return img;
}

void append_tokens(PackedSequence& seq, std::vector<codec::TokenId> ids) {
    if (ids.empty()) return;
    seq.segments.push_back(TokenSegment{std::move(ids)});
}

}  // namespace

PackedSequence pack(const MultimodalDocument& doc, const PackContext& ctx) {
    MMSEQ_CHECK(!doc.items.empty(), "pack: empty document");
    MMSEQ_CHECK(ctx.vit != nullptr, "pack: no visual tokenizer configured");
    const auto& cfg = ctx.vit->config();

    // a target image must not also condition the same document
    std::set<std::string> input_refs, target_refs;
    for (const DocumentItem& item : doc.items) {
        if (const auto* img = std::get_if<ImageItem>(&item)) {
            (img->is_target ? target_refs : input_refs).insert(img->ref);
        }
    }
    for (const std::string& ref : target_refs) {
        MMSEQ_CHECK(!input_refs.contains(ref), "pack: image '", ref,
                    "' used as both input and target in one document");
    }

    PackedSequence seq;
    for (const DocumentItem& item : doc.items) {
        if (const auto* text = std::get_if<TextItem>(&item)) {
            append_tokens(seq, codec::tokenize_text(text->text));
        } else if (const auto* boxed = std::get_if<BoxedCaptionItem>(&item)) {
            std::vector<codec::TokenId> ids;
            for (const BoxedPart& part : boxed->parts) {
                MMSEQ_CHECK(part.text.has_value() != part.box.has_value(),
                            "pack: boxed caption part must be exactly one of text or box");
                if (part.text) {
                    auto t = codec::tokenize_text(*part.text);
                    ids.insert(ids.end(), t.begin(), t.end());
                } else {
                    auto b = codec::encode_box(*part.box);
                    ids.insert(ids.end(), b.begin(), b.end());
                }
            }
            append_tokens(seq, std::move(ids));
        } else {
            const auto& img_item = std::get<ImageItem>(item);
            Image img = resolve_to_channels(ctx, img_item.ref, cfg.channels);
            if (!img_item.is_target) {
                // tiled visual context: row-major sub-images, global tile last
                dynres::Partition part = dynres::partition(img, cfg.tile_h, cfg.tile_w);
                VisualSegment vis;
                vis.source_ref = img_item.ref;
                for (std::size_t i = 0; i < part.sub_images.size(); ++i) {
                    VisualTile tile;
                    tile.center_x = part.plan.cells[i].center_x;
                    tile.center_y = part.plan.cells[i].center_y;
                    tile.embeddings =
                        ctx.vit->tokenize(part.sub_images[i], img_item.ref).embeddings;
                    vis.tiles.push_back(std::move(tile));
                }
                VisualTile global;
                global.center_x = 0.5;
                global.center_y = 0.5;
                global.embeddings =
                    ctx.vit->tokenize(part.global_image, img_item.ref).embeddings;
                vis.tiles.push_back(std::move(global));
                seq.segments.push_back(std::move(vis));
            } else {
                // generation slot: <IMG> [64 queries] </IMG>, regression onto
                // the tokenizer features of the globally resized target
                append_tokens(seq, {codec::kImgStart});
                Image global = dynres::resize_bilinear(img, cfg.tile_h, cfg.tile_w);
                RegressionTarget target;
                target.segment_index = seq.segments.size();
                target.target = ctx.vit->tokenize(global, img_item.ref).embeddings;
                seq.segments.push_back(QuerySegment{});
                seq.regression_targets.push_back(std::move(target));
                append_tokens(seq, {codec::kImgEnd});
            }
        }
    }

    seq.total_len = 0;
    for (const Segment& seg : seq.segments) seq.total_len += segment_len(seg);

    // next-token targets: a token is predicted from the position before it
    auto layout = seq.token_layout();
    seq.lm_targets.assign(seq.total_len, PackedSequence::kNoTarget);
    for (std::size_t pos = 1; pos < seq.total_len; ++pos) {
        if (layout[pos] && lm_maskable(*layout[pos])) {
            seq.lm_targets[pos] = static_cast<std::int32_t>(*layout[pos]);
        }
    }
    return seq;
}

std::vector<Violation> validate(const PackedSequence& seq) {
    std::vector<Violation> out;
    auto flag = [&out](std::string code, std::string message) {
        out.push_back({std::move(code), std::move(message)});
    };

    std::size_t len = 0;
    for (const Segment& seg : seq.segments) len += segment_len(seg);
    if (len != seq.total_len) {
        flag("total_len", detail::format_msg("segment lengths sum to ", len,
                                             " but total_len is ", seq.total_len));
    }
    if (seq.lm_targets.size() != seq.total_len) {
        flag("lm_targets_len", detail::format_msg("lm_targets has ",
                                                  seq.lm_targets.size(),
                                                  " entries for ", seq.total_len,
                                                  " positions"));
    }

    // per-query-segment bookkeeping
    std::vector<std::size_t> seg_start(seq.segments.size(), 0);
    {
        std::size_t pos = 0;
        for (std::size_t i = 0; i < seq.segments.size(); ++i) {
            seg_start[i] = pos;
            pos += segment_len(seq.segments[i]);
        }
    }
    auto layout = seq.token_layout();

    for (std::size_t i = 0; i < seq.segments.size(); ++i) {
        const auto* query = std::get_if<QuerySegment>(&seq.segments[i]);
        if (!query) continue;
        if (query->slots != vitsim::kPooledCount) {
            flag("query_arity", detail::format_msg("query segment ", i, " has ",
                                                   query->slots, " slots, expected ",
                                                   vitsim::kPooledCount));
        }
        std::size_t n_targets = 0;
        for (const RegressionTarget& t : seq.regression_targets) {
            if (t.segment_index != i) continue;
            ++n_targets;
            if (!t.target.defined() || t.target.rank() != 2 ||
                t.target.extent(0) != vitsim::kPooledCount) {
                flag("regression_shape",
                     detail::format_msg("regression target for query segment ", i,
                                        " is not [64 x d_v]"));
            }
        }
        if (n_targets != 1) {
            flag("regression_count",
                 detail::format_msg("query segment ", i, " has ", n_targets,
                                    " regression targets, expected 1"));
        }
        const std::size_t start = seg_start[i];
        const std::size_t end = start + segment_len(seq.segments[i]);
        if (start == 0 || !layout[start - 1] || *layout[start - 1] != codec::kImgStart) {
            flag("img_start", detail::format_msg("query segment ", i,
                                                 " is not immediately preceded by <IMG>"));
        }
        if (end >= seq.total_len || !layout[end] || *layout[end] != codec::kImgEnd) {
            flag("img_end", detail::format_msg("query segment ", i,
                                               " is not immediately followed by </IMG>"));
        }
    }
    for (const RegressionTarget& t : seq.regression_targets) {
        if (t.segment_index >= seq.segments.size() ||
            !std::holds_alternative<QuerySegment>(seq.segments[t.segment_index])) {
            flag("regression_index",
                 detail::format_msg("regression target points at segment ",
                                    t.segment_index, " which is not a query segment"));
        }
    }

    // LM targets only on maskable token positions, never at position 0
    const std::size_t checked = std::min(seq.lm_targets.size(), layout.size());
    for (std::size_t pos = 0; pos < checked; ++pos) {
        const std::int32_t tgt = seq.lm_targets[pos];
        if (tgt == PackedSequence::kNoTarget) continue;
        if (!layout[pos]) {
            flag("target_on_nontoken",
                 detail::format_msg("lm target on non-token position ", pos));
            continue;
        }
        if (pos == 0) {
            flag("target_at_start", "lm target at position 0 has no context");
        }
        if (static_cast<std::int32_t>(*layout[pos]) != tgt) {
            flag("target_mismatch",
                 detail::format_msg("lm target ", tgt, " at position ", pos,
                                    " does not equal the token ", *layout[pos]));
        }
        if (!lm_maskable(static_cast<codec::TokenId>(tgt))) {
            flag("target_class", detail::format_msg("lm target at position ", pos,
                                                    " is not a maskable token class"));
        }
    }
    return out;
}

Batch collate(const std::vector<PackedSequence>& seqs, std::size_t pad_to) {
    MMSEQ_CHECK(!seqs.empty(), "collate: empty batch");
    Batch batch;
    batch.pad_to = pad_to;
    for (const PackedSequence& seq : seqs) {
        MMSEQ_CHECK(seq.total_len <= pad_to, "collate: sequence of length ",
                    seq.total_len, " exceeds pad_to ", pad_to);
        PackedSequence padded = seq;
        if (seq.total_len < pad_to) {
            const std::size_t n_pad = pad_to - seq.total_len;
            padded.segments.push_back(TokenSegment{
                std::vector<codec::TokenId>(n_pad, codec::kPad)});
            padded.lm_targets.insert(padded.lm_targets.end(), n_pad,
                                     PackedSequence::kNoTarget);
            padded.total_len = pad_to;
        }
        std::vector<std::uint8_t> mask(pad_to, 0);
        for (std::size_t i = 0; i < seq.total_len; ++i) mask[i] = 1;
        batch.attention_mask.push_back(std::move(mask));
        batch.real_lens.push_back(seq.total_len);
        batch.items.push_back(std::move(padded));
    }
    return batch;
}

}  // namespace mmseq::seqpack
