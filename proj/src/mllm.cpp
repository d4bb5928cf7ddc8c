#include "mmseq/mllm.hpp"

#include <cmath>

#include "mmseq/common.hpp"

namespace mmseq::mllm {

void ModelConfig::validate() const {
    MMSEQ_CHECK(model_dim > 0 && n_layers > 0 && n_heads > 0, "model config: zero sizes");
    MMSEQ_CHECK(model_dim % n_heads == 0, "model config: model_dim ", model_dim,
                " not divisible by n_heads ", n_heads);
    MMSEQ_CHECK(n_queries == vitsim::kPooledCount, "model config: n_queries must be ",
                vitsim::kPooledCount);
    MMSEQ_CHECK(vocab_size == codec::kVocabSize, "model config: vocab_size must be ",
                codec::kVocabSize);
    MMSEQ_CHECK(visual_dim > 0 && max_len > 0, "model config: zero sizes");
}

ModelParams ModelParams::init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    RandomSource rng(seed);
    ModelParams p;
    p.config = cfg;
    const std::size_t dm = cfg.model_dim;
    p.token_embedding = rng.normal_tensor({cfg.vocab_size, dm}, 0.02, true);
    p.pos_embedding = rng.normal_tensor({cfg.max_len, dm}, 0.02, true);
    p.query_embeddings = rng.normal_tensor({cfg.n_queries, dm}, 0.02, true);
    p.pos2d_l = rng.normal_tensor({cfg.visual_dim}, 0.02, true);
    p.pos2d_r = rng.normal_tensor({cfg.visual_dim}, 0.02, true);
    p.pos2d_t = rng.normal_tensor({cfg.visual_dim}, 0.02, true);
    p.pos2d_b = rng.normal_tensor({cfg.visual_dim}, 0.02, true);
    p.input_adapter = nn::CrossAttention::init(rng, vitsim::kPooledCount, dm,
                                               cfg.visual_dim, dm, dm);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        Block block;
        block.ln1 = nn::LayerNorm::init(dm);
        block.wq = nn::Linear::init(rng, dm, dm);
        block.wk = nn::Linear::init(rng, dm, dm);
        block.wv = nn::Linear::init(rng, dm, dm);
        block.wo = nn::Linear::init(rng, dm, dm);
        block.ln2 = nn::LayerNorm::init(dm);
        block.fc1 = nn::Linear::init(rng, dm, 4 * dm);
        block.fc2 = nn::Linear::init(rng, 4 * dm, dm);
        p.blocks.push_back(std::move(block));
    }
    p.final_ln = nn::LayerNorm::init(dm);
    p.lm_head = nn::Linear::init(rng, dm, cfg.vocab_size);
    p.output_head = nn::CrossAttention::init(rng, cfg.n_queries, dm, dm, dm,
                                             cfg.visual_dim);
    return p;
}

namespace {

void visit_linear(const std::string& prefix, nn::Linear& lin,
                  const std::function<void(const std::string&, Tensor&)>& fn) {
    fn(prefix + ".w", lin.w);
    fn(prefix + ".b", lin.b);
    if (lin.lora) {
        fn(prefix + ".lora_down", lin.lora->down);
        fn(prefix + ".lora_up", lin.lora->up);
    }
}

void visit_cross_attention(const std::string& prefix, nn::CrossAttention& ca,
                           const std::function<void(const std::string&, Tensor&)>& fn) {
    fn(prefix + ".latents", ca.latents);
    visit_linear(prefix + ".wq", ca.wq, fn);
    visit_linear(prefix + ".wk", ca.wk, fn);
    visit_linear(prefix + ".wv", ca.wv, fn);
    visit_linear(prefix + ".wo", ca.wo, fn);
}

}  // namespace

void ModelParams::visit(const std::function<void(const std::string&, Tensor&)>& fn) {
    fn("token_embedding", token_embedding);
    fn("pos_embedding", pos_embedding);
    fn("query_embeddings", query_embeddings);
    fn("pos2d.l", pos2d_l);
    fn("pos2d.r", pos2d_r);
    fn("pos2d.t", pos2d_t);
    fn("pos2d.b", pos2d_b);
    visit_cross_attention("input_adapter", input_adapter, fn);
    for (std::size_t l = 0; l < blocks.size(); ++l) {
        const std::string p = detail::format_msg("blocks.", l);
        fn(p + ".ln1.g", blocks[l].ln1.g);
        fn(p + ".ln1.b", blocks[l].ln1.b);
        visit_linear(p + ".attn.wq", blocks[l].wq, fn);
        visit_linear(p + ".attn.wk", blocks[l].wk, fn);
        visit_linear(p + ".attn.wv", blocks[l].wv, fn);
        visit_linear(p + ".attn.wo", blocks[l].wo, fn);
        fn(p + ".ln2.g", blocks[l].ln2.g);
        fn(p + ".ln2.b", blocks[l].ln2.b);
        visit_linear(p + ".mlp.fc1", blocks[l].fc1, fn);
        visit_linear(p + ".mlp.fc2", blocks[l].fc2, fn);
    }
    fn("final_ln.g", final_ln.g);
    fn("final_ln.b", final_ln.b);
    visit_linear("lm_head", lm_head, fn);
    visit_cross_attention("output_head", output_head, fn);
}

std::vector<std::pair<std::string, Tensor>> ModelParams::named_parameters() {
    std::vector<std::pair<std::string, Tensor>> out;
    visit([&out](const std::string& name, Tensor& t) { out.emplace_back(name, t); });
    return out;
}

namespace {

Tensor tile_position_embedding(Tape& tape, const ModelParams& p, double cx, double cy) {
    MMSEQ_CHECK(cx > 0.0 && cx < 1.0 && cy > 0.0 && cy < 1.0,
                "tile center (", cx, ",", cy, ") outside the open unit square");
    Tensor pe = ops::add(tape, ops::scale(tape, p.pos2d_l, cx),
                         ops::scale(tape, p.pos2d_r, 1.0 - cx));
    pe = ops::add(tape, pe, ops::scale(tape, p.pos2d_t, cy));
    return ops::add(tape, pe, ops::scale(tape, p.pos2d_b, 1.0 - cy));
}

Tensor multi_head_self_attention(Tape& tape, const Block& block, const Tensor& x,
                                 const Tensor& mask, std::size_t n_heads) {
    const std::size_t dm = x.extent(1);
    const std::size_t hd = dm / n_heads;
    Tensor q = block.wq.forward(tape, x);
    Tensor k = block.wk.forward(tape, x);
    Tensor v = block.wv.forward(tape, x);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
    std::vector<Tensor> heads;
    for (std::size_t h = 0; h < n_heads; ++h) {
        Tensor qh = ops::slice_cols(tape, q, h * hd, (h + 1) * hd);
        Tensor kh = ops::slice_cols(tape, k, h * hd, (h + 1) * hd);
        Tensor vh = ops::slice_cols(tape, v, h * hd, (h + 1) * hd);
        Tensor scores = ops::scale(tape, ops::matmul(tape, qh, ops::transpose(tape, kh)),
                                   inv_sqrt);
        Tensor attn = ops::softmax(tape, ops::add(tape, scores, mask));
        heads.push_back(ops::matmul(tape, attn, vh));
    }
    return block.wo.forward(tape, ops::concat_cols(tape, heads));
}

}  // namespace

SequenceOutput forward_sequence(Tape& tape, const ModelParams& params,
                                const seqpack::PackedSequence& seq) {
    const ModelConfig& cfg = params.config;
    MMSEQ_CHECK(seq.total_len <= cfg.max_len, "forward: sequence length ",
                seq.total_len, " exceeds max_len ", cfg.max_len);
    MMSEQ_CHECK(seq.total_len > 0, "forward: empty sequence");

    SequenceOutput out;
    std::vector<Tensor> row_blocks;
    std::size_t pos = 0;
    for (std::size_t i = 0; i < seq.segments.size(); ++i) {
        const seqpack::Segment& seg = seq.segments[i];
        if (const auto* tok = std::get_if<seqpack::TokenSegment>(&seg)) {
            std::vector<std::size_t> ids(tok->ids.begin(), tok->ids.end());
            row_blocks.push_back(ops::gather_rows(tape, params.token_embedding, ids));
        } else if (const auto* vis = std::get_if<seqpack::VisualSegment>(&seg)) {
            for (const seqpack::VisualTile& tile : vis->tiles) {
                MMSEQ_CHECK(tile.embeddings.rank() == 2 &&
                                tile.embeddings.extent(1) == cfg.visual_dim,
                            "forward: tile embedding dim does not match visual_dim ",
                            cfg.visual_dim);
                Tensor pe = tile_position_embedding(tape, params, tile.center_x,
                                                    tile.center_y);
                Tensor feats = ops::add_rowvec(tape, tile.embeddings, pe);
                row_blocks.push_back(params.input_adapter.forward(tape, feats));
            }
        } else {
            const auto& query = std::get<seqpack::QuerySegment>(seg);
            MMSEQ_CHECK(query.slots == cfg.n_queries, "forward: query segment with ",
                        query.slots, " slots");
            out.query_segments.push_back(i);
            out.query_spans.emplace_back(pos, pos + query.slots);
            row_blocks.push_back(params.query_embeddings);
        }
        pos += seqpack::segment_len(seg);
    }

    Tensor x = row_blocks.size() == 1 ? row_blocks[0]
                                      : ops::concat_rows(tape, row_blocks);
    std::vector<std::size_t> positions(seq.total_len);
    for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i;
    x = ops::add(tape, x, ops::gather_rows(tape, params.pos_embedding, positions));

    Tensor mask = nn::causal_mask(seq.total_len);
    for (const Block& block : params.blocks) {
        Tensor attn = multi_head_self_attention(tape, block,
                                                block.ln1.forward(tape, x), mask,
                                                cfg.n_heads);
        x = ops::add(tape, x, attn);
        Tensor h = block.fc2.forward(
            tape, ops::gelu(tape, block.fc1.forward(tape, block.ln2.forward(tape, x))));
        x = ops::add(tape, x, h);
    }
    Tensor hidden = params.final_ln.forward(tape, x);
    out.final_hidden = hidden;
    out.logits = params.lm_head.forward(tape, hidden);
    for (const auto& [start, end] : out.query_spans) {
        Tensor hq = ops::slice_rows(tape, hidden, start, end);
        out.regressed.push_back(params.output_head.forward(tape, hq));
    }
    return out;
}

BatchOutput forward(Tape& tape, const ModelParams& params,
                    const seqpack::Batch& batch) {
    BatchOutput out;
    for (const seqpack::PackedSequence& seq : batch.items) {
        out.items.push_back(forward_sequence(tape, params, seq));
    }
    return out;
}

LossParts loss(Tape& tape, const ModelParams& params, const seqpack::Batch& batch,
               double lambda) {
    MMSEQ_CHECK(!batch.items.empty(), "loss: empty batch");
    LossParts parts;
    std::vector<Tensor> ce_items, mse_items;
    for (const seqpack::PackedSequence& seq : batch.items) {
        SequenceOutput seq_out = forward_sequence(tape, params, seq);

        // targets: the token at position j is predicted by logits row j-1
        std::vector<ops::CeTarget> targets;
        for (std::size_t j = 1; j < seq.lm_targets.size(); ++j) {
            if (seq.lm_targets[j] == seqpack::PackedSequence::kNoTarget) continue;
            targets.push_back({j - 1, static_cast<codec::TokenId>(seq.lm_targets[j])});
        }
        ce_items.push_back(ops::cross_entropy(tape, seq_out.logits, targets));

        parts.lm_target_count += targets.size();
        auto ld = seq_out.logits.data();
        const std::size_t v = seq_out.logits.extent(1);
        for (const ops::CeTarget& t : targets) {
            const double* row = ld.data() + t.position * v;
            std::size_t best = 0;
            for (std::size_t c = 1; c < v; ++c) {
                if (row[c] > row[best]) best = c;
            }
            if (best == t.token) ++parts.lm_correct;
        }

        if (seq.regression_targets.empty()) {
            mse_items.push_back(Tensor::scalar(0.0));
        } else {
            std::vector<Tensor> per_query;
            for (const seqpack::RegressionTarget& rt : seq.regression_targets) {
                std::size_t slot = 0;
                bool found = false;
                for (std::size_t qi = 0; qi < seq_out.query_segments.size(); ++qi) {
                    if (seq_out.query_segments[qi] == rt.segment_index) {
                        slot = qi;
                        found = true;
                        break;
                    }
                }
                MMSEQ_CHECK(found, "loss: regression target without a query segment");
                per_query.push_back(ops::mse(tape, seq_out.regressed[slot], rt.target));
                parts.query_cosines.push_back(
                    cosine_similarity(seq_out.regressed[slot], rt.target));
            }
            Tensor acc = per_query[0];
            for (std::size_t i = 1; i < per_query.size(); ++i) {
                acc = ops::add(tape, acc, per_query[i]);
            }
            mse_items.push_back(ops::scale(tape, acc,
                                           1.0 / static_cast<double>(per_query.size())));
        }
    }

    const double inv_b = 1.0 / static_cast<double>(batch.items.size());
    Tensor ce_sum = ce_items[0];
    Tensor mse_sum = mse_items[0];
    for (std::size_t i = 1; i < ce_items.size(); ++i) {
        ce_sum = ops::add(tape, ce_sum, ce_items[i]);
        mse_sum = ops::add(tape, mse_sum, mse_items[i]);
    }
    parts.ce = ops::scale(tape, ce_sum, inv_b);
    parts.mse = ops::scale(tape, mse_sum, inv_b);
    parts.total = ops::add(tape, parts.ce, ops::scale(tape, parts.mse, lambda));
    return parts;
}

namespace {

void append_token(seqpack::PackedSequence& seq, codec::TokenId id) {
    if (!seq.segments.empty()) {
        if (auto* tok = std::get_if<seqpack::TokenSegment>(&seq.segments.back())) {
            tok->ids.push_back(id);
            seq.total_len += 1;
            seq.lm_targets.push_back(seqpack::PackedSequence::kNoTarget);
            return;
        }
    }
    seq.segments.push_back(seqpack::TokenSegment{{id}});
    seq.total_len += 1;
    seq.lm_targets.push_back(seqpack::PackedSequence::kNoTarget);
}

}  // namespace

std::vector<GenEvent> generate(const ModelParams& params,
                               const seqpack::PackedSequence& prompt,
                               std::size_t max_new) {
    const ModelConfig& cfg = params.config;
    seqpack::PackedSequence work = prompt;
    std::vector<GenEvent> events;
    std::size_t chosen = 0;
    while (chosen < max_new && work.total_len + 1 <= cfg.max_len) {
        Tape tape;  // discarded; generation takes no gradients
        SequenceOutput out = forward_sequence(tape, params, work);
        auto ld = out.logits.data();
        const std::size_t v = out.logits.extent(1);
        const double* row = ld.data() + (work.total_len - 1) * v;
        std::size_t best = 0;
        for (std::size_t c = 1; c < v; ++c) {
            if (row[c] > row[best]) best = c;
        }
        const codec::TokenId tok = static_cast<codec::TokenId>(best);
        ++chosen;

        if (tok == codec::kEos) {
            events.push_back({GenEvent::Kind::Token, tok, {}, false});
            break;
        }
        if (tok == codec::kImgStart) {
            // need room for <IMG> + 64 queries + </IMG>
            if (work.total_len + 2 + cfg.n_queries > cfg.max_len) break;
            append_token(work, codec::kImgStart);
            events.push_back({GenEvent::Kind::Token, codec::kImgStart, {}, false});
            work.segments.push_back(seqpack::QuerySegment{cfg.n_queries});
            work.total_len += cfg.n_queries;
            work.lm_targets.insert(work.lm_targets.end(), cfg.n_queries,
                                   seqpack::PackedSequence::kNoTarget);
            Tape tape2;
            SequenceOutput img_out = forward_sequence(tape2, params, work);
            MMSEQ_CHECK(!img_out.regressed.empty(), "generate: missing regression output");
            events.push_back({GenEvent::Kind::ImageFeatures, 0,
                              img_out.regressed.back().clone(), false});
            append_token(work, codec::kImgEnd);
            events.push_back({GenEvent::Kind::Token, codec::kImgEnd, {}, true});
            continue;
        }
        append_token(work, tok);
        events.push_back({GenEvent::Kind::Token, tok, {}, false});
    }
    return events;
}

double cosine_similarity(const Tensor& a, const Tensor& b) {
    MMSEQ_CHECK(a.size() == b.size(), "cosine: size mismatch");
    auto ad = a.data();
    auto bd = b.data();
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < ad.size(); ++i) {
        dot += ad[i] * bd[i];
        na += ad[i] * ad[i];
        nb += bd[i] * bd[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace mmseq::mllm
