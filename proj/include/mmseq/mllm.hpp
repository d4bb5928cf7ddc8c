#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mmseq/codec.hpp"
#include "mmseq/nn.hpp"
#include "mmseq/seqpack.hpp"

namespace mmseq::mllm {

struct ModelConfig {
    std::size_t model_dim = 64;
    std::size_t n_layers = 2;
    std::size_t n_heads = 4;
    std::size_t vocab_size = codec::kVocabSize;
    std::size_t visual_dim = 16;  // d_v, must match the corpus tokenizer
    std::size_t n_queries = vitsim::kPooledCount;
    std::size_t max_len = 256;

    std::size_t head_dim() const { return model_dim / n_heads; }
    void validate() const;
};

struct Block {
    nn::LayerNorm ln1;
    nn::Linear wq, wk, wv, wo;  // model_dim -> model_dim
    nn::LayerNorm ln2;
    nn::Linear fc1;  // model_dim -> 4*model_dim
    nn::Linear fc2;  // 4*model_dim -> model_dim
};

/// Decoder-only multimodal transformer: mixed token/visual/query rows
/// flow through causal self-attention; visual tiles enter through a
/// latent cross-attention adapter after 2D positional embedding
/// addition, and the 64 query positions exit through a cross-attention
/// head regressing the visual-tokenizer feature space.
struct ModelParams {
    ModelConfig config;
    Tensor token_embedding;   // [V x model_dim]
    Tensor pos_embedding;     // [max_len x model_dim]
    Tensor query_embeddings;  // [64 x model_dim]
    // direction vectors of the extrapolatable 2D positional embedding,
    // added to tile features (d_v) before the input adapter
    Tensor pos2d_l, pos2d_r, pos2d_t, pos2d_b;
    nn::CrossAttention input_adapter;  // d_v source -> 64 x model_dim
    std::vector<Block> blocks;
    nn::LayerNorm final_ln;
    nn::Linear lm_head;                // model_dim -> V
    nn::CrossAttention output_head;    // model_dim source -> 64 x d_v

    static ModelParams init(const ModelConfig& cfg, std::uint64_t seed);

    /// Enumerates every parameter tensor (including adapter tensors)
    /// with a stable dotted name.
    void visit(const std::function<void(const std::string&, Tensor&)>& fn);
    std::vector<std::pair<std::string, Tensor>> named_parameters();
};

struct SequenceOutput {
    Tensor logits;                   // [T x V]
    std::vector<Tensor> regressed;   // [64 x d_v] per query segment, in order
    std::vector<std::size_t> query_segments;  // segment index per entry
    Tensor final_hidden;             // [T x model_dim], diagnostics
    std::vector<std::pair<std::size_t, std::size_t>> query_spans;  // [start,end)
};

SequenceOutput forward_sequence(Tape& tape, const ModelParams& params,
                                const seqpack::PackedSequence& seq);

struct BatchOutput {
    std::vector<SequenceOutput> items;
};

BatchOutput forward(Tape& tape, const ModelParams& params,
                    const seqpack::Batch& batch);

struct LossParts {
    Tensor total;  // ce + lambda * mse
    Tensor ce;
    Tensor mse;
    std::size_t lm_target_count = 0;
    std::size_t lm_correct = 0;
    std::vector<double> query_cosines;  // one per query segment in the batch

    double token_accuracy() const {
        return lm_target_count == 0
            ? 1.0
            : static_cast<double>(lm_correct) / static_cast<double>(lm_target_count);
    }
};

/// Per-sequence CE is the mean over that sequence's unmasked targets
/// and per-sequence MSE the mean over its query segments; the batch
/// loss averages the per-sequence values, so a padded batch equals the
/// mean of separately computed per-sequence losses.
LossParts loss(Tape& tape, const ModelParams& params, const seqpack::Batch& batch,
               double lambda);

struct GenEvent {
    enum class Kind { Token, ImageFeatures };
    Kind kind = Kind::Token;
    codec::TokenId token = 0;
    Tensor features;          // [64 x d_v] for ImageFeatures
    bool structural = false;  // </IMG> appended mechanically after features
};

/// Greedy decoding. Emitting <IMG> appends the 64 query slots, runs one
/// forward pass to regress features, emits an ImageFeatures event, and
/// appends </IMG> before token decoding resumes. Stops at <EOS>, after
/// max_new chosen tokens, or when the context window is full.
std::vector<GenEvent> generate(const ModelParams& params,
                               const seqpack::PackedSequence& prompt,
                               std::size_t max_new);

double cosine_similarity(const Tensor& a, const Tensor& b);

}  // namespace mmseq::mllm
