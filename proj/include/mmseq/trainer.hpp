#pragma once

#include <filesystem>
#include <vector>

#include "mmseq/checkpoint.hpp"
#include "mmseq/dataset.hpp"
#include "mmseq/mllm.hpp"
#include "mmseq/nn.hpp"
#include "mmseq/rng.hpp"

namespace mmseq::trainer {

std::uint64_t tensor_checksum(const Tensor& t);

// ---- optimizer ------------------------------------------------------------

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam with bias correction over a fixed list of named parameters.
/// step() reads each parameter's populated gradient; a tracked
/// parameter without a gradient buffer is a contract error naming it.
class Adam {
public:
    Adam(AdamConfig cfg, std::vector<std::pair<std::string, Tensor>> params);

    void step(double lr);
    void zero_grads();
    std::size_t step_count() const { return t_; }

    checkpoint::OptimizerState state() const;
    void restore(const checkpoint::OptimizerState& state);

    /// Allocates zero gradients on tracked parameters that received
    /// none this step (their data path was absent from the batch).
    void ensure_grad_buffers();

private:
    struct Slot {
        std::string name;
        Tensor param;
        Tensor m;
        Tensor v;
    };
    AdamConfig cfg_;
    std::size_t t_ = 0;
    std::vector<Slot> slots_;
};

double cosine_decay_lr(double peak, std::size_t step, std::size_t total_steps);

// ---- low-rank adapters -----------------------------------------------------

/// Attaches a fresh low-rank adapter (up map zero, so the forward is
/// exactly the base) and freezes the base weight and bias.
void lora_wrap(nn::Linear& linear, std::size_t rank, double alpha,
               RandomSource& rng);

/// Plain linear with w + (alpha/rank) * down * up folded in.
nn::Linear merge_lora(const nn::Linear& linear);

// ---- training loops --------------------------------------------------------

struct EvalResult {
    double ce = 0.0;
    double mse = 0.0;
    double total = 0.0;
    double token_accuracy = 0.0;
    double min_query_cosine = 1.0;
    std::size_t lm_targets = 0;
    std::size_t query_segments = 0;
};

EvalResult evaluate(const mllm::ModelParams& params,
                    const std::vector<seqpack::PackedSequence>& seqs,
                    double lambda);

struct TrainOptions {
    std::filesystem::path corpus_dir;
    std::filesystem::path out_dir;
    std::uint64_t seed = 1;
    double lr = 3e-3;
    double lambda = 1.0;
    std::size_t steps = 1000;
    std::size_t batch_size = 4;
    std::size_t checkpoint_every = 0;  // 0: final only
    // fresh-init dims (pretrain); visual_dim comes from the corpus
    std::size_t model_dim = 64;
    std::size_t n_layers = 2;
    std::size_t n_heads = 4;
    std::size_t max_len = 256;
    std::filesystem::path resume;  // checkpoint dir, pretrain only
    // finetune
    std::filesystem::path base_checkpoint;
    std::size_t lora_rank = 4;
    double lora_alpha = 8.0;
};

struct TrainResult {
    std::filesystem::path final_checkpoint;
    std::filesystem::path adapter_checkpoint;  // finetune only
    EvalResult initial_eval;
    EvalResult final_eval;
    std::vector<double> total_history;
};

/// Joint next-token + feature-regression training from scratch with
/// cosine-decayed learning rate; emits metrics.csv (step, lr, ce, mse,
/// total) and checkpoints under out_dir.
TrainResult pretrain(const TrainOptions& opts);

/// Freezes the base model, attaches low-rank adapters to every block
/// linear, and trains only those plus the input cross-attention
/// adapter, the output cross-attention head, and the 2D positional
/// embedding vectors. Saves the trained tensors as a separate adapter
/// checkpoint.
TrainResult finetune(const TrainOptions& opts);

/// Names of the finetune-trainable groups (besides the adapters).
bool finetune_trainable_name(const std::string& name);

/// Re-attaches an adapter checkpoint onto freshly loaded base params.
void apply_adapter(mllm::ModelParams& params,
                   const checkpoint::AdapterCheckpoint& adapter);

}  // namespace mmseq::trainer
