#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mmseq/mllm.hpp"
#include "mmseq/tensor.hpp"
#include "mmseq/vitsim.hpp"

namespace mmseq::checkpoint {

/// Checkpoint directory: manifest.json (kind, configs, tensor index,
/// optimizer state, rng state, step) plus one MMT1 file per tensor and
/// the vocabulary layout text file.
struct OptimizerState {
    std::size_t step = 0;
    std::vector<std::pair<std::string, Tensor>> tensors;  // m.<name>, v.<name>
};

struct MllmCheckpoint {
    mllm::ModelConfig model_config;
    vitsim::VisualTokenizerConfig vit_config;
    std::vector<std::pair<std::string, Tensor>> tensors;
    std::optional<OptimizerState> optimizer;
    std::string rng_state;
    std::size_t step = 0;
};

void save_mllm(const std::filesystem::path& dir, mllm::ModelParams& params,
               const vitsim::VisualTokenizer& vit,
               const OptimizerState* optimizer, const std::string& rng_state,
               std::size_t step);

MllmCheckpoint load_mllm_raw(const std::filesystem::path& dir);
/// Rebuilds ModelParams from a checkpoint (no adapters attached).
mllm::ModelParams load_mllm_params(const MllmCheckpoint& ckpt);

/// Adapter checkpoint: only the tensors trained during finetuning
/// (low-rank deltas plus the unfrozen groups); never any frozen base
/// tensor.
struct AdapterCheckpoint {
    std::size_t lora_rank = 0;
    double lora_alpha = 0.0;
    std::vector<std::pair<std::string, Tensor>> tensors;
    std::string base_ref;
};

void save_adapter(const std::filesystem::path& dir, std::size_t lora_rank,
                  double lora_alpha,
                  const std::vector<std::pair<std::string, Tensor>>& tensors,
                  const std::string& base_ref);
AdapterCheckpoint load_adapter(const std::filesystem::path& dir);

}  // namespace mmseq::checkpoint

namespace mmseq::detok {
struct DetokParams;
}

namespace mmseq::checkpoint {

void save_detok(const std::filesystem::path& dir, detok::DetokParams& params);
detok::DetokParams load_detok(const std::filesystem::path& dir);

}  // namespace mmseq::checkpoint
