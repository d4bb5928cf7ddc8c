#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "mmseq/image.hpp"
#include "mmseq/nn.hpp"
#include "mmseq/rng.hpp"
#include "mmseq/tensor.hpp"

namespace mmseq::detok {

/// Fixed seeded analysis/synthesis pair standing in for a VAE: each
/// downsample x downsample patch is projected onto C orthonormal
/// directions (the first one constant, so patch means survive).
/// synthesize(encode(img)) is the corresponding low-pass projection.
class LatentCodec {
public:
    LatentCodec(std::size_t downsample, std::size_t latent_channels,
                std::size_t img_channels, std::uint64_t seed);

    std::size_t downsample() const { return downsample_; }
    std::size_t latent_channels() const { return channels_; }
    std::size_t img_channels() const { return img_channels_; }
    /// Orthonormal basis rows, [C x downsample^2 * img_channels].
    const Tensor& basis() const { return basis_; }

    Tensor encode(const Image& img) const;  // [C x h x w]
    Image synthesize(const Tensor& latent, bool clamp_pixels = true) const;

private:
    std::size_t downsample_;
    std::size_t channels_;
    std::size_t img_channels_;
    Tensor basis_;
};

struct NoiseSchedule {
    std::vector<double> levels;  // strictly increasing, in (0,1)

    static NoiseSchedule linear(std::size_t steps);
    std::size_t steps() const { return levels.size(); }
    void validate() const;
};

struct DetokConfig {
    std::size_t tile = 16;             // square image tiles
    std::size_t img_channels = 3;
    std::size_t latent_channels = 4;   // C
    std::size_t downsample = 4;
    std::size_t hidden_channels = 16;  // denoiser width
    std::size_t att_dim = 16;
    std::size_t visual_dim = 16;       // d_v of the conditioning features
    std::size_t denoise_steps = 8;
    std::size_t n_cross_layers = 4;
    bool conditional = false;          // stage 2 takes a condition latent
    std::uint64_t codec_seed = 77;

    std::size_t input_channels() const {
        return conditional ? 2 * latent_channels : latent_channels;
    }
    std::size_t latent_hw() const { return tile / downsample; }
    void validate() const;
};

/// One conditioning layer: latent tokens cross-attend over the 64
/// feature rows, then pass through a small feed-forward.
struct CrossLayer {
    nn::LayerNorm ln1;
    nn::Linear wq;  // hidden -> att
    nn::Linear wk;  // d_v -> att
    nn::Linear wv;  // d_v -> att
    nn::Linear wo;  // att -> hidden
    nn::LayerNorm ln2;
    nn::Linear ff1;  // hidden -> 2*hidden
    nn::Linear ff2;  // 2*hidden -> hidden
};

struct DetokParams {
    DetokConfig config;
    NoiseSchedule schedule;
    Tensor conv_in_w;   // [hidden x C_in x 3 x 3]
    Tensor conv_in_b;   // [hidden]
    Tensor t_table;     // [denoise_steps x hidden]
    Tensor pos_table;   // [latent_hw^2 x hidden], position identity of tokens
    std::vector<CrossLayer> layers;  // conditioning module, 4 layers
    Tensor conv_out_w;  // [C x hidden x 3 x 3]
    Tensor conv_out_b;  // [C]

    static DetokParams init(const DetokConfig& cfg, std::uint64_t seed);

    void visit(const std::function<void(const std::string&, Tensor&)>& fn);
    std::vector<std::pair<std::string, Tensor>> named_parameters();
    /// The conditioning-module subset (trained in stage 1).
    std::vector<std::pair<std::string, Tensor>> conditioning_parameters();
};

/// Stage-2 params from stage-1 weights: the first convolution grows
/// from C to 2C input channels with the new channels zero-filled, so a
/// zero condition reproduces the stage-1 prediction bitwise.
DetokParams expand_for_conditioning(const DetokParams& stage1);

/// Predicts the clean latent from a noisy one. Stage 2 requires a
/// condition latent (zeros allowed); stage 1 forbids one.
Tensor denoise_step(Tape& tape, const DetokParams& params, const Tensor& noisy_latent,
                    std::size_t t, const Tensor& features,
                    const std::optional<Tensor>& cond_latent);

struct DetokExample {
    Tensor features;                 // [64 x d_v]
    Image target;
    std::optional<Image> condition;  // nullopt: zero-condition mode
};

struct DetokTrainOptions {
    std::size_t steps = 500;
    std::size_t batch_size = 4;
    double lr = 2e-3;
    std::uint64_t seed = 1;
    std::filesystem::path metrics_csv;  // optional: appends step,loss,stage rows
};

struct DetokTrainResult {
    double initial_loss = 0.0;  // deterministic eval before training
    double final_loss = 0.0;
    std::vector<double> history;
};

DetokTrainResult train_detok(DetokParams& params, const LatentCodec& codec,
                             const std::vector<DetokExample>& dataset,
                             const DetokTrainOptions& opts);

/// Mean denoising loss over the dataset with a fixed draw of timesteps
/// and noise; used as the before/after training yardstick.
double eval_denoise_loss(const DetokParams& params, const LatentCodec& codec,
                         const std::vector<DetokExample>& dataset,
                         std::uint64_t seed);

/// Iterative denoising from seeded noise through the schedule; the
/// final latent is synthesized to pixels clamped to [0,1].
Image decode(const DetokParams& params, const LatentCodec& codec,
             const Tensor& features, const std::optional<Image>& condition,
             std::uint64_t seed);

/// Final decoded latent before pixel synthesis (for latent-space
/// comparisons against baselines).
Tensor decode_latent(const DetokParams& params, const LatentCodec& codec,
                     const Tensor& features, const std::optional<Image>& condition,
                     std::uint64_t seed);

}  // namespace mmseq::detok
