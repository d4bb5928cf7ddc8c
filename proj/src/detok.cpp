#include "mmseq/detok.hpp"

#include <cmath>
#include <fstream>

#include "mmseq/common.hpp"
#include "mmseq/trainer.hpp"

namespace mmseq::detok {

LatentCodec::LatentCodec(std::size_t downsample, std::size_t latent_channels,
                         std::size_t img_channels, std::uint64_t seed)
    : downsample_(downsample), channels_(latent_channels),
      img_channels_(img_channels) {
    MMSEQ_CHECK(downsample_ >= 1 && channels_ >= 1, "latent codec: zero sizes");
    const std::size_t m = downsample_ * downsample_ * img_channels_;
    MMSEQ_CHECK(channels_ <= m, "latent codec: more channels than patch dim");

    basis_ = Tensor::zeros({channels_, m});
    auto bd = basis_.mutable_data();
    // row 0: normalized constant, so patch means survive the round trip
    const double inv_sqrt_m = 1.0 / std::sqrt(static_cast<double>(m));
    for (std::size_t j = 0; j < m; ++j) bd[j] = inv_sqrt_m;
    RandomSource rng(seed);
    for (std::size_t c = 1; c < channels_; ++c) {
        double* row = bd.data() + c * m;
        for (std::size_t j = 0; j < m; ++j) row[j] = rng.gauss();
        // Gram-Schmidt against all previous rows
        for (std::size_t prev = 0; prev < c; ++prev) {
            const double* pr = bd.data() + prev * m;
            double dot = 0;
            for (std::size_t j = 0; j < m; ++j) dot += row[j] * pr[j];
            for (std::size_t j = 0; j < m; ++j) row[j] -= dot * pr[j];
        }
        double norm = 0;
        for (std::size_t j = 0; j < m; ++j) norm += row[j] * row[j];
        norm = std::sqrt(norm);
        MMSEQ_CHECK(norm > 1e-8, "latent codec: degenerate basis draw");
        for (std::size_t j = 0; j < m; ++j) row[j] /= norm;
    }
}

Tensor LatentCodec::encode(const Image& img) const {
    MMSEQ_CHECK(img.channels == img_channels_, "latent encode: expected ",
                img_channels_, " channels, got ", img.channels);
    MMSEQ_CHECK(img.height % downsample_ == 0 && img.width % downsample_ == 0,
                "latent encode: image ", img.height, "x", img.width,
                " not divisible by ", downsample_);
    const std::size_t h = img.height / downsample_;
    const std::size_t w = img.width / downsample_;
    const std::size_t m = downsample_ * downsample_ * img_channels_;
    Tensor latent = Tensor::zeros({channels_, h, w});
    auto ld = latent.mutable_data();
    auto bd = basis_.data();
    std::vector<double> patch(m);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            std::size_t k = 0;
            for (std::size_t dy = 0; dy < downsample_; ++dy) {
                for (std::size_t dx = 0; dx < downsample_; ++dx) {
                    for (std::size_t c = 0; c < img_channels_; ++c) {
                        patch[k++] = img.at(y * downsample_ + dy, x * downsample_ + dx, c);
                    }
                }
            }
            for (std::size_t c = 0; c < channels_; ++c) {
                double dot = 0;
                for (std::size_t j = 0; j < m; ++j) dot += bd[c * m + j] * patch[j];
                ld[(c * h + y) * w + x] = dot;
            }
        }
    }
    return latent;
}

Image LatentCodec::synthesize(const Tensor& latent, bool clamp_pixels) const {
    MMSEQ_CHECK(latent.rank() == 3 && latent.extent(0) == channels_,
                "latent synthesize: expected [", channels_, " x h x w]");
    const std::size_t h = latent.extent(1);
    const std::size_t w = latent.extent(2);
    const std::size_t m = downsample_ * downsample_ * img_channels_;
    Image img = Image::create(h * downsample_, w * downsample_, img_channels_);
    auto ld = latent.data();
    auto bd = basis_.data();
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            std::size_t k = 0;
            for (std::size_t dy = 0; dy < downsample_; ++dy) {
                for (std::size_t dx = 0; dx < downsample_; ++dx) {
                    for (std::size_t c = 0; c < img_channels_; ++c) {
                        double v = 0;
                        for (std::size_t lc = 0; lc < channels_; ++lc) {
                            v += ld[(lc * h + y) * w + x] * bd[lc * m + k];
                        }
                        if (clamp_pixels) v = std::clamp(v, 0.0, 1.0);
                        img.at(y * downsample_ + dy, x * downsample_ + dx, c) = v;
                        ++k;
                    }
                }
            }
        }
    }
    return img;
}

NoiseSchedule NoiseSchedule::linear(std::size_t steps) {
    NoiseSchedule s;
    for (std::size_t t = 0; t < steps; ++t) {
        s.levels.push_back((static_cast<double>(t) + 0.5) /
                           static_cast<double>(steps));
    }
    s.validate();
    return s;
}

void NoiseSchedule::validate() const {
    MMSEQ_CHECK(!levels.empty(), "noise schedule: empty");
    double prev = 0.0;
    for (double v : levels) {
        MMSEQ_CHECK(v > 0.0 && v < 1.0, "noise schedule: level ", v, " outside (0,1)");
        MMSEQ_CHECK(v > prev, "noise schedule: levels must strictly increase");
        prev = v;
    }
}

void DetokConfig::validate() const {
    MMSEQ_CHECK(tile % downsample == 0, "detok config: tile ", tile,
                " not divisible by downsample ", downsample);
    MMSEQ_CHECK(latent_channels >= 1 && hidden_channels >= 1, "detok config: zero sizes");
    MMSEQ_CHECK(n_cross_layers >= 1, "detok config: needs cross layers");
    MMSEQ_CHECK(denoise_steps >= 2, "detok config: needs at least two steps");
}

DetokParams DetokParams::init(const DetokConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    RandomSource rng(seed);
    DetokParams p;
    p.config = cfg;
    p.schedule = NoiseSchedule::linear(cfg.denoise_steps);
    const std::size_t cin = cfg.input_channels();
    const std::size_t ch = cfg.hidden_channels;
    const double conv_std = 1.0 / std::sqrt(static_cast<double>(9 * cin));
    p.conv_in_w = rng.normal_tensor({ch, cin, 3, 3}, conv_std, true);
    p.conv_in_b = Tensor::zeros({ch}, true);
    // legible timestep identity for the frozen-backbone stage
    p.t_table = rng.normal_tensor({cfg.denoise_steps, ch}, 0.5, true);
    const std::size_t hw = cfg.latent_hw() * cfg.latent_hw();
    p.pos_table = rng.normal_tensor({hw, ch}, 0.5, true);
    for (std::size_t l = 0; l < cfg.n_cross_layers; ++l) {
        CrossLayer layer;
        layer.ln1 = nn::LayerNorm::init(ch);
        layer.wq = nn::Linear::init(rng, ch, cfg.att_dim);
        layer.wk = nn::Linear::init(rng, cfg.visual_dim, cfg.att_dim);
        layer.wv = nn::Linear::init(rng, cfg.visual_dim, cfg.att_dim);
        layer.wo = nn::Linear::init(rng, cfg.att_dim, ch);
        layer.ln2 = nn::LayerNorm::init(ch);
        layer.ff1 = nn::Linear::init(rng, ch, 2 * ch);
        layer.ff2 = nn::Linear::init(rng, 2 * ch, ch);
        p.layers.push_back(std::move(layer));
    }
    const double out_std = 1.0 / std::sqrt(static_cast<double>(9 * ch));
    p.conv_out_w = rng.normal_tensor({cfg.latent_channels, ch, 3, 3}, out_std, true);
    p.conv_out_b = Tensor::zeros({cfg.latent_channels}, true);
    return p;
}

namespace {

void visit_linear(const std::string& prefix, nn::Linear& lin,
                  const std::function<void(const std::string&, Tensor&)>& fn) {
    fn(prefix + ".w", lin.w);
    fn(prefix + ".b", lin.b);
}

}  // namespace

void DetokParams::visit(const std::function<void(const std::string&, Tensor&)>& fn) {
    fn("conv_in.w", conv_in_w);
    fn("conv_in.b", conv_in_b);
    fn("t_table", t_table);
    fn("pos_table", pos_table);
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const std::string p = detail::format_msg("cross.", l);
        fn(p + ".ln1.g", layers[l].ln1.g);
        fn(p + ".ln1.b", layers[l].ln1.b);
        visit_linear(p + ".wq", layers[l].wq, fn);
        visit_linear(p + ".wk", layers[l].wk, fn);
        visit_linear(p + ".wv", layers[l].wv, fn);
        visit_linear(p + ".wo", layers[l].wo, fn);
        fn(p + ".ln2.g", layers[l].ln2.g);
        fn(p + ".ln2.b", layers[l].ln2.b);
        visit_linear(p + ".ff1", layers[l].ff1, fn);
        visit_linear(p + ".ff2", layers[l].ff2, fn);
    }
    fn("conv_out.w", conv_out_w);
    fn("conv_out.b", conv_out_b);
}

std::vector<std::pair<std::string, Tensor>> DetokParams::named_parameters() {
    std::vector<std::pair<std::string, Tensor>> out;
    visit([&out](const std::string& name, Tensor& t) { out.emplace_back(name, t); });
    return out;
}

std::vector<std::pair<std::string, Tensor>> DetokParams::conditioning_parameters() {
    std::vector<std::pair<std::string, Tensor>> out;
    visit([&out](const std::string& name, Tensor& t) {
        if (name.rfind("cross.", 0) == 0) out.emplace_back(name, t);
    });
    return out;
}

DetokParams expand_for_conditioning(const DetokParams& stage1) {
    MMSEQ_CHECK(!stage1.config.conditional, "expand: params are already conditional");
    DetokParams p;
    p.config = stage1.config;
    p.config.conditional = true;
    p.schedule = stage1.schedule;
    const std::size_t ch = p.config.hidden_channels;
    const std::size_t c_old = p.config.latent_channels;
    // new condition channels start at zero weight: with a zero (or any)
    // condition the convolution sums the stage-1 terms then adds zeros,
    // reproducing the stage-1 prediction bitwise
    p.conv_in_w = Tensor::zeros({ch, 2 * c_old, 3, 3}, true);
    {
        auto dst = p.conv_in_w.mutable_data();
        auto src = stage1.conv_in_w.data();
        for (std::size_t co = 0; co < ch; ++co) {
            for (std::size_t ci = 0; ci < c_old; ++ci) {
                for (std::size_t k = 0; k < 9; ++k) {
                    dst[(co * 2 * c_old + ci) * 9 + k] = src[(co * c_old + ci) * 9 + k];
                }
            }
        }
    }
    p.conv_in_b = stage1.conv_in_b.clone();
    p.t_table = stage1.t_table.clone();
    p.pos_table = stage1.pos_table.clone();
    for (const CrossLayer& src : stage1.layers) {
        CrossLayer layer;
        layer.ln1 = {src.ln1.g.clone(), src.ln1.b.clone()};
        layer.wq = {src.wq.w.clone(), src.wq.b.clone(), {}};
        layer.wk = {src.wk.w.clone(), src.wk.b.clone(), {}};
        layer.wv = {src.wv.w.clone(), src.wv.b.clone(), {}};
        layer.wo = {src.wo.w.clone(), src.wo.b.clone(), {}};
        layer.ln2 = {src.ln2.g.clone(), src.ln2.b.clone()};
        layer.ff1 = {src.ff1.w.clone(), src.ff1.b.clone(), {}};
        layer.ff2 = {src.ff2.w.clone(), src.ff2.b.clone(), {}};
        p.layers.push_back(std::move(layer));
    }
    p.conv_out_w = stage1.conv_out_w.clone();
    p.conv_out_b = stage1.conv_out_b.clone();
    return p;
}

Tensor denoise_step(Tape& tape, const DetokParams& params, const Tensor& noisy_latent,
                    std::size_t t, const Tensor& features,
                    const std::optional<Tensor>& cond_latent) {
    const DetokConfig& cfg = params.config;
    const std::size_t c = cfg.latent_channels;
    const std::size_t hw_side = cfg.latent_hw();
    MMSEQ_CHECK(noisy_latent.rank() == 3 && noisy_latent.extent(0) == c &&
                    noisy_latent.extent(1) == hw_side && noisy_latent.extent(2) == hw_side,
                "denoise: noisy latent must be [", c, " x ", hw_side, " x ", hw_side, "]");
    MMSEQ_CHECK(t < params.schedule.steps(), "denoise: timestep ", t, " out of range");
    MMSEQ_CHECK(features.rank() == 2 && features.extent(0) == vitsim::kPooledCount &&
                    features.extent(1) == cfg.visual_dim,
                "denoise: features must be [64 x ", cfg.visual_dim, "]");
    if (cfg.conditional) {
        MMSEQ_CHECK(cond_latent.has_value(),
                    "denoise: conditional model requires a condition latent");
        MMSEQ_CHECK(cond_latent->shape() == noisy_latent.shape(),
                    "denoise: condition latent shape mismatch");
    } else {
        MMSEQ_CHECK(!cond_latent.has_value(),
                    "denoise: unconditional model got a condition latent");
    }

    const std::size_t hw = hw_side * hw_side;
    Tensor input = noisy_latent;
    if (cfg.conditional) {
        Tensor flat_noisy = ops::reshape(tape, noisy_latent, {c, hw});
        Tensor flat_cond = ops::reshape(tape, *cond_latent, {c, hw});
        std::vector<Tensor> both{flat_noisy, flat_cond};
        input = ops::reshape(tape, ops::concat_rows(tape, both), {2 * c, hw_side, hw_side});
    }

    Tensor h0 = ops::conv2d(tape, input, params.conv_in_w, params.conv_in_b);
    Tensor x = ops::transpose(tape, ops::reshape(tape, h0, {cfg.hidden_channels, hw}));
    Tensor temb = ops::reshape(tape, ops::gather_rows(tape, params.t_table, {t}),
                               {cfg.hidden_channels});
    x = ops::add_rowvec(tape, x, temb);
    x = ops::add(tape, x, params.pos_table);

    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(cfg.att_dim));
    for (const CrossLayer& layer : params.layers) {
        Tensor q = layer.wq.forward(tape, layer.ln1.forward(tape, x));
        Tensor k = layer.wk.forward(tape, features);
        Tensor v = layer.wv.forward(tape, features);
        Tensor scores = ops::scale(tape, ops::matmul(tape, q, ops::transpose(tape, k)),
                                   inv_sqrt);
        Tensor attended = layer.wo.forward(tape, ops::matmul(tape, ops::softmax(tape, scores), v));
        x = ops::add(tape, x, attended);
        Tensor ff = layer.ff2.forward(
            tape, ops::gelu(tape, layer.ff1.forward(tape, layer.ln2.forward(tape, x))));
        x = ops::add(tape, x, ff);
    }

    Tensor y = ops::reshape(tape, ops::transpose(tape, x),
                            {cfg.hidden_channels, hw_side, hw_side});
    Tensor residual = ops::conv2d(tape, y, params.conv_out_w, params.conv_out_b);
    // base predictor: shrink the noisy latent toward zero as noise grows
    const double keep = 1.0 - params.schedule.levels[t];
    return ops::add(tape, residual, ops::scale(tape, noisy_latent, keep));
}

namespace {

Tensor noisy_mix(const Tensor& clean, const Tensor& noise, double sigma) {
    Tensor out = Tensor::zeros(clean.shape());
    auto od = out.mutable_data();
    auto cd = clean.data();
    auto nd = noise.data();
    for (std::size_t i = 0; i < od.size(); ++i) {
        od[i] = (1.0 - sigma) * cd[i] + sigma * nd[i];
    }
    return out;
}

Tensor cond_latent_for(const DetokParams& params, const LatentCodec& codec,
                       const std::optional<Image>& condition) {
    const std::size_t hw = params.config.latent_hw();
    if (!condition) {
        return Tensor::zeros({params.config.latent_channels, hw, hw});
    }
    return codec.encode(*condition);
}

}  // namespace

double eval_denoise_loss(const DetokParams& params, const LatentCodec& codec,
                         const std::vector<DetokExample>& dataset,
                         std::uint64_t seed) {
    MMSEQ_CHECK(!dataset.empty(), "eval: empty dataset");
    RandomSource rng(seed);
    double acc = 0.0;
    std::size_t count = 0;
    for (const DetokExample& ex : dataset) {
        Tensor z0 = codec.encode(ex.target);
        for (std::size_t t = 0; t < params.schedule.steps(); t += 2) {
            Tensor noise = rng.normal_tensor(z0.shape(), 1.0);
            Tensor zt = noisy_mix(z0, noise, params.schedule.levels[t]);
            std::optional<Tensor> cond;
            if (params.config.conditional) cond = cond_latent_for(params, codec, ex.condition);
            Tape tape;
            Tensor pred = denoise_step(tape, params, zt, t, ex.features, cond);
            acc += ops::mse(tape, pred, z0).value();
            ++count;
        }
    }
    return acc / static_cast<double>(count);
}

DetokTrainResult train_detok(DetokParams& params, const LatentCodec& codec,
                             const std::vector<DetokExample>& dataset,
                             const DetokTrainOptions& opts) {
    MMSEQ_CHECK(!dataset.empty(), "train_detok: empty dataset");
    for (const DetokExample& ex : dataset) {
        MMSEQ_CHECK(ex.features.rank() == 2 &&
                        ex.features.extent(1) == params.config.visual_dim,
                    "train_detok: feature dim mismatch");
        if (!params.config.conditional) {
            MMSEQ_CHECK(!ex.condition.has_value(),
                        "train_detok: stage-1 dataset must not carry conditions");
        }
    }

    auto trainable = params.config.conditional ? params.named_parameters()
                                               : params.conditioning_parameters();
    trainer::Adam adam(trainer::AdamConfig{}, trainable);
    RandomSource rng(opts.seed);

    std::ofstream csv;
    if (!opts.metrics_csv.empty()) {
        const bool fresh = !std::filesystem::exists(opts.metrics_csv);
        csv.open(opts.metrics_csv, std::ios::app);
        if (csv && fresh) csv << "step,loss,stage\n";
    }
    const int stage = params.config.conditional ? 2 : 1;

    DetokTrainResult result;
    result.initial_loss = eval_denoise_loss(params, codec, dataset, opts.seed + 1);

    // per-example latents are fixed; cache them
    std::vector<Tensor> clean;
    std::vector<std::optional<Tensor>> conds;
    for (const DetokExample& ex : dataset) {
        clean.push_back(codec.encode(ex.target));
        if (params.config.conditional) {
            conds.push_back(cond_latent_for(params, codec, ex.condition));
        } else {
            conds.push_back(std::nullopt);
        }
    }

    for (std::size_t step = 0; step < opts.steps; ++step) {
        Tape tape;
        std::vector<Tensor> losses;
        for (std::size_t b = 0; b < opts.batch_size; ++b) {
            const std::size_t idx = static_cast<std::size_t>(rng.below(dataset.size()));
            const std::size_t t = static_cast<std::size_t>(
                rng.below(params.schedule.steps()));
            Tensor noise = rng.normal_tensor(clean[idx].shape(), 1.0);
            Tensor zt = noisy_mix(clean[idx], noise, params.schedule.levels[t]);
            Tensor pred = denoise_step(tape, params, zt, t, dataset[idx].features,
                                       conds[idx]);
            losses.push_back(ops::mse(tape, pred, clean[idx]));
        }
        Tensor loss = losses[0];
        for (std::size_t i = 1; i < losses.size(); ++i) {
            loss = ops::add(tape, loss, losses[i]);
        }
        loss = ops::scale(tape, loss, 1.0 / static_cast<double>(losses.size()));
        tape.backward(loss);
        adam.ensure_grad_buffers();
        adam.step(trainer::cosine_decay_lr(opts.lr, step, opts.steps));
        adam.zero_grads();
        result.history.push_back(loss.value());
        if (csv) csv << step << "," << loss.value() << "," << stage << "\n";
    }

    result.final_loss = eval_denoise_loss(params, codec, dataset, opts.seed + 1);
    return result;
}

Tensor decode_latent(const DetokParams& params, const LatentCodec& codec,
                     const Tensor& features, const std::optional<Image>& condition,
                     std::uint64_t seed) {
    MMSEQ_CHECK(params.config.conditional || !condition.has_value(),
                "decode: stage-1 model cannot take a condition image");
    const std::size_t hw = params.config.latent_hw();
    RandomSource rng(seed);
    Tensor z = rng.normal_tensor({params.config.latent_channels, hw, hw}, 1.0);
    std::optional<Tensor> cond;
    if (params.config.conditional) cond = cond_latent_for(params, codec, condition);
    const auto& levels = params.schedule.levels;
    for (std::size_t i = params.schedule.steps(); i-- > 0;) {
        Tape tape;
        Tensor pred = denoise_step(tape, params, z, i, features, cond);
        if (i == 0) {
            z = pred.clone();
            break;
        }
        // re-noise the clean estimate at the next level; the draws come
        // from the seeded stream, so the whole decode stays deterministic
        Tensor fresh = rng.normal_tensor(z.shape(), 1.0);
        Tensor next = Tensor::zeros(z.shape());
        auto nd = next.mutable_data();
        auto pd = pred.data();
        auto fd = fresh.data();
        const double sigma_next = levels[i - 1];
        for (std::size_t j = 0; j < nd.size(); ++j) {
            nd[j] = (1.0 - sigma_next) * pd[j] + sigma_next * fd[j];
        }
        z = next;
    }
    return z;
}

Image decode(const DetokParams& params, const LatentCodec& codec,
             const Tensor& features, const std::optional<Image>& condition,
             std::uint64_t seed) {
    return codec.synthesize(decode_latent(params, codec, features, condition, seed),
                            /*clamp_pixels=*/true);
}

}  // namespace mmseq::detok
