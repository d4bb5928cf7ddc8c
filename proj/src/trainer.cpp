#include "mmseq/trainer.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <set>

#include "mmseq/common.hpp"

namespace mmseq::trainer {

std::uint64_t tensor_checksum(const Tensor& t) {
    std::uint64_t h = 1469598103934665603ull;
    for (double v : t.data()) {
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

Adam::Adam(AdamConfig cfg, std::vector<std::pair<std::string, Tensor>> params)
    : cfg_(cfg) {
    for (auto& [name, tensor] : params) {
        Slot slot;
        slot.name = name;
        slot.param = tensor;
        slot.m = Tensor::zeros(tensor.shape());
        slot.v = Tensor::zeros(tensor.shape());
        slots_.push_back(std::move(slot));
    }
}

void Adam::step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (Slot& slot : slots_) {
        MMSEQ_CHECK(slot.param.has_grad(), "adam: parameter '", slot.name,
                    "' has no gradient");
        auto g = slot.param.grad();
        auto m = slot.m.mutable_data();
        auto v = slot.v.mutable_data();
        auto p = slot.param.mutable_data();
        for (std::size_t i = 0; i < g.size(); ++i) {
            m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
            v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            p[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
    }
}

void Adam::zero_grads() {
    for (Slot& slot : slots_) slot.param.zero_grad();
}

void Adam::ensure_grad_buffers() {
    for (Slot& slot : slots_) {
        if (!slot.param.has_grad()) slot.param.grad_or_alloc();
    }
}

checkpoint::OptimizerState Adam::state() const {
    checkpoint::OptimizerState st;
    st.step = t_;
    for (const Slot& slot : slots_) {
        st.tensors.emplace_back("m." + slot.name, slot.m.clone());
        st.tensors.emplace_back("v." + slot.name, slot.v.clone());
    }
    return st;
}

void Adam::restore(const checkpoint::OptimizerState& state) {
    t_ = state.step;
    std::map<std::string, Tensor> by_name;
    for (const auto& [name, tensor] : state.tensors) by_name[name] = tensor;
    for (Slot& slot : slots_) {
        auto m_it = by_name.find("m." + slot.name);
        auto v_it = by_name.find("v." + slot.name);
        MMSEQ_CHECK(m_it != by_name.end() && v_it != by_name.end(),
                    "adam restore: missing moments for '", slot.name, "'");
        std::copy(m_it->second.data().begin(), m_it->second.data().end(),
                  slot.m.mutable_data().begin());
        std::copy(v_it->second.data().begin(), v_it->second.data().end(),
                  slot.v.mutable_data().begin());
    }
}

double cosine_decay_lr(double peak, std::size_t step, std::size_t total_steps) {
    if (total_steps == 0) return peak;
    const double progress = static_cast<double>(step) / static_cast<double>(total_steps);
    return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(progress, 1.0)));
}

void lora_wrap(nn::Linear& linear, std::size_t rank, double alpha,
               RandomSource& rng) {
    const std::size_t in = linear.in_dim();
    const std::size_t out = linear.out_dim();
    MMSEQ_CHECK(rank >= 1 && rank <= std::min(in, out), "lora: rank ", rank,
                " exceeds min(", in, ",", out, ")");
    MMSEQ_CHECK(!linear.lora, "lora: linear already adapted");
    nn::LoraAdapter adapter;
    adapter.down = rng.normal_tensor({in, rank}, 0.02, true);
    adapter.up = Tensor::zeros({rank, out}, true);
    adapter.rank = rank;
    adapter.alpha = alpha;
    linear.lora = std::move(adapter);
    linear.w.set_requires_grad(false);
    linear.b.set_requires_grad(false);
}

nn::Linear merge_lora(const nn::Linear& linear) {
    nn::Linear merged;
    merged.b = linear.b.clone();
    if (!linear.lora) {
        merged.w = linear.w.clone();
        return merged;
    }
    Tape scratch;
    Tensor delta = ops::scale(scratch,
                              ops::matmul(scratch, linear.lora->down, linear.lora->up),
                              linear.lora->scaling());
    Tensor w = ops::add(scratch, linear.w, delta);
    merged.w = w.clone();
    merged.w.set_requires_grad(false);
    merged.b.set_requires_grad(false);
    return merged;
}

EvalResult evaluate(const mllm::ModelParams& params,
                    const std::vector<seqpack::PackedSequence>& seqs,
                    double lambda) {
    MMSEQ_CHECK(!seqs.empty(), "evaluate: no sequences");
    EvalResult result;
    std::size_t correct = 0;
    for (const seqpack::PackedSequence& seq : seqs) {
        Tape tape;
        seqpack::Batch one = seqpack::collate({seq}, seq.total_len);
        mllm::LossParts parts = mllm::loss(tape, params, one, lambda);
        result.ce += parts.ce.value();
        result.mse += parts.mse.value();
        result.total += parts.total.value();
        result.lm_targets += parts.lm_target_count;
        correct += parts.lm_correct;
        for (double c : parts.query_cosines) {
            result.min_query_cosine = std::min(result.min_query_cosine, c);
            ++result.query_segments;
        }
    }
    const double n = static_cast<double>(seqs.size());
    result.ce /= n;
    result.mse /= n;
    result.total /= n;
    result.token_accuracy = result.lm_targets == 0
        ? 1.0
        : static_cast<double>(correct) / static_cast<double>(result.lm_targets);
    return result;
}

namespace {

struct MetricsCsv {
    std::ofstream os;

    explicit MetricsCsv(const std::filesystem::path& path) : os(path) {
        if (!os) throw IoError("metrics: cannot open " + path.string());
        os << "step,lr,ce,mse,total\n";
    }
    void row(std::size_t step, double lr, double ce, double mse, double total) {
        os << step << "," << lr << "," << ce << "," << mse << "," << total << "\n";
        os.flush();
    }
};

std::vector<std::pair<std::string, Tensor>> trainable_parameters(
    mllm::ModelParams& params) {
    std::vector<std::pair<std::string, Tensor>> out;
    params.visit([&out](const std::string& name, Tensor& t) {
        if (t.requires_grad()) out.emplace_back(name, t);
    });
    return out;
}

struct LoopState {
    mllm::ModelParams* params;
    const dataset::Corpus* corpus;
    Adam* adam;
    RandomSource* rng;
    std::size_t start_step = 0;
};

void run_training_loop(const TrainOptions& opts, LoopState& st, MetricsCsv& csv,
                       TrainResult& result,
                       const std::function<void(std::size_t)>& on_checkpoint) {
    const std::size_t n = st.corpus->sequences.size();
    for (std::size_t step = st.start_step; step < opts.steps; ++step) {
        std::vector<seqpack::PackedSequence> picked;
        std::size_t pad_to = 0;
        for (std::size_t b = 0; b < opts.batch_size; ++b) {
            const std::size_t idx = static_cast<std::size_t>(st.rng->below(n));
            picked.push_back(st.corpus->sequences[idx]);
            pad_to = std::max(pad_to, picked.back().total_len);
        }
        seqpack::Batch batch = seqpack::collate(picked, pad_to);

        Tape tape;
        mllm::LossParts parts = mllm::loss(tape, *st.params, batch, opts.lambda);
        tape.backward(parts.total);
        st.adam->ensure_grad_buffers();
        const double lr = cosine_decay_lr(opts.lr, step, opts.steps);
        st.adam->step(lr);
        st.adam->zero_grads();

        csv.row(step, lr, parts.ce.value(), parts.mse.value(), parts.total.value());
        result.total_history.push_back(parts.total.value());

        if (opts.checkpoint_every > 0 && (step + 1) % opts.checkpoint_every == 0 &&
            step + 1 < opts.steps) {
            on_checkpoint(step + 1);
        }
    }
}

}  // namespace

TrainResult pretrain(const TrainOptions& opts) {
    namespace fs = std::filesystem;
    dataset::Corpus corpus = dataset::read_corpus(opts.corpus_dir);
    MMSEQ_CHECK(!corpus.sequences.empty(), "pretrain: empty corpus");
    for (std::size_t i = 0; i < corpus.sequences.size(); ++i) {
        auto violations = seqpack::validate(corpus.sequences[i]);
        if (!violations.empty()) {
            throw ContractError(detail::format_msg(
                "pretrain: corpus sequence ", i, " invalid: ", violations[0].code,
                ": ", violations[0].message));
        }
    }
    vitsim::VisualTokenizer vit(corpus.vit_config);

    mllm::ModelConfig mcfg;
    mcfg.model_dim = opts.model_dim;
    mcfg.n_layers = opts.n_layers;
    mcfg.n_heads = opts.n_heads;
    mcfg.visual_dim = corpus.vit_config.embed_dim;
    mcfg.max_len = opts.max_len;
    mcfg.validate();

    mllm::ModelParams params = mllm::ModelParams::init(mcfg, opts.seed);
    Adam adam(AdamConfig{}, params.named_parameters());
    RandomSource rng(opts.seed + 1);
    std::size_t start_step = 0;

    if (!opts.resume.empty()) {
        checkpoint::MllmCheckpoint ckpt = checkpoint::load_mllm_raw(opts.resume);
        MMSEQ_CHECK(ckpt.optimizer.has_value(),
                    "pretrain resume: checkpoint has no optimizer state");
        params = checkpoint::load_mllm_params(ckpt);
        adam = Adam(AdamConfig{}, params.named_parameters());
        adam.restore(*ckpt.optimizer);
        rng.restore(ckpt.rng_state);
        start_step = ckpt.step;
    }

    fs::create_directories(opts.out_dir);
    MetricsCsv csv(opts.out_dir / "metrics.csv");

    TrainResult result;
    result.initial_eval = evaluate(params, corpus.sequences, opts.lambda);

    LoopState st{&params, &corpus, &adam, &rng, start_step};
    auto save_at = [&](std::size_t step, const fs::path& dir) {
        auto opt_state = adam.state();
        checkpoint::save_mllm(dir, params, vit, &opt_state, rng.serialize(), step);
    };
    run_training_loop(opts, st, csv, result, [&](std::size_t step) {
        save_at(step, opts.out_dir / detail::format_msg("ckpt_step", step));
    });

    result.final_checkpoint = opts.out_dir / "final";
    save_at(opts.steps, result.final_checkpoint);
    result.final_eval = evaluate(params, corpus.sequences, opts.lambda);
    return result;
}

bool finetune_trainable_name(const std::string& name) {
    return name.rfind("input_adapter.", 0) == 0 ||
           name.rfind("output_head.", 0) == 0 || name.rfind("pos2d.", 0) == 0;
}

TrainResult finetune(const TrainOptions& opts) {
    namespace fs = std::filesystem;
    dataset::Corpus corpus = dataset::read_corpus(opts.corpus_dir);
    MMSEQ_CHECK(!corpus.sequences.empty(), "finetune: empty corpus");
    for (std::size_t i = 0; i < corpus.sequences.size(); ++i) {
        auto violations = seqpack::validate(corpus.sequences[i]);
        if (!violations.empty()) {
            throw ContractError(detail::format_msg(
                "finetune: corpus sequence ", i, " invalid: ", violations[0].code));
        }
    }

    checkpoint::MllmCheckpoint base = checkpoint::load_mllm_raw(opts.base_checkpoint);
    MMSEQ_CHECK(base.vit_config.embed_dim == corpus.vit_config.embed_dim,
                "finetune: corpus visual dim ", corpus.vit_config.embed_dim,
                " does not match base checkpoint ", base.vit_config.embed_dim);
    vitsim::VisualTokenizer vit(base.vit_config);
    mllm::ModelParams params = checkpoint::load_mllm_params(base);

    // freeze everything, then open the adapter groups
    params.visit([](const std::string&, Tensor& t) { t.set_requires_grad(false); });
    RandomSource lora_rng(opts.seed + 17);
    for (mllm::Block& block : params.blocks) {
        for (nn::Linear* lin : {&block.wq, &block.wk, &block.wv, &block.wo,
                                &block.fc1, &block.fc2}) {
            lora_wrap(*lin, opts.lora_rank, opts.lora_alpha, lora_rng);
        }
    }
    params.visit([](const std::string& name, Tensor& t) {
        if (finetune_trainable_name(name)) t.set_requires_grad(true);
    });

    auto trainable = trainable_parameters(params);
    MMSEQ_CHECK(!trainable.empty(), "finetune: no trainable parameters");
    Adam adam(AdamConfig{}, trainable);
    RandomSource rng(opts.seed + 1);

    fs::create_directories(opts.out_dir);
    MetricsCsv csv(opts.out_dir / "metrics.csv");

    TrainResult result;
    result.initial_eval = evaluate(params, corpus.sequences, opts.lambda);

    LoopState st{&params, &corpus, &adam, &rng, 0};
    run_training_loop(opts, st, csv, result, [](std::size_t) {});

    result.adapter_checkpoint = opts.out_dir / "adapter";
    checkpoint::save_adapter(result.adapter_checkpoint, opts.lora_rank,
                             opts.lora_alpha, trainable,
                             opts.base_checkpoint.string());
    result.final_eval = evaluate(params, corpus.sequences, opts.lambda);
    return result;
}

void apply_adapter(mllm::ModelParams& params,
                   const checkpoint::AdapterCheckpoint& adapter) {
    RandomSource dummy(0);
    for (mllm::Block& block : params.blocks) {
        for (nn::Linear* lin : {&block.wq, &block.wk, &block.wv, &block.wo,
                                &block.fc1, &block.fc2}) {
            lora_wrap(*lin, adapter.lora_rank, adapter.lora_alpha, dummy);
        }
    }
    std::map<std::string, Tensor> by_name;
    for (const auto& [name, tensor] : adapter.tensors) by_name[name] = tensor;
    std::set<std::string> applied;
    params.visit([&](const std::string& name, Tensor& t) {
        auto it = by_name.find(name);
        if (it == by_name.end()) return;
        MMSEQ_CHECK(it->second.shape() == t.shape(), "adapter: tensor '", name,
                    "' shape mismatch");
        std::copy(it->second.data().begin(), it->second.data().end(),
                  t.mutable_data().begin());
        applied.insert(name);
    });
    MMSEQ_CHECK(applied.size() == by_name.size(),
                "adapter: some adapter tensors did not match the base model");
}

}  // namespace mmseq::trainer
