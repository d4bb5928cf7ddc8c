// Acceptance suite: one test case per criterion, each printing a
// PASS/FAIL line with its elapsed time. Training-based criteria pin
// their seeds, budgets, and thresholds here in code.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "mmseq/checkpoint.hpp"
#include "mmseq/common.hpp"
#include "mmseq/codec.hpp"
#include "mmseq/dataset.hpp"
#include "mmseq/detok.hpp"
#include "mmseq/dynres.hpp"
#include "mmseq/gradcheck.hpp"
#include "mmseq/mllm.hpp"
#include "mmseq/patterns.hpp"
#include "mmseq/trainer.hpp"

using namespace mmseq;
namespace fs = std::filesystem;

#ifndef MMSEQ_SOURCE_DIR
#define MMSEQ_SOURCE_DIR "."
#endif
#ifndef MMSEQ_BIN_PATH
#define MMSEQ_BIN_PATH "mmseq"
#endif

namespace {

struct Criterion {
    std::string label;
    std::chrono::steady_clock::time_point start;
    bool ok = true;

    explicit Criterion(std::string l)
        : label(std::move(l)), start(std::chrono::steady_clock::now()) {}

    void expect(bool cond, const std::string& what) {
        if (!cond) {
            ok = false;
            std::cout << "[acceptance]   failed: " << what << "\n";
        }
        CHECK_MESSAGE(cond, what);
    }

    ~Criterion() {
        const double secs = std::chrono::duration<double>(
            std::chrono::steady_clock::now() - start).count();
        std::cout << "[acceptance] " << label << ": " << (ok ? "PASS" : "FAIL")
                  << " (" << secs << "s)\n";
    }
};

fs::path work_dir(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / ("mmseq_acceptance_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

fs::path source_dir() { return fs::path(MMSEQ_SOURCE_DIR); }

dataset::Corpus pack_fixture_corpus(const fs::path& manifest_dir) {
    auto docs = dataset::parse_manifest(manifest_dir / "manifest.jsonl");
    vitsim::VisualTokenizer vit(patterns::fixture_vit_config());
    seqpack::PackContext ctx;
    ctx.vit = &vit;
    ctx.resolve = dataset::dir_resolver(manifest_dir);
    dataset::Corpus corpus;
    corpus.vit_config = vit.config();
    for (const auto& doc : docs) corpus.sequences.push_back(seqpack::pack(doc, ctx));
    return corpus;
}

}  // namespace

TEST_CASE("criterion 1: grid-selection oracle equivalence") {
    Criterion c("criterion 1 grid-selection oracle equivalence");
    RandomSource rng(10001);
    const std::size_t tiles[] = {112, 224, 448};
    bool all = true;
    for (int i = 0; i < 10000; ++i) {
        const std::size_t h = 1 + rng.below(2048);
        const std::size_t w = 1 + rng.below(2048);
        const std::size_t th = tiles[rng.below(3)];
        const std::size_t tw = tiles[rng.below(3)];
        all = all && dynres::select_grid(h, w, th, tw) ==
                         dynres::select_grid_bruteforce(h, w, th, tw);
    }
    c.expect(all, "select_grid must match exhaustive minimization on 10^4 draws");
}

TEST_CASE("criterion 2: positional-embedding algebraic suite") {
    Criterion c("criterion 2 positional-embedding algebra (1e-12)");
    RandomSource rng(10002);
    double worst = 0.0;
    for (int draw = 0; draw < 100; ++draw) {
        dynres::PositionEmbeddingParams p;
        const std::size_t d = 1 + rng.below(24);
        for (std::size_t i = 0; i < d; ++i) {
            p.left.push_back(rng.uniform(-2, 2));
            p.right.push_back(rng.uniform(-2, 2));
            p.top.push_back(rng.uniform(-2, 2));
            p.bottom.push_back(rng.uniform(-2, 2));
        }
        // midpoint identity
        auto mid = dynres::position_embedding(0.5, 0.5, p);
        for (std::size_t i = 0; i < d; ++i) {
            worst = std::max(worst, std::abs(mid[i] - (p.left[i] + p.right[i] +
                                                       p.top[i] + p.bottom[i]) / 2.0));
        }
        // linearity in the center
        double ux = rng.uniform(0.01, 0.99), uy = rng.uniform(0.01, 0.99);
        double vx = rng.uniform(0.01, 0.99), vy = rng.uniform(0.01, 0.99);
        double a = rng.uniform(0.0, 1.0);
        auto pu = dynres::position_embedding(ux, uy, p);
        auto pv = dynres::position_embedding(vx, vy, p);
        auto pm = dynres::position_embedding(a * ux + (1 - a) * vx,
                                             a * uy + (1 - a) * vy, p);
        for (std::size_t i = 0; i < d; ++i) {
            worst = std::max(worst, std::abs(pm[i] - (a * pu[i] + (1 - a) * pv[i])));
        }
        // reflection symmetry
        dynres::PositionEmbeddingParams lr = p;
        std::swap(lr.left, lr.right);
        dynres::PositionEmbeddingParams tb = p;
        std::swap(tb.top, tb.bottom);
        auto base = dynres::position_embedding(ux, uy, p);
        auto r1 = dynres::position_embedding(1.0 - ux, uy, lr);
        auto r2 = dynres::position_embedding(ux, 1.0 - uy, tb);
        for (std::size_t i = 0; i < d; ++i) {
            worst = std::max({worst, std::abs(base[i] - r1[i]), std::abs(base[i] - r2[i])});
        }
    }
    c.expect(worst < 1e-12, "all identities must hold to 1e-12, worst was " +
                                std::to_string(worst));
}

TEST_CASE("criterion 3: bbox codec exhaustive and round-trip properties") {
    Criterion c("criterion 3 bbox codec");
    bool idem = true;
    for (std::size_t bin = 0; bin < codec::kNumLocTokens; ++bin) {
        idem = idem && codec::quantize_coord(codec::dequantize_coord(bin)) == bin;
    }
    c.expect(idem, "quantize(dequantize(i)) == i for all 224 bins");

    RandomSource rng(10003);
    double worst = 0.0;
    for (int i = 0; i < 100000; ++i) {
        const double v = rng.uniform();
        worst = std::max(worst,
                         std::abs(v - codec::dequantize_coord(codec::quantize_coord(v))));
    }
    worst = std::max(worst, std::abs(1.0 - codec::dequantize_coord(
                                               codec::quantize_coord(1.0))));
    c.expect(worst <= 1.0 / 448.0 + 1e-15, "round-trip error bounded by 1/448");
    c.expect(worst > 1.0 / 448.0 - 1e-6, "the 1/448 bound is tight");

    bool parse_ok = true;
    for (int trial = 0; trial < 10000; ++trial) {
        std::vector<codec::TokenId> stream;
        std::vector<codec::BBox> truth;
        const std::size_t n = rng.below(5);
        for (std::size_t b = 0; b < n; ++b) {
            codec::BBox box{rng.uniform(), rng.uniform(), rng.uniform(), rng.uniform()};
            truth.push_back(box);
            auto text = codec::tokenize_text("x");
            stream.insert(stream.end(), text.begin(), text.end());
            auto enc = codec::encode_box(box);
            stream.insert(stream.end(), enc.begin(), enc.end());
        }
        auto parsed = codec::parse_box_spans(stream);
        parse_ok = parse_ok && parsed.clean() && parsed.boxes.size() == n;
        if (!parse_ok) break;
        for (std::size_t b = 0; b < n; ++b) {
            parse_ok = parse_ok &&
                codec::quantize_coord(parsed.boxes[b].box.x_center) ==
                    codec::quantize_coord(truth[b].x_center) &&
                codec::quantize_coord(parsed.boxes[b].box.y_center) ==
                    codec::quantize_coord(truth[b].y_center) &&
                codec::quantize_coord(parsed.boxes[b].box.width) ==
                    codec::quantize_coord(truth[b].width) &&
                codec::quantize_coord(parsed.boxes[b].box.height) ==
                    codec::quantize_coord(truth[b].height);
        }
    }
    c.expect(parse_ok, "parse after encode is lossless at the quantized level");

    // adversarial malformed spans are reported, never silently dropped
    std::vector<codec::TokenId> bad{codec::kBoxStart, codec::loc_token(3),
                                    codec::kBoxEnd, 65, codec::kBoxStart,
                                    codec::loc_token(1), codec::loc_token(2),
                                    codec::loc_token(3), codec::loc_token(4), 66};
    auto res = codec::parse_box_spans(bad);
    c.expect(res.errors.size() == 2, "two malformed spans must be reported");
    c.expect(res.errors[0].reason.find("arity 1, expected 4") != std::string::npos,
             "arity error carries the counted arity");
}

namespace {

double op_battery_worst(std::uint64_t seed) {
    RandomSource rng(seed);
    double worst = 0.0;
    auto check_unary = [&worst](const std::function<Tensor(Tape&, const Tensor&)>& op,
                                const Tensor& x0) {
        Tensor x = x0.clone();
        x.set_requires_grad(true);
        Tape tape;
        Tensor y = op(tape, x);
        Tensor w = Tensor::zeros(y.shape());
        for (std::size_t i = 0; i < w.size(); ++i) {
            w.mutable_data()[i] = 0.2 + 0.1 * double(i % 7);
        }
        Tensor loss = ops::sum(tape, ops::mul(tape, y, w));
        tape.backward(loss);
        Tensor fd = finite_diff_grad(
            [&](const Tensor& probe) {
                Tape t;
                Tensor yy = op(t, probe);
                double acc = 0;
                for (std::size_t i = 0; i < yy.size(); ++i) {
                    acc += yy.data()[i] * w.data()[i];
                }
                return acc;
            },
            x0, 1e-5);
        for (std::size_t i = 0; i < fd.size(); ++i) {
            worst = std::max(worst, grad_rel_err(x.grad()[i], fd.data()[i]));
        }
    };

    Tensor x = rng.uniform_tensor({3, 7}, -1.5, 1.5);
    Tensor rhs = rng.uniform_tensor({7, 4}, -1.0, 1.0);
    check_unary([&](Tape& t, const Tensor& v) { return ops::matmul(t, v, rhs); }, x);
    check_unary([](Tape& t, const Tensor& v) { return ops::softmax(t, v); }, x);
    Tensor gain = rng.uniform_tensor({7}, 0.5, 1.5);
    Tensor bias = rng.uniform_tensor({7}, -0.5, 0.5);
    check_unary([&](Tape& t, const Tensor& v) {
        return ops::layer_norm(t, v, gain, bias, 1e-5);
    }, x);
    check_unary([](Tape& t, const Tensor& v) { return ops::gelu(t, v); }, x);
    Tensor target = rng.uniform_tensor({3, 7}, -1.0, 1.0);
    check_unary([&](Tape& t, const Tensor& v) { return ops::mse(t, v, target); }, x);
    std::vector<ops::CeTarget> tgts{{0, 1}, {2, 6}};
    check_unary([&](Tape& t, const Tensor& v) {
        return ops::cross_entropy(t, v, tgts);
    }, x);
    Tensor img = rng.uniform_tensor({2, 4, 4}, -1.0, 1.0);
    Tensor cw = rng.uniform_tensor({2, 2, 3, 3}, -0.4, 0.4);
    Tensor cb = rng.uniform_tensor({2}, -0.2, 0.2);
    check_unary([&](Tape& t, const Tensor& v) {
        return ops::conv2d(t, v, cw, cb);
    }, img);
    return worst;
}

}  // namespace

TEST_CASE("criterion 4: gradient correctness per op and end to end") {
    Criterion c("criterion 4 gradient correctness (per-op 1e-5, e2e 1e-4, 20 seeds)");
    double worst_op = 0.0;
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        worst_op = std::max(worst_op, op_battery_worst(seed));
    }
    c.expect(worst_op < 1e-5, "per-op worst rel err " + std::to_string(worst_op));

    // end-to-end: dual-objective loss on a mixed batch; every parameter
    // group probed at sampled coordinates, fresh model per seed
    vitsim::VisualTokenizer vit(patterns::fixture_vit_config());
    auto samples = patterns::sample_images();
    seqpack::PackContext ctx;
    ctx.vit = &vit;
    ctx.resolve = [&samples](const std::string& ref) -> Image {
        for (auto& [name, image] : samples) {
            if (name == ref) return image;
        }
        throw IoError("no fixture image " + ref);
    };
    seqpack::MultimodalDocument d1;
    d1.items.push_back(seqpack::ImageItem{"checker.ppm", false});
    d1.items.push_back(seqpack::TextItem{"grid"});
    seqpack::MultimodalDocument d2;
    d2.items.push_back(seqpack::TextItem{"art: "});
    d2.items.push_back(seqpack::ImageItem{"rings.ppm", true});
    seqpack::PackedSequence s1 = seqpack::pack(d1, ctx);
    seqpack::PackedSequence s2 = seqpack::pack(d2, ctx);
    seqpack::Batch batch = seqpack::collate({s1, s2},
                                            std::max(s1.total_len, s2.total_len));
    double worst_e2e = 0.0;
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        mllm::ModelConfig mcfg;
        mcfg.model_dim = 32;
        mcfg.n_layers = 1;
        mcfg.n_heads = 2;
        mcfg.visual_dim = vit.config().embed_dim;
        mcfg.max_len = 224;
        mllm::ModelParams params = mllm::ModelParams::init(mcfg, 1000 + seed);
        Tape tape;
        mllm::LossParts parts = mllm::loss(tape, params, batch, 1.0);
        tape.backward(parts.total);
        std::vector<Tensor> tensors;
        for (auto& [name, tensor] : params.named_parameters()) {
            if (tensor.has_grad()) tensors.push_back(tensor);
        }
        RandomSource coord_rng(seed);
        auto res = check_gradients("e2e", [&]() {
            Tape t;
            return mllm::loss(t, params, batch, 1.0).total.value();
        }, tensors, 1e-5, 1e-4, 1, &coord_rng);
        worst_e2e = std::max(worst_e2e, res.worst_rel_err);
    }
    c.expect(worst_e2e < 1e-4, "end-to-end worst rel err " + std::to_string(worst_e2e));
}

TEST_CASE("criterion 5: dual-objective overfit on the shipped corpus") {
    Criterion c("criterion 5 dual-objective overfit (acc 1.0, cosine >= 0.99)");
    fs::path dir = work_dir("overfit");
    dataset::Corpus corpus = pack_fixture_corpus(source_dir() / "data" / "sample_corpus");
    c.expect(corpus.sequences.size() == 16, "shipped corpus has 16 documents");
    dataset::write_corpus(dir / "packed", corpus);

    trainer::TrainOptions opts;  // pinned overfit recipe
    opts.corpus_dir = dir / "packed";
    opts.out_dir = dir / "run";
    opts.seed = 7;
    opts.lr = 3e-3;
    opts.lambda = 6.0;
    opts.steps = 1400;
    opts.batch_size = 4;
    opts.model_dim = 64;
    opts.n_layers = 2;
    opts.n_heads = 4;
    opts.max_len = 224;
    trainer::TrainResult result = trainer::pretrain(opts);

    const double ln_v = std::log(487.0);
    c.expect(std::abs(result.initial_eval.ce - ln_v) / ln_v < 0.05,
             "initial text loss within 5% of ln 487, got " +
                 std::to_string(result.initial_eval.ce));
    c.expect(result.final_eval.token_accuracy == 1.0,
             "train LM token accuracy 1.0, got " +
                 std::to_string(result.final_eval.token_accuracy));
    c.expect(result.final_eval.min_query_cosine >= 0.99,
             "per-query regression cosine >= 0.99, got " +
                 std::to_string(result.final_eval.min_query_cosine));

    // smoke-level convergence: the 50-step moving average of the total
    // loss never rises by more than 2 percent
    const auto& hist = result.total_history;
    bool smooth = hist.size() > 100;
    double prev = 0;
    for (std::size_t t = 0; t + 50 <= hist.size(); t += 10) {
        double ma = 0;
        for (std::size_t i = t; i < t + 50; ++i) ma += hist[i];
        ma /= 50.0;
        if (t > 0) smooth = smooth && ma <= prev * 1.02;
        prev = ma;
    }
    c.expect(smooth, "50-step moving average of total loss is non-increasing");
}

TEST_CASE("criterion 6: low-rank adapter contracts and task overfit") {
    Criterion c("criterion 6 adapter contracts + 4-doc finetune overfit");
    RandomSource rng(10006);

    // identity at init and merge equivalence on random layers
    double worst_identity = 0.0, worst_merge = 0.0;
    for (int trial = 0; trial < 10; ++trial) {
        nn::Linear lin = nn::Linear::init(rng, 12, 9);
        Tensor x = rng.uniform_tensor({5, 12}, -1.0, 1.0);
        Tape t0;
        Tensor base = lin.forward(t0, x);
        trainer::lora_wrap(lin, 3, 8.0, rng);
        Tape t1;
        Tensor adapted = lin.forward(t1, x);
        for (std::size_t i = 0; i < base.size(); ++i) {
            worst_identity = std::max(worst_identity,
                                      std::abs(adapted.data()[i] - base.data()[i]));
        }
        for (double& v : lin.lora->up.mutable_data()) v = rng.uniform(-0.3, 0.3);
        Tape t2;
        Tensor tuned = lin.forward(t2, x);
        nn::Linear merged = trainer::merge_lora(lin);
        Tape t3;
        Tensor merged_out = merged.forward(t3, x);
        for (std::size_t i = 0; i < tuned.size(); ++i) {
            worst_merge = std::max(worst_merge,
                                   std::abs(tuned.data()[i] - merged_out.data()[i]));
        }
    }
    c.expect(worst_identity <= 1e-15, "identity at init within 1e-15");
    c.expect(worst_merge <= 1e-12, "merge equivalence within 1e-12");

    // finetune overfit with a frozen, checksummed base
    fs::path dir = work_dir("finetune");
    dataset::Corpus corpus = pack_fixture_corpus(source_dir() / "data" / "task_corpus");
    c.expect(corpus.sequences.size() == 4, "task corpus has 4 documents");
    dataset::write_corpus(dir / "packed", corpus);

    trainer::TrainOptions pre;
    pre.corpus_dir = dir / "packed";
    pre.out_dir = dir / "base";
    pre.seed = 7;
    pre.lr = 3e-3;
    pre.lambda = 1.0;
    pre.steps = 60;  // deliberately undertrained base
    pre.batch_size = 4;
    pre.model_dim = 64;
    pre.n_layers = 2;
    pre.n_heads = 4;
    pre.max_len = 224;
    trainer::TrainResult base_run = trainer::pretrain(pre);
    c.expect(base_run.final_eval.token_accuracy < 1.0,
             "base is not already overfit (otherwise the gate is vacuous)");

    std::map<std::string, std::uint64_t> base_sums;
    {
        auto ckpt = checkpoint::load_mllm_raw(base_run.final_checkpoint);
        for (auto& [name, tensor] : ckpt.tensors) {
            base_sums[name] = trainer::tensor_checksum(tensor);
        }
    }

    trainer::TrainOptions ft = pre;
    ft.out_dir = dir / "ft";
    ft.base_checkpoint = base_run.final_checkpoint;
    ft.steps = 900;
    ft.lambda = 4.0;
    ft.lora_rank = 4;
    ft.lora_alpha = 8.0;
    trainer::TrainResult tuned = trainer::finetune(ft);
    c.expect(tuned.final_eval.token_accuracy == 1.0,
             "finetune overfits to accuracy 1.0, got " +
                 std::to_string(tuned.final_eval.token_accuracy));

    auto adapter = checkpoint::load_adapter(tuned.adapter_checkpoint);
    for (auto& [name, tensor] : adapter.tensors) {
        const bool adapter_only = name.find("lora_") != std::string::npos ||
                                  trainer::finetune_trainable_name(name);
        c.expect(adapter_only, "adapter file excludes frozen base tensor " + name);
    }
    // the frozen base is bitwise intact after the whole finetune run
    auto base_again = checkpoint::load_mllm_raw(base_run.final_checkpoint);
    for (auto& [name, tensor] : base_again.tensors) {
        c.expect(base_sums.at(name) == trainer::tensor_checksum(tensor),
                 "frozen base checksum unchanged for " + name);
    }
}

TEST_CASE("criterion 7: de-tokenizer stage contracts") {
    Criterion c("criterion 7 de-tokenizer stages");
    detok::DetokConfig cfg;
    cfg.tile = 16;
    cfg.img_channels = 3;
    cfg.latent_channels = 4;
    cfg.downsample = 4;
    cfg.hidden_channels = 32;
    cfg.att_dim = 32;
    cfg.visual_dim = 16;
    cfg.denoise_steps = 8;
    detok::LatentCodec codec(cfg.downsample, cfg.latent_channels, cfg.img_channels,
                             cfg.codec_seed);
    vitsim::VisualTokenizer vit(patterns::fixture_vit_config());

    auto make_dataset = [&](std::size_t n, bool with_cond) {
        std::vector<detok::DetokExample> out;
        for (Image& tile : patterns::toy_tiles(n, 16)) {
            detok::DetokExample ex;
            ex.features = vit.tokenize(tile).embeddings;
            ex.target = tile;
            if (with_cond) ex.condition = tile;
            out.push_back(std::move(ex));
        }
        return out;
    };

    // channel contract and exact surgery equivalence
    {
        detok::DetokParams stage1 = detok::DetokParams::init(cfg, 41);
        detok::DetokParams stage2 = detok::expand_for_conditioning(stage1);
        c.expect(stage1.config.input_channels() == 4, "stage-1 input channels == C");
        c.expect(stage2.config.input_channels() == 8, "stage-2 input channels == 2C");
        RandomSource rng(10007);
        bool exact = true;
        for (int trial = 0; trial < 8; ++trial) {
            Tensor noisy = rng.normal_tensor({4, 4, 4}, 1.0);
            Tensor feats = rng.normal_tensor({64, 16}, 1.0);
            const std::size_t t = rng.below(8);
            Tape ta, tb;
            Tensor p1 = detok::denoise_step(ta, stage1, noisy, t, feats, std::nullopt);
            Tensor p2 = detok::denoise_step(tb, stage2, noisy, t, feats,
                                            Tensor::zeros({4, 4, 4}));
            exact = exact && std::memcmp(p1.data().data(), p2.data().data(),
                                         p1.size() * sizeof(double)) == 0;
        }
        c.expect(exact, "zero-condition surgery equivalence is bitwise exact");
    }

    // stage-1 training beats the mean-latent predictor
    auto plain = make_dataset(16, false);
    detok::DetokParams stage1 = detok::DetokParams::init(cfg, 21);
    detok::DetokTrainOptions o1;
    o1.steps = 1500;
    o1.batch_size = 4;
    o1.lr = 3e-3;
    o1.seed = 31;
    detok::DetokTrainResult r1 = detok::train_detok(stage1, codec, plain, o1);
    c.expect(r1.final_loss < 0.2 * r1.initial_loss,
             "stage-1 loss drops by at least 80 percent");

    Tensor mean_latent = Tensor::zeros(codec.encode(plain[0].target).shape());
    for (const auto& ex : plain) {
        Tensor z = codec.encode(ex.target);
        for (std::size_t i = 0; i < z.size(); ++i) {
            mean_latent.mutable_data()[i] += z.data()[i] / double(plain.size());
        }
    }
    double base_err = 0, model_err = 0;
    for (const auto& ex : plain) {
        Tensor z0 = codec.encode(ex.target);
        Tensor zhat = detok::decode_latent(stage1, codec, ex.features, std::nullopt, 4040);
        for (std::size_t i = 0; i < z0.size(); ++i) {
            base_err += std::pow(z0.data()[i] - mean_latent.data()[i], 2);
            model_err += std::pow(z0.data()[i] - zhat.data()[i], 2);
        }
    }
    c.expect(model_err < base_err, "trained stage-1 beats the mean-latent baseline (" +
                                       std::to_string(model_err) + " vs " +
                                       std::to_string(base_err) + ")");

    // paired stage-1 vs stage-2 over 5 seeds, plus condition permutation
    detok::DetokConfig small = cfg;
    small.hidden_channels = 16;
    small.att_dim = 16;
    auto cond_data = make_dataset(12, true);
    auto plain_small = make_dataset(12, false);
    std::size_t stage2_wins = 0, permutation_degrades = 0;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        detok::DetokParams s1 = detok::DetokParams::init(small, 100 + seed);
        detok::DetokTrainOptions t1;
        t1.steps = 350;
        t1.lr = 3e-3;
        t1.seed = 200 + seed;
        detok::train_detok(s1, codec, plain_small, t1);

        detok::DetokParams s2 = detok::expand_for_conditioning(s1);
        auto mixed = cond_data;
        for (std::size_t i = 0; i < 3; ++i) mixed.push_back(plain_small[i]);
        detok::DetokTrainOptions t2;
        t2.steps = 350;
        t2.lr = 3e-3;
        t2.seed = 300 + seed;
        detok::train_detok(s2, codec, mixed, t2);

        double err1 = 0, err2 = 0, errp = 0;
        for (std::size_t i = 0; i < cond_data.size(); ++i) {
            const auto& ex = cond_data[i];
            Image d1 = detok::decode(s1, codec, ex.features, std::nullopt, 900 + i);
            Image d2 = detok::decode(s2, codec, ex.features, ex.condition, 900 + i);
            const Image& wrong = cond_data[(i + 5) % cond_data.size()].target;
            Image dp = detok::decode(s2, codec, ex.features, wrong, 900 + i);
            err1 += image_mse(d1, ex.target);
            err2 += image_mse(d2, ex.target);
            errp += image_mse(dp, ex.target);
        }
        if (err2 < err1) ++stage2_wins;
        if (errp > err2) ++permutation_degrades;
    }
    c.expect(stage2_wins == 5, "stage-2 with true condition beats stage-1 on all 5 seeds, won " +
                                   std::to_string(stage2_wins));
    c.expect(permutation_degrades == 5,
             "condition permutation strictly degrades stage-2 on all 5 seeds, held " +
                 std::to_string(permutation_degrades));
}

TEST_CASE("criterion 8: sequence grammar over the fixture corpus") {
    Criterion c("criterion 8 sequence grammar");
    vitsim::VisualTokenizer vit(patterns::fixture_vit_config());
    auto docs = dataset::parse_manifest(source_dir() / "data" / "sample_corpus" /
                                        "manifest.jsonl");
    seqpack::PackContext ctx;
    ctx.vit = &vit;
    ctx.resolve = dataset::dir_resolver(source_dir() / "data" / "sample_corpus");

    bool grammar = true, masks = true, provenance = true;
    for (const auto& doc : docs) {
        seqpack::PackedSequence seq = seqpack::pack(doc, ctx);
        grammar = grammar && seqpack::validate(seq).empty();

        auto layout = seq.token_layout();
        std::size_t pos = 0;
        for (std::size_t si = 0; si < seq.segments.size(); ++si) {
            const std::size_t len = seqpack::segment_len(seq.segments[si]);
            if (std::holds_alternative<seqpack::QuerySegment>(seq.segments[si])) {
                grammar = grammar && len == 64;
                grammar = grammar && pos > 0 && layout[pos - 1] &&
                          *layout[pos - 1] == codec::kImgStart;
                grammar = grammar && pos + len < seq.total_len + 1 &&
                          layout[pos + len] && *layout[pos + len] == codec::kImgEnd;
            }
            pos += len;
        }
        // the targeted positions are exactly the maskable-class tokens
        for (std::size_t p = 0; p < seq.total_len; ++p) {
            const bool should = p > 0 && layout[p].has_value() &&
                                seqpack::lm_maskable(*layout[p]);
            const bool has = seq.lm_targets[p] != seqpack::PackedSequence::kNoTarget;
            masks = masks && should == has;
            if (has) {
                masks = masks && seq.lm_targets[p] ==
                                     static_cast<std::int32_t>(*layout[p]);
            }
        }
        // regression targets are bit-identical to re-tokenizing the image
        for (const auto& rt : seq.regression_targets) {
            std::string ref;
            for (const auto& item : doc.items) {
                if (const auto* img = std::get_if<seqpack::ImageItem>(&item)) {
                    if (img->is_target) ref = img->ref;
                }
            }
            Image img = ctx.resolve(ref);
            Image global = dynres::resize_bilinear(img, vit.config().tile_h,
                                                   vit.config().tile_w);
            Tensor redo = vit.tokenize(global).embeddings;
            provenance = provenance &&
                std::memcmp(redo.data().data(), rt.target.data().data(),
                            redo.size() * sizeof(double)) == 0;
        }
    }
    c.expect(grammar, "every query block is <IMG> [64 slots] </IMG>");
    c.expect(masks, "LM targets are exactly the maskable token classes");
    c.expect(provenance, "regression targets bit-identical to re-tokenization");
}

TEST_CASE("criterion 9: causality and bitwise determinism") {
    Criterion c("criterion 9 causality + determinism");
    vitsim::VisualTokenizer vit(patterns::fixture_vit_config());
    seqpack::PackContext ctx;
    ctx.vit = &vit;
    ctx.resolve = [](const std::string&) -> Image {
        throw IoError("text only");
    };
    seqpack::MultimodalDocument doc;
    doc.items.push_back(seqpack::TextItem{"a causal transformer never peeks ahead"});
    seqpack::PackedSequence seq = seqpack::pack(doc, ctx);

    mllm::ModelConfig mcfg;
    mcfg.model_dim = 32;
    mcfg.n_layers = 2;
    mcfg.n_heads = 2;
    mcfg.visual_dim = vit.config().embed_dim;
    mcfg.max_len = 224;
    mllm::ModelParams params = mllm::ModelParams::init(mcfg, 123);

    Tape t0;
    Tensor base = mllm::forward_sequence(t0, params, seq).logits;
    RandomSource rng(10009);
    bool causal = true;
    for (int probe = 0; probe < 50; ++probe) {
        const std::size_t j = 1 + rng.below(seq.total_len - 1);
        seqpack::PackedSequence perturbed = seq;
        auto& ids = std::get<seqpack::TokenSegment>(perturbed.segments[0]).ids;
        ids[j] = static_cast<codec::TokenId>((ids[j] + 1 + rng.below(250)) % 256);
        Tape t1;
        Tensor got = mllm::forward_sequence(t1, params, perturbed).logits;
        causal = causal && std::memcmp(got.data().data(), base.data().data(),
                                       j * codec::kVocabSize * sizeof(double)) == 0;
    }
    c.expect(causal, "perturbing position j leaves all logits before j unchanged");

    // fixed-seed training reproducibility including checkpoint resume
    fs::path dir = work_dir("determinism");
    dataset::Corpus corpus = pack_fixture_corpus(source_dir() / "data" / "task_corpus");
    dataset::write_corpus(dir / "packed", corpus);
    trainer::TrainOptions opts;
    opts.corpus_dir = dir / "packed";
    opts.out_dir = dir / "a";
    opts.seed = 9;
    opts.lr = 3e-3;
    opts.steps = 30;
    opts.batch_size = 4;
    opts.checkpoint_every = 20;
    opts.model_dim = 32;
    opts.n_layers = 1;
    opts.n_heads = 2;
    opts.max_len = 224;
    trainer::TrainResult a = trainer::pretrain(opts);
    opts.out_dir = dir / "b";
    trainer::TrainResult b = trainer::pretrain(opts);
    trainer::TrainOptions res = opts;
    res.out_dir = dir / "resumed";
    res.resume = dir / "a" / "ckpt_step20";
    trainer::TrainResult r = trainer::pretrain(res);

    auto tensors_of = [](const fs::path& p) {
        auto ckpt = checkpoint::load_mllm_raw(p);
        std::map<std::string, Tensor> out;
        for (auto& [name, tensor] : ckpt.tensors) out[name] = tensor;
        return out;
    };
    auto ta = tensors_of(a.final_checkpoint);
    auto tb = tensors_of(b.final_checkpoint);
    auto tr = tensors_of(r.final_checkpoint);
    bool rerun_equal = true, resume_equal = true;
    for (auto& [name, tensor] : ta) {
        rerun_equal = rerun_equal &&
            std::memcmp(tensor.data().data(), tb.at(name).data().data(),
                        tensor.size() * sizeof(double)) == 0;
        resume_equal = resume_equal &&
            std::memcmp(tensor.data().data(), tr.at(name).data().data(),
                        tensor.size() * sizeof(double)) == 0;
    }
    c.expect(rerun_equal, "identical seeds give bitwise-identical training runs");
    c.expect(resume_equal, "checkpoint resume reproduces the trajectory bitwise");

    // decoding determinism, tokens and images both
    auto params_a = checkpoint::load_mllm_params(checkpoint::load_mllm_raw(a.final_checkpoint));
    auto e1 = mllm::generate(params_a, seq, 12);
    auto e2 = mllm::generate(params_a, seq, 12);
    bool decode_equal = e1.size() == e2.size();
    for (std::size_t i = 0; decode_equal && i < e1.size(); ++i) {
        decode_equal = e1[i].kind == e2[i].kind && e1[i].token == e2[i].token;
    }
    c.expect(decode_equal, "greedy decoding is deterministic");
}

TEST_CASE("criterion 10: end-to-end smoke recipe through the cli") {
    Criterion c("criterion 10 end-to-end smoke recipe");
    fs::path dir = work_dir("smoke");
    const std::string bin = MMSEQ_BIN_PATH;

    auto run = [&](const std::string& args) {
        const std::string cmd = bin + " " + args + " >> " +
                                (dir / "log.txt").string() + " 2>&1";
        return std::system(cmd.c_str());
    };

    int rc = run("gen-corpus --out " + (dir / "corpus").string() + " --kind sample");
    c.expect(rc == 0, "gen-corpus exits 0");
    rc = run("pack --manifest " + (dir / "corpus" / "manifest.jsonl").string() +
             " --out " + (dir / "packed").string());
    c.expect(rc == 0, "pack exits 0");

    {
        std::ofstream cfg(dir / "pretrain.cfg");
        cfg << "corpus = " << (dir / "packed").string() << "\n"
            << "out = " << (dir / "pretrain").string() << "\n"
            << "steps = 450\nbatch_size = 4\nlr = 3e-3\nlambda = 4.0\nseed = 7\n"
            << "model_dim = 64\nn_layers = 2\nn_heads = 4\nmax_len = 224\n";
    }
    rc = run("pretrain --config " + (dir / "pretrain.cfg").string());
    c.expect(rc == 0, "pretrain exits 0");

    {
        std::ofstream cfg(dir / "finetune.cfg");
        cfg << "corpus = " << (dir / "packed").string() << "\n"
            << "base = " << (dir / "pretrain" / "final").string() << "\n"
            << "out = " << (dir / "finetune").string() << "\n"
            << "steps = 150\nbatch_size = 4\nlr = 2e-3\nlambda = 4.0\nseed = 7\n"
            << "lora_rank = 4\nlora_alpha = 8\n";
    }
    rc = run("finetune --config " + (dir / "finetune.cfg").string());
    c.expect(rc == 0, "finetune exits 0");

    {
        std::ofstream cfg(dir / "detok.cfg");
        cfg << "manifest = " << (dir / "corpus" / "manifest.jsonl").string() << "\n"
            << "out = " << (dir / "detok").string() << "\n"
            << "stage = 1\nsteps = 1200\nbatch_size = 4\nlr = 3e-3\nseed = 7\n"
            << "hidden_channels = 32\natt_dim = 32\n";
    }
    rc = run("detok-train --config " + (dir / "detok.cfg").string());
    c.expect(rc == 0, "detok-train exits 0");

    rc = run("decode --checkpoint " + (dir / "pretrain" / "final").string() +
             " --adapter " + (dir / "finetune" / "adapter").string() +
             " --detok " + (dir / "detok" / "final").string() +
             " --prompt \"jelly moon: \" --max-new 4 --seed 5 --out " +
             (dir / "decoded").string());
    c.expect(rc == 0, "decode exits 0");
    c.expect(fs::exists(dir / "decoded" / "img_0.ppm"), "decode wrote an image");
    c.expect(fs::exists(dir / "decoded" / "run_manifest.json"),
             "decode wrote its run manifest");

    if (fs::exists(dir / "decoded" / "img_0.ppm")) {
        Image decoded = read_pnm(dir / "decoded" / "img_0.ppm");
        Image target = read_pnm(dir / "corpus" / "imgs" / "grad_h.ppm");
        // mean image over the corpus target images
        std::vector<std::string> names{"grad_h.ppm", "stripes_v.ppm", "rings.ppm",
                                       "circle.ppm", "inverted.ppm"};
        Image mean = Image::create(16, 16, 3, 0.0);
        for (const std::string& name : names) {
            Image img = read_pnm(dir / "corpus" / "imgs" / name);
            for (std::size_t i = 0; i < mean.pixels.size(); ++i) {
                mean.pixels[i] += img.pixels[i] / double(names.size());
            }
        }
        const double model_mse = image_mse(decoded, target);
        const double base_mse = image_mse(mean, target);
        c.expect(model_mse < base_mse,
                 "decoded image beats the mean-image baseline (" +
                     std::to_string(model_mse) + " vs " + std::to_string(base_mse) + ")");
    }
}
