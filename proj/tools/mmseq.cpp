// Command-line surface for the multimodal sequence toolkit: data prep,
// training, verification, and generation. Every command with file
// outputs writes a run manifest (resolved args, seed, input hashes)
// before doing any work. Exit codes: 0 success, 1 verification
// failure, 2 usage or validation error.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>
#include <openssl/evp.h>

#include "mmseq/checkpoint.hpp"
#include "mmseq/codec.hpp"
#include "mmseq/common.hpp"
#include "mmseq/dataset.hpp"
#include "mmseq/detok.hpp"
#include "mmseq/dynres.hpp"
#include "mmseq/gradcheck.hpp"
#include "mmseq/mllm.hpp"
#include "mmseq/patterns.hpp"
#include "mmseq/runconfig.hpp"
#include "mmseq/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mmseq;

namespace {

// ---- run manifests ---------------------------------------------------------

std::string git_blob_sha1(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("hash: cannot open " + path.string());
    std::string content((std::istreambuf_iterator<char>(is)),
                        std::istreambuf_iterator<char>());
    const std::string header = "blob " + std::to_string(content.size());
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr);
    EVP_DigestUpdate(ctx, header.data(), header.size() + 1);  // includes NUL
    EVP_DigestUpdate(ctx, content.data(), content.size());
    EVP_DigestFinal_ex(ctx, digest, &len);
    EVP_MD_CTX_free(ctx);
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 0xf]);
    }
    return out;
}

void write_run_manifest(const fs::path& out_dir, const std::string& command,
                        const std::map<std::string, std::string>& args,
                        std::uint64_t seed, const std::vector<fs::path>& inputs,
                        const std::vector<std::string>& outputs) {
    fs::create_directories(out_dir);
    json root;
    root["command"] = command;
    root["args"] = args;
    root["seed"] = seed;
    json jin = json::object();
    for (const fs::path& p : inputs) {
        if (fs::exists(p) && fs::is_regular_file(p)) jin[p.string()] = git_blob_sha1(p);
    }
    root["inputs"] = std::move(jin);
    root["outputs"] = outputs;
    std::ofstream os(out_dir / "run_manifest.json");
    if (!os) throw IoError("cannot write run manifest in " + out_dir.string());
    os << root.dump(1) << "\n";
}

std::uint64_t effective_seed(std::uint64_t config_seed) {
    if (const char* env = std::getenv("MMSEQ_SEED")) {
        return std::strtoull(env, nullptr, 10);
    }
    return config_seed;
}

vitsim::VisualTokenizerConfig vit_config_from(const RunConfig& cfg) {
    vitsim::VisualTokenizerConfig vc = patterns::fixture_vit_config();
    vc.tile_h = static_cast<std::size_t>(cfg.get_int("vit_tile", vc.tile_h));
    vc.tile_w = vc.tile_h;
    vc.patch_size = static_cast<std::size_t>(cfg.get_int("vit_patch", vc.patch_size));
    vc.embed_dim = static_cast<std::size_t>(cfg.get_int("vit_embed_dim", vc.embed_dim));
    vc.seed = cfg.get_u64("vit_seed", vc.seed);
    vc.validate();
    return vc;
}

// ---- simple commands ---------------------------------------------------------

int cmd_plan_grid(std::size_t height, std::size_t width, std::size_t tile) {
    auto [n_h, n_w] = dynres::select_grid(height, width, tile, tile);
    json centers = json::array();
    for (std::size_t r = 0; r < n_h; ++r) {
        for (std::size_t c = 0; c < n_w; ++c) {
            centers.push_back({(static_cast<double>(c) + 0.5) / static_cast<double>(n_w),
                               (static_cast<double>(r) + 0.5) / static_cast<double>(n_h)});
        }
    }
    json out{{"n_h", n_h}, {"n_w", n_w}, {"centers", centers}};
    std::cout << out.dump() << "\n";
    return 0;
}

int cmd_tile(const fs::path& input, std::size_t tile, const fs::path& out_dir) {
    Image img = read_pnm(input);
    write_run_manifest(out_dir, "tile", {{"input", input.string()},
                                         {"tile", std::to_string(tile)}},
                       0, {input}, {"plan.json", "tile_*.ppm", "global.ppm"});
    dynres::Partition part = dynres::partition(img, tile, tile);
    json cells = json::array();
    for (std::size_t i = 0; i < part.plan.cells.size(); ++i) {
        const dynres::GridCell& cell = part.plan.cells[i];
        const std::string name = detail::format_msg("tile_", cell.row, "_", cell.col,
                                                    ".ppm");
        write_pnm(out_dir / name, part.sub_images[i]);
        cells.push_back({{"row", cell.row},
                         {"col", cell.col},
                         {"center", {cell.center_x, cell.center_y}},
                         {"file", name}});
    }
    write_pnm(out_dir / "global.ppm", part.global_image);
    json plan{{"n_h", part.plan.n_h},
              {"n_w", part.plan.n_w},
              {"tile", tile},
              {"upsampled", {part.plan.upsampled_h, part.plan.upsampled_w}},
              {"cells", cells},
              {"global", "global.ppm"}};
    std::ofstream os(out_dir / "plan.json");
    os << plan.dump(1) << "\n";
    std::cout << plan.dump() << "\n";
    return 0;
}

int cmd_encode_box(const std::vector<double>& coords) {
    codec::BBox box{coords[0], coords[1], coords[2], coords[3]};
    auto ids = codec::encode_box(box);
    json markers = json::array();
    for (codec::TokenId id : ids) markers.push_back(codec::describe_token(id));
    std::cout << json{{"tokens", ids}, {"markers", markers}}.dump() << "\n";
    return 0;
}

int cmd_parse_tokens(const std::string& csv_tokens, bool strict) {
    std::vector<codec::TokenId> ids;
    std::stringstream ss(csv_tokens);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        ids.push_back(static_cast<codec::TokenId>(std::stoul(item)));
    }
    codec::BoxParseResult result = codec::parse_box_spans(ids);
    json jboxes = json::array();
    for (const codec::ParsedBox& b : result.boxes) {
        jboxes.push_back({{"position", b.position},
                          {"x_center", b.box.x_center},
                          {"y_center", b.box.y_center},
                          {"width", b.box.width},
                          {"height", b.box.height}});
    }
    json jerrors = json::array();
    for (const codec::ParseError& e : result.errors) {
        jerrors.push_back({{"position", e.position}, {"reason", e.reason}});
    }
    std::cout << json{{"boxes", jboxes}, {"errors", jerrors}}.dump() << "\n";
    if (strict && !result.clean()) return 2;
    return 0;
}

int cmd_gen_corpus(const fs::path& out_dir, const std::string& kind) {
    write_run_manifest(out_dir, "gen-corpus", {{"kind", kind}}, 0, {},
                       {"manifest.jsonl", "imgs/"});
    if (kind == "sample") {
        patterns::write_sample_corpus(out_dir);
    } else if (kind == "task") {
        patterns::write_task_corpus(out_dir);
    } else {
        std::cerr << "unknown corpus kind: " << kind << "\n";
        return 2;
    }
    std::cout << json{{"written", out_dir.string()}, {"kind", kind}}.dump() << "\n";
    return 0;
}

int cmd_pack(const fs::path& manifest, const fs::path& out_dir,
             const RunConfig& flags) {
    auto docs = dataset::parse_manifest(manifest);
    if (docs.empty()) {
        std::cerr << "pack: no documents\n";
        return 2;
    }
    write_run_manifest(out_dir, "pack", {{"manifest", manifest.string()}}, 0,
                       {manifest}, {"corpus.json", "tensors/", "validation.json"});
    vitsim::VisualTokenizer vit(vit_config_from(flags));
    seqpack::PackContext ctx;
    ctx.vit = &vit;
    ctx.resolve = dataset::dir_resolver(manifest.parent_path());

    dataset::Corpus corpus;
    corpus.vit_config = vit.config();
    json report = json::array();
    bool all_valid = true;
    for (std::size_t i = 0; i < docs.size(); ++i) {
        seqpack::PackedSequence seq = seqpack::pack(docs[i], ctx);
        auto violations = seqpack::validate(seq);
        json jv = json::array();
        for (const seqpack::Violation& v : violations) {
            jv.push_back({{"code", v.code}, {"message", v.message}});
            all_valid = false;
        }
        report.push_back({{"document", i},
                          {"total_len", seq.total_len},
                          {"violations", jv}});
        corpus.sequences.push_back(std::move(seq));
    }
    dataset::write_corpus(out_dir, corpus);
    {
        std::ofstream os(out_dir / "validation.json");
        os << json{{"documents", docs.size()}, {"valid", all_valid},
                   {"report", report}}.dump(1)
           << "\n";
    }
    std::cout << json{{"documents", docs.size()}, {"valid", all_valid}}.dump() << "\n";
    return all_valid ? 0 : 2;
}

// ---- gradcheck harness -------------------------------------------------------

struct CheckOutcome {
    std::string name;
    double worst = 0.0;
    bool ok = true;
};

CheckOutcome run_op_check(const std::string& name, const std::string& fault,
                          const std::function<Tensor(Tape&, const Tensor&)>& op,
                          const Tensor& x0) {
    Tensor x = x0.clone();
    x.set_requires_grad(true);
    Tape tape;
    Tensor y = op(tape, x);
    Tensor w = Tensor::zeros(y.shape());
    {
        auto wd = w.mutable_data();
        for (std::size_t i = 0; i < wd.size(); ++i) {
            wd[i] = 0.25 + 0.1 * static_cast<double>(i % 5);
        }
    }
    Tensor loss = ops::sum(tape, ops::mul(tape, y, w));
    tape.backward(loss);

    std::vector<double> ad(x.grad().begin(), x.grad().end());
    if (fault == name) ad[0] += 0.5;  // test-only fault injection

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

    CheckOutcome outcome;
    outcome.name = name;
    for (std::size_t i = 0; i < ad.size(); ++i) {
        outcome.worst = std::max(outcome.worst, grad_rel_err(ad[i], fd.data()[i]));
    }
    outcome.ok = outcome.worst < 1e-5;
    return outcome;
}

int cmd_gradcheck(const std::string& fault) {
    std::vector<CheckOutcome> checks;
    RandomSource rng(20240501);

    Tensor x23 = rng.uniform_tensor({3, 8}, -1.5, 1.5);
    Tensor b0 = rng.uniform_tensor({8, 5}, -1.0, 1.0);
    checks.push_back(run_op_check("matmul", fault, [&](Tape& t, const Tensor& v) {
        return ops::matmul(t, v, b0);
    }, x23));
    checks.push_back(run_op_check("softmax", fault, [](Tape& t, const Tensor& v) {
        return ops::softmax(t, v);
    }, x23));
    Tensor gain = rng.uniform_tensor({8}, 0.5, 1.5);
    Tensor bias = rng.uniform_tensor({8}, -0.5, 0.5);
    checks.push_back(run_op_check("layer_norm", fault, [&](Tape& t, const Tensor& v) {
        return ops::layer_norm(t, v, gain, bias, 1e-5);
    }, x23));
    checks.push_back(run_op_check("gelu", fault, [](Tape& t, const Tensor& v) {
        return ops::gelu(t, v);
    }, x23));
    Tensor target = rng.uniform_tensor({3, 8}, -1.0, 1.0);
    checks.push_back(run_op_check("mse", fault, [&](Tape& t, const Tensor& v) {
        return ops::mse(t, v, target);
    }, x23));
    std::vector<ops::CeTarget> ce_targets{{0, 2}, {1, 7}, {2, 0}};
    checks.push_back(run_op_check("cross_entropy", fault, [&](Tape& t, const Tensor& v) {
        return ops::cross_entropy(t, v, ce_targets);
    }, x23));
    Tensor img = rng.uniform_tensor({2, 5, 5}, -1.0, 1.0);
    Tensor cw = rng.uniform_tensor({3, 2, 3, 3}, -0.4, 0.4);
    Tensor cb = rng.uniform_tensor({3}, -0.2, 0.2);
    checks.push_back(run_op_check("conv2d", fault, [&](Tape& t, const Tensor& v) {
        return ops::conv2d(t, v, cw, cb);
    }, img));

    // end-to-end: the dual-objective loss on a small mixed batch
    {
        vitsim::VisualTokenizer vit(patterns::fixture_vit_config());
        seqpack::PackContext ctx;
        ctx.vit = &vit;
        auto samples = patterns::sample_images();
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

        mllm::ModelConfig mcfg;
        mcfg.model_dim = 32;
        mcfg.n_layers = 1;
        mcfg.n_heads = 2;
        mcfg.visual_dim = vit.config().embed_dim;
        mcfg.max_len = 224;
        mllm::ModelParams params = mllm::ModelParams::init(mcfg, 99);
        seqpack::Batch batch = seqpack::collate(
            {s1, s2}, std::max(s1.total_len, s2.total_len));

        Tape tape;
        mllm::LossParts parts = mllm::loss(tape, params, batch, 1.0);
        tape.backward(parts.total);
        if (fault == "mllm_loss") {
            params.lm_head.w.grad_or_alloc()[0] += 0.5;
        }
        auto f_eval = [&]() {
            Tape t;
            return mllm::loss(t, params, batch, 1.0).total.value();
        };
        std::vector<Tensor> tensors;
        for (auto& [name, tensor] : params.named_parameters()) {
            if (tensor.has_grad()) tensors.push_back(tensor);
        }
        RandomSource coord_rng(7);
        GradcheckResult res = check_gradients("mllm_loss", f_eval, tensors, 1e-5,
                                              1e-4, 2, &coord_rng);
        checks.push_back({res.name, res.worst_rel_err, res.ok});
    }

    json jchecks = json::array();
    double worst = 0.0;
    bool ok = true;
    std::string first_bad;
    for (const CheckOutcome& c : checks) {
        jchecks.push_back({{"name", c.name}, {"worst_rel_err", c.worst}, {"ok", c.ok}});
        worst = std::max(worst, c.worst);
        if (!c.ok && first_bad.empty()) first_bad = c.name;
        ok = ok && c.ok;
    }
    json report{{"checks", jchecks}, {"worst_rel_err", worst}, {"ok", ok}};
    if (!ok) report["failed_op"] = first_bad;
    std::cout << report.dump(1) << "\n";
    return ok ? 0 : 1;
}

// ---- training commands ---------------------------------------------------------

trainer::TrainOptions train_options_from(const RunConfig& cfg) {
    trainer::TrainOptions opts;
    opts.corpus_dir = cfg.get_string("corpus");
    opts.out_dir = cfg.get_string("out");
    opts.seed = effective_seed(cfg.get_u64("seed", 1));
    opts.lr = cfg.get_double("lr", 3e-3);
    opts.lambda = cfg.get_double("lambda", 1.0);
    opts.steps = static_cast<std::size_t>(cfg.get_int("steps", 1000));
    opts.batch_size = static_cast<std::size_t>(cfg.get_int("batch_size", 4));
    opts.checkpoint_every = static_cast<std::size_t>(cfg.get_int("checkpoint_every", 0));
    opts.model_dim = static_cast<std::size_t>(cfg.get_int("model_dim", 64));
    opts.n_layers = static_cast<std::size_t>(cfg.get_int("n_layers", 2));
    opts.n_heads = static_cast<std::size_t>(cfg.get_int("n_heads", 4));
    opts.max_len = static_cast<std::size_t>(cfg.get_int("max_len", 256));
    if (cfg.has("resume")) opts.resume = cfg.get_string("resume");
    if (cfg.has("base")) opts.base_checkpoint = cfg.get_string("base");
    opts.lora_rank = static_cast<std::size_t>(cfg.get_int("lora_rank", 4));
    opts.lora_alpha = cfg.get_double("lora_alpha", 8.0);
    return opts;
}

json eval_json(const trainer::EvalResult& eval) {
    return json{{"ce", eval.ce},
                {"mse", eval.mse},
                {"total", eval.total},
                {"token_accuracy", eval.token_accuracy},
                {"min_query_cosine", eval.min_query_cosine},
                {"lm_targets", eval.lm_targets},
                {"query_segments", eval.query_segments}};
}

int cmd_pretrain(const fs::path& config_path) {
    RunConfig cfg = RunConfig::parse_file(config_path);
    trainer::TrainOptions opts = train_options_from(cfg);
    write_run_manifest(opts.out_dir, "pretrain", cfg.entries(), opts.seed,
                       {config_path, opts.corpus_dir / "corpus.json"},
                       {"metrics.csv", "final/"});
    trainer::TrainResult result = trainer::pretrain(opts);
    json out{{"final_checkpoint", result.final_checkpoint.string()},
             {"initial", eval_json(result.initial_eval)},
             {"final", eval_json(result.final_eval)}};
    std::cout << out.dump(1) << "\n";
    return 0;
}

int cmd_finetune(const fs::path& config_path) {
    RunConfig cfg = RunConfig::parse_file(config_path);
    trainer::TrainOptions opts = train_options_from(cfg);
    if (opts.base_checkpoint.empty()) {
        throw ConfigError("finetune: config must set 'base'");
    }
    write_run_manifest(opts.out_dir, "finetune", cfg.entries(), opts.seed,
                       {config_path, opts.corpus_dir / "corpus.json",
                        opts.base_checkpoint / "manifest.json"},
                       {"metrics.csv", "adapter/"});
    trainer::TrainResult result = trainer::finetune(opts);
    json out{{"adapter_checkpoint", result.adapter_checkpoint.string()},
             {"initial", eval_json(result.initial_eval)},
             {"final", eval_json(result.final_eval)}};
    std::cout << out.dump(1) << "\n";
    return 0;
}

int cmd_detok_train(const fs::path& config_path) {
    RunConfig cfg = RunConfig::parse_file(config_path);
    const int stage = static_cast<int>(cfg.get_int("stage", 1));
    const fs::path out_dir = cfg.get_string("out");
    const fs::path manifest = cfg.get_string("manifest");
    const std::uint64_t seed = effective_seed(cfg.get_u64("seed", 1));

    write_run_manifest(out_dir, "detok-train", cfg.entries(), seed,
                       {config_path, manifest}, {"metrics.csv", "final/"});

    vitsim::VisualTokenizerConfig vit_cfg = vit_config_from(cfg);
    vitsim::VisualTokenizer vit(vit_cfg);

    // collect every referenced image as a reconstruction target
    auto docs = dataset::parse_manifest(manifest);
    auto resolve = dataset::dir_resolver(manifest.parent_path());
    std::vector<Image> tiles;
    std::set<std::string> seen;
    for (const seqpack::MultimodalDocument& doc : docs) {
        for (const seqpack::DocumentItem& item : doc.items) {
            if (const auto* img = std::get_if<seqpack::ImageItem>(&item)) {
                if (seen.insert(img->ref).second) {
                    Image loaded = resolve(img->ref);
                    if (loaded.channels == 1) loaded = loaded.to_rgb();
                    tiles.push_back(dynres::resize_bilinear(loaded, vit_cfg.tile_h,
                                                            vit_cfg.tile_w));
                }
            }
        }
    }
    MMSEQ_CHECK(!tiles.empty(), "detok-train: manifest references no images");

    const bool conditional = stage == 2;
    std::vector<detok::DetokExample> examples;
    const double zero_cond_fraction = cfg.get_double("zero_cond_fraction", 0.25);
    for (const Image& tile : tiles) {
        detok::DetokExample ex;
        ex.features = vit.tokenize(tile).embeddings;
        ex.target = tile;
        if (conditional) ex.condition = tile;
        examples.push_back(std::move(ex));
    }
    if (conditional) {
        const std::size_t extra =
            static_cast<std::size_t>(zero_cond_fraction * double(tiles.size()));
        for (std::size_t i = 0; i < extra; ++i) {
            detok::DetokExample ex;
            ex.features = vit.tokenize(tiles[i % tiles.size()]).embeddings;
            ex.target = tiles[i % tiles.size()];
            examples.push_back(std::move(ex));
        }
    }

    detok::DetokParams params = [&] {
        if (stage == 2 && cfg.has("stage1_checkpoint")) {
            detok::DetokParams stage1 =
                checkpoint::load_detok(cfg.get_string("stage1_checkpoint"));
            return detok::expand_for_conditioning(stage1);
        }
        detok::DetokConfig dcfg;
        dcfg.tile = vit_cfg.tile_h;
        dcfg.img_channels = vit_cfg.channels;
        dcfg.visual_dim = vit_cfg.embed_dim;
        dcfg.hidden_channels = static_cast<std::size_t>(cfg.get_int("hidden_channels", 32));
        dcfg.att_dim = static_cast<std::size_t>(cfg.get_int("att_dim", 32));
        dcfg.denoise_steps = static_cast<std::size_t>(cfg.get_int("denoise_steps", 8));
        dcfg.conditional = conditional;
        return detok::DetokParams::init(dcfg, seed);
    }();
    MMSEQ_CHECK(params.config.conditional == conditional,
                "detok-train: stage flag does not match checkpoint conditionality");

    detok::LatentCodec codec(params.config.downsample, params.config.latent_channels,
                             params.config.img_channels, params.config.codec_seed);
    detok::DetokTrainOptions topts;
    topts.steps = static_cast<std::size_t>(cfg.get_int("steps", 1000));
    topts.batch_size = static_cast<std::size_t>(cfg.get_int("batch_size", 4));
    topts.lr = cfg.get_double("lr", 3e-3);
    topts.seed = seed;
    topts.metrics_csv = out_dir / "metrics.csv";
    detok::DetokTrainResult result = detok::train_detok(params, codec, examples, topts);

    checkpoint::save_detok(out_dir / "final", params);
    json out{{"final_checkpoint", (out_dir / "final").string()},
             {"stage", stage},
             {"initial_loss", result.initial_loss},
             {"final_loss", result.final_loss}};
    std::cout << out.dump(1) << "\n";
    return 0;
}

int cmd_decode(const fs::path& ckpt_dir, const fs::path& adapter_dir,
               const fs::path& detok_dir, const std::string& prompt_text,
               const fs::path& prompt_manifest, const fs::path& condition_path,
               std::size_t max_new, std::uint64_t seed, const fs::path& out_dir) {
    std::vector<fs::path> inputs{ckpt_dir / "manifest.json"};
    if (!detok_dir.empty()) inputs.push_back(detok_dir / "manifest.json");
    if (!prompt_manifest.empty()) inputs.push_back(prompt_manifest);
    write_run_manifest(out_dir, "decode",
                       {{"checkpoint", ckpt_dir.string()},
                        {"adapter", adapter_dir.string()},
                        {"detok", detok_dir.string()},
                        {"prompt", prompt_text},
                        {"max_new", std::to_string(max_new)}},
                       seed, inputs, {"transcript.txt", "events.json", "img_*.ppm"});

    checkpoint::MllmCheckpoint ckpt = checkpoint::load_mllm_raw(ckpt_dir);
    mllm::ModelParams params = checkpoint::load_mllm_params(ckpt);
    if (!adapter_dir.empty()) {
        trainer::apply_adapter(params, checkpoint::load_adapter(adapter_dir));
    }
    vitsim::VisualTokenizer vit(ckpt.vit_config);

    seqpack::PackContext ctx;
    ctx.vit = &vit;
    seqpack::MultimodalDocument doc;
    if (!prompt_manifest.empty()) {
        auto docs = dataset::parse_manifest(prompt_manifest);
        doc = docs.front();
        ctx.resolve = dataset::dir_resolver(prompt_manifest.parent_path());
    } else {
        doc.items.push_back(seqpack::TextItem{prompt_text});
        ctx.resolve = [](const std::string& ref) -> Image {
            throw IoError("text prompt cannot resolve image ref " + ref);
        };
    }
    seqpack::PackedSequence prompt = seqpack::pack(doc, ctx);
    auto events = mllm::generate(params, prompt, max_new);

    std::optional<detok::DetokParams> detok_params;
    std::optional<detok::LatentCodec> codec;
    if (!detok_dir.empty()) {
        detok_params = checkpoint::load_detok(detok_dir);
        MMSEQ_CHECK(detok_params->config.visual_dim == ckpt.vit_config.embed_dim,
                    "decode: de-tokenizer visual dim does not match the checkpoint");
        codec.emplace(detok_params->config.downsample,
                      detok_params->config.latent_channels,
                      detok_params->config.img_channels,
                      detok_params->config.codec_seed);
    }
    std::optional<Image> condition;
    if (!condition_path.empty()) {
        Image cond = read_pnm(condition_path);
        if (cond.channels == 1) cond = cond.to_rgb();
        if (detok_params) {
            cond = dynres::resize_bilinear(cond, detok_params->config.tile,
                                           detok_params->config.tile);
        }
        condition = cond;
    }

    std::ofstream transcript(out_dir / "transcript.txt");
    json jevents = json::array();
    std::size_t image_count = 0;
    for (const mllm::GenEvent& event : events) {
        if (event.kind == mllm::GenEvent::Kind::Token) {
            transcript << codec::describe_token(event.token);
            jevents.push_back({{"type", "token"},
                               {"id", event.token},
                               {"structural", event.structural}});
        } else {
            const std::string name = detail::format_msg("img_", image_count, ".ppm");
            if (detok_params) {
                std::optional<Image> cond_for_decode;
                if (detok_params->config.conditional) cond_for_decode = condition;
                Image decoded = detok::decode(*detok_params, *codec, event.features,
                                              cond_for_decode, seed + image_count);
                write_pnm(out_dir / name, decoded);
            }
            transcript << "[" << name << "]";
            jevents.push_back({{"type", "image_features"}, {"file", name}});
            ++image_count;
        }
    }
    transcript << "\n";
    std::ofstream os(out_dir / "events.json");
    os << jevents.dump(1) << "\n";
    std::cout << json{{"events", events.size()}, {"images", image_count}}.dump() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale multimodal sequence modeling toolkit"};
    app.require_subcommand(1);

    // plan-grid
    std::size_t height = 0, width = 0, tile = 224;
    CLI::App* plan = app.add_subcommand("plan-grid", "solve the minimal tile grid");
    plan->add_option("--height", height, "image height in pixels")->required();
    plan->add_option("--width", width, "image width in pixels")->required();
    plan->add_option("--tile", tile, "tile side length");

    // tile
    fs::path tile_input, tile_out;
    std::size_t tile_size = 224;
    CLI::App* tile_cmd = app.add_subcommand("tile", "split an image into tiles");
    tile_cmd->add_option("--input", tile_input, "PPM/PGM image")->required();
    tile_cmd->add_option("--tile", tile_size, "tile side length");
    tile_cmd->add_option("--out", tile_out, "output directory")->required();

    // codec
    CLI::App* codec_cmd = app.add_subcommand("codec", "token stream debugging");
    std::vector<double> box_coords;
    CLI::App* enc = codec_cmd->add_subcommand("encode-box", "encode a bounding box");
    enc->add_option("--box", box_coords, "x_center y_center width height")
        ->expected(4)
        ->required();
    std::string parse_tokens;
    bool parse_strict = false;
    CLI::App* par = codec_cmd->add_subcommand("parse", "parse box spans from ids");
    par->add_option("--tokens", parse_tokens, "comma-separated token ids")->required();
    par->add_flag("--strict", parse_strict, "exit nonzero on malformed spans");

    // pack
    fs::path pack_manifest, pack_out;
    RunConfig pack_flags;
    std::size_t vit_tile = 16, vit_patch = 2, vit_dv = 16;
    CLI::App* pack_cmd = app.add_subcommand("pack", "pack a JSONL manifest");
    pack_cmd->add_option("--manifest", pack_manifest, "JSONL manifest")->required();
    pack_cmd->add_option("--out", pack_out, "output directory")->required();
    pack_cmd->add_option("--vit-tile", vit_tile, "tokenizer tile side");
    pack_cmd->add_option("--vit-patch", vit_patch, "tokenizer patch size");
    pack_cmd->add_option("--vit-embed-dim", vit_dv, "tokenizer embedding dim");

    // gradcheck
    std::string fault;
    CLI::App* gc = app.add_subcommand("gradcheck", "finite-difference verification");
    gc->add_option("--fault", fault, "testing aid: corrupt one op's gradient");

    // training
    fs::path pretrain_cfg, finetune_cfg, detok_cfg;
    CLI::App* pre = app.add_subcommand("pretrain", "dual-objective training");
    pre->add_option("--config", pretrain_cfg, "key = value config file")->required();
    CLI::App* ft = app.add_subcommand("finetune", "adapter fine-tuning");
    ft->add_option("--config", finetune_cfg, "key = value config file")->required();
    CLI::App* dt = app.add_subcommand("detok-train", "train the visual de-tokenizer");
    dt->add_option("--config", detok_cfg, "key = value config file")->required();

    // decode
    fs::path dec_ckpt, dec_adapter, dec_detok, dec_prompt_manifest, dec_out, dec_cond;
    std::string dec_prompt;
    std::size_t dec_max_new = 96;
    std::uint64_t dec_seed = 1;
    CLI::App* dec = app.add_subcommand("decode", "greedy generation + image decoding");
    dec->add_option("--checkpoint", dec_ckpt, "model checkpoint dir")->required();
    dec->add_option("--adapter", dec_adapter, "adapter checkpoint dir");
    dec->add_option("--detok", dec_detok, "de-tokenizer checkpoint dir");
    dec->add_option("--prompt", dec_prompt, "text prompt");
    dec->add_option("--prompt-manifest", dec_prompt_manifest,
                    "JSONL file; first document is the prompt");
    dec->add_option("--condition", dec_cond, "condition image for stage-2 decoding");
    dec->add_option("--max-new", dec_max_new, "token budget");
    dec->add_option("--seed", dec_seed, "decode seed");
    dec->add_option("--out", dec_out, "output directory")->required();

    // gen-corpus
    fs::path genc_out;
    std::string genc_kind = "sample";
    CLI::App* genc = app.add_subcommand("gen-corpus", "write a fixture corpus");
    genc->add_option("--out", genc_out, "output directory")->required();
    genc->add_option("--kind", genc_kind, "sample | task");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (plan->parsed()) return cmd_plan_grid(height, width, tile);
        if (tile_cmd->parsed()) return cmd_tile(tile_input, tile_size, tile_out);
        if (codec_cmd->parsed()) {
            if (enc->parsed()) return cmd_encode_box(box_coords);
            if (par->parsed()) return cmd_parse_tokens(parse_tokens, parse_strict);
            std::cerr << "codec: choose encode-box or parse\n";
            return 2;
        }
        if (pack_cmd->parsed()) {
            pack_flags.set("vit_tile", std::to_string(vit_tile));
            pack_flags.set("vit_patch", std::to_string(vit_patch));
            pack_flags.set("vit_embed_dim", std::to_string(vit_dv));
            return cmd_pack(pack_manifest, pack_out, pack_flags);
        }
        if (gc->parsed()) return cmd_gradcheck(fault);
        if (pre->parsed()) return cmd_pretrain(pretrain_cfg);
        if (ft->parsed()) return cmd_finetune(finetune_cfg);
        if (dt->parsed()) return cmd_detok_train(detok_cfg);
        if (dec->parsed()) {
            if (dec_prompt.empty() && dec_prompt_manifest.empty()) {
                std::cerr << "decode: need --prompt or --prompt-manifest\n";
                return 2;
            }
            return cmd_decode(dec_ckpt, dec_adapter, dec_detok, dec_prompt,
                              dec_prompt_manifest, dec_cond, dec_max_new, dec_seed,
                              dec_out);
        }
        if (genc->parsed()) return cmd_gen_corpus(genc_out, genc_kind);
    } catch (const ContractError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 2;
}
