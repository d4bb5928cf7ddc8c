#include "mmseq/checkpoint.hpp"

#include <fstream>

#include <json.hpp>

#include "mmseq/codec.hpp"
#include "mmseq/detok.hpp"
#include "mmseq/common.hpp"
#include "mmseq/mmt1.hpp"

namespace mmseq::checkpoint {

using nlohmann::json;

namespace {

std::string tensor_file_name(const std::string& name) {
    std::string file = name;
    for (char& c : file) {
        if (c == '.' || c == '/') c = '_';
    }
    return file + ".mmt1";
}

json shape_json(const Tensor& t) {
    json j = json::array();
    for (std::size_t e : t.shape()) j.push_back(e);
    return j;
}

json model_config_json(const mllm::ModelConfig& cfg) {
    return json{{"model_dim", cfg.model_dim}, {"n_layers", cfg.n_layers},
                {"n_heads", cfg.n_heads},     {"vocab_size", cfg.vocab_size},
                {"visual_dim", cfg.visual_dim}, {"n_queries", cfg.n_queries},
                {"max_len", cfg.max_len}};
}

mllm::ModelConfig model_config_from_json(const json& j) {
    mllm::ModelConfig cfg;
    cfg.model_dim = j.at("model_dim").get<std::size_t>();
    cfg.n_layers = j.at("n_layers").get<std::size_t>();
    cfg.n_heads = j.at("n_heads").get<std::size_t>();
    cfg.vocab_size = j.at("vocab_size").get<std::size_t>();
    cfg.visual_dim = j.at("visual_dim").get<std::size_t>();
    cfg.n_queries = j.at("n_queries").get<std::size_t>();
    cfg.max_len = j.at("max_len").get<std::size_t>();
    cfg.validate();
    return cfg;
}

json vit_config_json(const vitsim::VisualTokenizerConfig& cfg) {
    return json{{"tile_h", cfg.tile_h},   {"tile_w", cfg.tile_w},
                {"patch_size", cfg.patch_size}, {"channels", cfg.channels},
                {"embed_dim", cfg.embed_dim},   {"seed", cfg.seed}};
}

vitsim::VisualTokenizerConfig vit_config_from_json(const json& j) {
    vitsim::VisualTokenizerConfig cfg;
    cfg.tile_h = j.at("tile_h").get<std::size_t>();
    cfg.tile_w = j.at("tile_w").get<std::size_t>();
    cfg.patch_size = j.at("patch_size").get<std::size_t>();
    cfg.channels = j.at("channels").get<std::size_t>();
    cfg.embed_dim = j.at("embed_dim").get<std::size_t>();
    cfg.seed = j.at("seed").get<std::uint64_t>();
    cfg.validate();
    return cfg;
}

json write_tensor_list(const std::filesystem::path& dir,
                       const std::vector<std::pair<std::string, Tensor>>& tensors,
                       const std::string& subdir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / subdir);
    json index = json::array();
    for (const auto& [name, tensor] : tensors) {
        const std::string file = subdir + "/" + tensor_file_name(name);
        mmt1::save(dir / file, tensor);
        index.push_back({{"name", name}, {"file", file}, {"shape", shape_json(tensor)}});
    }
    return index;
}

std::vector<std::pair<std::string, Tensor>> read_tensor_list(
    const std::filesystem::path& dir, const json& index) {
    std::vector<std::pair<std::string, Tensor>> out;
    for (const json& entry : index) {
        const std::string name = entry.at("name").get<std::string>();
        Tensor t = mmt1::load(dir / entry.at("file").get<std::string>());
        out.emplace_back(name, std::move(t));
    }
    return out;
}

}  // namespace

void save_mllm(const std::filesystem::path& dir, mllm::ModelParams& params,
               const vitsim::VisualTokenizer& vit,
               const OptimizerState* optimizer, const std::string& rng_state,
               std::size_t step) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);

    json root;
    root["format_version"] = 1;
    root["kind"] = "mllm";
    root["config"] = model_config_json(params.config);
    root["vit"] = vit_config_json(vit.config());
    root["step"] = step;
    root["rng"] = rng_state;

    auto tensors = params.named_parameters();
    // the frozen tokenizer projection rides along so regression targets
    // stay reproducible from the checkpoint alone
    Tensor projection = vit.projection().clone();
    tensors.emplace_back("vitsim.projection", projection);
    root["tensors"] = write_tensor_list(dir, tensors, "tensors");

    if (optimizer) {
        json jopt;
        jopt["step"] = optimizer->step;
        jopt["tensors"] = write_tensor_list(dir, optimizer->tensors, "optimizer");
        root["optimizer"] = std::move(jopt);
    }

    {
        std::ofstream os(dir / "vocab.txt");
        os << codec::vocab_layout_text();
    }
    std::ofstream os(dir / "manifest.json");
    if (!os) throw IoError("checkpoint: cannot write manifest in " + dir.string());
    os << root.dump(1) << "\n";
}

MllmCheckpoint load_mllm_raw(const std::filesystem::path& dir) {
    std::ifstream is(dir / "manifest.json");
    if (!is) throw IoError("checkpoint: cannot open " + (dir / "manifest.json").string());
    json root;
    try {
        is >> root;
    } catch (const json::parse_error& e) {
        throw IoError(detail::format_msg("checkpoint manifest: invalid JSON: ", e.what()));
    }
    if (root.value("kind", "") != "mllm") throw IoError("checkpoint: kind is not mllm");

    MllmCheckpoint ckpt;
    ckpt.model_config = model_config_from_json(root.at("config"));
    ckpt.vit_config = vit_config_from_json(root.at("vit"));
    ckpt.tensors = read_tensor_list(dir, root.at("tensors"));
    ckpt.rng_state = root.value("rng", "");
    ckpt.step = root.value("step", 0u);
    if (root.contains("optimizer")) {
        OptimizerState opt;
        opt.step = root["optimizer"].at("step").get<std::size_t>();
        opt.tensors = read_tensor_list(dir, root["optimizer"].at("tensors"));
        ckpt.optimizer = std::move(opt);
    }
    return ckpt;
}

mllm::ModelParams load_mllm_params(const MllmCheckpoint& ckpt) {
    mllm::ModelParams params = mllm::ModelParams::init(ckpt.model_config, 0);
    std::map<std::string, Tensor> by_name;
    for (const auto& [name, tensor] : ckpt.tensors) by_name[name] = tensor;
    params.visit([&by_name](const std::string& name, Tensor& t) {
        auto it = by_name.find(name);
        MMSEQ_CHECK(it != by_name.end(), "checkpoint: missing tensor '", name, "'");
        MMSEQ_CHECK(it->second.shape() == t.shape(), "checkpoint: tensor '", name,
                    "' has shape ", shape_str(it->second.shape()), ", expected ",
                    shape_str(t.shape()));
        auto dst = t.mutable_data();
        auto src = it->second.data();
        std::copy(src.begin(), src.end(), dst.begin());
    });
    return params;
}

void save_adapter(const std::filesystem::path& dir, std::size_t lora_rank,
                  double lora_alpha,
                  const std::vector<std::pair<std::string, Tensor>>& tensors,
                  const std::string& base_ref) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    json root;
    root["format_version"] = 1;
    root["kind"] = "mllm_adapter";
    root["lora_rank"] = lora_rank;
    root["lora_alpha"] = lora_alpha;
    root["base"] = base_ref;
    root["tensors"] = write_tensor_list(dir, tensors, "tensors");
    std::ofstream os(dir / "manifest.json");
    if (!os) throw IoError("adapter: cannot write manifest in " + dir.string());
    os << root.dump(1) << "\n";
}

AdapterCheckpoint load_adapter(const std::filesystem::path& dir) {
    std::ifstream is(dir / "manifest.json");
    if (!is) throw IoError("adapter: cannot open " + (dir / "manifest.json").string());
    json root;
    is >> root;
    if (root.value("kind", "") != "mllm_adapter") {
        throw IoError("adapter: manifest kind is not mllm_adapter");
    }
    AdapterCheckpoint ckpt;
    ckpt.lora_rank = root.at("lora_rank").get<std::size_t>();
    ckpt.lora_alpha = root.at("lora_alpha").get<double>();
    ckpt.base_ref = root.value("base", "");
    ckpt.tensors = read_tensor_list(dir, root.at("tensors"));
    return ckpt;
}

void save_detok(const std::filesystem::path& dir, detok::DetokParams& params) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    const detok::DetokConfig& cfg = params.config;
    json root;
    root["format_version"] = 1;
    root["kind"] = "detok";
    root["config"] = json{{"tile", cfg.tile},
                          {"img_channels", cfg.img_channels},
                          {"latent_channels", cfg.latent_channels},
                          {"downsample", cfg.downsample},
                          {"hidden_channels", cfg.hidden_channels},
                          {"att_dim", cfg.att_dim},
                          {"visual_dim", cfg.visual_dim},
                          {"denoise_steps", cfg.denoise_steps},
                          {"n_cross_layers", cfg.n_cross_layers},
                          {"conditional", cfg.conditional},
                          {"codec_seed", cfg.codec_seed}};
    root["schedule"] = params.schedule.levels;
    root["tensors"] = write_tensor_list(dir, params.named_parameters(), "tensors");
    std::ofstream os(dir / "manifest.json");
    if (!os) throw IoError("detok checkpoint: cannot write manifest in " + dir.string());
    os << root.dump(1) << "\n";
}

detok::DetokParams load_detok(const std::filesystem::path& dir) {
    std::ifstream is(dir / "manifest.json");
    if (!is) throw IoError("detok checkpoint: cannot open " +
                           (dir / "manifest.json").string());
    json root;
    is >> root;
    if (root.value("kind", "") != "detok") {
        throw IoError("detok checkpoint: manifest kind is not detok");
    }
    const json& jc = root.at("config");
    detok::DetokConfig cfg;
    cfg.tile = jc.at("tile").get<std::size_t>();
    cfg.img_channels = jc.at("img_channels").get<std::size_t>();
    cfg.latent_channels = jc.at("latent_channels").get<std::size_t>();
    cfg.downsample = jc.at("downsample").get<std::size_t>();
    cfg.hidden_channels = jc.at("hidden_channels").get<std::size_t>();
    cfg.att_dim = jc.at("att_dim").get<std::size_t>();
    cfg.visual_dim = jc.at("visual_dim").get<std::size_t>();
    cfg.denoise_steps = jc.at("denoise_steps").get<std::size_t>();
    cfg.n_cross_layers = jc.at("n_cross_layers").get<std::size_t>();
    cfg.conditional = jc.at("conditional").get<bool>();
    cfg.codec_seed = jc.at("codec_seed").get<std::uint64_t>();

    detok::DetokParams params = detok::DetokParams::init(cfg, 0);
    params.schedule.levels = root.at("schedule").get<std::vector<double>>();
    params.schedule.validate();
    std::map<std::string, Tensor> by_name;
    for (auto& [name, tensor] : read_tensor_list(dir, root.at("tensors"))) {
        by_name[name] = tensor;
    }
    params.visit([&by_name](const std::string& name, Tensor& t) {
        auto it = by_name.find(name);
        MMSEQ_CHECK(it != by_name.end(), "detok checkpoint: missing tensor '", name, "'");
        MMSEQ_CHECK(it->second.shape() == t.shape(), "detok checkpoint: tensor '",
                    name, "' shape mismatch");
        std::copy(it->second.data().begin(), it->second.data().end(),
                  t.mutable_data().begin());
    });
    return params;
}

}  // namespace mmseq::checkpoint
