#include "mmseq/dataset.hpp"

#include <fstream>

#include <json.hpp>

#include "mmseq/common.hpp"
#include "mmseq/mmt1.hpp"

namespace mmseq::dataset {

using nlohmann::json;

namespace {

seqpack::MultimodalDocument parse_document(const json& j, std::size_t line_no) {
    auto fail = [line_no](const std::string& why) -> void {
        throw IoError(detail::format_msg("manifest line ", line_no, ": ", why));
    };
    if (!j.is_object() || !j.contains("items") || !j["items"].is_array()) {
        fail("expected an object with an \"items\" array");
    }
    seqpack::MultimodalDocument doc;
    for (const json& item : j["items"]) {
        const std::string type = item.value("type", "");
        if (type == "text") {
            if (!item.contains("text")) fail("text item without \"text\"");
            doc.items.push_back(seqpack::TextItem{item["text"].get<std::string>()});
        } else if (type == "image") {
            if (!item.contains("path")) fail("image item without \"path\"");
            const std::string role = item.value("role", "input");
            if (role != "input" && role != "target") {
                fail("image role must be \"input\" or \"target\", got \"" + role + "\"");
            }
            doc.items.push_back(seqpack::ImageItem{item["path"].get<std::string>(),
                                                   role == "target"});
        } else if (type == "boxed_text") {
            if (!item.contains("parts") || !item["parts"].is_array()) {
                fail("boxed_text item without \"parts\" array");
            }
            seqpack::BoxedCaptionItem boxed;
            for (const json& part : item["parts"]) {
                seqpack::BoxedPart p;
                if (part.contains("text")) {
                    p.text = part["text"].get<std::string>();
                } else if (part.contains("box")) {
                    const auto coords = part["box"].get<std::vector<double>>();
                    if (coords.size() != 4) fail("box must have 4 coordinates");
                    p.box = codec::BBox{coords[0], coords[1], coords[2], coords[3]};
                } else {
                    fail("boxed_text part must carry \"text\" or \"box\"");
                }
                boxed.parts.push_back(std::move(p));
            }
            doc.items.push_back(std::move(boxed));
        } else {
            fail("unknown item type \"" + type + "\"");
        }
    }
    if (doc.items.empty()) fail("document has no items");
    return doc;
}

}  // namespace

std::vector<seqpack::MultimodalDocument> parse_manifest(
    const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("manifest: cannot open " + path.string());
    std::vector<seqpack::MultimodalDocument> docs;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw IoError(detail::format_msg("manifest line ", line_no,
                                             ": invalid JSON: ", e.what()));
        }
        docs.push_back(parse_document(j, line_no));
    }
    if (docs.empty()) throw IoError("manifest: no documents in " + path.string());
    return docs;
}

seqpack::ImageResolver dir_resolver(const std::filesystem::path& base_dir) {
    return [base_dir](const std::string& ref) { return read_pnm(base_dir / ref); };
}

namespace {

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

}  // namespace

void write_corpus(const std::filesystem::path& dir, const Corpus& corpus) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "tensors");

    json root;
    root["version"] = 1;
    root["vit"] = vit_config_json(corpus.vit_config);
    json jseqs = json::array();
    for (std::size_t s = 0; s < corpus.sequences.size(); ++s) {
        const seqpack::PackedSequence& seq = corpus.sequences[s];
        json jseq;
        json jsegs = json::array();
        for (std::size_t i = 0; i < seq.segments.size(); ++i) {
            const seqpack::Segment& seg = seq.segments[i];
            if (const auto* tok = std::get_if<seqpack::TokenSegment>(&seg)) {
                jsegs.push_back({{"type", "tokens"}, {"ids", tok->ids}});
            } else if (const auto* vis = std::get_if<seqpack::VisualSegment>(&seg)) {
                json jtiles = json::array();
                for (std::size_t t = 0; t < vis->tiles.size(); ++t) {
                    const std::string file = detail::format_msg(
                        "tensors/s", s, "_seg", i, "_t", t, ".mmt1");
                    mmt1::save(dir / file, vis->tiles[t].embeddings);
                    jtiles.push_back({{"center", {vis->tiles[t].center_x,
                                                  vis->tiles[t].center_y}},
                                      {"file", file}});
                }
                jsegs.push_back({{"type", "visual"},
                                 {"source", vis->source_ref},
                                 {"tiles", jtiles}});
            } else {
                const auto& query = std::get<seqpack::QuerySegment>(seg);
                jsegs.push_back({{"type", "query"}, {"slots", query.slots}});
            }
        }
        jseq["segments"] = std::move(jsegs);
        jseq["lm_targets"] = seq.lm_targets;
        json jregs = json::array();
        for (std::size_t r = 0; r < seq.regression_targets.size(); ++r) {
            const std::string file = detail::format_msg("tensors/s", s, "_reg", r,
                                                        ".mmt1");
            mmt1::save(dir / file, seq.regression_targets[r].target);
            jregs.push_back({{"segment", seq.regression_targets[r].segment_index},
                             {"file", file}});
        }
        jseq["regression_targets"] = std::move(jregs);
        jseq["total_len"] = seq.total_len;
        jseqs.push_back(std::move(jseq));
    }
    root["sequences"] = std::move(jseqs);

    std::ofstream os(dir / "corpus.json");
    if (!os) throw IoError("corpus: cannot write " + (dir / "corpus.json").string());
    os << root.dump(1) << "\n";
}

Corpus read_corpus(const std::filesystem::path& dir) {
    std::ifstream is(dir / "corpus.json");
    if (!is) throw IoError("corpus: cannot open " + (dir / "corpus.json").string());
    json root;
    try {
        is >> root;
    } catch (const json::parse_error& e) {
        throw IoError(detail::format_msg("corpus.json: invalid JSON: ", e.what()));
    }
    if (root.value("version", 0) != 1) throw IoError("corpus.json: unsupported version");

    Corpus corpus;
    corpus.vit_config = vit_config_from_json(root.at("vit"));
    for (const json& jseq : root.at("sequences")) {
        seqpack::PackedSequence seq;
        for (const json& jseg : jseq.at("segments")) {
            const std::string type = jseg.at("type").get<std::string>();
            if (type == "tokens") {
                seqpack::TokenSegment tok;
                tok.ids = jseg.at("ids").get<std::vector<codec::TokenId>>();
                seq.segments.push_back(std::move(tok));
            } else if (type == "visual") {
                seqpack::VisualSegment vis;
                vis.source_ref = jseg.value("source", "");
                for (const json& jtile : jseg.at("tiles")) {
                    seqpack::VisualTile tile;
                    tile.center_x = jtile.at("center")[0].get<double>();
                    tile.center_y = jtile.at("center")[1].get<double>();
                    tile.embeddings = mmt1::load(dir / jtile.at("file").get<std::string>());
                    vis.tiles.push_back(std::move(tile));
                }
                seq.segments.push_back(std::move(vis));
            } else if (type == "query") {
                seq.segments.push_back(seqpack::QuerySegment{
                    jseg.at("slots").get<std::size_t>()});
            } else {
                throw IoError("corpus.json: unknown segment type \"" + type + "\"");
            }
        }
        seq.lm_targets = jseq.at("lm_targets").get<std::vector<std::int32_t>>();
        for (const json& jreg : jseq.at("regression_targets")) {
            seqpack::RegressionTarget target;
            target.segment_index = jreg.at("segment").get<std::size_t>();
            target.target = mmt1::load(dir / jreg.at("file").get<std::string>());
            seq.regression_targets.push_back(std::move(target));
        }
        seq.total_len = jseq.at("total_len").get<std::size_t>();
        corpus.sequences.push_back(std::move(seq));
    }
    return corpus;
}

}  // namespace mmseq::dataset
