#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "mmseq/seqpack.hpp"
#include "mmseq/vitsim.hpp"

namespace mmseq::dataset {

/// Parses a JSONL dataset manifest, one document per line:
///   {"items":[{"type":"text","text":"..."}
///            ,{"type":"image","path":"rel.ppm","role":"input"|"target"}
///            ,{"type":"boxed_text","parts":[{"text":"..."},{"box":[xc,yc,w,h]}]}]}
/// Errors carry the 1-based line number.
std::vector<seqpack::MultimodalDocument> parse_manifest(
    const std::filesystem::path& path);

/// Resolver mapping manifest-relative image paths to loaded images.
seqpack::ImageResolver dir_resolver(const std::filesystem::path& base_dir);

struct Corpus {
    vitsim::VisualTokenizerConfig vit_config;
    std::vector<seqpack::PackedSequence> sequences;
};

/// Packed corpus directory: corpus.json describing segments and
/// targets, with every tensor stored as an MMT1 blob under tensors/.
void write_corpus(const std::filesystem::path& dir, const Corpus& corpus);
Corpus read_corpus(const std::filesystem::path& dir);

}  // namespace mmseq::dataset
