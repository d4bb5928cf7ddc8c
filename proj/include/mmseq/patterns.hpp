#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "mmseq/image.hpp"
#include "mmseq/vitsim.hpp"

namespace mmseq::patterns {

struct Rgb {
    double r = 0, g = 0, b = 0;
};

Image solid(std::size_t h, std::size_t w, Rgb c);
Image gradient_h(std::size_t h, std::size_t w, Rgb from, Rgb to);
Image gradient_v(std::size_t h, std::size_t w, Rgb from, Rgb to);
Image checkerboard(std::size_t h, std::size_t w, std::size_t cell, Rgb a, Rgb b);
Image stripes(std::size_t h, std::size_t w, std::size_t width, bool vertical,
              Rgb a, Rgb b);
Image circle(std::size_t h, std::size_t w, Rgb bg, Rgb fg, double radius_frac);
Image rings(std::size_t h, std::size_t w, Rgb a, Rgb b, double period);
Image inverted(const Image& img);

/// The tokenizer configuration every shipped fixture uses.
vitsim::VisualTokenizerConfig fixture_vit_config();

/// Named deterministic images for the 16-document sample corpus.
std::vector<std::pair<std::string, Image>> sample_images();

/// Writes imgs/*.ppm (ascii, repo-friendly) and manifest.jsonl: the
/// 16-document corpus mixing text, boxed captions, input images, and
/// target images. Deterministic.
void write_sample_corpus(const std::filesystem::path& dir);

/// Four-document task corpus used by the adapter fine-tuning fixtures.
void write_task_corpus(const std::filesystem::path& dir);

/// Deterministic tile set for de-tokenizer training experiments.
std::vector<Image> toy_tiles(std::size_t count, std::size_t size);

}  // namespace mmseq::patterns
