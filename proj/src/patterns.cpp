#include "mmseq/patterns.hpp"

#include <cmath>
#include <fstream>

#include "mmseq/common.hpp"
#include "mmseq/rng.hpp"

namespace mmseq::patterns {

namespace {

Rgb lerp(Rgb a, Rgb b, double t) {
    return {a.r + (b.r - a.r) * t, a.g + (b.g - a.g) * t, a.b + (b.b - a.b) * t};
}

void put(Image& img, std::size_t y, std::size_t x, Rgb c) {
    img.at(y, x, 0) = c.r;
    img.at(y, x, 1) = c.g;
    img.at(y, x, 2) = c.b;
}

}  // namespace

Image solid(std::size_t h, std::size_t w, Rgb c) {
    Image img = Image::create(h, w, 3);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) put(img, y, x, c);
    }
    return img;
}

Image gradient_h(std::size_t h, std::size_t w, Rgb from, Rgb to) {
    Image img = Image::create(h, w, 3);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            double t = w > 1 ? static_cast<double>(x) / static_cast<double>(w - 1) : 0;
            put(img, y, x, lerp(from, to, t));
        }
    }
    return img;
}

Image gradient_v(std::size_t h, std::size_t w, Rgb from, Rgb to) {
    Image img = Image::create(h, w, 3);
    for (std::size_t y = 0; y < h; ++y) {
        double t = h > 1 ? static_cast<double>(y) / static_cast<double>(h - 1) : 0;
        for (std::size_t x = 0; x < w; ++x) put(img, y, x, lerp(from, to, t));
    }
    return img;
}

Image checkerboard(std::size_t h, std::size_t w, std::size_t cell, Rgb a, Rgb b) {
    Image img = Image::create(h, w, 3);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            put(img, y, x, ((y / cell + x / cell) % 2 == 0) ? a : b);
        }
    }
    return img;
}

Image stripes(std::size_t h, std::size_t w, std::size_t width, bool vertical,
              Rgb a, Rgb b) {
    Image img = Image::create(h, w, 3);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            const std::size_t band = (vertical ? x : y) / width;
            put(img, y, x, band % 2 == 0 ? a : b);
        }
    }
    return img;
}

Image circle(std::size_t h, std::size_t w, Rgb bg, Rgb fg, double radius_frac) {
    Image img = Image::create(h, w, 3);
    const double cy = (static_cast<double>(h) - 1.0) / 2.0;
    const double cx = (static_cast<double>(w) - 1.0) / 2.0;
    const double r = radius_frac * static_cast<double>(std::min(h, w)) / 2.0;
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            const double d = std::hypot(static_cast<double>(y) - cy,
                                        static_cast<double>(x) - cx);
            put(img, y, x, d <= r ? fg : bg);
        }
    }
    return img;
}

Image rings(std::size_t h, std::size_t w, Rgb a, Rgb b, double period) {
    Image img = Image::create(h, w, 3);
    const double cy = (static_cast<double>(h) - 1.0) / 2.0;
    const double cx = (static_cast<double>(w) - 1.0) / 2.0;
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            const double d = std::hypot(static_cast<double>(y) - cy,
                                        static_cast<double>(x) - cx);
            const double t = 0.5 * (1.0 + std::sin(2.0 * 3.14159265358979 * d / period));
            put(img, y, x, lerp(a, b, t));
        }
    }
    return img;
}

Image inverted(const Image& img) {
    Image out = img;
    for (double& v : out.pixels) v = 1.0 - v;
    return out;
}

vitsim::VisualTokenizerConfig fixture_vit_config() {
    vitsim::VisualTokenizerConfig cfg;
    cfg.tile_h = 16;
    cfg.tile_w = 16;
    cfg.patch_size = 2;
    cfg.channels = 3;
    cfg.embed_dim = 16;
    cfg.seed = 20240917;
    return cfg;
}

std::vector<std::pair<std::string, Image>> sample_images() {
    const Rgb red{0.9, 0.15, 0.1}, blue{0.1, 0.2, 0.85}, green{0.1, 0.7, 0.25};
    const Rgb dark{0.08, 0.08, 0.1}, light{0.92, 0.92, 0.9};
    const Rgb yellow{0.95, 0.85, 0.1}, purple{0.5, 0.1, 0.6};
    const Rgb cyan{0.1, 0.8, 0.8}, orange{0.95, 0.55, 0.1};

    std::vector<std::pair<std::string, Image>> out;
    out.emplace_back("grad_h.ppm", gradient_h(16, 16, red, blue));
    out.emplace_back("grad_v.ppm", gradient_v(16, 16, dark, green));
    out.emplace_back("checker.ppm", checkerboard(16, 16, 4, dark, light));
    out.emplace_back("stripes_v.ppm", stripes(16, 16, 4, true, cyan, red));
    out.emplace_back("circle.ppm", circle(16, 16, light, purple, 0.7));
    out.emplace_back("rings.ppm", rings(16, 16, yellow, blue, 11.0));
    out.emplace_back("wide.ppm", gradient_h(16, 24, yellow, cyan));
    out.emplace_back("tall.ppm", gradient_v(24, 16, orange, dark));
    out.emplace_back("base.ppm", stripes(16, 16, 4, false, green, orange));
    out.emplace_back("inverted.ppm", inverted(stripes(16, 16, 4, false, green, orange)));
    out.emplace_back("solid_blue.ppm", solid(16, 16, blue));
    return out;
}

namespace {

void write_images(const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir / "imgs");
    for (const auto& [name, img] : sample_images()) {
        write_pnm_ascii(dir / "imgs" / name, img);
    }
}

}  // namespace

void write_sample_corpus(const std::filesystem::path& dir) {
    write_images(dir);
    std::ofstream os(dir / "manifest.jsonl");
    if (!os) throw IoError("cannot write manifest in " + dir.string());
    auto text_doc = [&os](const std::string& t) {
        os << R"({"items":[{"type":"text","text":")" << t << R"("}]})" << "\n";
    };
    text_doc("alpha wolf howls");
    text_doc("bright sun rises");
    text_doc("cold wind");
    text_doc("deep river flows");
    text_doc("every step counts");
    os << R"({"items":[{"type":"boxed_text","parts":[{"text":"find the cat "},{"box":[0.25,0.25,0.4,0.3]}]}]})" << "\n";
    os << R"({"items":[{"type":"boxed_text","parts":[{"text":"green car "},{"box":[0.7,0.6,0.2,0.2]},{"text":" parked"}]}]})" << "\n";
    os << R"({"items":[{"type":"boxed_text","parts":[{"text":"house "},{"box":[0.5,0.5,0.9,0.8]}]}]})" << "\n";
    os << R"({"items":[{"type":"image","path":"imgs/wide.ppm","role":"input"},{"type":"text","text":"wide banner"}]})" << "\n";
    os << R"({"items":[{"type":"image","path":"imgs/tall.ppm","role":"input"},{"type":"text","text":"tall tower"}]})" << "\n";
    os << R"({"items":[{"type":"image","path":"imgs/checker.ppm","role":"input"},{"type":"text","text":"ideal grid"}]})" << "\n";
    os << R"({"items":[{"type":"text","text":"jelly moon: "},{"type":"image","path":"imgs/grad_h.ppm","role":"target"}]})" << "\n";
    os << R"({"items":[{"type":"text","text":"kite sky: "},{"type":"image","path":"imgs/stripes_v.ppm","role":"target"}]})" << "\n";
    os << R"({"items":[{"type":"text","text":"lava lamp: "},{"type":"image","path":"imgs/rings.ppm","role":"target"}]})" << "\n";
    os << R"({"items":[{"type":"text","text":"misty field: "},{"type":"image","path":"imgs/circle.ppm","role":"target"}]})" << "\n";
    os << R"({"items":[{"type":"image","path":"imgs/base.ppm","role":"input"},{"type":"text","text":"negate"},{"type":"image","path":"imgs/inverted.ppm","role":"target"}]})" << "\n";
}

void write_task_corpus(const std::filesystem::path& dir) {
    write_images(dir);
    std::ofstream os(dir / "manifest.jsonl");
    if (!os) throw IoError("cannot write manifest in " + dir.string());
    os << R"({"items":[{"type":"text","text":"quick brown fox"}]})" << "\n";
    os << R"({"items":[{"type":"text","text":"rapid tide turns"}]})" << "\n";
    os << R"({"items":[{"type":"boxed_text","parts":[{"text":"silver bird "},{"box":[0.3,0.2,0.25,0.15]}]}]})" << "\n";
    os << R"({"items":[{"type":"text","text":"tiny lamp: "},{"type":"image","path":"imgs/solid_blue.ppm","role":"target"}]})" << "\n";
}

std::vector<Image> toy_tiles(std::size_t count, std::size_t size) {
    std::vector<Image> tiles;
    RandomSource rng(555);
    for (std::size_t i = 0; i < count; ++i) {
        const double t = static_cast<double>(i) / std::max<std::size_t>(count - 1, 1);
        Rgb a{0.1 + 0.8 * t, 0.2, 0.9 - 0.8 * t};
        Rgb b{0.9 - 0.7 * t, 0.8, 0.15 + 0.6 * t};
        switch (i % 5) {
            case 0: tiles.push_back(gradient_h(size, size, a, b)); break;
            case 1: tiles.push_back(gradient_v(size, size, a, b)); break;
            case 2: tiles.push_back(checkerboard(size, size, 2 + i % 3, a, b)); break;
            case 3: tiles.push_back(stripes(size, size, 2 + i % 4, i % 2 == 0, a, b)); break;
            default: tiles.push_back(circle(size, size, a, b, 0.4 + 0.05 * (i % 7))); break;
        }
    }
    return tiles;
}

}  // namespace mmseq::patterns
