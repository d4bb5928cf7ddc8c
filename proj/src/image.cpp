#include "mmseq/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "mmseq/common.hpp"

namespace mmseq {

Image Image::create(std::size_t h, std::size_t w, std::size_t c, double fill) {
    MMSEQ_CHECK(h >= 1 && w >= 1, "image dims must be positive, got ", h, "x", w);
    MMSEQ_CHECK(c == 1 || c == 3, "image channels must be 1 or 3, got ", c);
    Image img;
    img.height = h;
    img.width = w;
    img.channels = c;
    img.pixels.assign(h * w * c, fill);
    return img;
}

void Image::validate() const {
    MMSEQ_CHECK(height >= 1 && width >= 1, "image dims must be positive");
    MMSEQ_CHECK(channels == 1 || channels == 3, "image channels must be 1 or 3");
    MMSEQ_CHECK(pixels.size() == height * width * channels,
                "pixel count ", pixels.size(), " does not match ", height, "x",
                width, "x", channels);
    for (double v : pixels) {
        MMSEQ_CHECK(v >= 0.0 && v <= 1.0, "pixel value ", v, " outside [0,1]");
    }
}

Image Image::to_rgb() const {
    if (channels == 3) return *this;
    Image out = create(height, width, 3);
    for (std::size_t i = 0; i < height * width; ++i) {
        for (std::size_t c = 0; c < 3; ++c) out.pixels[i * 3 + c] = pixels[i];
    }
    return out;
}

bool images_equal(const Image& a, const Image& b) {
    return a.height == b.height && a.width == b.width && a.channels == b.channels &&
           a.pixels == b.pixels;
}

double image_mse(const Image& a, const Image& b) {
    MMSEQ_CHECK(a.pixels.size() == b.pixels.size() && a.channels == b.channels,
                "image_mse: size mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.pixels.size(); ++i) {
        double d = a.pixels[i] - b.pixels[i];
        acc += d * d;
    }
    return acc / static_cast<double>(a.pixels.size());
}

namespace {

// Skips whitespace and '#' comments between PNM header tokens.
int next_header_int(std::istream& is) {
    while (is) {
        int ch = is.peek();
        if (ch == '#') {
            std::string line;
            std::getline(is, line);
        } else if (std::isspace(ch)) {
            is.get();
        } else {
            break;
        }
    }
    int v = -1;
    is >> v;
    if (!is || v < 0) throw IoError("pnm: malformed header");
    return v;
}

}  // namespace

Image read_pnm(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("pnm: cannot open " + path.string());
    char p = 0, kind = 0;
    is.get(p);
    is.get(kind);
    if (p != 'P' || (kind != '2' && kind != '3' && kind != '5' && kind != '6')) {
        throw IoError("pnm: unsupported format in " + path.string());
    }
    const bool color = (kind == '3' || kind == '6');
    const bool binary = (kind == '5' || kind == '6');
    const int w = next_header_int(is);
    const int h = next_header_int(is);
    const int maxval = next_header_int(is);
    if (w < 1 || h < 1) throw IoError("pnm: bad dimensions in " + path.string());
    if (maxval < 1 || maxval > 255) {
        throw IoError("pnm: only maxval <= 255 supported: " + path.string());
    }
    Image img = Image::create(static_cast<std::size_t>(h), static_cast<std::size_t>(w),
                              color ? 3 : 1);
    const std::size_t n = img.pixels.size();
    if (binary) {
        is.get();  // single whitespace after maxval
        std::vector<unsigned char> raw(n);
        is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n));
        if (!is) throw IoError("pnm: truncated pixel data in " + path.string());
        for (std::size_t i = 0; i < n; ++i) {
            img.pixels[i] = static_cast<double>(raw[i]) / maxval;
        }
    } else {
        for (std::size_t i = 0; i < n; ++i) {
            int v = next_header_int(is);
            if (v > maxval) throw IoError("pnm: sample above maxval in " + path.string());
            img.pixels[i] = static_cast<double>(v) / maxval;
        }
    }
    return img;
}

namespace {

unsigned char to_byte(double v) {
    double s = std::clamp(v, 0.0, 1.0) * 255.0;
    return static_cast<unsigned char>(std::lround(s));
}

}  // namespace

void write_pnm(const std::filesystem::path& path, const Image& img) {
    img.validate();
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("pnm: cannot open for writing " + path.string());
    os << (img.channels == 3 ? "P6" : "P5") << "\n"
       << img.width << " " << img.height << "\n255\n";
    std::vector<unsigned char> raw(img.pixels.size());
    for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = to_byte(img.pixels[i]);
    os.write(reinterpret_cast<const char*>(raw.data()),
             static_cast<std::streamsize>(raw.size()));
    if (!os) throw IoError("pnm: write failed " + path.string());
}

void write_pnm_ascii(const std::filesystem::path& path, const Image& img) {
    img.validate();
    std::ofstream os(path);
    if (!os) throw IoError("pnm: cannot open for writing " + path.string());
    os << (img.channels == 3 ? "P3" : "P2") << "\n"
       << img.width << " " << img.height << "\n255\n";
    std::size_t per_line = 0;
    for (std::size_t i = 0; i < img.pixels.size(); ++i) {
        os << static_cast<int>(to_byte(img.pixels[i]));
        if (++per_line == 12) {
            os << "\n";
            per_line = 0;
        } else {
            os << " ";
        }
    }
    os << "\n";
    if (!os) throw IoError("pnm: write failed " + path.string());
}

}  // namespace mmseq
