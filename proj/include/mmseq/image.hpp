#pragma once

#include <cstddef>
#include <filesystem>
#include <vector>

namespace mmseq {

/// Pixel raster with float samples in [0,1], row-major, channels
/// interleaved: pixels[(y*W + x)*channels + c].
struct Image {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 0;  // 1 or 3
    std::vector<double> pixels;

    static Image create(std::size_t h, std::size_t w, std::size_t c,
                        double fill = 0.0);

    double at(std::size_t y, std::size_t x, std::size_t c) const {
        return pixels[(y * width + x) * channels + c];
    }
    double& at(std::size_t y, std::size_t x, std::size_t c) {
        return pixels[(y * width + x) * channels + c];
    }

    void validate() const;  // throws ContractError on invariant breaks

    /// Per-channel replication to 3 channels; identity if already 3.
    Image to_rgb() const;
};

bool images_equal(const Image& a, const Image& b);
double image_mse(const Image& a, const Image& b);

/// Reads PGM (P2/P5) or PPM (P3/P6), maxval up to 255.
Image read_pnm(const std::filesystem::path& path);
/// Writes binary PPM (P6) for 3-channel or PGM (P5) for 1-channel.
void write_pnm(const std::filesystem::path& path, const Image& img);
/// ASCII variants (P3/P2), repo-friendly for committed fixtures.
void write_pnm_ascii(const std::filesystem::path& path, const Image& img);

}  // namespace mmseq
