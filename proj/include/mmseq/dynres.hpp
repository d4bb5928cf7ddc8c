#pragma once

#include <cstddef>
#include <utility>
#include <vector>

#include "mmseq/image.hpp"
#include "mmseq/tensor.hpp"

namespace mmseq::dynres {

struct GridCell {
    std::size_t row = 0;
    std::size_t col = 0;
    // pixel rectangle on the upsampled canvas, [y0,y1) x [x0,x1)
    std::size_t y0 = 0, x0 = 0, y1 = 0, x1 = 0;
    double center_x = 0.0;  // (col + 0.5) / n_w
    double center_y = 0.0;  // (row + 0.5) / n_h
};

/// Solved tiling of an input image: the minimal grid of tile-sized
/// cells covering it, plus the resized canvas they partition.
struct GridPlan {
    std::size_t n_h = 0;
    std::size_t n_w = 0;
    std::size_t tile_h = 0;
    std::size_t tile_w = 0;
    std::size_t upsampled_h = 0;  // n_h * tile_h
    std::size_t upsampled_w = 0;  // n_w * tile_w
    std::vector<GridCell> cells;  // row-major
};

/// Smallest (n_h, n_w) with H <= n_h*tile_h and W <= n_w*tile_w;
/// the two constraints are independent so the componentwise ceiling
/// is the unique minimizer of n_h*n_w.
std::pair<std::size_t, std::size_t> select_grid(std::size_t h, std::size_t w,
                                                std::size_t tile_h,
                                                std::size_t tile_w);

/// Exhaustive-search oracle over n_h, n_w in [1, limit]^2.
std::pair<std::size_t, std::size_t> select_grid_bruteforce(std::size_t h,
                                                           std::size_t w,
                                                           std::size_t tile_h,
                                                           std::size_t tile_w,
                                                           std::size_t limit = 64);

/// Bilinear resize with corner-aligned sampling. Same-size resize is
/// an exact copy; constant images stay constant at any size.
Image resize_bilinear(const Image& img, std::size_t out_h, std::size_t out_w);

struct Partition {
    GridPlan plan;
    std::vector<Image> sub_images;  // row-major tiles, each tile_h x tile_w
    Image global_image;             // original resized to tile_h x tile_w
};

/// Resizes up to the planned canvas, slices it into tiles, and renders
/// the global-context tile.
Partition partition(const Image& img, std::size_t tile_h, std::size_t tile_w);

/// Four direction vectors; the embedding of a center is their bilinear
/// blend p = x_c*l + (1-x_c)*r + y_c*t + (1-y_c)*b.
struct PositionEmbeddingParams {
    std::vector<double> left, right, top, bottom;

    std::size_t dim() const { return left.size(); }
    void validate() const;
};

std::vector<double> position_embedding(double center_x, double center_y,
                                       const PositionEmbeddingParams& params);

}  // namespace mmseq::dynres
