#include "mmseq/dynres.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>

#include "mmseq/common.hpp"

namespace mmseq::dynres {

std::pair<std::size_t, std::size_t> select_grid(std::size_t h, std::size_t w,
                                                std::size_t tile_h,
                                                std::size_t tile_w) {
    MMSEQ_CHECK(h > 0 && w > 0 && tile_h > 0 && tile_w > 0,
                "select_grid: all inputs must be positive, got h=", h, " w=", w,
                " tile=", tile_h, "x", tile_w);
    const std::size_t n_h = (h + tile_h - 1) / tile_h;
    const std::size_t n_w = (w + tile_w - 1) / tile_w;
    return {n_h, n_w};
}

std::pair<std::size_t, std::size_t> select_grid_bruteforce(std::size_t h,
                                                           std::size_t w,
                                                           std::size_t tile_h,
                                                           std::size_t tile_w,
                                                           std::size_t limit) {
    MMSEQ_CHECK(h > 0 && w > 0 && tile_h > 0 && tile_w > 0,
                "select_grid_bruteforce: all inputs must be positive");
    std::size_t best_h = 0, best_w = 0;
    std::size_t best_area = std::numeric_limits<std::size_t>::max();
    for (std::size_t nh = 1; nh <= limit; ++nh) {
        for (std::size_t nw = 1; nw <= limit; ++nw) {
            if (nh * tile_h < h || nw * tile_w < w) continue;
            if (nh * nw < best_area) {
                best_area = nh * nw;
                best_h = nh;
                best_w = nw;
            }
        }
    }
    MMSEQ_CHECK(best_area != std::numeric_limits<std::size_t>::max(),
                "select_grid_bruteforce: no feasible grid within limit ", limit);
    return {best_h, best_w};
}

Image resize_bilinear(const Image& img, std::size_t out_h, std::size_t out_w) {
    MMSEQ_CHECK(out_h >= 1 && out_w >= 1, "resize: target dims must be positive");
    if (out_h == img.height && out_w == img.width) return img;

    Image out = Image::create(out_h, out_w, img.channels);
    const double sy = out_h > 1
        ? static_cast<double>(img.height - 1) / static_cast<double>(out_h - 1)
        : 0.0;
    const double sx = out_w > 1
        ? static_cast<double>(img.width - 1) / static_cast<double>(out_w - 1)
        : 0.0;
    const std::int64_t oh = static_cast<std::int64_t>(out_h);
#pragma omp parallel for schedule(static) if (out_h * out_w >= 4096)
    for (std::int64_t y = 0; y < oh; ++y) {
        const double fy = sy * static_cast<double>(y);
        const std::size_t y0 = static_cast<std::size_t>(fy);
        const std::size_t y1 = std::min(y0 + 1, img.height - 1);
        const double wy = fy - static_cast<double>(y0);
        for (std::size_t x = 0; x < out_w; ++x) {
            const double fx = sx * static_cast<double>(x);
            const std::size_t x0 = static_cast<std::size_t>(fx);
            const std::size_t x1 = std::min(x0 + 1, img.width - 1);
            const double wx = fx - static_cast<double>(x0);
            for (std::size_t c = 0; c < img.channels; ++c) {
                const double top = img.at(y0, x0, c) * (1.0 - wx) + img.at(y0, x1, c) * wx;
                const double bot = img.at(y1, x0, c) * (1.0 - wx) + img.at(y1, x1, c) * wx;
                out.at(static_cast<std::size_t>(y), x, c) = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    return out;
}

Partition partition(const Image& img, std::size_t tile_h, std::size_t tile_w) {
    auto [n_h, n_w] = select_grid(img.height, img.width, tile_h, tile_w);

    Partition result;
    GridPlan& plan = result.plan;
    plan.n_h = n_h;
    plan.n_w = n_w;
    plan.tile_h = tile_h;
    plan.tile_w = tile_w;
    plan.upsampled_h = n_h * tile_h;
    plan.upsampled_w = n_w * tile_w;

    Image canvas = resize_bilinear(img, plan.upsampled_h, plan.upsampled_w);

    for (std::size_t r = 0; r < n_h; ++r) {
        for (std::size_t c = 0; c < n_w; ++c) {
            GridCell cell;
            cell.row = r;
            cell.col = c;
            cell.y0 = r * tile_h;
            cell.y1 = (r + 1) * tile_h;
            cell.x0 = c * tile_w;
            cell.x1 = (c + 1) * tile_w;
            cell.center_x = (static_cast<double>(c) + 0.5) / static_cast<double>(n_w);
            cell.center_y = (static_cast<double>(r) + 0.5) / static_cast<double>(n_h);
            plan.cells.push_back(cell);

            Image tile = Image::create(tile_h, tile_w, img.channels);
            for (std::size_t y = 0; y < tile_h; ++y) {
                for (std::size_t x = 0; x < tile_w; ++x) {
                    for (std::size_t ch = 0; ch < img.channels; ++ch) {
                        tile.at(y, x, ch) = canvas.at(cell.y0 + y, cell.x0 + x, ch);
                    }
                }
            }
            result.sub_images.push_back(std::move(tile));
        }
    }
    result.global_image = resize_bilinear(img, tile_h, tile_w);
    return result;
}

void PositionEmbeddingParams::validate() const {
    MMSEQ_CHECK(!left.empty(), "position embedding vectors must be non-empty");
    MMSEQ_CHECK(left.size() == right.size() && left.size() == top.size() &&
                    left.size() == bottom.size(),
                "position embedding vectors must share one dimension");
}

std::vector<double> position_embedding(double center_x, double center_y,
                                       const PositionEmbeddingParams& params) {
    params.validate();
    MMSEQ_CHECK(center_x > 0.0 && center_x < 1.0 && center_y > 0.0 && center_y < 1.0,
                "position_embedding: center (", center_x, ",", center_y,
                ") outside the open unit square");
    std::vector<double> p(params.dim());
    for (std::size_t i = 0; i < p.size(); ++i) {
        p[i] = center_x * params.left[i] + (1.0 - center_x) * params.right[i] +
               center_y * params.top[i] + (1.0 - center_y) * params.bottom[i];
    }
    return p;
}

}  // namespace mmseq::dynres
