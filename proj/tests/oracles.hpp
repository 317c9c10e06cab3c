#pragma once

// Reference implementations used only by tests. They favour directness over
// speed and share no code with the library operators.

#include <livseg/preprocess.hpp>
#include <livseg/unet.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

namespace oracle {

/// Median of the replicate-padded k x k neighbourhood by full sort.
inline livseg::Image2D median_sort(const livseg::Image2D& img, int k)
{
    const int h = static_cast<int>(img.height), w = static_cast<int>(img.width), r = k / 2;
    livseg::Image2D out(img.height, img.width);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            std::vector<float> vals;
            for (int yy = y - r; yy <= y + r; ++yy) {
                for (int xx = x - r; xx <= x + r; ++xx) {
                    const int cy = yy < 0 ? 0 : (yy >= h ? h - 1 : yy);
                    const int cx = xx < 0 ? 0 : (xx >= w ? w - 1 : xx);
                    vals.push_back(img.pixels[cy * w + cx]);
                }
            }
            std::sort(vals.begin(), vals.end());
            out.pixels[y * w + x] = vals[vals.size() / 2];
        }
    }
    return out;
}

/// Equalization lookup of one tile: clipped histogram with uniform excess
/// redistribution, then (bins-1) * inclusive CDF / pixel count.
inline std::vector<double> clahe_tile_map(const std::vector<int>& levels, int w, int y0, int y1, int x0, int x1,
                                          int bins, double clip)
{
    std::vector<double> hist(bins, 0.0);
    for (int b = 0; b < bins; ++b) {
        int count = 0;
        for (int y = y0; y < y1; ++y) {
            for (int x = x0; x < x1; ++x) count += levels[y * w + x] == b;
        }
        hist[b] = count;
    }
    const double n = static_cast<double>((y1 - y0) * (x1 - x0));
    const double cap = clip * n / bins;
    double excess = 0.0;
    for (int b = 0; b < bins; ++b) {
        if (hist[b] > cap) {
            excess += hist[b] - cap;
            hist[b] = cap;
        }
    }
    std::vector<double> map(bins);
    double cdf = 0.0;
    for (int b = 0; b < bins; ++b) {
        cdf += hist[b] + excess / bins;
        map[b] = (bins - 1) * cdf / n;
    }
    return map;
}

/// Brute-force CLAHE: each pixel blends the maps of the (up to) four tiles
/// whose centres bracket it.
inline std::vector<int> clahe_levels(const livseg::Image2D& img, int grid_y, int grid_x, int bins, double clip)
{
    const int h = static_cast<int>(img.height), w = static_cast<int>(img.width);
    const int th = (h + grid_y - 1) / grid_y, tw = (w + grid_x - 1) / grid_x;
    std::vector<int> levels(h * w);
    for (int i = 0; i < h * w; ++i) levels[i] = static_cast<int>(std::lround(img.pixels[i] * double(bins - 1)));

    auto bracket = [](int p, int tile, int count, int& t0, int& t1, double& wt) {
        // Tile t is centred at t*tile + (tile-1)/2.
        const double c = (p + 0.5) / tile - 0.5;
        if (c <= 0.0) {
            t0 = t1 = 0;
            wt = c - std::floor(c);
            return;
        }
        t0 = static_cast<int>(std::floor(c));
        wt = c - t0;
        t1 = t0 + 1;
        if (t0 >= count - 1) t0 = t1 = count - 1;
    };
    std::vector<std::vector<double>> maps;
    for (int ty = 0; ty < grid_y; ++ty) {
        for (int tx = 0; tx < grid_x; ++tx) {
            const int y0 = ty * th, x0 = tx * tw;
            maps.push_back(clahe_tile_map(levels, w, y0, std::min(h, y0 + th), x0, std::min(w, x0 + tw), bins, clip));
        }
    }
    auto tile_map = [&](int ty, int tx) -> const std::vector<double>& { return maps[ty * grid_x + tx]; };

    std::vector<int> out(h * w);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            int ty0, ty1, tx0, tx1;
            double wy, wx;
            bracket(y, th, grid_y, ty0, ty1, wy);
            bracket(x, tw, grid_x, tx0, tx1, wx);
            const int b = levels[y * w + x];
            const double m00 = tile_map(ty0, tx0)[b], m01 = tile_map(ty0, tx1)[b];
            const double m10 = tile_map(ty1, tx0)[b], m11 = tile_map(ty1, tx1)[b];
            const double v = (1.0 - wy) * ((1.0 - wx) * m00 + wx * m01) + wy * ((1.0 - wx) * m10 + wx * m11);
            out[y * w + x] = std::clamp(static_cast<int>(std::lround(v)), 0, bins - 1);
        }
    }
    return out;
}

/// Hand-built weights that copy input channel 0 along the top skip path and
/// threshold it at 0.5 in the head: a {0,1} image reproduces itself as a mask.
template <typename T>
livseg::UNetParams<T> copy_network(const livseg::UNetConfig& cfg = livseg::UNetConfig::desk())
{
    livseg::UNetParams<T> p(cfg);
    const auto& plan = p.plan();
    auto centre = [&](std::size_t layer, std::size_t out, std::size_t in) {
        const auto& L = p.layers()[layer];
        p.mutable_weight(layer)[(out * L.in + in) * 9 + 4] = T{1};
    };
    if (cfg.levels == 1) {
        centre(plan.bottleneck.conv1, 0, 0);
        centre(plan.bottleneck.conv2, 0, 0);
    } else {
        centre(plan.encoder[0].conv1, 0, 0);
        centre(plan.encoder[0].conv2, 0, 0);
        // Decoder input is [up-convolved, skip]; the skip half starts at channels(0).
        centre(plan.decoder[0].conv1, 0, cfg.channels(0));
        centre(plan.decoder[0].conv2, 0, 0);
    }
    p.mutable_weight(plan.head)[0] = T{20};
    p.mutable_bias(plan.head)[0] = T{-10};
    return p;
}

} // namespace oracle
