#pragma once

#include <livseg/errors.hpp>
#include <livseg/volume_io.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace livseg {

enum class Domain { hu, unit, zscored };

inline const char* domain_name(Domain d)
{
    switch (d) {
    case Domain::hu: return "hu";
    case Domain::unit: return "unit";
    case Domain::zscored: return "zscored";
    }
    return "?";
}

/// Real-valued volume flowing through the pipeline. The domain tag records
/// what the values mean: raw HU, the [0,1] range, or z-scores.
struct FloatVolume : Volume<float> {
    Domain domain = Domain::hu;

    FloatVolume() = default;
    FloatVolume(Dims d, Spacing s, Domain dom) : Volume<float>(d, s), domain(dom) {}

    friend bool operator==(const FloatVolume&, const FloatVolume&) = default;
};

inline FloatVolume to_float_volume(const HuVolume& v)
{
    FloatVolume out(v.dims, v.spacing, Domain::hu);
    std::transform(v.voxels.begin(), v.voxels.end(), out.voxels.begin(),
                   [](std::int16_t x) { return static_cast<float>(x); });
    return out;
}

struct Image2D {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<float> pixels;

    Image2D() = default;
    Image2D(std::size_t h, std::size_t w, float fill = 0.0f) : height(h), width(w), pixels(h * w, fill) {}
    Image2D(std::size_t h, std::size_t w, std::vector<float> px) : height(h), width(w), pixels(std::move(px))
    {
        if (pixels.size() != h * w) throw std::invalid_argument("image pixel count does not match dimensions");
    }

    float& at(std::size_t y, std::size_t x) { return pixels[y * width + x]; }
    float at(std::size_t y, std::size_t x) const { return pixels[y * width + x]; }
    std::size_t size() const noexcept { return pixels.size(); }

    friend bool operator==(const Image2D&, const Image2D&) = default;
};

inline Image2D get_slice(const Volume<float>& v, std::size_t z)
{
    auto s = v.slice(z);
    return Image2D(v.dims.height, v.dims.width, std::vector<float>(s.begin(), s.end()));
}

inline void put_slice(Volume<float>& v, std::size_t z, const Image2D& img)
{
    if (img.height != v.dims.height || img.width != v.dims.width) {
        throw std::invalid_argument("slice shape does not match volume");
    }
    std::copy(img.pixels.begin(), img.pixels.end(), v.slice(z).begin());
}

inline bool in_unit_range(std::span<const float> values)
{
    return std::all_of(values.begin(), values.end(), [](float x) { return x >= 0.0f && x <= 1.0f; });
}

/// Min-max rescale into [0,1]; constant input maps to zeros.
inline void minmax_normalize(std::span<float> values)
{
    if (values.empty()) return;
    const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
    const double lo = *lo_it;
    const double hi = *hi_it;
    if (!(hi > lo)) {
        std::fill(values.begin(), values.end(), 0.0f);
        return;
    }
    for (auto& x : values) x = static_cast<float>((static_cast<double>(x) - lo) / (hi - lo));
}

inline FloatVolume minmax_normalize(FloatVolume v)
{
    minmax_normalize(std::span<float>(v.voxels));
    v.domain = Domain::unit;
    return v;
}

// --- HU windowing ------------------------------------------------------------

inline constexpr double kWindowLo = -100.0;
inline constexpr double kWindowHi = 400.0;

inline float window_value(double x, double lo, double hi)
{
    return static_cast<float>((std::clamp(x, lo, hi) - lo) / (hi - lo));
}

inline void check_window(double lo, double hi)
{
    if (!(lo < hi)) {
        throw std::invalid_argument("hu window requires lo < hi, got [" + std::to_string(lo) + ", "
                                    + std::to_string(hi) + "]");
    }
}

/// Clamp to [lo, hi] and rescale to [0,1].
inline FloatVolume hu_window(const FloatVolume& v, double lo = kWindowLo, double hi = kWindowHi)
{
    check_window(lo, hi);
    FloatVolume out(v.dims, v.spacing, Domain::unit);
    for (std::size_t i = 0; i < v.voxels.size(); ++i) out.voxels[i] = window_value(v.voxels[i], lo, hi);
    return out;
}

inline FloatVolume hu_window(const HuVolume& v, double lo = kWindowLo, double hi = kWindowHi)
{
    check_window(lo, hi);
    FloatVolume out(v.dims, v.spacing, Domain::unit);
    for (std::size_t i = 0; i < v.voxels.size(); ++i) out.voxels[i] = window_value(v.voxels[i], lo, hi);
    return out;
}

// --- CLAHE -------------------------------------------------------------------

struct ClaheParams {
    double clip = 4.0;
    std::size_t grid_y = 8;
    std::size_t grid_x = 8;
    std::size_t bins = 256;
    friend bool operator==(const ClaheParams&, const ClaheParams&) = default;
};

/// Tile layout for CLAHE: ceil-sized tiles, the last row/column possibly
/// smaller. Interpolation treats tile centres at (i + 0.5) * tile_extent.
struct TileGrid {
    std::size_t tile_h = 0;
    std::size_t tile_w = 0;
    std::size_t grid_y = 0;
    std::size_t grid_x = 0;

    static TileGrid make(std::size_t height, std::size_t width, std::size_t gy, std::size_t gx)
    {
        if (gy == 0 || gx == 0) throw std::invalid_argument("clahe grid must be at least 1x1");
        TileGrid g{(height + gy - 1) / gy, (width + gx - 1) / gx, gy, gx};
        if ((gy - 1) * g.tile_h >= height || (gx - 1) * g.tile_w >= width) {
            throw std::invalid_argument("clahe grid " + std::to_string(gy) + "x" + std::to_string(gx)
                                        + " leaves empty tiles on a " + std::to_string(height) + "x"
                                        + std::to_string(width) + " image");
        }
        return g;
    }

    /// Neighbouring tile indices and the weight of the second one along an axis.
    static void neighbours(std::size_t pos, std::size_t extent, std::size_t count, std::size_t& i0,
                           std::size_t& i1, double& w1)
    {
        const double f = (static_cast<double>(pos) + 0.5) / static_cast<double>(extent) - 0.5;
        const double fl = std::floor(f);
        w1 = f - fl;
        const auto last = static_cast<long>(count) - 1;
        const long a = std::clamp(static_cast<long>(fl), 0L, last);
        const long b = std::clamp(static_cast<long>(fl) + 1, 0L, last);
        i0 = static_cast<std::size_t>(a);
        i1 = static_cast<std::size_t>(b);
    }
};

inline std::size_t quantize_level(float x, std::size_t bins)
{
    const long q = std::lround(static_cast<double>(x) * static_cast<double>(bins - 1));
    return static_cast<std::size_t>(std::clamp(q, 0L, static_cast<long>(bins) - 1));
}

/// Clips a histogram at clip * total / bins and spreads the excess evenly
/// over every bin in one pass.
inline void clip_histogram(std::vector<double>& hist, double clip, double total)
{
    const double bins = static_cast<double>(hist.size());
    const double cap = clip * total / bins;
    double excess = 0.0;
    for (auto& h : hist) {
        if (h > cap) {
            excess += h - cap;
            h = cap;
        }
    }
    const double share = excess / bins;
    for (auto& h : hist) h += share;
}

/// Equalization map from a clipped histogram: (bins - 1) * inclusive CDF / total.
inline std::vector<double> equalization_map(const std::vector<double>& hist, double total)
{
    std::vector<double> map(hist.size());
    const double top = static_cast<double>(hist.size() - 1);
    double cdf = 0.0;
    for (std::size_t b = 0; b < hist.size(); ++b) {
        cdf += hist[b];
        map[b] = top * cdf / total;
    }
    return map;
}

inline void validate(const ClaheParams& p)
{
    if (!(p.clip > 0.0)) throw std::invalid_argument("clahe clip limit must be positive");
    if (p.bins < 2) throw std::invalid_argument("clahe needs at least 2 bins");
    if (p.grid_y == 0 || p.grid_x == 0) throw std::invalid_argument("clahe grid must be at least 1x1");
}

/// Contrast-limited adaptive histogram equalization of a [0,1] slice.
/// Output levels are integers in [0, bins) rescaled to [0,1].
inline Image2D clahe_slice(const Image2D& img, const ClaheParams& p = {})
{
    validate(p);
    if (!in_unit_range(img.pixels)) throw std::invalid_argument("clahe_slice expects values in [0,1]");
    const auto grid = TileGrid::make(img.height, img.width, p.grid_y, p.grid_x);

    std::vector<std::size_t> level(img.size());
    for (std::size_t i = 0; i < img.size(); ++i) level[i] = quantize_level(img.pixels[i], p.bins);

    std::vector<std::vector<double>> maps(grid.grid_y * grid.grid_x);
    for (std::size_t ty = 0; ty < grid.grid_y; ++ty) {
        for (std::size_t tx = 0; tx < grid.grid_x; ++tx) {
            const std::size_t y0 = ty * grid.tile_h, y1 = std::min(img.height, y0 + grid.tile_h);
            const std::size_t x0 = tx * grid.tile_w, x1 = std::min(img.width, x0 + grid.tile_w);
            std::vector<double> hist(p.bins, 0.0);
            for (std::size_t y = y0; y < y1; ++y) {
                for (std::size_t x = x0; x < x1; ++x) hist[level[y * img.width + x]] += 1.0;
            }
            const double total = static_cast<double>((y1 - y0) * (x1 - x0));
            clip_histogram(hist, p.clip, total);
            maps[ty * grid.grid_x + tx] = equalization_map(hist, total);
        }
    }

    const double top = static_cast<double>(p.bins - 1);
    Image2D out(img.height, img.width);
    for (std::size_t y = 0; y < img.height; ++y) {
        std::size_t ty0, ty1;
        double wy;
        TileGrid::neighbours(y, grid.tile_h, grid.grid_y, ty0, ty1, wy);
        for (std::size_t x = 0; x < img.width; ++x) {
            std::size_t tx0, tx1;
            double wx;
            TileGrid::neighbours(x, grid.tile_w, grid.grid_x, tx0, tx1, wx);
            const std::size_t b = level[y * img.width + x];
            const double m00 = maps[ty0 * grid.grid_x + tx0][b];
            const double m01 = maps[ty0 * grid.grid_x + tx1][b];
            const double m10 = maps[ty1 * grid.grid_x + tx0][b];
            const double m11 = maps[ty1 * grid.grid_x + tx1][b];
            const double v = (1.0 - wy) * ((1.0 - wx) * m00 + wx * m01) + wy * ((1.0 - wx) * m10 + wx * m11);
            const long q = std::clamp(std::lround(v), 0L, static_cast<long>(p.bins) - 1);
            out.at(y, x) = static_cast<float>(static_cast<double>(q) / top);
        }
    }
    return out;
}

// --- z-score -----------------------------------------------------------------

struct SliceStats {
    double mu = 0.0;
    double sigma = 0.0;
};

/// Mean and population standard deviation, two-pass in double.
inline SliceStats compute_stats(std::span<const float> values)
{
    if (values.empty()) throw std::invalid_argument("statistics of an empty set");
    double sum = 0.0;
    for (float x : values) sum += x;
    const double mu = sum / static_cast<double>(values.size());
    double ss = 0.0;
    for (float x : values) {
        const double d = x - mu;
        ss += d * d;
    }
    return {mu, std::sqrt(ss / static_cast<double>(values.size()))};
}

/// Z = (x - mu) / sigma over the whole volume.
inline FloatVolume zscore(const FloatVolume& v)
{
    if (v.voxels.empty()) throw std::invalid_argument("zscore of an empty volume");
    const auto st = compute_stats(v.voxels);
    if (st.sigma < 1e-12) throw DataError("constant volume: z-score is undefined when sigma is zero");
    FloatVolume out(v.dims, v.spacing, Domain::zscored);
    for (std::size_t i = 0; i < v.voxels.size(); ++i) {
        out.voxels[i] = static_cast<float>((static_cast<double>(v.voxels[i]) - st.mu) / st.sigma);
    }
    return out;
}

// --- median ------------------------------------------------------------------

/// k x k median with replicate padding. k must be odd.
inline Image2D median_filter(const Image2D& img, std::size_t k)
{
    if (k == 0 || k % 2 == 0) throw std::invalid_argument("median kernel must be odd, got " + std::to_string(k));
    if (img.height == 0 || img.width == 0) throw std::invalid_argument("median_filter of an empty image");
    const long r = static_cast<long>(k / 2);
    const long h = static_cast<long>(img.height);
    const long w = static_cast<long>(img.width);
    Image2D out(img.height, img.width);
    std::vector<float> window(k * k);
    for (long y = 0; y < h; ++y) {
        for (long x = 0; x < w; ++x) {
            std::size_t n = 0;
            for (long dy = -r; dy <= r; ++dy) {
                const long yy = std::clamp(y + dy, 0L, h - 1);
                for (long dx = -r; dx <= r; ++dx) {
                    const long xx = std::clamp(x + dx, 0L, w - 1);
                    window[n++] = img.pixels[static_cast<std::size_t>(yy * w + xx)];
                }
            }
            auto mid = window.begin() + static_cast<std::ptrdiff_t>(n / 2);
            std::nth_element(window.begin(), mid, window.end());
            out.pixels[static_cast<std::size_t>(y * w + x)] = *mid;
        }
    }
    return out;
}

inline Image2D median3x3(const Image2D& img) { return median_filter(img, 3); }

} // namespace livseg
