#pragma once

#include <livseg/preprocess.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace livseg {

/// Collaborative-filtering parameters. Distances are per-pixel mean squared
/// differences on the [0,1] intensity scale.
struct Bm3dParams {
    std::size_t block = 8;
    std::size_t step = 3;
    std::size_t search_radius = 16;
    std::size_t max_matches = 16;
    double match_threshold = 2500.0 / (255.0 * 255.0);
    double lambda_hard = 2.7;
    double sigma = 0.05;

    friend bool operator==(const Bm3dParams&, const Bm3dParams&) = default;
};

inline bool is_power_of_two(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

inline void validate(const Bm3dParams& p)
{
    if (p.block == 0 || p.step == 0 || p.search_radius == 0 || p.max_matches == 0) {
        throw std::invalid_argument("bm3d block, step, search_radius and max_matches must be positive");
    }
    if (!is_power_of_two(p.max_matches)) throw std::invalid_argument("bm3d max_matches must be a power of two");
    if (!(p.sigma > 0.0)) throw std::invalid_argument("bm3d sigma must be positive");
    if (p.lambda_hard < 0.0 || p.match_threshold < 0.0) {
        throw std::invalid_argument("bm3d thresholds must be non-negative");
    }
}

struct BlockPos {
    std::size_t y = 0;
    std::size_t x = 0;
    friend bool operator==(const BlockPos&, const BlockPos&) = default;
};

/// A group of similar blocks. `coeffs` holds the 3D spectrum, laid out as
/// [match][row][col], once a transform stage has filled it.
struct BlockStack {
    BlockPos ref;
    std::vector<BlockPos> positions;
    std::vector<double> distances;
    std::vector<double> coeffs;
};

/// Block origins along one axis: multiples of `step` plus the final offset,
/// so every pixel is covered.
inline std::vector<std::size_t> block_grid(std::size_t extent, std::size_t block, std::size_t step)
{
    if (extent < block) {
        throw std::invalid_argument("image extent " + std::to_string(extent) + " is smaller than the bm3d block "
                                    + std::to_string(block));
    }
    std::vector<std::size_t> out;
    for (std::size_t p = 0; p + block <= extent; p += step) out.push_back(p);
    if (out.back() != extent - block) out.push_back(extent - block);
    return out;
}

namespace detail {

inline double block_distance(const Image2D& img, BlockPos a, BlockPos b, std::size_t block)
{
    double d = 0.0;
    for (std::size_t r = 0; r < block; ++r) {
        const float* pa = &img.pixels[(a.y + r) * img.width + a.x];
        const float* pb = &img.pixels[(b.y + r) * img.width + b.x];
        for (std::size_t c = 0; c < block; ++c) {
            const double diff = static_cast<double>(pa[c]) - static_cast<double>(pb[c]);
            d += diff * diff;
        }
    }
    return d / static_cast<double>(block * block);
}

inline std::size_t largest_pow2_at_most(std::size_t n)
{
    std::size_t p = 1;
    while (p * 2 <= n) p *= 2;
    return p;
}

} // namespace detail

/// Finds blocks similar to the one at `ref`. The reference always comes
/// first; ties in distance go to the spatially nearer candidate.
inline BlockStack block_match(const Image2D& img, BlockPos ref, const Bm3dParams& p)
{
    if (ref.y + p.block > img.height || ref.x + p.block > img.width) {
        throw std::invalid_argument("reference block extends outside the image");
    }
    const auto ys = block_grid(img.height, p.block, p.step);
    const auto xs = block_grid(img.width, p.block, p.step);
    struct Candidate {
        double dist;
        long spatial;
        BlockPos pos;
    };
    std::vector<Candidate> cands;
    const long r = static_cast<long>(p.search_radius);
    for (auto y : ys) {
        const long dy = static_cast<long>(y) - static_cast<long>(ref.y);
        if (dy < -r || dy > r) continue;
        for (auto x : xs) {
            const long dx = static_cast<long>(x) - static_cast<long>(ref.x);
            if (dx < -r || dx > r) continue;
            if (dy == 0 && dx == 0) continue;
            const double d = detail::block_distance(img, ref, {y, x}, p.block);
            if (d <= p.match_threshold) cands.push_back({d, dy * dy + dx * dx, {y, x}});
        }
    }
    std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
        if (a.dist != b.dist) return a.dist < b.dist;
        if (a.spatial != b.spatial) return a.spatial < b.spatial;
        if (a.pos.y != b.pos.y) return a.pos.y < b.pos.y;
        return a.pos.x < b.pos.x;
    });
    const std::size_t n = detail::largest_pow2_at_most(std::min(cands.size() + 1, p.max_matches));
    BlockStack s;
    s.ref = ref;
    s.positions.push_back(ref);
    s.distances.push_back(0.0);
    for (std::size_t i = 0; i + 1 < n; ++i) {
        s.positions.push_back(cands[i].pos);
        s.distances.push_back(cands[i].dist);
    }
    return s;
}

// --- fixed orthonormal transforms ------------------------------------------

/// Orthonormal DCT-II basis, row k holds frequency k.
class Dct2d {
public:
    explicit Dct2d(std::size_t n) : n_(n), basis_(n * n)
    {
        const double pi = 3.14159265358979323846;
        for (std::size_t k = 0; k < n; ++k) {
            const double a = k == 0 ? std::sqrt(1.0 / static_cast<double>(n)) : std::sqrt(2.0 / static_cast<double>(n));
            for (std::size_t i = 0; i < n; ++i) {
                basis_[k * n + i] = a * std::cos(pi * (2.0 * static_cast<double>(i) + 1.0) * static_cast<double>(k)
                                                 / (2.0 * static_cast<double>(n)));
            }
        }
    }

    std::size_t size() const noexcept { return n_; }

    /// out = C * in * C^T
    void forward(const double* in, double* out) const { apply(in, out, false); }
    /// out = C^T * in * C
    void inverse(const double* in, double* out) const { apply(in, out, true); }

private:
    void apply(const double* in, double* out, bool transpose) const
    {
        const std::size_t n = n_;
        std::vector<double> tmp(n * n, 0.0);
        auto c = [&](std::size_t a, std::size_t b) { return transpose ? basis_[b * n + a] : basis_[a * n + b]; };
        // rows
        for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t k = 0; k < n; ++k) {
                double s = 0.0;
                for (std::size_t i = 0; i < n; ++i) s += c(k, i) * in[r * n + i];
                tmp[r * n + k] = s;
            }
        }
        // columns
        for (std::size_t k = 0; k < n; ++k) {
            for (std::size_t col = 0; col < n; ++col) {
                double s = 0.0;
                for (std::size_t i = 0; i < n; ++i) s += c(k, i) * tmp[i * n + col];
                out[k * n + col] = s;
            }
        }
    }

    std::size_t n_;
    std::vector<double> basis_;
};

/// Full orthonormal Haar decomposition of a power-of-two length signal with
/// stride. Coarsest average ends at index 0.
inline void haar_forward(double* v, std::size_t n, std::size_t stride)
{
    std::vector<double> tmp(n);
    const double s = 1.0 / std::sqrt(2.0);
    for (std::size_t len = n; len > 1; len /= 2) {
        const std::size_t half = len / 2;
        for (std::size_t i = 0; i < half; ++i) {
            const double a = v[(2 * i) * stride];
            const double b = v[(2 * i + 1) * stride];
            tmp[i] = (a + b) * s;
            tmp[half + i] = (a - b) * s;
        }
        for (std::size_t i = 0; i < len; ++i) v[i * stride] = tmp[i];
    }
}

inline void haar_inverse(double* v, std::size_t n, std::size_t stride)
{
    std::vector<double> tmp(n);
    const double s = 1.0 / std::sqrt(2.0);
    for (std::size_t len = 2; len <= n; len *= 2) {
        const std::size_t half = len / 2;
        for (std::size_t i = 0; i < half; ++i) {
            const double a = v[i * stride];
            const double d = v[(half + i) * stride];
            tmp[2 * i] = (a + d) * s;
            tmp[2 * i + 1] = (a - d) * s;
        }
        for (std::size_t i = 0; i < len; ++i) v[i * stride] = tmp[i];
    }
}

namespace detail {

/// Gathers the stack's blocks from `img` and applies DCT then Haar.
inline std::vector<double> stack_forward(const Image2D& img, const std::vector<BlockPos>& positions, const Dct2d& dct)
{
    const std::size_t b = dct.size(), bb = b * b, n = positions.size();
    std::vector<double> coeffs(n * bb);
    std::vector<double> block(bb);
    for (std::size_t m = 0; m < n; ++m) {
        for (std::size_t r = 0; r < b; ++r) {
            for (std::size_t c = 0; c < b; ++c) {
                block[r * b + c] = img.pixels[(positions[m].y + r) * img.width + positions[m].x + c];
            }
        }
        dct.forward(block.data(), coeffs.data() + m * bb);
    }
    for (std::size_t i = 0; i < bb; ++i) haar_forward(coeffs.data() + i, n, bb);
    return coeffs;
}

inline void stack_inverse(std::vector<double>& coeffs, std::size_t n, const Dct2d& dct)
{
    const std::size_t bb = dct.size() * dct.size();
    for (std::size_t i = 0; i < bb; ++i) haar_inverse(coeffs.data() + i, n, bb);
    std::vector<double> block(bb);
    for (std::size_t m = 0; m < n; ++m) {
        dct.inverse(coeffs.data() + m * bb, block.data());
        std::copy(block.begin(), block.end(), coeffs.begin() + static_cast<std::ptrdiff_t>(m * bb));
    }
}

struct Aggregator {
    std::size_t height, width;
    std::vector<double> num, den;

    Aggregator(std::size_t h, std::size_t w) : height(h), width(w), num(h * w, 0.0), den(h * w, 0.0) {}

    void add(const std::vector<double>& blocks, const std::vector<BlockPos>& positions, std::size_t b, double weight)
    {
        for (std::size_t m = 0; m < positions.size(); ++m) {
            for (std::size_t r = 0; r < b; ++r) {
                for (std::size_t c = 0; c < b; ++c) {
                    const std::size_t idx = (positions[m].y + r) * width + positions[m].x + c;
                    num[idx] += weight * blocks[(m * b + r) * b + c];
                    den[idx] += weight;
                }
            }
        }
    }

    Image2D result() const
    {
        Image2D out(height, width);
        for (std::size_t i = 0; i < num.size(); ++i) {
            if (!(den[i] > 0.0)) throw NumericError("bm3d aggregation left a pixel uncovered");
            out.pixels[i] = static_cast<float>(num[i] / den[i]);
        }
        return out;
    }
};

inline void check_same_shape(const Image2D& a, const Image2D& b)
{
    if (a.height != b.height || a.width != b.width) {
        throw std::invalid_argument("bm3d: image shapes differ (" + std::to_string(a.height) + "x"
                                    + std::to_string(a.width) + " vs " + std::to_string(b.height) + "x"
                                    + std::to_string(b.width) + ")");
    }
}

} // namespace detail

/// Accumulated aggregation weights per pixel; exposed for coverage checks.
inline std::vector<double> bm3d_weight_map(const Image2D& img, const Bm3dParams& p)
{
    validate(p);
    detail::Aggregator agg(img.height, img.width);
    std::vector<double> ones(p.block * p.block);
    for (auto y : block_grid(img.height, p.block, p.step)) {
        for (auto x : block_grid(img.width, p.block, p.step)) {
            auto s = block_match(img, {y, x}, p);
            std::vector<double> blocks(s.positions.size() * p.block * p.block, 0.0);
            agg.add(blocks, s.positions, p.block, 1.0);
        }
    }
    return agg.den;
}

/// First stage: collaborative hard thresholding of the 3D spectrum. The 2D DC
/// coefficient of every block is never thresholded.
inline Image2D hard_threshold_stage(const Image2D& img, const Bm3dParams& p)
{
    validate(p);
    const Dct2d dct(p.block);
    const std::size_t bb = p.block * p.block;
    const double thr = p.lambda_hard * p.sigma;
    detail::Aggregator agg(img.height, img.width);
    for (auto y : block_grid(img.height, p.block, p.step)) {
        for (auto x : block_grid(img.width, p.block, p.step)) {
            auto s = block_match(img, {y, x}, p);
            const std::size_t n = s.positions.size();
            s.coeffs = detail::stack_forward(img, s.positions, dct);
            std::size_t retained = 0;
            for (std::size_t m = 0; m < n; ++m) {
                for (std::size_t i = 0; i < bb; ++i) {
                    double& c = s.coeffs[m * bb + i];
                    if (i != 0 && std::abs(c) < thr) c = 0.0;
                    if (c != 0.0) ++retained;
                }
            }
            detail::stack_inverse(s.coeffs, n, dct);
            agg.add(s.coeffs, s.positions, p.block, 1.0 / static_cast<double>(std::max<std::size_t>(1, retained)));
        }
    }
    return agg.result();
}

/// Second stage: groups are formed on the pilot estimate and the noisy
/// spectrum is shrunk by P^2 / (P^2 + sigma^2).
inline Image2D wiener_stage(const Image2D& noisy, const Image2D& pilot, const Bm3dParams& p)
{
    validate(p);
    detail::check_same_shape(noisy, pilot);
    const Dct2d dct(p.block);
    const std::size_t bb = p.block * p.block;
    const double s2 = p.sigma * p.sigma;
    detail::Aggregator agg(noisy.height, noisy.width);
    for (auto y : block_grid(noisy.height, p.block, p.step)) {
        for (auto x : block_grid(noisy.width, p.block, p.step)) {
            const auto s = block_match(pilot, {y, x}, p);
            const std::size_t n = s.positions.size();
            const auto basic = detail::stack_forward(pilot, s.positions, dct);
            auto coeffs = detail::stack_forward(noisy, s.positions, dct);
            double wsum = 0.0;
            for (std::size_t i = 0; i < n * bb; ++i) {
                const double pp = basic[i] * basic[i];
                const double w = pp / (pp + s2);
                coeffs[i] *= w;
                wsum += w * w;
            }
            detail::stack_inverse(coeffs, n, dct);
            agg.add(coeffs, s.positions, p.block, 1.0 / (s2 * std::max(wsum, 1e-12)));
        }
    }
    return agg.result();
}

inline Image2D bm3d_denoise(const Image2D& img, const Bm3dParams& p = {})
{
    auto pilot = hard_threshold_stage(img, p);
    auto out = wiener_stage(img, pilot, p);
    for (auto& v : out.pixels) v = std::clamp(v, 0.0f, 1.0f);
    return out;
}

inline double psnr(const Image2D& a, const Image2D& b, double peak = 1.0)
{
    detail::check_same_shape(a, b);
    double se = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a.pixels[i]) - static_cast<double>(b.pixels[i]);
        se += d * d;
    }
    const double mse = se / static_cast<double>(a.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(peak * peak / mse);
}

} // namespace livseg
