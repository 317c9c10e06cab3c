#pragma once

#include <livseg/bm3d.hpp>
#include <livseg/preprocess.hpp>
#include <livseg/volume_io.hpp>

#include <fstream>
#include <string>
#include <vector>

namespace fixtures {

struct NoisyPair {
    livseg::Image2D clean;
    livseg::Image2D noisy;
};

/// Noise-free windowed phantom slices with additive Gaussian noise.
inline std::vector<NoisyPair> bm3d_benchmark(std::size_t count, double sigma)
{
    livseg::PhantomConfig base;
    base.noise_std = 0.0;
    base.liver_std = 0.0;
    base.impulse_prob = 0.0;
    std::vector<NoisyPair> out;
    for (std::size_t i = 0; i < count; ++i) {
        const auto [vol, mask] = livseg::generate_phantom(livseg::phantom_variant(base, i));
        const auto unit = livseg::hu_window(vol);
        NoisyPair p{livseg::get_slice(unit, 4 + i % 8), {}};
        p.noisy = p.clean;
        livseg::Rng rng(1000 + i);
        for (auto& v : p.noisy.pixels) v = static_cast<float>(v + sigma * rng.normal());
        out.push_back(std::move(p));
    }
    return out;
}

struct Bm3dScores {
    double mean_gain_db = 0.0;
    double fraction_two_stage_not_worse = 0.0;
};

inline Bm3dScores score_bm3d(const std::vector<NoisyPair>& pairs, double sigma)
{
    livseg::Bm3dParams p;
    p.sigma = sigma;
    Bm3dScores s;
    std::size_t not_worse = 0;
    for (const auto& pr : pairs) {
        const auto full = livseg::bm3d_denoise(pr.noisy, p);
        auto hard = livseg::hard_threshold_stage(pr.noisy, p);
        for (auto& v : hard.pixels) v = std::clamp(v, 0.0f, 1.0f);
        const double base = livseg::psnr(pr.noisy, pr.clean);
        s.mean_gain_db += livseg::psnr(full, pr.clean) - base;
        if (livseg::psnr(full, pr.clean) >= livseg::psnr(hard, pr.clean)) ++not_worse;
    }
    s.mean_gain_db /= static_cast<double>(pairs.size());
    s.fraction_two_stage_not_worse = static_cast<double>(not_worse) / static_cast<double>(pairs.size());
    return s;
}

/// Reads a `key=value` golden file.
inline double golden_value(const std::string& file, const std::string& key)
{
    std::ifstream in(file);
    std::string line;
    while (std::getline(in, line)) {
        const auto eq = line.find('=');
        if (eq != std::string::npos && line.substr(0, eq) == key) return std::stod(line.substr(eq + 1));
    }
    throw std::runtime_error("golden value " + key + " missing from " + file);
}

} // namespace fixtures
