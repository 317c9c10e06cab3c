#include "fixtures.hpp"

#include <livseg/bm3d.hpp>

#include <gtest/gtest.h>

#include <numbers>

using namespace livseg;

namespace {

Image2D textured(Rng& rng, std::size_t h, std::size_t w)
{
    Image2D img(h, w);
    for (auto& p : img.pixels) p = static_cast<float>(rng.uniform());
    return img;
}

// Direct double-sum DCT-II with orthonormal scaling.
std::vector<double> dct2_direct(const std::vector<double>& x, std::size_t n)
{
    std::vector<double> out(n * n);
    for (std::size_t k = 0; k < n; ++k) {
        for (std::size_t l = 0; l < n; ++l) {
            const double ak = std::sqrt((k ? 2.0 : 1.0) / n), al = std::sqrt((l ? 2.0 : 1.0) / n);
            double s = 0;
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    s += x[i * n + j] * std::cos(std::numbers::pi * (i + 0.5) * k / n)
                         * std::cos(std::numbers::pi * (j + 0.5) * l / n);
                }
            }
            out[k * n + l] = ak * al * s;
        }
    }
    return out;
}

} // namespace

TEST(Bm3dParams, Validation)
{
    Bm3dParams p;
    EXPECT_NO_THROW(validate(p));
    p.max_matches = 12;
    EXPECT_THROW(validate(p), std::invalid_argument);
    p = {};
    p.sigma = 0;
    EXPECT_THROW(validate(p), std::invalid_argument);
    p = {};
    p.step = 0;
    EXPECT_THROW(validate(p), std::invalid_argument);
}

TEST(Bm3dGrid, CoversFinalOffset)
{
    EXPECT_EQ(block_grid(20, 8, 3), (std::vector<std::size_t>{0, 3, 6, 9, 12}));
    EXPECT_EQ(block_grid(8, 8, 3), (std::vector<std::size_t>{0}));
    EXPECT_EQ(block_grid(17, 8, 3), (std::vector<std::size_t>{0, 3, 6, 9}));
}

TEST(Transforms, DctMatchesDirectFormula)
{
    Rng rng(1);
    const std::size_t n = 8;
    std::vector<double> x(n * n);
    for (auto& v : x) v = rng.uniform(-1, 1);
    Dct2d dct(n);
    std::vector<double> got(n * n);
    dct.forward(x.data(), got.data());
    const auto want = dct2_direct(x, n);
    for (std::size_t i = 0; i < n * n; ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
}

TEST(Transforms, RoundTripAndEnergy)
{
    Rng rng(2);
    for (std::size_t n : {4u, 8u}) {
        Dct2d dct(n);
        std::vector<double> x(n * n), c(n * n), back(n * n);
        for (auto& v : x) v = rng.uniform(-3, 3);
        dct.forward(x.data(), c.data());
        dct.inverse(c.data(), back.data());
        double ex = 0, ec = 0;
        for (std::size_t i = 0; i < n * n; ++i) {
            EXPECT_NEAR(back[i], x[i], 1e-6);
            ex += x[i] * x[i];
            ec += c[i] * c[i];
        }
        EXPECT_NEAR(ex, ec, 1e-9 * ex);
    }
    for (std::size_t n : {1u, 2u, 8u, 16u}) {
        std::vector<double> v(n * 3), orig;
        for (auto& x : v) x = rng.uniform(-1, 1);
        orig = v;
        haar_forward(v.data() + 1, n, 3);
        haar_inverse(v.data() + 1, n, 3);
        for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(v[i], orig[i], 1e-12);
    }
}

TEST(Transforms, HaarOfConstantIsPureAverage)
{
    std::vector<double> v(8, 2.0);
    haar_forward(v.data(), 8, 1);
    EXPECT_NEAR(v[0], 2.0 * std::sqrt(8.0), 1e-12);
    for (std::size_t i = 1; i < 8; ++i) EXPECT_NEAR(v[i], 0.0, 1e-12);
    std::vector<double> s{1, 3};
    haar_forward(s.data(), 2, 1);
    EXPECT_NEAR(s[0], 4 / std::sqrt(2.0), 1e-12);
    EXPECT_NEAR(s[1], -2 / std::sqrt(2.0), 1e-12);
}

TEST(BlockMatch, ConstantImageTakesNearestCandidates)
{
    const Image2D img(40, 40, 0.4f);
    Bm3dParams p;
    const auto s = block_match(img, {15, 15}, p);
    ASSERT_EQ(s.positions.size(), 16u);
    EXPECT_EQ(s.positions[0], (BlockPos{15, 15}));
    for (double d : s.distances) EXPECT_EQ(d, 0.0);
    // The 15 nearest grid neighbours: 4 at distance 3, 4 at 3*sqrt(2), then
    // 4 at 6 and 3 of the 8 at 3*sqrt(5).
    std::vector<long> sq;
    for (const auto& q : s.positions) {
        const long dy = long(q.y) - 15, dx = long(q.x) - 15;
        sq.push_back(dy * dy + dx * dx);
    }
    EXPECT_EQ(sq, (std::vector<long>{0, 9, 9, 9, 9, 18, 18, 18, 18, 36, 36, 36, 36, 45, 45, 45}));
}

TEST(BlockMatch, RankingMatchesBruteForce)
{
    Rng rng(3);
    const auto img = textured(rng, 32, 32);
    Bm3dParams p;
    p.match_threshold = 1.0; // everything is admissible
    for (BlockPos ref : {BlockPos{0, 0}, BlockPos{12, 9}, BlockPos{24, 24}}) {
        const auto s = block_match(img, ref, p);
        std::vector<std::pair<double, BlockPos>> all;
        for (auto y : block_grid(32, 8, 3)) {
            for (auto x : block_grid(32, 8, 3)) {
                if (std::abs(long(y) - long(ref.y)) > 16 || std::abs(long(x) - long(ref.x)) > 16) continue;
                double d = 0;
                for (std::size_t r = 0; r < 8; ++r) {
                    for (std::size_t c = 0; c < 8; ++c) {
                        const double e = double(img.at(ref.y + r, ref.x + c)) - double(img.at(y + r, x + c));
                        d += e * e;
                    }
                }
                all.push_back({d / 64.0, {y, x}});
            }
        }
        std::stable_sort(all.begin(), all.end(), [](auto& a, auto& b) { return a.first < b.first; });
        ASSERT_EQ(s.positions.size(), 16u);
        EXPECT_EQ(s.positions[0], ref);
        for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(s.distances[i], all[i].first, 1e-12);
    }
}

TEST(BlockMatch, PlantedTwinPatchesFindEachOther)
{
    Rng rng(4);
    auto img = textured(rng, 32, 32);
    for (auto& v : img.pixels) v = 0.5f + 0.1f * (v - 0.5f);
    Rng pr(5);
    for (std::size_t r = 0; r < 8; ++r) {
        for (std::size_t c = 0; c < 8; ++c) {
            const float v = static_cast<float>(pr.uniform());
            img.at(3 + r, 6 + c) = v;
            img.at(15 + r, 18 + c) = v;
        }
    }
    Bm3dParams p;
    const auto s = block_match(img, {3, 6}, p);
    ASSERT_GE(s.positions.size(), 2u);
    EXPECT_EQ(s.positions[1], (BlockPos{15, 18}));
    EXPECT_EQ(s.distances[1], 0.0);
}

TEST(BlockMatch, StackSizeIsPowerOfTwo)
{
    Rng rng(6);
    const auto img = textured(rng, 40, 40);
    Bm3dParams p;
    p.match_threshold = 0.12;
    for (auto y : block_grid(40, 8, 3)) {
        const auto s = block_match(img, {y, 9}, p);
        EXPECT_TRUE(is_power_of_two(s.positions.size()));
        EXPECT_LE(s.positions.size(), 16u);
        for (std::size_t i = 1; i < s.distances.size(); ++i) EXPECT_LE(s.distances[i - 1], s.distances[i]);
    }
}

TEST(HardStage, IdentityCases)
{
    const Image2D flat(24, 24, 0.3f);
    const auto out = hard_threshold_stage(flat, {});
    for (float v : out.pixels) EXPECT_NEAR(v, 0.3f, 1e-6);

    Rng rng(7);
    const auto img = textured(rng, 24, 24);
    Bm3dParams tiny;
    tiny.sigma = 1e-9;
    const auto a = hard_threshold_stage(img, tiny);
    for (std::size_t i = 0; i < img.size(); ++i) EXPECT_NEAR(a.pixels[i], img.pixels[i], 1e-4);

    Bm3dParams zero;
    zero.lambda_hard = 0.0;
    const auto b = hard_threshold_stage(img, zero);
    for (std::size_t i = 0; i < img.size(); ++i) EXPECT_NEAR(b.pixels[i], img.pixels[i], 1e-6);
}

TEST(Aggregation, WeightMapStrictlyPositive)
{
    Rng rng(8);
    for (auto [h, w] : {std::pair{8u, 8u}, std::pair{23u, 31u}, std::pair{64u, 64u}}) {
        const auto img = textured(rng, h, w);
        for (double v : bm3d_weight_map(img, {})) ASSERT_GT(v, 0.0);
    }
}

TEST(WienerStage, ConstantFixedPointAndShapeCheck)
{
    const Image2D flat(24, 24, 0.6f);
    const auto out = wiener_stage(flat, flat, {});
    for (float v : out.pixels) EXPECT_NEAR(v, 0.6f, 1e-5);
    EXPECT_THROW(wiener_stage(flat, Image2D(24, 23, 0.6f), {}), std::invalid_argument);
}

TEST(WienerStage, ZeroPilotSpectrumSuppressesDetail)
{
    // Every 8x8 window of a checkerboard has zero mean, so a constant pilot
    // leaves only the shrunk DC term.
    Image2D noisy(24, 24);
    for (std::size_t y = 0; y < 24; ++y) {
        for (std::size_t x = 0; x < 24; ++x) noisy.at(y, x) = 0.5f + ((x + y) % 2 ? 0.2f : -0.2f);
    }
    const auto out = wiener_stage(noisy, Image2D(24, 24, 0.5f), {});
    for (float v : out.pixels) EXPECT_NEAR(v, 0.5f, 1e-3);
}

TEST(Bm3d, DeterministicClampedAndShapePreserving)
{
    Rng rng(9);
    auto img = textured(rng, 30, 26);
    const auto a = bm3d_denoise(img), b = bm3d_denoise(img);
    EXPECT_EQ(a.pixels, b.pixels);
    EXPECT_EQ(a.height, 30u);
    EXPECT_EQ(a.width, 26u);
    for (float v : a.pixels) {
        ASSERT_GE(v, 0.0f);
        ASSERT_LE(v, 1.0f);
    }
}

TEST(Bm3d, PsnrHelper)
{
    const Image2D a(4, 4, 0.5f);
    Image2D b = a;
    b.pixels[0] = 0.6f;
    const double d = double(0.6f) - double(0.5f);
    EXPECT_NEAR(psnr(a, b), 10 * std::log10(16.0 / (d * d)), 1e-9);
    EXPECT_TRUE(std::isinf(psnr(a, a)));
}

TEST(Bm3d, GainOnPhantomSlicesMatchesGolden)
{
    const auto pairs = fixtures::bm3d_benchmark(8, 0.08);
    const auto s = fixtures::score_bm3d(pairs, 0.08);
    const double golden = fixtures::golden_value(LIVSEG_TEST_DATA "/bm3d_psnr.txt", "mean_gain_db_8");
    EXPECT_GE(s.mean_gain_db, 2.0);
    EXPECT_NEAR(s.mean_gain_db, golden, 0.05);
    EXPECT_GE(s.fraction_two_stage_not_worse, 0.8);
}
