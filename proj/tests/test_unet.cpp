#include <livseg/unet.hpp>

#include <gtest/gtest.h>

using namespace livseg;

namespace {

template <typename T>
Tensor<T> random_tensor(Rng& rng, Shape s, double lo = 0.0, double hi = 1.0)
{
    Tensor<T> t(std::move(s));
    for (auto& v : t.values()) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

// sum(r * probs), the scalar whose gradient w.r.t. probs is r.
double weighted_sum(const Tensor<double>& probs, const Tensor<double>& r)
{
    double s = 0;
    for (std::size_t i = 0; i < probs.size(); ++i) s += probs[i] * r[i];
    return s;
}

struct Coord {
    std::size_t layer;
    bool bias;
    std::size_t index;
};

// Compares analytic gradients with central differences on a sample of
// coordinates from every layer. Returns the worst relative error.
double max_gradient_error(std::uint64_t seed, std::size_t per_layer)
{
    Rng rng(seed);
    auto p = init_params<double>(UNetConfig::desk(), rng);
    // Small random biases keep activations away from exact ReLU ties.
    for (std::size_t l = 0; l < p.layer_count(); ++l) {
        for (auto& b : p.mutable_bias(l).values()) b = rng.uniform(-0.05, 0.05);
    }
    const auto x = random_tensor<double>(rng, {1, 1, 8, 8});
    const auto r = random_tensor<double>(rng, {1, 1, 8, 8}, -1, 1);
    auto [probs, cache] = forward(p, x, 1);
    const auto g = backward(p, cache, r, 1);

    std::vector<Coord> coords;
    for (std::size_t l = 0; l < p.layer_count(); ++l) {
        for (std::size_t k = 0; k < per_layer; ++k) {
            const bool bias = k % 4 == 3;
            const auto n = bias ? p.bias(l).size() : p.weight(l).size();
            const Coord c{l, bias, static_cast<std::size_t>(rng.below(n))};
            const bool dup = std::any_of(coords.begin(), coords.end(), [&](const Coord& o) {
                return o.layer == c.layer && o.bias == c.bias && o.index == c.index;
            });
            if (!dup) coords.push_back(c);
        }
    }
    auto ref = [&](const Coord& c) -> double& {
        return c.bias ? p.mutable_bias(c.layer)[c.index] : p.mutable_weight(c.layer)[c.index];
    };
    Tensor<double> theta({coords.size()});
    for (std::size_t i = 0; i < coords.size(); ++i) theta[i] = ref(coords[i]);
    const auto fd = finite_diff_grad(
        [&](const Tensor<double>& t) {
            for (std::size_t i = 0; i < coords.size(); ++i) ref(coords[i]) = t[i];
            return weighted_sum(predict(p, x, 1), r);
        },
        theta, 1e-6);

    double worst = 0;
    for (std::size_t i = 0; i < coords.size(); ++i) {
        const auto& c = coords[i];
        const double a = c.bias ? g.biases[c.layer][c.index] : g.weights[c.layer][c.index];
        // Central differences carry ~1e-10 absolute roundoff here, so tiny
        // gradients are judged against a 1e-5 floor.
        const double err = std::abs(a - fd[i]) / std::max({std::abs(a), std::abs(fd[i]), 1e-5});
        worst = std::max(worst, err);
    }
    return worst;
}

} // namespace

TEST(UNetArchitecture, FullConfigHas23LayersAndCappedChannels)
{
    const auto cfg = UNetConfig::full();
    EXPECT_EQ(conv_layer_count(cfg), 23u);
    EXPECT_EQ(encoder_channel_sequence(cfg), (std::vector<std::size_t>{32, 64, 128, 256, 512}));
    UNetConfig wide = cfg;
    wide.levels = 6;
    EXPECT_EQ(encoder_channel_sequence(wide).back(), 512u);
    std::size_t ups = 0, three = 0, heads = 0;
    for (const auto& l : layer_manifest(cfg)) {
        ups += l.kind == LayerKind::upconv2x2;
        three += l.kind == LayerKind::conv3x3;
        heads += l.kind == LayerKind::conv1x1;
    }
    EXPECT_EQ(ups, 4u);
    EXPECT_EQ(three, 18u);
    EXPECT_EQ(heads, 1u);
}

TEST(UNetArchitecture, DecoderMirrorsEncoder)
{
    const auto m = layer_manifest(UNetConfig::full());
    std::vector<std::size_t> dec;
    for (const auto& l : m) {
        if (l.kind == LayerKind::upconv2x2) dec.push_back(l.out);
    }
    EXPECT_EQ(dec, (std::vector<std::size_t>{256, 128, 64, 32}));
    EXPECT_EQ(m.back().in, 32u);
    EXPECT_EQ(m.back().out, 1u);
}

TEST(UNetInit, DeterministicHeNormalWithZeroBias)
{
    Rng a(5), b(5);
    const auto pa = init_params<float>(UNetConfig::desk(), a);
    const auto pb = init_params<float>(UNetConfig::desk(), b);
    EXPECT_TRUE(pa.same_values(pb));
    for (std::size_t l = 0; l < pa.layer_count(); ++l) {
        for (float v : pa.bias(l).values()) ASSERT_EQ(v, 0.0f);
    }
    // Sample std of the largest layer against sqrt(2 / fan_in).
    Rng c(6);
    const auto pc = init_params<double>(UNetConfig::full(), c);
    std::size_t big = 0;
    for (std::size_t l = 0; l < pc.layer_count(); ++l) {
        if (pc.weight(l).size() > pc.weight(big).size()) big = l;
    }
    double ss = 0;
    for (double v : pc.weight(big).values()) ss += v * v;
    const double sd = std::sqrt(ss / static_cast<double>(pc.weight(big).size()));
    const double want = std::sqrt(2.0 / static_cast<double>(pc.layers()[big].fan_in()));
    EXPECT_NEAR(sd / want, 1.0, 0.01);
}

TEST(UNetForward, OutputShapeEqualsInputShape)
{
    Rng rng(7);
    const auto p = init_params<float>(UNetConfig::desk(), rng);
    for (int t = 0; t < 10; ++t) {
        const std::size_t n = 1 + rng.below(3), h = 4 * (1 + rng.below(8)), w = 4 * (1 + rng.below(8));
        const auto out = predict(p, random_tensor<float>(rng, {n, 1, h, w}));
        EXPECT_EQ(out.shape(), (Shape{n, 1, h, w}));
        for (float v : out.values()) {
            ASSERT_GT(v, 0.0f);
            ASSERT_LT(v, 1.0f);
        }
    }
}

TEST(UNetForward, FullConfigShapeCheck)
{
    Rng rng(8);
    const auto p = init_params<float>(UNetConfig::full(), rng);
    EXPECT_EQ(predict(p, random_tensor<float>(rng, {1, 1, 16, 32})).shape(), (Shape{1, 1, 16, 32}));
    EXPECT_THROW(predict(p, Tensor<float>({1, 1, 24, 16})), std::invalid_argument);
}

TEST(UNetForward, ZeroParamsGiveOneHalf)
{
    const UNetParams<float> p(UNetConfig::desk());
    Rng rng(9);
    const auto out = predict(p, random_tensor<float>(rng, {2, 1, 12, 8}));
    for (float v : out.values()) ASSERT_EQ(v, 0.5f);
}

TEST(UNetForward, IndivisibleInputNamesDivisor)
{
    const UNetParams<float> p(UNetConfig::desk());
    try {
        predict(p, Tensor<float>({1, 1, 50, 50}));
        FAIL();
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("divisible by 4"), std::string::npos) << e.what();
    }
    EXPECT_THROW(predict(p, Tensor<float>({1, 2, 8, 8})), std::invalid_argument);
    EXPECT_THROW(predict(p, Tensor<float>({8, 8})), std::invalid_argument);
}

TEST(UNetBackward, MatchesFiniteDifferencesOnEightByEight)
{
    EXPECT_LT(max_gradient_error(1, 12), 1e-4);
}

TEST(UNetBackward, GradientCheckOverTwentySeeds)
{
    double worst = 0;
    for (std::uint64_t s = 100; s < 120; ++s) worst = std::max(worst, max_gradient_error(s, 4));
    EXPECT_LT(worst, 1e-3);
}

TEST(UNetBackward, ZeroUpstreamGivesZeroGradients)
{
    Rng rng(10);
    const auto p = init_params<double>(UNetConfig::desk(), rng);
    auto [probs, cache] = forward(p, random_tensor<double>(rng, {2, 1, 8, 8}));
    const auto g = backward(p, cache, Tensor<double>(probs.shape()));
    for (std::size_t l = 0; l < p.layer_count(); ++l) {
        for (double v : g.weights[l].values()) ASSERT_EQ(v, 0.0);
        for (double v : g.biases[l].values()) ASSERT_EQ(v, 0.0);
    }
}

TEST(UNetBackward, DuplicatedExampleDoublesGradient)
{
    Rng rng(11);
    const auto p = init_params<double>(UNetConfig::desk(), rng);
    const auto x = random_tensor<double>(rng, {1, 1, 8, 8});
    const auto r = random_tensor<double>(rng, {1, 1, 8, 8}, -1, 1);
    Tensor<double> x2({2, 1, 8, 8}), r2({2, 1, 8, 8});
    for (std::size_t i = 0; i < 64; ++i) {
        x2[i] = x2[64 + i] = x[i];
        r2[i] = r2[64 + i] = r[i];
    }
    auto [p1, c1] = forward(p, x);
    auto [p2, c2] = forward(p, x2);
    const auto g1 = backward(p, c1, r), g2 = backward(p, c2, r2);
    for (std::size_t l = 0; l < p.layer_count(); ++l) {
        for (std::size_t k = 0; k < g1.weights[l].size(); ++k) ASSERT_EQ(g2.weights[l][k], 2 * g1.weights[l][k]);
        for (std::size_t k = 0; k < g1.biases[l].size(); ++k) ASSERT_EQ(g2.biases[l][k], 2 * g1.biases[l][k]);
    }
}

TEST(UNetBackward, StaleOrForeignCacheRejected)
{
    Rng rng(12);
    auto p = init_params<float>(UNetConfig::desk(), rng);
    const auto x = random_tensor<float>(rng, {1, 1, 8, 8});
    auto [probs, cache] = forward(p, x);
    const auto copy = p;
    EXPECT_THROW(backward(copy, cache, probs), std::logic_error);
    p.mutable_weight(0)[0] += 1.0f;
    EXPECT_THROW(backward(p, cache, probs), std::logic_error);
    auto [probs2, cache2] = forward(p, x);
    EXPECT_NO_THROW(backward(p, cache2, probs2));
    EXPECT_THROW(backward(p, cache2, Tensor<float>({1, 1, 8, 4})), std::invalid_argument);
}

TEST(UNetDeterminism, ThreadCountIndependent)
{
    Rng rng(13);
    const auto p = init_params<float>(UNetConfig::desk(), rng);
    const auto x = random_tensor<float>(rng, {5, 1, 16, 16});
    const auto r = random_tensor<float>(rng, {5, 1, 16, 16}, -1, 1);
    auto [pa, ca] = forward(p, x, 1);
    auto [pb, cb] = forward(p, x, 3);
    EXPECT_EQ(pa, pb);
    const auto ga = backward(p, ca, r, 1), gb = backward(p, cb, r, 3);
    EXPECT_EQ(ga.weights, gb.weights);
    EXPECT_EQ(ga.biases, gb.biases);
}

TEST(Checkpoint, RoundTripWithMetadata)
{
    Rng rng(14);
    const auto p = init_params<float>(UNetConfig::desk(), rng);
    const std::map<std::string, std::string> meta{{"pipeline", "hu(-100,400)|median(3)|zscore"}, {"seed", "7"}};
    const auto bytes = serialize_checkpoint(p, meta);
    const auto ck = parse_checkpoint<float>(bytes);
    EXPECT_TRUE(ck.params.same_values(p));
    EXPECT_EQ(ck.metadata, meta);
    EXPECT_EQ(serialize_checkpoint(ck.params, ck.metadata), bytes);
    const auto header = bytes.substr(0, bytes.find("payload\n") + 8);
    EXPECT_EQ(bytes.size() - header.size(), 4 * p.parameter_count());

    const auto dp = parse_checkpoint<double>(bytes).params;
    EXPECT_TRUE(dp.template cast<float>().same_values(p));
}

TEST(Checkpoint, CorruptionDetected)
{
    Rng rng(15);
    const auto bytes = serialize_checkpoint(init_params<float>(UNetConfig::desk(), rng));
    EXPECT_THROW(parse_checkpoint<float>("garbage\n"), DataError);
    EXPECT_THROW(parse_checkpoint<float>(bytes.substr(0, bytes.size() - 4)), DataError);
    EXPECT_THROW(parse_checkpoint<float>(bytes + "xxxx"), DataError);
    auto wrong = bytes;
    wrong.replace(wrong.find("levels=3"), 8, "levels=4");
    EXPECT_THROW(parse_checkpoint<float>(wrong), DataError);
    auto nan = bytes;
    const auto off = nan.find("payload\n") + 8;
    nan[off] = nan[off + 1] = '\0';
    nan[off + 2] = static_cast<char>(0xC0);
    nan[off + 3] = static_cast<char>(0x7F);
    EXPECT_THROW(parse_checkpoint<float>(nan), DataError);
    EXPECT_THROW(load_checkpoint<float>("/nonexistent/model.ckpt"), DataError);
}
