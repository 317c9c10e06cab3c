#pragma once

#include <livseg/errors.hpp>
#include <livseg/numerics.hpp>
#include <livseg/parallel.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace livseg {

// --- architecture description ----------------------------------------------

struct UNetConfig {
    std::size_t in_channels = 1;
    std::size_t out_channels = 1;
    std::size_t base_channels = 8;
    /// Resolution levels including the bottleneck; levels - 1 poolings.
    std::size_t levels = 3;
    std::size_t channel_cap = 512;

    /// 32 base channels, five levels, capped at 512.
    static UNetConfig full() { return {1, 1, 32, 5, 512}; }
    static UNetConfig desk() { return {1, 1, 8, 3, 512}; }

    std::size_t channels(std::size_t level) const
    {
        std::size_t c = base_channels;
        for (std::size_t i = 0; i < level && c < channel_cap; ++i) c *= 2;
        return std::min(c, channel_cap);
    }

    std::size_t divisor() const { return std::size_t{1} << (levels - 1); }

    friend bool operator==(const UNetConfig&, const UNetConfig&) = default;
};

inline void validate(const UNetConfig& c)
{
    if (c.in_channels == 0 || c.out_channels == 0 || c.base_channels == 0 || c.channel_cap == 0) {
        throw std::invalid_argument("unet channel counts must be positive");
    }
    if (c.levels == 0 || c.levels > 16) throw std::invalid_argument("unet levels must lie in [1, 16]");
}

enum class LayerKind { conv3x3, upconv2x2, conv1x1 };

struct LayerSpec {
    std::string name;
    LayerKind kind;
    std::size_t in = 0;
    std::size_t out = 0;

    std::size_t kernel() const
    {
        switch (kind) {
        case LayerKind::conv3x3: return 3;
        case LayerKind::upconv2x2: return 2;
        case LayerKind::conv1x1: return 1;
        }
        return 0;
    }

    Shape weight_shape() const { return {out, in, kernel(), kernel()}; }

    /// Inputs feeding one output value: a transposed convolution touches a
    /// single input pixel per output pixel.
    std::size_t fan_in() const { return kind == LayerKind::upconv2x2 ? in : in * kernel() * kernel(); }

    friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// Layer indices of the fixed topology, resolved once from a config.
struct UNetPlan {
    struct Pair {
        std::size_t conv1, conv2;
    };
    struct Up {
        std::size_t up, conv1, conv2;
    };
    std::vector<Pair> encoder; // levels 0 .. L-2
    Pair bottleneck{};
    std::vector<Up> decoder; // indexed by level 0 .. L-2
    std::size_t head = 0;
    std::vector<LayerSpec> layers;
};

/// Manifest order: encoder levels top-down, bottleneck, decoder levels
/// bottom-up (up-convolution then two 3x3 convs), final 1x1 head.
inline UNetPlan make_plan(const UNetConfig& cfg)
{
    validate(cfg);
    UNetPlan plan;
    auto add = [&](std::string name, LayerKind k, std::size_t in, std::size_t out) {
        plan.layers.push_back({std::move(name), k, in, out});
        return plan.layers.size() - 1;
    };
    const std::size_t deepest = cfg.levels - 1;
    std::size_t c_in = cfg.in_channels;
    for (std::size_t l = 0; l < deepest; ++l) {
        const auto c = cfg.channels(l);
        const auto a = add("enc" + std::to_string(l) + ".conv1", LayerKind::conv3x3, c_in, c);
        const auto b = add("enc" + std::to_string(l) + ".conv2", LayerKind::conv3x3, c, c);
        plan.encoder.push_back({a, b});
        c_in = c;
    }
    const auto cb = cfg.channels(deepest);
    plan.bottleneck.conv1 = add("bottleneck.conv1", LayerKind::conv3x3, c_in, cb);
    plan.bottleneck.conv2 = add("bottleneck.conv2", LayerKind::conv3x3, cb, cb);
    plan.decoder.resize(deepest);
    std::size_t c_below = cb;
    for (std::size_t l = deepest; l-- > 0;) {
        const auto c = cfg.channels(l);
        const auto u = add("dec" + std::to_string(l) + ".up", LayerKind::upconv2x2, c_below, c);
        const auto a = add("dec" + std::to_string(l) + ".conv1", LayerKind::conv3x3, 2 * c, c);
        const auto b = add("dec" + std::to_string(l) + ".conv2", LayerKind::conv3x3, c, c);
        plan.decoder[l] = {u, a, b};
        c_below = c;
    }
    plan.head = add("head", LayerKind::conv1x1, cfg.channels(0), cfg.out_channels);
    return plan;
}

inline std::vector<LayerSpec> layer_manifest(const UNetConfig& cfg) { return make_plan(cfg).layers; }

/// Every convolutional layer counts: 3x3 convs, up-convolutions and the head.
inline std::size_t conv_layer_count(const UNetConfig& cfg) { return layer_manifest(cfg).size(); }

inline std::vector<std::size_t> encoder_channel_sequence(const UNetConfig& cfg)
{
    std::vector<std::size_t> out;
    for (std::size_t l = 0; l < cfg.levels; ++l) out.push_back(cfg.channels(l));
    return out;
}

// --- parameters ----------------------------------------------------------------

namespace detail {
inline std::uint64_t next_params_id()
{
    static std::atomic<std::uint64_t> counter{0};
    return ++counter;
}
} // namespace detail

/// Kernels and biases in manifest order. Every object carries an identity and
/// a version that bumps on mutable access, so a forward cache can tell when it
/// no longer describes these parameters.
template <typename T>
class UNetParams {
public:
    explicit UNetParams(const UNetConfig& cfg = UNetConfig::desk()) : cfg_(cfg), plan_(make_plan(cfg))
    {
        for (const auto& l : plan_.layers) {
            weights_.emplace_back(l.weight_shape());
            biases_.emplace_back(Shape{l.out});
        }
    }

    UNetParams(const UNetParams& o)
        : cfg_(o.cfg_), plan_(o.plan_), weights_(o.weights_), biases_(o.biases_), id_(detail::next_params_id())
    {
    }
    UNetParams& operator=(const UNetParams& o)
    {
        if (this != &o) {
            cfg_ = o.cfg_;
            plan_ = o.plan_;
            weights_ = o.weights_;
            biases_ = o.biases_;
            ++version_;
        }
        return *this;
    }
    UNetParams(UNetParams&& o) noexcept
        : cfg_(o.cfg_), plan_(std::move(o.plan_)), weights_(std::move(o.weights_)), biases_(std::move(o.biases_)),
          id_(detail::next_params_id())
    {
    }
    UNetParams& operator=(UNetParams&& o) noexcept
    {
        cfg_ = o.cfg_;
        plan_ = std::move(o.plan_);
        weights_ = std::move(o.weights_);
        biases_ = std::move(o.biases_);
        ++version_;
        return *this;
    }

    const UNetConfig& config() const noexcept { return cfg_; }
    const UNetPlan& plan() const noexcept { return plan_; }
    const std::vector<LayerSpec>& layers() const noexcept { return plan_.layers; }
    std::size_t layer_count() const noexcept { return plan_.layers.size(); }

    const Tensor<T>& weight(std::size_t i) const { return weights_.at(i); }
    const Tensor<T>& bias(std::size_t i) const { return biases_.at(i); }
    Tensor<T>& mutable_weight(std::size_t i)
    {
        ++version_;
        return weights_.at(i);
    }
    Tensor<T>& mutable_bias(std::size_t i)
    {
        ++version_;
        return biases_.at(i);
    }

    std::uint64_t id() const noexcept { return id_; }
    std::uint64_t version() const noexcept { return version_; }

    std::size_t parameter_count() const
    {
        std::size_t n = 0;
        for (std::size_t i = 0; i < weights_.size(); ++i) n += weights_[i].size() + biases_[i].size();
        return n;
    }

    bool all_finite() const
    {
        for (std::size_t i = 0; i < weights_.size(); ++i) {
            if (!weights_[i].all_finite() || !biases_[i].all_finite()) return false;
        }
        return true;
    }

    template <typename U>
    UNetParams<U> cast() const
    {
        UNetParams<U> out(cfg_);
        for (std::size_t i = 0; i < weights_.size(); ++i) {
            out.mutable_weight(i) = weights_[i].template cast<U>();
            out.mutable_bias(i) = biases_[i].template cast<U>();
        }
        return out;
    }

    /// Value equality of configuration and tensors; identity is ignored.
    bool same_values(const UNetParams& o) const
    {
        return cfg_ == o.cfg_ && weights_ == o.weights_ && biases_ == o.biases_;
    }

private:
    UNetConfig cfg_;
    UNetPlan plan_;
    std::vector<Tensor<T>> weights_;
    std::vector<Tensor<T>> biases_;
    std::uint64_t id_ = detail::next_params_id();
    std::uint64_t version_ = 0;
};

/// He-normal kernels (std = sqrt(2 / fan_in)), zero biases.
template <typename T>
UNetParams<T> init_params(const UNetConfig& cfg, Rng& rng)
{
    UNetParams<T> p(cfg);
    for (std::size_t i = 0; i < p.layer_count(); ++i) {
        const double std = std::sqrt(2.0 / static_cast<double>(p.layers()[i].fan_in()));
        auto& w = p.mutable_weight(i);
        for (auto& v : w.values()) v = static_cast<T>(rng.normal() * std);
    }
    return p;
}

template <typename T>
struct UNetGrads {
    std::vector<Tensor<T>> weights;
    std::vector<Tensor<T>> biases;

    static UNetGrads zeros_like(const UNetParams<T>& p)
    {
        UNetGrads g;
        for (std::size_t i = 0; i < p.layer_count(); ++i) {
            g.weights.emplace_back(p.weight(i).shape());
            g.biases.emplace_back(p.bias(i).shape());
        }
        return g;
    }

    void accumulate(const UNetGrads& o)
    {
        for (std::size_t i = 0; i < weights.size(); ++i) {
            auto& w = weights[i].values();
            const auto& ow = o.weights[i].values();
            for (std::size_t k = 0; k < w.size(); ++k) w[k] += ow[k];
            auto& b = biases[i].values();
            const auto& ob = o.biases[i].values();
            for (std::size_t k = 0; k < b.size(); ++k) b[k] += ob[k];
        }
    }
};

// --- kernels -------------------------------------------------------------------

namespace kernels {

/// Same-padded 3x3 convolution, out = bias + sum_ci w * shifted(in).
template <typename T>
void conv3x3_forward(const T* in, std::size_t cin, std::size_t h, std::size_t w, const T* wt, const T* bias,
                     std::size_t cout, T* out)
{
    const std::size_t hw = h * w;
    for (std::size_t co = 0; co < cout; ++co) {
        T* o = out + co * hw;
        std::fill(o, o + hw, bias[co]);
        for (std::size_t ci = 0; ci < cin; ++ci) {
            const T* ip = in + ci * hw;
            const T* k = wt + (co * cin + ci) * 9;
            for (std::size_t y = 0; y < h; ++y) {
                T* orow = o + y * w;
                for (int ky = 0; ky < 3; ++ky) {
                    const long yy = static_cast<long>(y) + ky - 1;
                    if (yy < 0 || yy >= static_cast<long>(h)) continue;
                    const T* irow = ip + static_cast<std::size_t>(yy) * w;
                    const T k0 = k[ky * 3 + 0], k1 = k[ky * 3 + 1], k2 = k[ky * 3 + 2];
                    // interior columns
                    for (std::size_t x = 1; x + 1 < w; ++x) orow[x] += k0 * irow[x - 1] + k1 * irow[x] + k2 * irow[x + 1];
                    // borders
                    if (w == 1) {
                        orow[0] += k1 * irow[0];
                    } else {
                        orow[0] += k1 * irow[0] + k2 * irow[1];
                        orow[w - 1] += k0 * irow[w - 2] + k1 * irow[w - 1];
                    }
                }
            }
        }
    }
}

/// Gradients of conv3x3_forward. `din` may be null when the input gradient
/// is not needed. dw and db accumulate.
template <typename T>
void conv3x3_backward(const T* in, std::size_t cin, std::size_t h, std::size_t w, const T* wt, std::size_t cout,
                      const T* dout, T* din, T* dw, T* db)
{
    const std::size_t hw = h * w;
    for (std::size_t co = 0; co < cout; ++co) {
        const T* g = dout + co * hw;
        T s = 0;
        for (std::size_t i = 0; i < hw; ++i) s += g[i];
        db[co] += s;
        for (std::size_t ci = 0; ci < cin; ++ci) {
            const T* ip = in + ci * hw;
            T* kd = dw + (co * cin + ci) * 9;
            for (int ky = 0; ky < 3; ++ky) {
                for (int kx = 0; kx < 3; ++kx) {
                    const long dy = ky - 1, dx = kx - 1;
                    const std::size_t y0 = dy < 0 ? 1 : 0, y1 = dy > 0 ? h - 1 : h;
                    const std::size_t x0 = dx < 0 ? 1 : 0, x1 = dx > 0 ? w - 1 : w;
                    T acc = 0;
                    for (std::size_t y = y0; y < y1; ++y) {
                        const T* grow = g + y * w + x0;
                        const T* irow = ip + static_cast<std::size_t>(static_cast<long>(y) + dy) * w
                                        + static_cast<std::size_t>(static_cast<long>(x0) + dx);
                        for (std::size_t x = 0; x < x1 - x0; ++x) acc += grow[x] * irow[x];
                    }
                    kd[ky * 3 + kx] += acc;
                }
            }
        }
    }
    if (!din) return;
    std::fill(din, din + cin * hw, T{0});
    for (std::size_t ci = 0; ci < cin; ++ci) {
        T* dp = din + ci * hw;
        for (std::size_t co = 0; co < cout; ++co) {
            const T* g = dout + co * hw;
            const T* k = wt + (co * cin + ci) * 9;
            for (int ky = 0; ky < 3; ++ky) {
                for (int kx = 0; kx < 3; ++kx) {
                    const long dy = ky - 1, dx = kx - 1;
                    const std::size_t y0 = dy < 0 ? 1 : 0, y1 = dy > 0 ? h - 1 : h;
                    const std::size_t x0 = dx < 0 ? 1 : 0, x1 = dx > 0 ? w - 1 : w;
                    const T kv = k[ky * 3 + kx];
                    for (std::size_t y = y0; y < y1; ++y) {
                        const T* grow = g + y * w + x0;
                        T* drow = dp + static_cast<std::size_t>(static_cast<long>(y) + dy) * w
                                  + static_cast<std::size_t>(static_cast<long>(x0) + dx);
                        for (std::size_t x = 0; x < x1 - x0; ++x) drow[x] += kv * grow[x];
                    }
                }
            }
        }
    }
}

template <typename T>
void relu_inplace(T* v, std::size_t n)
{
    for (std::size_t i = 0; i < n; ++i) v[i] = v[i] > T{0} ? v[i] : T{0};
}

/// Masks `grad` where the ReLU output was not positive.
template <typename T>
void relu_backward(const T* out, T* grad, std::size_t n)
{
    for (std::size_t i = 0; i < n; ++i) {
        if (!(out[i] > T{0})) grad[i] = T{0};
    }
}

/// 2x2 stride-2 max pool; `arg` records the winning offset (0..3, first max wins).
template <typename T>
void maxpool2_forward(const T* in, std::size_t c, std::size_t h, std::size_t w, T* out, std::uint8_t* arg)
{
    const std::size_t oh = h / 2, ow = w / 2;
    for (std::size_t ch = 0; ch < c; ++ch) {
        const T* ip = in + ch * h * w;
        for (std::size_t y = 0; y < oh; ++y) {
            for (std::size_t x = 0; x < ow; ++x) {
                const T v[4] = {ip[(2 * y) * w + 2 * x], ip[(2 * y) * w + 2 * x + 1], ip[(2 * y + 1) * w + 2 * x],
                                ip[(2 * y + 1) * w + 2 * x + 1]};
                std::uint8_t best = 0;
                for (std::uint8_t k = 1; k < 4; ++k) {
                    if (v[k] > v[best]) best = k;
                }
                const std::size_t o = (ch * oh + y) * ow + x;
                out[o] = v[best];
                arg[o] = best;
            }
        }
    }
}

/// Adds the pooled gradient back onto the argmax positions of `din`.
template <typename T>
void maxpool2_backward(const T* dout, const std::uint8_t* arg, std::size_t c, std::size_t h, std::size_t w, T* din)
{
    const std::size_t oh = h / 2, ow = w / 2;
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t y = 0; y < oh; ++y) {
            for (std::size_t x = 0; x < ow; ++x) {
                const std::size_t o = (ch * oh + y) * ow + x;
                const std::size_t yy = 2 * y + arg[o] / 2, xx = 2 * x + arg[o] % 2;
                din[(ch * h + yy) * w + xx] += dout[o];
            }
        }
    }
}

/// 2x2 stride-2 transposed convolution: out[co][2y+a][2x+b] = bias[co] +
/// sum_ci w[co][ci][a][b] * in[ci][y][x]. Input is h x w, output 2h x 2w.
template <typename T>
void upconv2_forward(const T* in, std::size_t cin, std::size_t h, std::size_t w, const T* wt, const T* bias,
                     std::size_t cout, T* out)
{
    const std::size_t ow = 2 * w, ohw = 4 * h * w;
    for (std::size_t co = 0; co < cout; ++co) {
        T* o = out + co * ohw;
        std::fill(o, o + ohw, bias[co]);
        for (std::size_t ci = 0; ci < cin; ++ci) {
            const T* ip = in + ci * h * w;
            const T* k = wt + (co * cin + ci) * 4;
            for (std::size_t y = 0; y < h; ++y) {
                T* r0 = o + (2 * y) * ow;
                T* r1 = r0 + ow;
                const T* irow = ip + y * w;
                for (std::size_t x = 0; x < w; ++x) {
                    const T v = irow[x];
                    r0[2 * x] += k[0] * v;
                    r0[2 * x + 1] += k[1] * v;
                    r1[2 * x] += k[2] * v;
                    r1[2 * x + 1] += k[3] * v;
                }
            }
        }
    }
}

template <typename T>
void upconv2_backward(const T* in, std::size_t cin, std::size_t h, std::size_t w, const T* wt, std::size_t cout,
                      const T* dout, T* din, T* dw, T* db)
{
    const std::size_t ow = 2 * w, ohw = 4 * h * w;
    for (std::size_t co = 0; co < cout; ++co) {
        const T* g = dout + co * ohw;
        T s = 0;
        for (std::size_t i = 0; i < ohw; ++i) s += g[i];
        db[co] += s;
        for (std::size_t ci = 0; ci < cin; ++ci) {
            const T* ip = in + ci * h * w;
            T a0 = 0, a1 = 0, a2 = 0, a3 = 0;
            for (std::size_t y = 0; y < h; ++y) {
                const T* r0 = g + (2 * y) * ow;
                const T* r1 = r0 + ow;
                const T* irow = ip + y * w;
                for (std::size_t x = 0; x < w; ++x) {
                    const T v = irow[x];
                    a0 += r0[2 * x] * v;
                    a1 += r0[2 * x + 1] * v;
                    a2 += r1[2 * x] * v;
                    a3 += r1[2 * x + 1] * v;
                }
            }
            T* kd = dw + (co * cin + ci) * 4;
            kd[0] += a0;
            kd[1] += a1;
            kd[2] += a2;
            kd[3] += a3;
        }
    }
    if (!din) return;
    std::fill(din, din + cin * h * w, T{0});
    for (std::size_t ci = 0; ci < cin; ++ci) {
        T* dp = din + ci * h * w;
        for (std::size_t co = 0; co < cout; ++co) {
            const T* g = dout + co * ohw;
            const T* k = wt + (co * cin + ci) * 4;
            for (std::size_t y = 0; y < h; ++y) {
                const T* r0 = g + (2 * y) * ow;
                const T* r1 = r0 + ow;
                T* drow = dp + y * w;
                for (std::size_t x = 0; x < w; ++x) {
                    drow[x] += k[0] * r0[2 * x] + k[1] * r0[2 * x + 1] + k[2] * r1[2 * x] + k[3] * r1[2 * x + 1];
                }
            }
        }
    }
}

template <typename T>
void conv1x1_forward(const T* in, std::size_t cin, std::size_t hw, const T* wt, const T* bias, std::size_t cout, T* out)
{
    for (std::size_t co = 0; co < cout; ++co) {
        T* o = out + co * hw;
        std::fill(o, o + hw, bias[co]);
        for (std::size_t ci = 0; ci < cin; ++ci) {
            const T k = wt[co * cin + ci];
            const T* ip = in + ci * hw;
            for (std::size_t i = 0; i < hw; ++i) o[i] += k * ip[i];
        }
    }
}

template <typename T>
void conv1x1_backward(const T* in, std::size_t cin, std::size_t hw, const T* wt, std::size_t cout, const T* dout,
                      T* din, T* dw, T* db)
{
    for (std::size_t co = 0; co < cout; ++co) {
        const T* g = dout + co * hw;
        T s = 0;
        for (std::size_t i = 0; i < hw; ++i) s += g[i];
        db[co] += s;
        for (std::size_t ci = 0; ci < cin; ++ci) {
            const T* ip = in + ci * hw;
            T acc = 0;
            for (std::size_t i = 0; i < hw; ++i) acc += g[i] * ip[i];
            dw[co * cin + ci] += acc;
        }
    }
    if (!din) return;
    std::fill(din, din + cin * hw, T{0});
    for (std::size_t ci = 0; ci < cin; ++ci) {
        T* dp = din + ci * hw;
        for (std::size_t co = 0; co < cout; ++co) {
            const T k = wt[co * cin + ci];
            const T* g = dout + co * hw;
            for (std::size_t i = 0; i < hw; ++i) dp[i] += k * g[i];
        }
    }
}

} // namespace kernels

// --- forward / backward ----------------------------------------------------

/// Activations of one example kept for the backward pass. Convolution
/// outputs are stored after ReLU, which is enough to recover the ReLU mask.
template <typename T>
struct ExampleCache {
    std::vector<T> input;
    std::vector<std::vector<T>> enc_a, enc_b, pooled;
    std::vector<std::vector<std::uint8_t>> argmax;
    std::vector<T> bott_a, bott_b;
    std::vector<std::vector<T>> dec_cat, dec_a, dec_b;
    std::vector<T> probs;
};

template <typename T>
struct ForwardCache {
    std::uint64_t params_id = 0;
    std::uint64_t params_version = 0;
    Shape input_shape;
    std::vector<ExampleCache<T>> examples;
};

inline void check_input_shape(const UNetConfig& cfg, const Shape& s)
{
    if (s.size() != 4) throw std::invalid_argument("unet input must be [N,C,H,W], got " + shape_str(s));
    if (s[1] != cfg.in_channels) {
        throw std::invalid_argument("unet input has " + std::to_string(s[1]) + " channels, expected "
                                    + std::to_string(cfg.in_channels));
    }
    const auto d = cfg.divisor();
    if (s[2] % d != 0 || s[3] % d != 0) {
        throw std::invalid_argument("unet input " + std::to_string(s[2]) + "x" + std::to_string(s[3])
                                    + " is not divisible by " + std::to_string(d) + " (2^(levels-1))");
    }
}

namespace detail {

template <typename T>
void forward_example(const UNetParams<T>& p, const T* input, std::size_t h, std::size_t w, ExampleCache<T>& c)
{
    const auto& cfg = p.config();
    const auto& plan = p.plan();
    const std::size_t deepest = cfg.levels - 1;
    c.input.assign(input, input + cfg.in_channels * h * w);
    c.enc_a.resize(deepest);
    c.enc_b.resize(deepest);
    c.pooled.resize(deepest);
    c.argmax.resize(deepest);
    c.dec_cat.resize(deepest);
    c.dec_a.resize(deepest);
    c.dec_b.resize(deepest);

    auto conv = [&](std::size_t layer, const std::vector<T>& in, std::size_t lh, std::size_t lw, std::vector<T>& out) {
        const auto& L = p.layers()[layer];
        out.resize(L.out * lh * lw);
        kernels::conv3x3_forward(in.data(), L.in, lh, lw, p.weight(layer).data(), p.bias(layer).data(), L.out,
                                 out.data());
        kernels::relu_inplace(out.data(), out.size());
    };

    const std::vector<T>* x = &c.input;
    std::size_t lh = h, lw = w;
    for (std::size_t l = 0; l < deepest; ++l) {
        conv(plan.encoder[l].conv1, *x, lh, lw, c.enc_a[l]);
        conv(plan.encoder[l].conv2, c.enc_a[l], lh, lw, c.enc_b[l]);
        const std::size_t ch = cfg.channels(l);
        c.pooled[l].resize(ch * (lh / 2) * (lw / 2));
        c.argmax[l].resize(c.pooled[l].size());
        kernels::maxpool2_forward(c.enc_b[l].data(), ch, lh, lw, c.pooled[l].data(), c.argmax[l].data());
        x = &c.pooled[l];
        lh /= 2;
        lw /= 2;
    }
    conv(plan.bottleneck.conv1, *x, lh, lw, c.bott_a);
    conv(plan.bottleneck.conv2, c.bott_a, lh, lw, c.bott_b);

    const std::vector<T>* cur = &c.bott_b;
    for (std::size_t l = deepest; l-- > 0;) {
        const auto& U = p.layers()[plan.decoder[l].up];
        const std::size_t uh = lh * 2, uw = lw * 2, plane = U.out * uh * uw;
        auto& cat = c.dec_cat[l];
        cat.resize(2 * plane);
        kernels::upconv2_forward(cur->data(), U.in, lh, lw, p.weight(plan.decoder[l].up).data(),
                                 p.bias(plan.decoder[l].up).data(), U.out, cat.data());
        std::copy(c.enc_b[l].begin(), c.enc_b[l].end(), cat.begin() + static_cast<std::ptrdiff_t>(plane));
        lh = uh;
        lw = uw;
        conv(plan.decoder[l].conv1, cat, lh, lw, c.dec_a[l]);
        conv(plan.decoder[l].conv2, c.dec_a[l], lh, lw, c.dec_b[l]);
        cur = &c.dec_b[l];
    }

    const auto& H = p.layers()[plan.head];
    c.probs.resize(H.out * h * w);
    kernels::conv1x1_forward(cur->data(), H.in, h * w, p.weight(plan.head).data(), p.bias(plan.head).data(), H.out,
                             c.probs.data());
    for (auto& v : c.probs) v = sigmoid(v);
}

template <typename T>
void backward_example(const UNetParams<T>& p, const ExampleCache<T>& c, const T* d_probs, std::size_t h,
                      std::size_t w, UNetGrads<T>& g)
{
    const auto& cfg = p.config();
    const auto& plan = p.plan();
    const std::size_t deepest = cfg.levels - 1;

    auto conv_back = [&](std::size_t layer, const std::vector<T>& in, const std::vector<T>& out, std::vector<T>& dout,
                         std::size_t lh, std::size_t lw, std::vector<T>* din) {
        const auto& L = p.layers()[layer];
        kernels::relu_backward(out.data(), dout.data(), dout.size());
        if (din) din->resize(L.in * lh * lw);
        kernels::conv3x3_backward(in.data(), L.in, lh, lw, p.weight(layer).data(), L.out, dout.data(),
                                  din ? din->data() : nullptr, g.weights[layer].data(), g.biases[layer].data());
    };

    // Head: sigmoid then 1x1 conv.
    const auto& H = p.layers()[plan.head];
    std::vector<T> dlogit(c.probs.size());
    for (std::size_t i = 0; i < dlogit.size(); ++i) dlogit[i] = d_probs[i] * c.probs[i] * (T{1} - c.probs[i]);
    const std::vector<T>& top = deepest > 0 ? c.dec_b[0] : c.bott_b;
    std::vector<T> dcur(H.in * h * w);
    kernels::conv1x1_backward(top.data(), H.in, h * w, p.weight(plan.head).data(), H.out, dlogit.data(), dcur.data(),
                              g.weights[plan.head].data(), g.biases[plan.head].data());

    std::vector<std::vector<T>> d_skip(deepest);
    std::vector<T> tmp, dcat;
    std::size_t lh = h, lw = w;
    for (std::size_t l = 0; l < deepest; ++l) {
        conv_back(plan.decoder[l].conv2, c.dec_a[l], c.dec_b[l], dcur, lh, lw, &tmp);
        conv_back(plan.decoder[l].conv1, c.dec_cat[l], c.dec_a[l], tmp, lh, lw, &dcat);
        const auto& U = p.layers()[plan.decoder[l].up];
        const std::size_t plane = U.out * lh * lw;
        d_skip[l].assign(dcat.begin() + static_cast<std::ptrdiff_t>(plane), dcat.end());
        const std::vector<T>& below = l + 1 < deepest ? c.dec_b[l + 1] : c.bott_b;
        std::vector<T> dbelow(U.in * (lh / 2) * (lw / 2));
        kernels::upconv2_backward(below.data(), U.in, lh / 2, lw / 2, p.weight(plan.decoder[l].up).data(), U.out,
                                  dcat.data(), dbelow.data(), g.weights[plan.decoder[l].up].data(),
                                  g.biases[plan.decoder[l].up].data());
        dcur = std::move(dbelow);
        lh /= 2;
        lw /= 2;
    }

    const std::vector<T>& bott_in = deepest > 0 ? c.pooled[deepest - 1] : c.input;
    conv_back(plan.bottleneck.conv2, c.bott_a, c.bott_b, dcur, lh, lw, &tmp);
    std::vector<T> dx;
    conv_back(plan.bottleneck.conv1, bott_in, c.bott_a, tmp, lh, lw, deepest > 0 ? &dx : nullptr);

    for (std::size_t l = deepest; l-- > 0;) {
        const std::size_t uh = lh * 2, uw = lw * 2, ch = cfg.channels(l);
        std::vector<T> db = std::move(d_skip[l]);
        kernels::maxpool2_backward(dx.data(), c.argmax[l].data(), ch, uh, uw, db.data());
        lh = uh;
        lw = uw;
        conv_back(plan.encoder[l].conv2, c.enc_a[l], c.enc_b[l], db, lh, lw, &tmp);
        const std::vector<T>& in = l > 0 ? c.pooled[l - 1] : c.input;
        conv_back(plan.encoder[l].conv1, in, c.enc_a[l], tmp, lh, lw, l > 0 ? &dx : nullptr);
    }
}

} // namespace detail

/// Runs the network on a [N, C, H, W] batch. Returns sigmoid probabilities of
/// shape [N, out_channels, H, W] and the cache needed by backward().
template <typename T>
std::pair<Tensor<T>, ForwardCache<T>> forward(const UNetParams<T>& p, const Tensor<T>& batch, std::size_t threads = 0)
{
    const auto& cfg = p.config();
    check_input_shape(cfg, batch.shape());
    const std::size_t n = batch.dim(0), h = batch.dim(2), w = batch.dim(3);
    ForwardCache<T> cache;
    cache.params_id = p.id();
    cache.params_version = p.version();
    cache.input_shape = batch.shape();
    cache.examples.resize(n);
    const std::size_t in_stride = cfg.in_channels * h * w;
    parallel_for(
        n, [&](std::size_t i) { detail::forward_example(p, batch.data() + i * in_stride, h, w, cache.examples[i]); },
        threads);
    Tensor<T> probs({n, cfg.out_channels, h, w});
    const std::size_t out_stride = cfg.out_channels * h * w;
    for (std::size_t i = 0; i < n; ++i) {
        std::copy(cache.examples[i].probs.begin(), cache.examples[i].probs.end(), probs.data() + i * out_stride);
    }
    return {std::move(probs), std::move(cache)};
}

/// Forward pass without keeping the cache.
template <typename T>
Tensor<T> predict(const UNetParams<T>& p, const Tensor<T>& batch, std::size_t threads = 0)
{
    return forward(p, batch, threads).first;
}

/// Exact parameter gradients given dLoss/dProbs. Per-example gradients are
/// summed in example order, so results do not depend on the thread count.
template <typename T>
UNetGrads<T> backward(const UNetParams<T>& p, const ForwardCache<T>& cache, const Tensor<T>& d_probs,
                      std::size_t threads = 0)
{
    if (cache.params_id != p.id() || cache.params_version != p.version()) {
        throw std::logic_error("forward cache is stale: parameters changed since the forward pass");
    }
    const auto& s = cache.input_shape;
    const Shape expected{s.at(0), p.config().out_channels, s.at(2), s.at(3)};
    if (d_probs.shape() != expected) {
        throw std::invalid_argument("upstream gradient shape " + shape_str(d_probs.shape())
                                    + " does not match forward output " + shape_str(expected));
    }
    const std::size_t n = s[0], h = s[2], w = s[3];
    const std::size_t stride = p.config().out_channels * h * w;
    std::vector<UNetGrads<T>> per(n, UNetGrads<T>::zeros_like(p));
    parallel_for(
        n,
        [&](std::size_t i) { detail::backward_example(p, cache.examples[i], d_probs.data() + i * stride, h, w, per[i]); },
        threads);
    auto total = UNetGrads<T>::zeros_like(p);
    for (const auto& g : per) total.accumulate(g);
    return total;
}

// --- checkpoint file -------------------------------------------------------
//
// Text header, one key=value per line, then a line "payload" followed by the
// raw little-endian float32 values of every layer (weight then bias) in
// manifest order.

template <typename T>
struct Checkpoint {
    UNetParams<T> params;
    std::map<std::string, std::string> metadata;
};

inline constexpr const char* kCheckpointMagic = "livseg-unet-checkpoint 1";

inline std::string layer_kind_name(LayerKind k)
{
    switch (k) {
    case LayerKind::conv3x3: return "conv3x3";
    case LayerKind::upconv2x2: return "upconv2x2";
    case LayerKind::conv1x1: return "conv1x1";
    }
    return "?";
}

template <typename T>
std::string serialize_checkpoint(const UNetParams<T>& p, const std::map<std::string, std::string>& metadata = {})
{
    std::ostringstream os;
    const auto& c = p.config();
    os << kCheckpointMagic << '\n'
       << "in_channels=" << c.in_channels << '\n'
       << "out_channels=" << c.out_channels << '\n'
       << "base_channels=" << c.base_channels << '\n'
       << "levels=" << c.levels << '\n'
       << "channel_cap=" << c.channel_cap << '\n';
    for (const auto& [k, v] : metadata) {
        if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos) {
            throw std::invalid_argument("checkpoint metadata may not contain '=' in keys or newlines");
        }
        os << "meta." << k << '=' << v << '\n';
    }
    for (std::size_t i = 0; i < p.layer_count(); ++i) {
        const auto& L = p.layers()[i];
        os << "layer=" << L.name << ',' << layer_kind_name(L.kind) << ',' << L.out << ',' << L.in << ','
           << L.kernel() << '\n';
    }
    os << "payload\n";
    auto put = [&](float f) {
        std::uint32_t bits;
        std::memcpy(&bits, &f, 4);
        for (int b = 0; b < 4; ++b) os.put(static_cast<char>((bits >> (8 * b)) & 0xFF));
    };
    for (std::size_t i = 0; i < p.layer_count(); ++i) {
        for (T v : p.weight(i).values()) put(static_cast<float>(v));
        for (T v : p.bias(i).values()) put(static_cast<float>(v));
    }
    return os.str();
}

template <typename T>
void save_checkpoint(const UNetParams<T>& p, const std::filesystem::path& path,
                     const std::map<std::string, std::string>& metadata = {})
{
    const auto bytes = serialize_checkpoint(p, metadata);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("failed writing checkpoint " + path.string());
}

template <typename T>
Checkpoint<T> parse_checkpoint(const std::string& bytes, const std::string& origin = "checkpoint")
{
    std::istringstream in(bytes);
    std::string line;
    if (!std::getline(in, line) || line != kCheckpointMagic) throw DataError(origin + ": not a unet checkpoint");
    UNetConfig cfg;
    std::map<std::string, std::string> meta;
    std::vector<std::string> manifest;
    bool payload = false;
    while (std::getline(in, line)) {
        if (line == "payload") {
            payload = true;
            break;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw DataError(origin + ": malformed header line '" + line + "'");
        const auto key = line.substr(0, eq), val = line.substr(eq + 1);
        auto num = [&]() -> std::size_t {
            try {
                return static_cast<std::size_t>(std::stoull(val));
            } catch (const std::logic_error&) {
                throw DataError(origin + ": bad value for " + key);
            }
        };
        if (key == "in_channels") cfg.in_channels = num();
        else if (key == "out_channels") cfg.out_channels = num();
        else if (key == "base_channels") cfg.base_channels = num();
        else if (key == "levels") cfg.levels = num();
        else if (key == "channel_cap") cfg.channel_cap = num();
        else if (key == "layer") manifest.push_back(val);
        else if (key.rfind("meta.", 0) == 0) meta[key.substr(5)] = val;
        else throw DataError(origin + ": unknown header key '" + key + "'");
    }
    if (!payload) throw DataError(origin + ": missing payload marker");
    try {
        validate(cfg);
    } catch (const std::invalid_argument& e) {
        throw DataError(origin + ": " + e.what());
    }
    Checkpoint<T> ck{UNetParams<T>(cfg), std::move(meta)};
    auto& p = ck.params;
    if (manifest.size() != p.layer_count()) throw DataError(origin + ": layer manifest does not match configuration");
    for (std::size_t i = 0; i < p.layer_count(); ++i) {
        const auto& L = p.layers()[i];
        const std::string expect = L.name + ',' + layer_kind_name(L.kind) + ',' + std::to_string(L.out) + ','
                                   + std::to_string(L.in) + ',' + std::to_string(L.kernel());
        if (manifest[i] != expect) {
            throw DataError(origin + ": layer " + std::to_string(i) + " is '" + manifest[i] + "', expected '" + expect
                            + "'");
        }
    }
    const auto offset = static_cast<std::size_t>(in.tellg());
    const std::size_t need = p.parameter_count() * 4;
    if (bytes.size() - offset != need) {
        throw DataError(origin + ": payload holds " + std::to_string(bytes.size() - offset) + " bytes, expected "
                        + std::to_string(need));
    }
    const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data()) + offset;
    auto get = [&]() {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(raw[b]) << (8 * b);
        raw += 4;
        float f;
        std::memcpy(&f, &bits, 4);
        return static_cast<T>(f);
    };
    for (std::size_t i = 0; i < p.layer_count(); ++i) {
        for (auto& v : p.mutable_weight(i).values()) v = get();
        for (auto& v : p.mutable_bias(i).values()) v = get();
    }
    if (!p.all_finite()) throw DataError(origin + ": checkpoint contains non-finite parameters");
    return ck;
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_checkpoint<T>(bytes, path.string());
}

} // namespace livseg
