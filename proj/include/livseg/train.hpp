#pragma once

#include <livseg/errors.hpp>
#include <livseg/numerics.hpp>
#include <livseg/preprocess.hpp>
#include <livseg/unet.hpp>
#include <livseg/volume_io.hpp>

#include <charconv>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace livseg {

// --- metrics -----------------------------------------------------------------

struct OverlapCounts {
    std::size_t intersection = 0;
    std::size_t pred = 0;
    std::size_t truth = 0;

    void add(bool p, bool g)
    {
        intersection += (p && g) ? 1 : 0;
        pred += p ? 1 : 0;
        truth += g ? 1 : 0;
    }

    /// 2|X n Y| / (|X| + |Y|); two empty masks agree perfectly.
    double dice() const
    {
        const std::size_t denom = pred + truth;
        if (denom == 0) return 1.0;
        return 2.0 * static_cast<double>(intersection) / static_cast<double>(denom);
    }
};

inline double dice_coefficient(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt)
{
    if (pred.size() != gt.size()) {
        throw std::invalid_argument("dice_coefficient: mask sizes differ (" + std::to_string(pred.size()) + " vs "
                                    + std::to_string(gt.size()) + ")");
    }
    OverlapCounts c;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (pred[i] > 1 || gt[i] > 1) throw std::invalid_argument("dice_coefficient: masks must be binary");
        c.add(pred[i] != 0, gt[i] != 0);
    }
    return c.dice();
}

inline double dice_coefficient(const MaskVolume& pred, const MaskVolume& gt)
{
    if (pred.dims != gt.dims) {
        throw std::invalid_argument("dice_coefficient: dims " + dims_str(pred.dims) + " vs " + dims_str(gt.dims));
    }
    return dice_coefficient(pred.voxels, gt.voxels);
}

template <typename T>
struct SoftDiceResult {
    T loss{};
    Tensor<T> grad;
};

/// 1 - (2 sum(p g) + smooth) / (sum p + sum g + smooth) and its gradient with
/// respect to every probability. Sums accumulate in double.
template <typename T>
SoftDiceResult<T> soft_dice_loss(const Tensor<T>& probs, const Tensor<T>& gt, double smooth = 1.0)
{
    if (probs.shape() != gt.shape()) {
        throw std::invalid_argument("soft_dice_loss: shape mismatch " + shape_str(probs.shape()) + " vs "
                                    + shape_str(gt.shape()));
    }
    double inter = 0.0, sp = 0.0, sg = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        inter += static_cast<double>(probs[i]) * static_cast<double>(gt[i]);
        sp += probs[i];
        sg += gt[i];
    }
    const double num = 2.0 * inter + smooth;
    const double den = sp + sg + smooth;
    if (!(den > 0.0)) throw NumericError("soft_dice_loss: empty prediction and target with zero smoothing");
    SoftDiceResult<T> r;
    r.loss = static_cast<T>(1.0 - num / den);
    r.grad = Tensor<T>(probs.shape());
    const double den2 = den * den;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        r.grad[i] = static_cast<T>(-(2.0 * static_cast<double>(gt[i]) * den - num) / den2);
    }
    return r;
}

// --- Adam --------------------------------------------------------------------

struct AdamConfig {
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// One Adam update of a flat parameter block; `t` is the 1-based step index.
template <typename T>
void adam_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v, std::uint64_t t,
                 const AdamConfig& c)
{
    const T b1 = static_cast<T>(c.beta1), b2 = static_cast<T>(c.beta2);
    const T c1 = static_cast<T>(1.0 - std::pow(c.beta1, static_cast<double>(t)));
    const T c2 = static_cast<T>(1.0 - std::pow(c.beta2, static_cast<double>(t)));
    const T lr = static_cast<T>(c.learning_rate), eps = static_cast<T>(c.eps);
    for (std::size_t i = 0; i < param.size(); ++i) {
        const T g = grad[i];
        m[i] = b1 * m[i] + (T{1} - b1) * g;
        v[i] = b2 * v[i] + (T{1} - b2) * g * g;
        const T mhat = m[i] / c1;
        const T vhat = v[i] / c2;
        param[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
}

template <typename T>
struct AdamState {
    std::vector<Tensor<T>> m_w, v_w, m_b, v_b;
    std::uint64_t t = 0;

    static AdamState zeros_like(const UNetParams<T>& p)
    {
        AdamState s;
        for (std::size_t i = 0; i < p.layer_count(); ++i) {
            s.m_w.emplace_back(p.weight(i).shape());
            s.v_w.emplace_back(p.weight(i).shape());
            s.m_b.emplace_back(p.bias(i).shape());
            s.v_b.emplace_back(p.bias(i).shape());
        }
        return s;
    }
};

/// Applies one step to every layer. Any non-finite gradient aborts the step
/// before anything is modified.
template <typename T>
void adam_step(UNetParams<T>& p, const UNetGrads<T>& g, AdamState<T>& s, const AdamConfig& c)
{
    if (g.weights.size() != p.layer_count() || s.m_w.size() != p.layer_count()) {
        throw std::invalid_argument("adam_step: gradient/state layout does not match parameters");
    }
    for (std::size_t i = 0; i < p.layer_count(); ++i) {
        if (g.weights[i].shape() != p.weight(i).shape() || g.biases[i].shape() != p.bias(i).shape()) {
            throw std::invalid_argument("adam_step: gradient shape mismatch in layer " + p.layers()[i].name);
        }
        if (!g.weights[i].all_finite() || !g.biases[i].all_finite()) {
            throw NumericError("non-finite gradient in layer " + p.layers()[i].name);
        }
    }
    ++s.t;
    for (std::size_t i = 0; i < p.layer_count(); ++i) {
        adam_update<T>(p.mutable_weight(i).span(), g.weights[i].span(), s.m_w[i].span(), s.v_w[i].span(), s.t, c);
        adam_update<T>(p.mutable_bias(i).span(), g.biases[i].span(), s.m_b[i].span(), s.v_b[i].span(), s.t, c);
    }
}

// --- data --------------------------------------------------------------------

/// A preprocessed volume and its ground truth.
struct SegmentationCase {
    std::string id;
    FloatVolume image;
    MaskVolume mask;
};

struct SliceRef {
    std::size_t case_index = 0;
    std::size_t z = 0;
};

inline void check_cases(const std::vector<SegmentationCase>& cases, std::size_t& height, std::size_t& width)
{
    for (const auto& c : cases) {
        if (c.image.dims != c.mask.dims) throw DataError("case " + c.id + ": image and mask dims differ");
        if (height == 0) {
            height = c.image.dims.height;
            width = c.image.dims.width;
        } else if (c.image.dims.height != height || c.image.dims.width != width) {
            throw DataError("case " + c.id + ": slice size " + std::to_string(c.image.dims.height) + "x"
                            + std::to_string(c.image.dims.width) + " differs from " + std::to_string(height) + "x"
                            + std::to_string(width));
        }
    }
}

inline std::vector<SliceRef> all_slices(const std::vector<SegmentationCase>& cases)
{
    std::vector<SliceRef> out;
    for (std::size_t i = 0; i < cases.size(); ++i) {
        for (std::size_t z = 0; z < cases[i].image.dims.depth; ++z) out.push_back({i, z});
    }
    return out;
}

/// Stacks slices into [n,1,H,W] image and mask tensors.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> make_batch(const std::vector<SegmentationCase>& cases, std::span<const SliceRef> refs)
{
    const auto& d = cases.at(refs.front().case_index).image.dims;
    const std::size_t hw = d.slice_size();
    Tensor<T> x({refs.size(), 1, d.height, d.width});
    Tensor<T> y({refs.size(), 1, d.height, d.width});
    for (std::size_t i = 0; i < refs.size(); ++i) {
        const auto& c = cases.at(refs[i].case_index);
        auto img = c.image.slice(refs[i].z);
        auto msk = c.mask.slice(refs[i].z);
        for (std::size_t k = 0; k < hw; ++k) {
            x[i * hw + k] = static_cast<T>(img[k]);
            y[i * hw + k] = static_cast<T>(msk[k]);
        }
    }
    return {std::move(x), std::move(y)};
}

// --- evaluation ----------------------------------------------------------------

struct DiceReport {
    std::vector<std::string> ids;
    std::vector<double> per_case;
    /// Arithmetic mean over cases (not pooled voxel counts).
    double mean = 0.0;
};

inline double mean_of(const std::vector<double>& v)
{
    if (v.empty()) throw DataError("mean of an empty set of dice scores");
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

/// Thresholded network prediction for a whole volume.
template <typename T>
MaskVolume predict_mask(const UNetParams<T>& p, const FloatVolume& image, double threshold = 0.5,
                        std::size_t batch = 16, std::size_t threads = 0)
{
    MaskVolume out(image.dims, image.spacing);
    const std::size_t hw = image.dims.slice_size();
    std::vector<SegmentationCase> one{{"", image, MaskVolume(image.dims, image.spacing)}};
    auto refs = all_slices(one);
    for (std::size_t start = 0; start < refs.size(); start += batch) {
        const std::size_t n = std::min(batch, refs.size() - start);
        auto [x, y] = make_batch<T>(one, std::span<const SliceRef>(refs).subspan(start, n));
        const auto probs = predict(p, x, threads);
        for (std::size_t i = 0; i < n; ++i) {
            auto dst = out.slice(refs[start + i].z);
            for (std::size_t k = 0; k < hw; ++k) dst[k] = probs[i * hw + k] > static_cast<T>(threshold) ? 1 : 0;
        }
    }
    return out;
}

inline DiceReport dice_report(const std::vector<std::string>& ids, const std::vector<MaskVolume>& preds,
                              const std::vector<MaskVolume>& truths)
{
    if (preds.empty()) throw DataError("cannot evaluate an empty dataset");
    if (preds.size() != truths.size()) throw std::invalid_argument("prediction and ground-truth counts differ");
    DiceReport r;
    r.ids = ids;
    for (std::size_t i = 0; i < preds.size(); ++i) r.per_case.push_back(dice_coefficient(preds[i], truths[i]));
    r.mean = mean_of(r.per_case);
    return r;
}

/// Per-volume Dice of the thresholded prediction, averaged over volumes.
template <typename T>
DiceReport evaluate(const UNetParams<T>& p, const std::vector<SegmentationCase>& cases, double threshold = 0.5,
                    std::size_t threads = 0)
{
    if (cases.empty()) throw DataError("cannot evaluate an empty dataset");
    std::size_t h = 0, w = 0;
    check_cases(cases, h, w);
    std::vector<std::string> ids;
    std::vector<MaskVolume> preds, truths;
    for (const auto& c : cases) {
        ids.push_back(c.id);
        preds.push_back(predict_mask(p, c.image, threshold, 16, threads));
        truths.push_back(c.mask);
    }
    return dice_report(ids, preds, truths);
}

// --- training ----------------------------------------------------------------

struct TrainConfig {
    double learning_rate = 1e-4;
    std::size_t epochs = 40;
    std::size_t batch_size = 32;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double smooth = 1.0;
    double threshold = 0.5;
    std::uint64_t seed = 0;
    /// 0 picks the hardware concurrency; results do not depend on it.
    std::size_t threads = 0;

    AdamConfig adam() const { return {learning_rate, beta1, beta2, eps}; }
};

inline void validate(const TrainConfig& c)
{
    if (!(c.learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be positive");
    if (c.epochs < 1) throw std::invalid_argument("epochs must be >= 1");
    if (c.batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (!(c.threshold > 0.0 && c.threshold < 1.0)) throw std::invalid_argument("threshold must lie in (0,1)");
    if (c.smooth < 0.0) throw std::invalid_argument("dice smoothing must be >= 0");
}

struct EpochLog {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double train_dice = 0.0;
    double val_dice = 0.0;
    friend bool operator==(const EpochLog&, const EpochLog&) = default;
};

inline constexpr const char* kEpochCsvHeader = "epoch,train_loss,train_dice,val_dice";

inline std::string format_real(double v)
{
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, r.ptr);
}

inline std::string epoch_csv_line(const EpochLog& e)
{
    return std::to_string(e.epoch) + "," + format_real(e.train_loss) + "," + format_real(e.train_dice) + ","
           + format_real(e.val_dice);
}

template <typename T>
struct TrainResult {
    UNetParams<T> params;
    std::vector<EpochLog> logs;
    std::size_t best_epoch = 0;
};

/// Mini-batch Adam on the soft Dice loss. The slice order is reshuffled each
/// epoch from (seed, epoch); the returned parameters are those of the epoch
/// with the best validation Dice (the earliest on ties, the last epoch when
/// there is no validation set). Training Dice is accumulated per volume from
/// the predictions made during the epoch.
template <typename T>
TrainResult<T> train(const TrainConfig& cfg, const UNetConfig& net, const std::vector<SegmentationCase>& train_set,
                     const std::vector<SegmentationCase>& val_set,
                     const std::function<void(const EpochLog&)>& on_epoch = {})
{
    validate(cfg);
    if (train_set.empty()) throw DataError("training set is empty");
    std::size_t h = 0, w = 0;
    check_cases(train_set, h, w);
    check_cases(val_set, h, w);
    check_input_shape(net, {1, net.in_channels, h, w});

    Rng root(cfg.seed);
    Rng init_rng = root.fork(1);
    UNetParams<T> params = init_params<T>(net, init_rng);
    auto adam = AdamState<T>::zeros_like(params);
    const auto adam_cfg = cfg.adam();

    TrainResult<T> result{params, {}, 0};
    double best_val = -1.0;
    const auto slices = all_slices(train_set);
    const std::size_t hw = h * w;

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        auto order = slices;
        Rng shuffle_rng = root.fork(1000 + epoch);
        shuffle_rng.shuffle(order);

        std::vector<OverlapCounts> overlap(train_set.size());
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t n = std::min(cfg.batch_size, order.size() - start);
            const auto refs = std::span<const SliceRef>(order).subspan(start, n);
            auto [x, y] = make_batch<T>(train_set, refs);
            auto [probs, cache] = forward(params, x, cfg.threads);
            const auto loss = soft_dice_loss(probs, y, cfg.smooth);
            if (!std::isfinite(static_cast<double>(loss.loss))) {
                throw NumericError("non-finite training loss in epoch " + std::to_string(epoch));
            }
            const auto grads = backward(params, cache, loss.grad, cfg.threads);
            adam_step(params, grads, adam, adam_cfg);
            loss_sum += static_cast<double>(loss.loss);
            ++batches;
            for (std::size_t i = 0; i < n; ++i) {
                auto& oc = overlap[refs[i].case_index];
                for (std::size_t k = 0; k < hw; ++k) {
                    oc.add(probs[i * hw + k] > static_cast<T>(cfg.threshold), y[i * hw + k] > T{0.5});
                }
            }
        }

        EpochLog log;
        log.epoch = epoch;
        log.train_loss = loss_sum / static_cast<double>(batches);
        std::vector<double> per_case;
        for (const auto& oc : overlap) per_case.push_back(oc.dice());
        log.train_dice = mean_of(per_case);
        log.val_dice = val_set.empty() ? 0.0 : evaluate(params, val_set, cfg.threshold, cfg.threads).mean;
        result.logs.push_back(log);
        if (on_epoch) on_epoch(log);

        const bool better = val_set.empty() ? true : log.val_dice > best_val;
        if (better) {
            best_val = log.val_dice;
            result.params = params;
            result.best_epoch = epoch;
        }
    }
    return result;
}

} // namespace livseg
