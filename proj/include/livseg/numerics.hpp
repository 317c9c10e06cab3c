#pragma once

#include <livseg/errors.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace livseg {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s)
{
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

inline std::size_t shape_numel(const Shape& s)
{
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

/// Dense row-major n-dimensional array. `T` is float for training and
/// double for gradient checks.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T{0})
        : shape_(std::move(shape)), data_(shape_numel(shape_), fill)
    {
        check_extents();
    }

    Tensor(Shape shape, std::vector<T> data)
        : shape_(std::move(shape)), data_(std::move(data))
    {
        check_extents();
        if (data_.size() != shape_numel(shape_)) {
            throw std::invalid_argument("tensor data length " + std::to_string(data_.size())
                                        + " does not match shape " + shape_str(shape_));
        }
    }

    static Tensor from(std::initializer_list<T> values)
    {
        return Tensor({values.size()}, std::vector<T>(values));
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }
    std::span<T> span() noexcept { return data_; }
    std::span<const T> span() const noexcept { return data_; }
    std::vector<T>& values() noexcept { return data_; }
    const std::vector<T>& values() const noexcept { return data_; }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const
    {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    }

    template <typename U>
    Tensor<U> cast() const
    {
        std::vector<U> out(data_.size());
        std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
        return Tensor<U>(shape_, std::move(out));
    }

    friend bool operator==(const Tensor& a, const Tensor& b) = default;

private:
    void check_extents() const
    {
        for (auto e : shape_) {
            if (e == 0) throw std::invalid_argument("tensor extents must be positive, got " + shape_str(shape_));
        }
    }

    Shape shape_;
    std::vector<T> data_;
};

enum class ElementOp { add, sub, mul, scale, clamp, relu, sigmoid };

namespace detail {

template <typename T>
void require_finite(const Tensor<T>& t, const char* what)
{
    if (!t.all_finite()) throw NumericError(std::string(what) + " produced a non-finite value");
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what)
{
    if (a.shape() != b.shape()) {
        throw std::invalid_argument(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs "
                                    + shape_str(b.shape()));
    }
}

template <typename T, typename F>
Tensor<T> map(const Tensor<T>& a, F f, const char* what)
{
    Tensor<T> out = a;
    for (auto& v : out.values()) v = f(v);
    require_finite(out, what);
    return out;
}

template <typename T, typename F>
Tensor<T> zip(const Tensor<T>& a, const Tensor<T>& b, F f, const char* what)
{
    if (b.size() == 1 && a.size() != 1) {
        const T s = b[0];
        return map(a, [&](T x) { return f(x, s); }, what);
    }
    require_same_shape(a, b, what);
    Tensor<T> out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a[i], b[i]);
    require_finite(out, what);
    return out;
}

} // namespace detail

template <typename T>
T sigmoid(T x)
{
    // Split on sign so exp never overflows.
    if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
    const T e = std::exp(x);
    return e / (T{1} + e);
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b)
{
    return detail::zip(a, b, [](T x, T y) { return x + y; }, "add");
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b)
{
    return detail::zip(a, b, [](T x, T y) { return x - y; }, "sub");
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b)
{
    return detail::zip(a, b, [](T x, T y) { return x * y; }, "mul");
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s)
{
    return detail::map(a, [s](T x) { return x * s; }, "scale");
}

template <typename T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi)
{
    if (!(lo <= hi)) throw std::invalid_argument("clamp: lo must not exceed hi");
    return detail::map(a, [=](T x) { return std::clamp(x, lo, hi); }, "clamp");
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a)
{
    return detail::map(a, [](T x) { return x > T{0} ? x : T{0}; }, "relu");
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a)
{
    return detail::map(a, [](T x) { return sigmoid(x); }, "sigmoid");
}

/// Dispatching form. `b` is the second operand for add/sub/mul, a one-element
/// tensor holding the factor for scale, and a two-element {lo, hi} for clamp.
template <typename T>
Tensor<T> elementwise(ElementOp op, const Tensor<T>& a, const Tensor<T>& b = {})
{
    switch (op) {
    case ElementOp::add: return add(a, b);
    case ElementOp::sub: return sub(a, b);
    case ElementOp::mul: return mul(a, b);
    case ElementOp::scale:
        if (b.size() != 1) throw std::invalid_argument("scale expects a scalar operand");
        return scale(a, b[0]);
    case ElementOp::clamp:
        if (b.size() != 2) throw std::invalid_argument("clamp expects a {lo, hi} operand");
        return clamp(a, b[0], b[1]);
    case ElementOp::relu: return relu(a);
    case ElementOp::sigmoid: return sigmoid(a);
    }
    throw std::invalid_argument("unknown element op");
}

/// Central-difference gradient of a scalar function, one coordinate at a time.
template <typename T, typename F>
Tensor<T> finite_diff_grad(F&& f, const Tensor<T>& x, T h)
{
    if (!(h > T{0})) throw std::invalid_argument("finite_diff_grad: step must be positive");
    Tensor<T> probe = x;
    Tensor<T> grad(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const T orig = probe[i];
        probe[i] = orig + h;
        const T fp = static_cast<T>(f(std::as_const(probe)));
        probe[i] = orig - h;
        const T fm = static_cast<T>(f(std::as_const(probe)));
        probe[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            throw NumericError("finite_diff_grad: non-finite function value at coordinate " + std::to_string(i));
        }
        grad[i] = (fp - fm) / (T{2} * h);
    }
    return grad;
}

/// xoshiro256** seeded through splitmix64. All derived draws (uniform reals,
/// normals, integers, shuffles) are implemented here rather than through
/// <random> distributions, whose output is not portable across standard
/// libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : seed_(seed)
    {
        std::uint64_t sm = seed;
        for (auto& s : state_) s = splitmix64(sm);
    }

    std::uint64_t seed() const noexcept { return seed_; }

    std::uint64_t next_u64() noexcept
    {
        const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n). Rejection sampling removes modulo bias.
    std::uint64_t below(std::uint64_t n)
    {
        if (n == 0) throw std::invalid_argument("Rng::below: n must be positive");
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t r;
        do {
            r = next_u64();
        } while (r >= limit);
        return r % n;
    }

    /// Standard normal via Box-Muller.
    double normal()
    {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    template <typename V>
    void shuffle(std::vector<V>& v)
    {
        for (std::size_t i = v.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    /// Independent stream derived from this generator's seed and a key.
    Rng fork(std::uint64_t key) const
    {
        std::uint64_t sm = seed_ ^ (key * 0x9E3779B97F4A7C15ULL + 0x632BE59BD9B4E019ULL);
        return Rng(splitmix64(sm));
    }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) noexcept { return (x << k) | (x >> (64 - k)); }

    static std::uint64_t splitmix64(std::uint64_t& x) noexcept
    {
        std::uint64_t z = (x += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    std::uint64_t seed_;
    std::uint64_t state_[4]{};
    double spare_ = 0.0;
    bool has_spare_ = false;
};

} // namespace livseg
