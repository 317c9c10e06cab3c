#pragma once

#include <livseg/errors.hpp>
#include <livseg/numerics.hpp>

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <type_traits>
#include <variant>
#include <vector>

namespace livseg {

namespace fs = std::filesystem;

inline constexpr int kHuMin = -1024;
inline constexpr int kHuMax = 3071;

struct Dims {
    std::size_t depth = 1;
    std::size_t height = 1;
    std::size_t width = 1;

    std::size_t count() const noexcept { return depth * height * width; }
    std::size_t slice_size() const noexcept { return height * width; }
    friend bool operator==(const Dims&, const Dims&) = default;
};

inline std::string dims_str(const Dims& d)
{
    return std::to_string(d.depth) + "x" + std::to_string(d.height) + "x" + std::to_string(d.width);
}

struct Spacing {
    double z = 1.0;
    double y = 1.0;
    double x = 1.0;
    friend bool operator==(const Spacing&, const Spacing&) = default;
};

/// Slice-major (z outermost) row-major voxel grid.
template <typename V>
struct Volume {
    Dims dims;
    Spacing spacing;
    std::vector<V> voxels;

    Volume() = default;
    Volume(Dims d, Spacing s = {}, V fill = V{}) : dims(d), spacing(s), voxels(d.count(), fill)
    {
        if (d.depth == 0 || d.height == 0 || d.width == 0) {
            throw std::invalid_argument("volume dims must all be >= 1, got " + dims_str(d));
        }
    }

    V& at(std::size_t z, std::size_t y, std::size_t x) { return voxels[(z * dims.height + y) * dims.width + x]; }
    const V& at(std::size_t z, std::size_t y, std::size_t x) const
    {
        return voxels[(z * dims.height + y) * dims.width + x];
    }

    std::span<V> slice(std::size_t z) { return {voxels.data() + z * dims.slice_size(), dims.slice_size()}; }
    std::span<const V> slice(std::size_t z) const
    {
        return {voxels.data() + z * dims.slice_size(), dims.slice_size()};
    }

    friend bool operator==(const Volume&, const Volume&) = default;
};

using HuVolume = Volume<std::int16_t>;
using MaskVolume = Volume<std::uint8_t>;

inline std::int16_t clamp_hu(double hu)
{
    return static_cast<std::int16_t>(std::clamp(std::lround(hu), long{kHuMin}, long{kHuMax}));
}

/// Clamps every voxel into the 12-bit CT range in place.
inline void clamp_hu_range(HuVolume& v)
{
    for (auto& x : v.voxels) x = std::clamp<std::int16_t>(x, kHuMin, kHuMax);
}

inline void validate_mask(const MaskVolume& m)
{
    for (std::size_t i = 0; i < m.voxels.size(); ++i) {
        if (m.voxels[i] > 1) {
            throw DataError("mask voxel " + std::to_string(i) + " has value " + std::to_string(m.voxels[i])
                            + "; masks must be binary");
        }
    }
}

inline void validate_pair(const HuVolume& v, const MaskVolume& m)
{
    if (v.dims != m.dims) {
        throw DataError("mask dims " + dims_str(m.dims) + " differ from volume dims " + dims_str(v.dims));
    }
    validate_mask(m);
}

// --- raw + sidecar header format -------------------------------------------

template <typename V>
constexpr std::string_view dtype_tag()
{
    if constexpr (std::is_same_v<V, std::int16_t>) return "i16";
    else if constexpr (std::is_same_v<V, std::uint8_t>) return "u8";
    else if constexpr (std::is_same_v<V, float>) return "f32";
    else static_assert(sizeof(V) == 0, "unsupported voxel type");
}

struct VolumeHeader {
    Dims dims;
    std::string dtype;
    Spacing spacing;
};

/// `path` may name the header, the payload, or the shared stem.
inline fs::path volume_stem(const fs::path& path)
{
    auto p = path;
    if (p.extension() == ".hdr" || p.extension() == ".raw") p.replace_extension();
    return p;
}

inline fs::path header_path(const fs::path& path) { return fs::path(volume_stem(path)).concat(".hdr"); }
inline fs::path payload_path(const fs::path& path) { return fs::path(volume_stem(path)).concat(".raw"); }

namespace detail {

inline std::vector<std::string> split(std::string_view s, char sep)
{
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = s.find(sep, start);
        out.emplace_back(s.substr(start, pos == std::string_view::npos ? s.npos : pos - start));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

inline std::string trim(std::string_view s)
{
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == s.npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

template <typename V>
void put_le(std::ostream& os, V v)
{
    using U = std::make_unsigned_t<std::conditional_t<std::is_floating_point_v<V>, std::uint32_t, V>>;
    U bits;
    static_assert(sizeof(U) == sizeof(V));
    std::memcpy(&bits, &v, sizeof(V));
    for (std::size_t i = 0; i < sizeof(V); ++i) os.put(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

template <typename V>
V get_le(const unsigned char* p)
{
    using U = std::make_unsigned_t<std::conditional_t<std::is_floating_point_v<V>, std::uint32_t, V>>;
    U bits = 0;
    for (std::size_t i = 0; i < sizeof(V); ++i) bits |= static_cast<U>(static_cast<U>(p[i]) << (8 * i));
    V v;
    std::memcpy(&v, &bits, sizeof(V));
    return v;
}

} // namespace detail

inline VolumeHeader parse_header(std::istream& in, const std::string& origin)
{
    VolumeHeader h;
    bool have_dims = false, have_dtype = false;
    std::string line;
    while (std::getline(in, line)) {
        line = detail::trim(line);
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw DataError(origin + ": malformed header line '" + line + "'");
        const auto key = detail::trim(std::string_view(line).substr(0, eq));
        const auto val = detail::trim(std::string_view(line).substr(eq + 1));
        if (key == "dims") {
            auto parts = detail::split(val, ',');
            if (parts.size() != 3) throw DataError(origin + ": dims needs three values");
            std::array<std::size_t, 3> d{};
            for (int i = 0; i < 3; ++i) {
                try {
                    const long long n = std::stoll(parts[i]);
                    if (n < 1) throw DataError(origin + ": dims must be >= 1");
                    d[i] = static_cast<std::size_t>(n);
                } catch (const std::logic_error&) {
                    throw DataError(origin + ": bad dims value '" + parts[i] + "'");
                }
            }
            h.dims = {d[0], d[1], d[2]};
            have_dims = true;
        } else if (key == "dtype") {
            h.dtype = val;
            have_dtype = true;
        } else if (key == "spacing") {
            auto parts = detail::split(val, ',');
            if (parts.size() != 3) throw DataError(origin + ": spacing needs three values");
            try {
                h.spacing = {std::stod(parts[0]), std::stod(parts[1]), std::stod(parts[2])};
            } catch (const std::logic_error&) {
                throw DataError(origin + ": bad spacing '" + val + "'");
            }
            if (!(h.spacing.z > 0 && h.spacing.y > 0 && h.spacing.x > 0)) {
                throw DataError(origin + ": spacing must be positive");
            }
        }
        // Unknown keys are tolerated so headers can carry annotations.
    }
    if (!have_dims || !have_dtype) throw DataError(origin + ": header requires dims and dtype");
    if (h.dtype != "i16" && h.dtype != "u8" && h.dtype != "f32") {
        throw DataError(origin + ": unknown dtype tag '" + h.dtype + "'");
    }
    return h;
}

inline VolumeHeader read_header(const fs::path& path)
{
    const auto hp = header_path(path);
    std::ifstream in(hp);
    if (!in) throw DataError("cannot open header " + hp.string());
    return parse_header(in, hp.string());
}

template <typename V>
void write_volume(const Volume<V>& v, const fs::path& path)
{
    if (v.voxels.size() != v.dims.count()) throw DataError("volume payload does not match dims " + dims_str(v.dims));
    const auto hp = header_path(path);
    const auto rp = payload_path(path);
    if (hp.has_parent_path()) fs::create_directories(hp.parent_path());
    {
        std::ofstream h(hp);
        if (!h) throw DataError("cannot write " + hp.string());
        auto num = [](double d) {
            char buf[32];
            return std::string(buf, std::to_chars(buf, buf + sizeof(buf), d).ptr);
        };
        const std::string sp = num(v.spacing.z) + ',' + num(v.spacing.y) + ',' + num(v.spacing.x);
        h << "dims=" << v.dims.depth << ',' << v.dims.height << ',' << v.dims.width << '\n'
          << "dtype=" << dtype_tag<V>() << '\n'
          << "spacing=" << sp << '\n';
        if (!h) throw DataError("failed writing " + hp.string());
    }
    std::ofstream r(rp, std::ios::binary);
    if (!r) throw DataError("cannot write " + rp.string());
    for (V x : v.voxels) detail::put_le(r, x);
    if (!r) throw DataError("failed writing " + rp.string());
}

template <typename V>
Volume<V> read_volume(const fs::path& path)
{
    const auto h = read_header(path);
    if (h.dtype != dtype_tag<V>()) {
        throw DataError(header_path(path).string() + ": dtype " + h.dtype + " where " + std::string(dtype_tag<V>())
                        + " was expected");
    }
    const auto rp = payload_path(path);
    std::ifstream r(rp, std::ios::binary);
    if (!r) throw DataError("cannot open payload " + rp.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(r)), std::istreambuf_iterator<char>());
    const std::size_t expected = h.dims.count() * sizeof(V);
    if (bytes.size() != expected) {
        throw DataError(rp.string() + ": payload size mismatch, header " + dims_str(h.dims) + " " + h.dtype
                        + " needs " + std::to_string(expected) + " bytes, found " + std::to_string(bytes.size()));
    }
    Volume<V> v(h.dims, h.spacing);
    for (std::size_t i = 0; i < v.voxels.size(); ++i) v.voxels[i] = detail::get_le<V>(bytes.data() + i * sizeof(V));
    return v;
}

inline HuVolume read_hu_volume(const fs::path& path)
{
    auto v = read_volume<std::int16_t>(path);
    clamp_hu_range(v);
    return v;
}

inline MaskVolume read_mask_volume(const fs::path& path)
{
    auto m = read_volume<std::uint8_t>(path);
    validate_mask(m);
    return m;
}

inline void write_mask_volume(const MaskVolume& m, const fs::path& path)
{
    validate_mask(m);
    write_volume(m, path);
}

using AnyVolume = std::variant<HuVolume, MaskVolume, Volume<float>>;

/// Reads whatever the header declares; u8 payloads are treated as masks.
inline AnyVolume read_any_volume(const fs::path& path)
{
    const auto h = read_header(path);
    if (h.dtype == "i16") return read_hu_volume(path);
    if (h.dtype == "u8") return read_mask_volume(path);
    return read_volume<float>(path);
}

// --- PGM export --------------------------------------------------------------

/// Binary P5 8-bit greyscale. `pixels` must already be in 0..255.
inline void write_pgm(const fs::path& path, std::size_t height, std::size_t width,
                      std::span<const std::uint8_t> pixels)
{
    if (pixels.size() != height * width) throw DataError("pgm pixel count does not match dimensions");
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out << "P5\n" << width << ' ' << height << "\n255\n";
    out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
    if (!out) throw DataError("failed writing " + path.string());
}

/// Min-max scales a slice into 0..255; a constant slice becomes all zeros.
template <typename V>
std::vector<std::uint8_t> to_gray8(std::span<const V> values)
{
    std::vector<std::uint8_t> out(values.size(), 0);
    if (values.empty()) return out;
    const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
    const double lo = static_cast<double>(*lo_it);
    const double hi = static_cast<double>(*hi_it);
    if (hi <= lo) return out;
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double s = (static_cast<double>(values[i]) - lo) / (hi - lo);
        out[i] = static_cast<std::uint8_t>(std::lround(s * 255.0));
    }
    return out;
}

template <typename V>
void export_slice_pgm(const Volume<V>& v, std::size_t z, const fs::path& path)
{
    if (z >= v.dims.depth) throw DataError("slice index " + std::to_string(z) + " out of range");
    write_pgm(path, v.dims.height, v.dims.width, to_gray8<V>(v.slice(z)));
}

// --- synthetic phantoms ----------------------------------------------------

/// Axis-aligned ellipsoid in fractional coordinates: a voxel (z, y, x) is
/// inside when sum(((i + 0.5) / extent - center) / radius)^2 <= 1.
struct Ellipsoid {
    std::array<double, 3> center{0.5, 0.5, 0.5};
    std::array<double, 3> radius{0.25, 0.25, 0.25};

    bool contains(const Dims& d, std::size_t z, std::size_t y, std::size_t x) const
    {
        const double pz = (static_cast<double>(z) + 0.5) / static_cast<double>(d.depth);
        const double py = (static_cast<double>(y) + 0.5) / static_cast<double>(d.height);
        const double px = (static_cast<double>(x) + 0.5) / static_cast<double>(d.width);
        const double a = (pz - center[0]) / radius[0];
        const double b = (py - center[1]) / radius[1];
        const double c = (px - center[2]) / radius[2];
        return a * a + b * b + c * c <= 1.0;
    }

    bool within_unit_box() const
    {
        for (int i = 0; i < 3; ++i) {
            if (radius[i] <= 0.0 || center[i] - radius[i] < 0.0 || center[i] + radius[i] > 1.0) return false;
        }
        return true;
    }

    double volume_fraction() const { return 4.0 / 3.0 * 3.14159265358979323846 * radius[0] * radius[1] * radius[2]; }
};

/// Elliptic cylinder through every slice, in fractional (y, x) coordinates.
struct EllipticCylinder {
    std::array<double, 2> center{0.5, 0.5};
    std::array<double, 2> radius{0.45, 0.42};

    bool contains(const Dims& d, std::size_t y, std::size_t x) const
    {
        const double py = (static_cast<double>(y) + 0.5) / static_cast<double>(d.height);
        const double px = (static_cast<double>(x) + 0.5) / static_cast<double>(d.width);
        const double a = (py - center[0]) / radius[0];
        const double b = (px - center[1]) / radius[1];
        return a * a + b * b <= 1.0;
    }
};

struct PhantomConfig {
    Dims dims{16, 64, 64};
    Spacing spacing{2.5, 0.8, 0.8};
    double liver_mean = 60.0;
    double liver_std = 8.0;
    double organ_mean = 50.0;
    double body_mean = -20.0;
    double bone_hu = 700.0;
    double background_hu = -1000.0;
    double noise_std = 15.0;
    /// Probability that a voxel is replaced by a salt or pepper impulse.
    double impulse_prob = 0.01;
    EllipticCylinder body{};
    EllipticCylinder spine{{0.78, 0.5}, {0.07, 0.07}};
    Ellipsoid liver{{0.5, 0.42, 0.34}, {0.42, 0.24, 0.20}};
    Ellipsoid organ{{0.5, 0.40, 0.66}, {0.35, 0.16, 0.13}};
    std::uint64_t seed = 0;
};

inline void validate(const PhantomConfig& cfg)
{
    if (cfg.dims.depth == 0 || cfg.dims.height == 0 || cfg.dims.width == 0) {
        throw std::invalid_argument("phantom dims must all be >= 1");
    }
    if (!(std::abs(cfg.liver_mean - cfg.organ_mean) > 0.0)) {
        throw std::invalid_argument("liver and adjacent-organ HU means must differ");
    }
    if (cfg.noise_std < 0.0 || cfg.liver_std < 0.0) throw std::invalid_argument("noise levels must be >= 0");
    if (cfg.impulse_prob < 0.0 || cfg.impulse_prob > 1.0) throw std::invalid_argument("impulse_prob must lie in [0,1]");
    if (!cfg.liver.within_unit_box()) throw std::invalid_argument("liver ellipsoid exceeds the volume bounds");
    if (!cfg.organ.within_unit_box()) throw std::invalid_argument("organ ellipsoid exceeds the volume bounds");
}

/// Noise-free HU value for a voxel given its tissue class.
inline double phantom_base_hu(const PhantomConfig& cfg, std::size_t z, std::size_t y, std::size_t x, bool& is_liver)
{
    is_liver = false;
    if (!cfg.body.contains(cfg.dims, y, x)) return cfg.background_hu;
    if (cfg.liver.contains(cfg.dims, z, y, x)) {
        is_liver = true;
        return cfg.liver_mean;
    }
    if (cfg.organ.contains(cfg.dims, z, y, x)) return cfg.organ_mean;
    if (cfg.spine.contains(cfg.dims, y, x)) return cfg.bone_hu;
    return cfg.body_mean;
}

/// Pure function of `cfg`: the same config always yields the same pair.
inline std::pair<HuVolume, MaskVolume> generate_phantom(const PhantomConfig& cfg)
{
    validate(cfg);
    HuVolume vol(cfg.dims, cfg.spacing);
    MaskVolume mask(cfg.dims, cfg.spacing);
    Rng rng(cfg.seed);
    for (std::size_t z = 0; z < cfg.dims.depth; ++z) {
        for (std::size_t y = 0; y < cfg.dims.height; ++y) {
            for (std::size_t x = 0; x < cfg.dims.width; ++x) {
                bool liver = false;
                double hu = phantom_base_hu(cfg, z, y, x, liver);
                // Draw every random number unconditionally so the stream position
                // does not depend on tissue class.
                const double tissue = rng.normal();
                const double noise = rng.normal();
                const double impulse = rng.uniform();
                const double polarity = rng.uniform();
                if (liver) hu += cfg.liver_std * tissue;
                hu += cfg.noise_std * noise;
                if (impulse < cfg.impulse_prob) hu = polarity < 0.5 ? cfg.background_hu : 1500.0;
                vol.at(z, y, x) = clamp_hu(hu);
                mask.at(z, y, x) = liver ? 1 : 0;
            }
        }
    }
    return {std::move(vol), std::move(mask)};
}

/// Per-case geometric variation of a base config: organ positions and sizes
/// jitter deterministically with `index`, always staying inside the volume.
inline PhantomConfig phantom_variant(const PhantomConfig& base, std::uint64_t index)
{
    PhantomConfig cfg = base;
    Rng rng = Rng(base.seed).fork(index + 1);
    cfg.seed = rng.next_u64();
    auto jitter = [&](Ellipsoid& e, double shift, double grow) {
        for (int i = 0; i < 3; ++i) {
            e.radius[i] *= rng.uniform(1.0 - grow, 1.0 + grow);
            e.center[i] += rng.uniform(-shift, shift);
            e.radius[i] = std::min(e.radius[i], 0.5);
            e.center[i] = std::clamp(e.center[i], e.radius[i], 1.0 - e.radius[i]);
        }
    };
    jitter(cfg.liver, 0.04, 0.15);
    jitter(cfg.organ, 0.04, 0.15);
    return cfg;
}

// --- dataset split -----------------------------------------------------------

struct SplitRatios {
    double train = 0.70;
    double val = 0.15;
    double test = 0.15;
};

template <typename Id>
struct DatasetSplit {
    std::vector<Id> train;
    std::vector<Id> val;
    std::vector<Id> test;
};

/// Shuffles ids with `seed` and cuts them into floor(train*N), floor(val*N)
/// and the remainder. When flooring would leave validation or test empty the
/// shortfall is taken from the training share.
template <typename Id>
DatasetSplit<Id> split_dataset(std::vector<Id> ids, SplitRatios r = {}, std::uint64_t seed = 0)
{
    const std::size_t n = ids.size();
    if (n < 3) throw DataError("split_dataset needs at least 3 ids, got " + std::to_string(n));
    if (r.train < 0 || r.val < 0 || r.test < 0 || std::abs(r.train + r.val + r.test - 1.0) > 1e-9) {
        throw std::invalid_argument("split ratios must be non-negative and sum to 1");
    }
    // The epsilon absorbs representation error, e.g. 0.7 * 10 landing just below 7.
    auto n_train = static_cast<std::size_t>(std::floor(r.train * static_cast<double>(n) + 1e-9));
    auto n_val = static_cast<std::size_t>(std::floor(r.val * static_cast<double>(n) + 1e-9));
    n_train = std::min(n_train, n);
    n_val = std::min(n_val, n - n_train);
    if (n_val == 0) {
        n_val = 1;
        if (n_train + n_val > n - 1) n_train = n - 2;
    }
    if (n - n_train - n_val == 0) {
        if (n_train > 1) --n_train;
        else --n_val;
    }

    Rng rng(seed);
    rng.shuffle(ids);
    DatasetSplit<Id> out;
    out.train.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));
    out.val.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train),
                   ids.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
    out.test.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), ids.end());
    return out;
}

} // namespace livseg
