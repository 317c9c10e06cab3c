#pragma once

#include <livseg/bm3d.hpp>
#include <livseg/errors.hpp>
#include <livseg/parallel.hpp>
#include <livseg/preprocess.hpp>

#include <array>
#include <cctype>
#include <charconv>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace livseg {

struct HuWindowStep {
    double lo = kWindowLo;
    double hi = kWindowHi;
    friend bool operator==(const HuWindowStep&, const HuWindowStep&) = default;
};

struct ClaheStep {
    ClaheParams params{};
    friend bool operator==(const ClaheStep&, const ClaheStep&) = default;
};

struct MedianStep {
    std::size_t kernel = 3;
    friend bool operator==(const MedianStep&, const MedianStep&) = default;
};

struct Bm3dStep {
    Bm3dParams params{};
    friend bool operator==(const Bm3dStep&, const Bm3dStep&) = default;
};

struct ZScoreStep {
    friend bool operator==(const ZScoreStep&, const ZScoreStep&) = default;
};

using OpStep = std::variant<HuWindowStep, ClaheStep, MedianStep, Bm3dStep, ZScoreStep>;

struct PipelineSpec {
    std::vector<OpStep> steps;
    friend bool operator==(const PipelineSpec&, const PipelineSpec&) = default;
};

inline const char* step_name(const OpStep& s)
{
    static constexpr std::array<const char*, 5> names{"hu", "clahe", "median", "bm3d", "zscore"};
    return names[s.index()];
}

/// Which of the five techniques a pipeline uses, in the fixed column order
/// HU windowing, CLAHE, BM3D, median, z-score.
struct TechniqueFlags {
    bool hu = false;
    bool clahe = false;
    bool bm3d = false;
    bool median = false;
    bool zscore = false;
    friend bool operator==(const TechniqueFlags&, const TechniqueFlags&) = default;
};

inline TechniqueFlags flags_of(const PipelineSpec& spec)
{
    TechniqueFlags f;
    for (const auto& s : spec.steps) {
        switch (s.index()) {
        case 0: f.hu = true; break;
        case 1: f.clahe = true; break;
        case 2: f.median = true; break;
        case 3: f.bm3d = true; break;
        case 4: f.zscore = true; break;
        }
    }
    return f;
}

/// Builds the canonical left-to-right order HuWindow, Clahe, Bm3d, Median, ZScore.
inline PipelineSpec pipeline_from_flags(const TechniqueFlags& f, const Bm3dParams& bm3d = {})
{
    PipelineSpec spec;
    if (f.hu) spec.steps.emplace_back(HuWindowStep{});
    if (f.clahe) spec.steps.emplace_back(ClaheStep{});
    if (f.bm3d) spec.steps.emplace_back(Bm3dStep{bm3d});
    if (f.median) spec.steps.emplace_back(MedianStep{3});
    if (f.zscore) spec.steps.emplace_back(ZScoreStep{});
    return spec;
}

struct SequenceDef {
    int id = 0;
    TechniqueFlags flags;
    PipelineSpec spec;
};

/// The twelve combined sequences, rows 1-12 in order.
inline std::vector<SequenceDef> canonical_sequences(const Bm3dParams& bm3d = {})
{
    //                                  hu     clahe  bm3d   median zscore
    static constexpr std::array<std::array<bool, 5>, 12> rows{{
        {true, true, false, false, false},
        {true, false, false, true, false},
        {true, true, false, true, false},
        {true, true, false, false, true},
        {true, false, false, false, true},
        {false, true, false, false, true},
        {true, false, false, true, true},
        {false, false, false, true, true},
        {true, false, true, false, false},
        {true, true, true, false, false},
        {true, true, true, false, true},
        {true, false, true, false, true},
    }};
    std::vector<SequenceDef> out;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& r = rows[i];
        TechniqueFlags f{r[0], r[1], r[2], r[3], r[4]};
        out.push_back({static_cast<int>(i + 1), f, pipeline_from_flags(f, bm3d)});
    }
    return out;
}

/// The five single-technique runs: HU windowing, CLAHE, z-score, median, BM3D.
inline std::vector<SequenceDef> single_technique_sequences(const Bm3dParams& bm3d = {})
{
    std::vector<TechniqueFlags> rows{
        {.hu = true}, {.clahe = true}, {.zscore = true}, {.median = true}, {.bm3d = true},
    };
    std::vector<SequenceDef> out;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        out.push_back({static_cast<int>(i + 1), rows[i], pipeline_from_flags(rows[i], bm3d)});
    }
    return out;
}

// --- text grammar ------------------------------------------------------------
//
//   pipeline := "" | step ("|" step)*
//   step     := name [ "(" [ arg ("," arg)* ] ")" ]
//   arg      := value | key "=" value
//
// e.g. hu(-100,400)|clahe(4,8x8)|bm3d(sigma=0.05)|median(3)|zscore

class PipelineParseError : public UsageError {
public:
    PipelineParseError(std::size_t column, const std::string& msg)
        : UsageError("pipeline parse error at column " + std::to_string(column) + ": " + msg), column_(column)
    {
    }
    std::size_t column() const noexcept { return column_; }

private:
    std::size_t column_;
};

namespace detail {

inline std::string format_number(double v)
{
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

struct Arg {
    std::string key;
    std::string value;
    std::size_t column = 0;
};

inline double parse_real(const Arg& a)
{
    double v = 0.0;
    const auto* end = a.value.data() + a.value.size();
    auto [ptr, ec] = std::from_chars(a.value.data(), end, v);
    if (ec != std::errc{} || ptr != end || !std::isfinite(v)) {
        throw PipelineParseError(a.column, "expected a number, got '" + a.value + "'");
    }
    return v;
}

inline std::size_t parse_count(const Arg& a)
{
    long long v = 0;
    const auto* end = a.value.data() + a.value.size();
    auto [ptr, ec] = std::from_chars(a.value.data(), end, v);
    if (ec != std::errc{} || ptr != end || v < 0) {
        throw PipelineParseError(a.column, "expected a non-negative integer, got '" + a.value + "'");
    }
    return static_cast<std::size_t>(v);
}

/// Assigns positional and keyword arguments to named slots.
inline std::vector<std::optional<Arg>> bind_args(const std::vector<Arg>& args, const std::vector<std::string>& slots,
                                                 std::size_t positional_limit, std::string_view op)
{
    std::vector<std::optional<Arg>> bound(slots.size());
    std::size_t next = 0;
    bool seen_keyword = false;
    for (const auto& a : args) {
        std::size_t idx;
        if (a.key.empty()) {
            if (seen_keyword) throw PipelineParseError(a.column, "positional argument after keyword argument");
            if (next >= positional_limit) {
                throw PipelineParseError(a.column, "too many arguments for " + std::string(op));
            }
            idx = next++;
        } else {
            seen_keyword = true;
            auto it = std::find(slots.begin(), slots.end(), a.key);
            if (it == slots.end()) {
                throw PipelineParseError(a.column, "unknown parameter '" + a.key + "' for " + std::string(op));
            }
            idx = static_cast<std::size_t>(it - slots.begin());
        }
        if (bound[idx]) throw PipelineParseError(a.column, "parameter '" + slots[idx] + "' given twice");
        bound[idx] = a;
    }
    return bound;
}

inline OpStep make_step(const std::string& name, std::size_t name_col, const std::vector<Arg>& args)
{
    if (name == "hu") {
        auto b = bind_args(args, {"lo", "hi"}, 2, name);
        HuWindowStep s;
        if (b[0]) s.lo = parse_real(*b[0]);
        if (b[1]) s.hi = parse_real(*b[1]);
        if (!(s.lo < s.hi)) throw PipelineParseError(name_col, "hu window requires lo < hi");
        return s;
    }
    if (name == "clahe") {
        auto b = bind_args(args, {"clip", "grid", "bins"}, 3, name);
        ClaheStep s;
        if (b[0]) s.params.clip = parse_real(*b[0]);
        if (b[1]) {
            const auto& g = *b[1];
            const auto x = g.value.find('x');
            Arg ay{"", g.value.substr(0, x), g.column};
            s.params.grid_y = parse_count(ay);
            s.params.grid_x = x == std::string::npos ? s.params.grid_y
                                                     : parse_count({"", g.value.substr(x + 1), g.column + x + 1});
        }
        if (b[2]) s.params.bins = parse_count(*b[2]);
        try {
            validate(s.params);
        } catch (const std::invalid_argument& e) {
            throw PipelineParseError(name_col, e.what());
        }
        return s;
    }
    if (name == "median") {
        auto b = bind_args(args, {"k"}, 1, name);
        MedianStep s;
        if (b[0]) {
            s.kernel = parse_count(*b[0]);
            if (s.kernel % 2 == 0) throw PipelineParseError(b[0]->column, "kernel must be odd");
        }
        return s;
    }
    if (name == "bm3d") {
        auto b = bind_args(args, {"sigma", "lambda", "block", "step", "radius", "matches", "threshold"}, 1, name);
        Bm3dStep s;
        if (b[0]) s.params.sigma = parse_real(*b[0]);
        if (b[1]) s.params.lambda_hard = parse_real(*b[1]);
        if (b[2]) s.params.block = parse_count(*b[2]);
        if (b[3]) s.params.step = parse_count(*b[3]);
        if (b[4]) s.params.search_radius = parse_count(*b[4]);
        if (b[5]) s.params.max_matches = parse_count(*b[5]);
        if (b[6]) s.params.match_threshold = parse_real(*b[6]);
        try {
            validate(s.params);
        } catch (const std::invalid_argument& e) {
            throw PipelineParseError(name_col, e.what());
        }
        return s;
    }
    if (name == "zscore") {
        if (!args.empty()) throw PipelineParseError(args.front().column, "zscore takes no parameters");
        return ZScoreStep{};
    }
    throw PipelineParseError(name_col, "unknown operator '" + name + "'");
}

} // namespace detail

/// Parses the one-line grammar. Columns in errors are 1-based.
inline PipelineSpec parse_pipeline(std::string_view text)
{
    PipelineSpec spec;
    std::size_t i = 0;
    const std::size_t n = text.size();
    auto skip_ws = [&] {
        while (i < n && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    };
    skip_ws();
    if (i == n) return spec;
    while (true) {
        skip_ws();
        const std::size_t name_col = i + 1;
        std::string name;
        while (i < n && (std::isalnum(static_cast<unsigned char>(text[i])) || text[i] == '_')) name += text[i++];
        if (name.empty()) throw PipelineParseError(i + 1, "expected an operator name");
        skip_ws();
        std::vector<detail::Arg> args;
        if (i < n && text[i] == '(') {
            ++i;
            skip_ws();
            if (i < n && text[i] == ')') {
                ++i;
            } else {
                while (true) {
                    skip_ws();
                    const std::size_t col = i + 1;
                    std::string tok;
                    while (i < n && text[i] != ',' && text[i] != ')' && text[i] != '|') tok += text[i++];
                    if (i >= n || text[i] == '|') throw PipelineParseError(i + 1, "missing ')'");
                    std::string trimmed = detail::trim(tok);
                    if (trimmed.empty()) throw PipelineParseError(col, "empty argument");
                    detail::Arg a;
                    a.column = col;
                    const auto eq = trimmed.find('=');
                    if (eq == std::string::npos) {
                        a.value = trimmed;
                    } else {
                        a.key = detail::trim(std::string_view(trimmed).substr(0, eq));
                        a.value = detail::trim(std::string_view(trimmed).substr(eq + 1));
                        if (a.key.empty() || a.value.empty()) throw PipelineParseError(col, "malformed key=value");
                    }
                    args.push_back(std::move(a));
                    if (text[i] == ')') {
                        ++i;
                        break;
                    }
                    ++i; // ','
                }
            }
        }
        spec.steps.push_back(detail::make_step(name, name_col, args));
        skip_ws();
        if (i == n) break;
        if (text[i] != '|') throw PipelineParseError(i + 1, std::string("unexpected character '") + text[i] + "'");
        ++i;
    }
    return spec;
}

inline std::string render_step(const OpStep& step)
{
    using detail::format_number;
    return std::visit(
        [](const auto& s) -> std::string {
            using S = std::decay_t<decltype(s)>;
            if constexpr (std::is_same_v<S, HuWindowStep>) {
                return "hu(" + format_number(s.lo) + "," + format_number(s.hi) + ")";
            } else if constexpr (std::is_same_v<S, ClaheStep>) {
                std::string r = "clahe(" + format_number(s.params.clip) + "," + std::to_string(s.params.grid_y) + "x"
                                + std::to_string(s.params.grid_x);
                if (s.params.bins != ClaheParams{}.bins) r += "," + std::to_string(s.params.bins);
                return r + ")";
            } else if constexpr (std::is_same_v<S, MedianStep>) {
                return "median(" + std::to_string(s.kernel) + ")";
            } else if constexpr (std::is_same_v<S, Bm3dStep>) {
                const Bm3dParams d{};
                const auto& p = s.params;
                std::string r = "bm3d(sigma=" + format_number(p.sigma);
                if (p.lambda_hard != d.lambda_hard) r += ",lambda=" + format_number(p.lambda_hard);
                if (p.block != d.block) r += ",block=" + std::to_string(p.block);
                if (p.step != d.step) r += ",step=" + std::to_string(p.step);
                if (p.search_radius != d.search_radius) r += ",radius=" + std::to_string(p.search_radius);
                if (p.max_matches != d.max_matches) r += ",matches=" + std::to_string(p.max_matches);
                if (p.match_threshold != d.match_threshold) r += ",threshold=" + format_number(p.match_threshold);
                return r + ")";
            } else {
                return "zscore";
            }
        },
        step);
}

inline std::string render_pipeline(const PipelineSpec& spec)
{
    std::string out;
    for (std::size_t i = 0; i < spec.steps.size(); ++i) {
        if (i) out += '|';
        out += render_step(spec.steps[i]);
    }
    return out;
}

// --- application -------------------------------------------------------------

namespace detail {

template <typename F>
FloatVolume per_slice(const FloatVolume& in, Domain out_domain, F&& op, std::size_t threads)
{
    FloatVolume out(in.dims, in.spacing, out_domain);
    parallel_for(
        in.dims.depth, [&](std::size_t z) { put_slice(out, z, op(get_slice(in, z))); }, threads);
    return out;
}

inline FloatVolume apply_step(const FloatVolume& v, const OpStep& step, std::size_t threads)
{
    return std::visit(
        [&](const auto& s) -> FloatVolume {
            using S = std::decay_t<decltype(s)>;
            if constexpr (std::is_same_v<S, HuWindowStep>) {
                return hu_window(v, s.lo, s.hi);
            } else if constexpr (std::is_same_v<S, ClaheStep>) {
                const bool unit = v.domain == Domain::unit;
                return per_slice(
                    v, Domain::unit,
                    [&](Image2D img) {
                        // Non-unit slices are min-max normalized first.
                        if (!unit) minmax_normalize(std::span<float>(img.pixels));
                        return clahe_slice(img, s.params);
                    },
                    threads);
            } else if constexpr (std::is_same_v<S, MedianStep>) {
                return per_slice(v, v.domain, [&](const Image2D& img) { return median_filter(img, s.kernel); }, threads);
            } else if constexpr (std::is_same_v<S, Bm3dStep>) {
                const FloatVolume src = v.domain == Domain::unit ? v : minmax_normalize(v);
                return per_slice(src, Domain::unit, [&](const Image2D& img) { return bm3d_denoise(img, s.params); },
                                 threads);
            } else {
                return zscore(v);
            }
        },
        step);
}

} // namespace detail

/// Applies the steps left to right; 2D operators run independently per axial
/// slice. A result still in the HU domain (no step rescaled it) is min-max
/// normalized into [0,1].
inline FloatVolume apply_pipeline(const HuVolume& v, const PipelineSpec& spec, std::size_t threads = 0)
{
    FloatVolume cur = to_float_volume(v);
    for (std::size_t i = 0; i < spec.steps.size(); ++i) {
        const auto& step = spec.steps[i];
        const std::string where = "pipeline step " + std::to_string(i + 1) + " (" + step_name(step) + "): ";
        try {
            cur = detail::apply_step(cur, step, threads);
        } catch (const NumericError& e) {
            throw NumericError(where + e.what());
        } catch (const std::exception& e) {
            throw DataError(where + e.what());
        }
    }
    if (cur.domain == Domain::hu) cur = minmax_normalize(std::move(cur));
    return cur;
}

} // namespace livseg
