#pragma once

#include <livseg/errors.hpp>
#include <livseg/pipeline.hpp>
#include <livseg/train.hpp>
#include <livseg/unet.hpp>
#include <livseg/volume_io.hpp>

#include <array>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace livseg {

namespace fs = std::filesystem;

// --- corpus on disk ------------------------------------------------------------
//
// A corpus directory holds pairs case_NNN.{hdr,raw} (i16 HU) and
// case_NNN_seg.{hdr,raw} (u8 mask).

struct RawCase {
    std::string id;
    HuVolume image;
    MaskVolume mask;
};

inline std::string case_name(std::size_t i)
{
    char buf[32];
    std::snprintf(buf, sizeof(buf), "case_%03zu", i);
    return buf;
}

inline constexpr std::string_view kMaskSuffix = "_seg";

inline std::vector<fs::path> write_phantom_corpus(const fs::path& dir, std::size_t count, const PhantomConfig& base)
{
    std::vector<fs::path> written;
    if (count == 0) return written;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw DataError("cannot create output directory " + dir.string());
    for (std::size_t i = 0; i < count; ++i) {
        const auto [vol, mask] = generate_phantom(phantom_variant(base, i));
        const auto stem = dir / case_name(i);
        const auto mstem = dir / (case_name(i) + std::string(kMaskSuffix));
        write_volume(vol, stem);
        write_mask_volume(mask, mstem);
        for (const auto& s : {stem, mstem}) {
            written.push_back(header_path(s));
            written.push_back(payload_path(s));
        }
    }
    return written;
}

/// Case stems (without extension) of every image volume in `dir`, sorted.
inline std::vector<std::string> list_cases(const fs::path& dir)
{
    if (!fs::is_directory(dir)) throw DataError("data directory not found: " + dir.string());
    std::vector<std::string> ids;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (!e.is_regular_file() || e.path().extension() != ".hdr") continue;
        const auto stem = e.path().stem().string();
        if (stem.size() >= kMaskSuffix.size() && stem.ends_with(kMaskSuffix)) continue;
        ids.push_back(stem);
    }
    std::sort(ids.begin(), ids.end());
    return ids;
}

inline std::vector<RawCase> load_corpus(const fs::path& dir)
{
    std::vector<RawCase> out;
    for (const auto& id : list_cases(dir)) {
        const auto mstem = dir / (id + std::string(kMaskSuffix));
        if (!fs::exists(header_path(mstem))) throw DataError("case " + id + " has no ground-truth mask");
        RawCase c{id, read_hu_volume(dir / id), read_mask_volume(mstem)};
        validate_pair(c.image, c.mask);
        out.push_back(std::move(c));
    }
    if (out.empty()) throw DataError("no cases found in " + dir.string());
    return out;
}

inline std::vector<SegmentationCase> prepare_cases(const std::vector<RawCase>& raw, const std::vector<std::size_t>& which,
                                                   const PipelineSpec& spec, std::size_t threads = 0)
{
    std::vector<SegmentationCase> out;
    out.reserve(which.size());
    for (auto i : which) {
        const auto& c = raw.at(i);
        out.push_back({c.id, apply_pipeline(c.image, spec, threads), c.mask});
    }
    return out;
}

inline std::vector<std::size_t> all_indices(std::size_t n)
{
    std::vector<std::size_t> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = i;
    return v;
}

// --- experiments ---------------------------------------------------------------

enum class Precision { f32, f64 };

inline const char* precision_name(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

inline Precision parse_precision(const std::string& s)
{
    if (s == "f32") return Precision::f32;
    if (s == "f64") return Precision::f64;
    throw UsageError("precision must be f32 or f64, got '" + s + "'");
}

/// Desk-scale defaults: base-8 three-level network, 10 epochs of batch 8.
inline TrainConfig desk_train_config()
{
    TrainConfig c;
    c.epochs = 10;
    c.batch_size = 8;
    return c;
}

struct ExperimentSettings {
    TrainConfig train = desk_train_config();
    UNetConfig net = UNetConfig::desk();
    SplitRatios ratios{};
    std::uint64_t seed = 0;
    Precision precision = Precision::f32;
    std::size_t threads = 0;
};

struct ExperimentResult {
    std::string seq;
    TechniqueFlags flags;
    std::string pipeline;
    /// Dice scores in percent.
    double train_dice = 0.0;
    double val_dice = 0.0;
    double test_dice = 0.0;
    double seconds = 0.0;
    std::uint64_t seed = 0;
    std::optional<std::string> error;

    bool ok() const { return !error.has_value(); }
};

template <typename T>
struct ExperimentRun {
    ExperimentResult result;
    std::optional<TrainResult<T>> trained;
    std::vector<EpochLog> logs;
};

inline DatasetSplit<std::size_t> split_corpus(const std::vector<RawCase>& raw, const ExperimentSettings& s)
{
    return split_dataset(all_indices(raw.size()), s.ratios, s.seed);
}

/// Preprocesses, trains and evaluates one pipeline on a fixed split. Failures
/// are captured in the result instead of propagating.
template <typename T>
ExperimentRun<T> run_experiment(const ExperimentSettings& s, const std::vector<RawCase>& raw,
                                const DatasetSplit<std::size_t>& split, const std::string& seq_id,
                                const PipelineSpec& spec, const std::function<void(const EpochLog&)>& on_epoch = {})
{
    ExperimentRun<T> run;
    auto& r = run.result;
    r.seq = seq_id;
    r.flags = flags_of(spec);
    r.pipeline = render_pipeline(spec);
    r.seed = s.seed;
    const auto t0 = std::chrono::steady_clock::now();
    try {
        const auto tr = prepare_cases(raw, split.train, spec, s.threads);
        const auto va = prepare_cases(raw, split.val, spec, s.threads);
        const auto te = prepare_cases(raw, split.test, spec, s.threads);
        TrainConfig tc = s.train;
        tc.seed = s.seed;
        tc.threads = s.threads;
        auto trained = train<T>(tc, s.net, tr, va, [&](const EpochLog& e) {
            run.logs.push_back(e);
            if (on_epoch) on_epoch(e);
        });
        r.train_dice = 100.0 * evaluate(trained.params, tr, tc.threshold, s.threads).mean;
        r.val_dice = va.empty() ? 0.0 : 100.0 * evaluate(trained.params, va, tc.threshold, s.threads).mean;
        r.test_dice = 100.0 * evaluate(trained.params, te, tc.threshold, s.threads).mean;
        run.trained = std::move(trained);
    } catch (const std::exception& e) {
        r.error = e.what();
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return run;
}

inline std::map<std::string, std::string> checkpoint_metadata(const ExperimentSettings& s, const PipelineSpec& spec,
                                                               std::size_t best_epoch)
{
    return {
        {"pipeline", render_pipeline(spec)},
        {"threshold", format_real(s.train.threshold)},
        {"precision", precision_name(s.precision)},
        {"seed", std::to_string(s.seed)},
        {"best_epoch", std::to_string(best_epoch)},
    };
}

// --- grids ---------------------------------------------------------------------

enum class GridMode { singles, sequences };

inline GridMode parse_grid_mode(const std::string& s)
{
    if (s == "singles") return GridMode::singles;
    if (s == "sequences") return GridMode::sequences;
    throw UsageError("grid mode must be singles or sequences, got '" + s + "'");
}

struct ReferenceDice {
    double train, val, test;
};

/// Published LiTS results for the same rows, carried as report metadata.
inline std::optional<ReferenceDice> lits_reference(GridMode mode, int row)
{
    static constexpr std::array<ReferenceDice, 5> singles{{
        {96.24, 90.48, 90.04}, {96.29, 89.25, 88.22}, {95.60, 89.62, 87.01}, {95.24, 89.96, 88.82},
        {94.45, 89.12, 88.34},
    }};
    static constexpr std::array<ReferenceDice, 12> sequences{{
        {95.36, 90.97, 90.13}, {96.46, 90.39, 90.24}, {96.51, 90.65, 90.41}, {94.76, 90.99, 89.10},
        {97.13, 90.23, 90.08}, {96.95, 88.90, 88.75}, {96.93, 90.77, 90.84}, {96.80, 90.66, 89.24},
        {95.79, 89.59, 89.01}, {95.82, 90.31, 88.92}, {96.16, 90.73, 90.10}, {95.93, 88.84, 89.19},
    }};
    if (row < 1) return std::nullopt;
    const auto i = static_cast<std::size_t>(row - 1);
    if (mode == GridMode::singles) return i < singles.size() ? std::optional(singles[i]) : std::nullopt;
    return i < sequences.size() ? std::optional(sequences[i]) : std::nullopt;
}

inline std::string technique_label(const TechniqueFlags& f)
{
    std::vector<std::string> parts;
    if (f.hu) parts.push_back("HU windowing");
    if (f.clahe) parts.push_back("CLAHE");
    if (f.bm3d) parts.push_back("BM3D");
    if (f.median) parts.push_back("median");
    if (f.zscore) parts.push_back("z-score");
    std::string s;
    for (std::size_t i = 0; i < parts.size(); ++i) s += (i ? " + " : "") + parts[i];
    return s.empty() ? "none" : s;
}

struct GridReport {
    GridMode mode = GridMode::sequences;
    std::vector<ExperimentResult> rows;
    std::map<std::string, std::string> environment;
};

inline std::vector<SequenceDef> grid_rows(GridMode mode, const Bm3dParams& bm3d = {})
{
    return mode == GridMode::singles ? single_technique_sequences(bm3d) : canonical_sequences(bm3d);
}

inline std::string grid_row_id(GridMode mode, int row)
{
    return (mode == GridMode::singles ? "single-" : "seq-") + std::to_string(row);
}

inline std::map<std::string, std::string> environment_of(const ExperimentSettings& s, std::size_t cases)
{
    const auto& n = s.net;
    const auto& t = s.train;
    return {
        {"precision", precision_name(s.precision)},
        {"network", "unet base=" + std::to_string(n.base_channels) + " levels=" + std::to_string(n.levels)
                        + " cap=" + std::to_string(n.channel_cap)},
        {"training", "adam lr=" + format_real(t.learning_rate) + " epochs=" + std::to_string(t.epochs)
                         + " batch=" + std::to_string(t.batch_size) + " smooth=" + format_real(t.smooth)
                         + " threshold=" + format_real(t.threshold)},
        {"split", format_real(s.ratios.train) + "/" + format_real(s.ratios.val) + "/" + format_real(s.ratios.test)
                      + " of " + std::to_string(cases) + " volumes"},
        {"seed", std::to_string(s.seed)},
        {"dice aggregation", "per-volume mean"},
    };
}

/// Runs every row of the chosen grid on one shared split and seed.
template <typename T>
GridReport run_grid(const ExperimentSettings& s, const std::vector<RawCase>& raw, GridMode mode,
                    const Bm3dParams& bm3d = {}, const std::function<void(const ExperimentResult&)>& on_row = {})
{
    GridReport rep;
    rep.mode = mode;
    rep.environment = environment_of(s, raw.size());
    const auto split = split_corpus(raw, s);
    std::set<std::string> seen;
    for (const auto& def : grid_rows(mode, bm3d)) {
        const auto id = grid_row_id(mode, def.id);
        if (!seen.insert(id).second) throw std::logic_error("duplicate grid row " + id);
        auto run = run_experiment<T>(s, raw, split, id, def.spec);
        rep.rows.push_back(run.result);
        if (on_row) on_row(rep.rows.back());
    }
    return rep;
}

inline constexpr const char* kGridCsvHeader = "seq,hu,clahe,bm3d,median,zscore,train_dice,val_dice,test_dice,seconds,seed";

inline std::string fixed(double v, int digits)
{
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
    return buf;
}

inline std::string grid_csv(const GridReport& rep)
{
    std::ostringstream os;
    os << kGridCsvHeader << '\n';
    for (const auto& r : rep.rows) {
        const auto& f = r.flags;
        os << r.seq << ',' << int(f.hu) << ',' << int(f.clahe) << ',' << int(f.bm3d) << ',' << int(f.median) << ','
           << int(f.zscore) << ',';
        if (r.ok()) {
            os << fixed(r.train_dice, 4) << ',' << fixed(r.val_dice, 4) << ',' << fixed(r.test_dice, 4);
        } else {
            os << "ERROR,ERROR,ERROR";
        }
        os << ',' << fixed(r.seconds, 2) << ',' << r.seed << '\n';
    }
    return os.str();
}

inline std::string grid_markdown(const GridReport& rep)
{
    const bool singles = rep.mode == GridMode::singles;
    std::ostringstream os;
    os << (singles ? "# Single-technique grid\n\n" : "# Preprocessing sequence grid\n\n");
    for (const auto& [k, v] : rep.environment) os << "- " << k << ": " << v << '\n';
    os << '\n';
    auto yn = [](bool b) { return b ? "Y" : "N"; };
    os << "| Seq | HU windowing | CLAHE | BM3D filtering | Median filtering | z-score | Train % | Val % | Test % | "
          "Pipeline |\n";
    os << "|---|---|---|---|---|---|---|---|---|---|\n";
    for (const auto& r : rep.rows) {
        const auto& f = r.flags;
        os << "| " << r.seq << " | " << yn(f.hu) << " | " << yn(f.clahe) << " | " << yn(f.bm3d) << " | "
           << yn(f.median) << " | " << yn(f.zscore) << " | ";
        if (r.ok()) {
            os << fixed(r.train_dice, 2) << " | " << fixed(r.val_dice, 2) << " | " << fixed(r.test_dice, 2);
        } else {
            os << "ERROR | ERROR | ERROR";
        }
        os << " | `" << (r.pipeline.empty() ? "(none)" : r.pipeline) << "` |\n";
    }
    std::vector<std::string> errors;
    for (const auto& r : rep.rows) {
        if (!r.ok()) errors.push_back(r.seq + ": " + *r.error);
    }
    if (!errors.empty()) {
        os << "\nFailed rows:\n\n";
        for (const auto& e : errors) os << "- " << e << '\n';
    }

    const auto mode = rep.mode;
    os << "\n## Published LiTS reference (reported on 130 CT volumes; metadata only, not comparable to phantom runs)\n\n";
    os << "| Seq | Techniques | Train % | Val % | Test % |\n|---|---|---|---|---|\n";
    const auto defs = grid_rows(mode);
    for (const auto& d : defs) {
        const auto ref = lits_reference(mode, d.id);
        if (!ref) continue;
        os << "| " << grid_row_id(mode, d.id) << " | " << technique_label(d.flags) << " | " << fixed(ref->train, 2)
           << " | " << fixed(ref->val, 2) << " | " << fixed(ref->test, 2) << " |\n";
    }
    if (!singles) os << "\nBest published row: seq-7 train/val/test = 96.93/90.77/90.84.\n";
    return os.str();
}

inline void write_text(const fs::path& path, const std::string& text)
{
    if (path.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(path.parent_path(), ec);
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out << text;
    if (!out) throw DataError("write failed for " + path.string());
}

// --- overlays --------------------------------------------------------------------

/// Side-by-side panels: preprocessed input | ground truth | prediction.
inline std::vector<std::uint8_t> overlay_triptych(const FloatVolume& image, const MaskVolume& truth,
                                                  const MaskVolume& pred, std::size_t z)
{
    if (image.dims != truth.dims || image.dims != pred.dims) throw DataError("overlay volumes differ in shape");
    if (z >= image.dims.depth) {
        throw DataError("slice index " + std::to_string(z) + " out of range (depth "
                        + std::to_string(image.dims.depth) + ")");
    }
    const std::size_t h = image.dims.height, w = image.dims.width;
    const auto gray = to_gray8<float>(image.slice(z));
    const auto gt = truth.slice(z);
    const auto pr = pred.slice(z);
    std::vector<std::uint8_t> out(h * 3 * w);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            const std::size_t k = y * w + x;
            out[y * 3 * w + x] = gray[k];
            out[y * 3 * w + w + x] = gt[k] ? 255 : 0;
            out[y * 3 * w + 2 * w + x] = pr[k] ? 255 : 0;
        }
    }
    return out;
}

} // namespace livseg
