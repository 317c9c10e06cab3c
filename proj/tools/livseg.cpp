// livseg: phantom generation, preprocessing, training, evaluation, grids, overlays.

#include <livseg/report.hpp>

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

namespace {

using namespace livseg;

struct Globals {
    std::uint64_t seed = 0;
    std::string precision = "f32";
    std::string out;
    std::size_t threads = 0;
};

struct NetOverrides {
    std::size_t epochs = 10;
    std::size_t batch = 8;
    double lr = 1e-4;
    std::size_t base = 8;
    std::size_t levels = 3;
    double threshold = 0.5;
    double bm3d_sigma = Bm3dParams{}.sigma;

    void add_to(CLI::App* cmd)
    {
        cmd->add_option("--epochs", epochs, "training epochs")->capture_default_str();
        cmd->add_option("--batch", batch, "slices per mini-batch")->capture_default_str();
        cmd->add_option("--lr", lr, "Adam learning rate")->capture_default_str();
        cmd->add_option("--base", base, "U-Net base channels")->capture_default_str();
        cmd->add_option("--levels", levels, "U-Net resolution levels")->capture_default_str();
        cmd->add_option("--threshold", threshold, "probability threshold")->capture_default_str();
    }

    ExperimentSettings settings(const Globals& g) const
    {
        ExperimentSettings s;
        s.train.epochs = epochs;
        s.train.batch_size = batch;
        s.train.learning_rate = lr;
        s.train.threshold = threshold;
        s.net.base_channels = base;
        s.net.levels = levels;
        s.seed = g.seed;
        s.precision = parse_precision(g.precision);
        s.threads = g.threads;
        validate(s.train);
        validate(s.net);
        return s;
    }
};

template <typename F>
auto with_precision(Precision p, F&& f)
{
    if (p == Precision::f64) return f(double{});
    return f(float{});
}

fs::path out_or(const Globals& g, const std::string& fallback) { return g.out.empty() ? fs::path(fallback) : fs::path(g.out); }

int cmd_phantom(const Globals& g, std::size_t count, const Dims& dims)
{
    PhantomConfig cfg;
    cfg.dims = dims;
    cfg.seed = g.seed;
    const auto dir = out_or(g, "phantoms");
    const auto files = write_phantom_corpus(dir, count, cfg);
    std::cout << "wrote " << count << " phantom cases (" << files.size() << " files) to " << dir.string() << '\n';
    return 0;
}

int cmd_preprocess(const Globals& g, const std::string& in_dir, const std::string& pipeline)
{
    const auto spec = parse_pipeline(pipeline);
    const auto dir = out_or(g, "preprocessed");
    const auto ids = list_cases(in_dir);
    if (ids.empty()) throw DataError("no cases found in " + in_dir);
    for (const auto& id : ids) {
        const auto vol = read_hu_volume(fs::path(in_dir) / id);
        const auto out = apply_pipeline(vol, spec, g.threads);
        write_volume<float>(out, dir / id);
        const auto mstem = fs::path(in_dir) / (id + std::string(kMaskSuffix));
        if (fs::exists(header_path(mstem))) write_mask_volume(read_mask_volume(mstem), dir / (id + std::string(kMaskSuffix)));
    }
    std::cout << "preprocessed " << ids.size() << " volumes with '" << render_pipeline(spec) << "' into "
              << dir.string() << '\n';
    return 0;
}

int cmd_train(const Globals& g, const NetOverrides& o, const std::string& data, const std::string& pipeline,
              const std::string& log_path)
{
    const auto s = o.settings(g);
    const auto spec = parse_pipeline(pipeline);
    const auto raw = load_corpus(data);
    const auto split = split_corpus(raw, s);
    std::ofstream log;
    if (!log_path.empty()) {
        log.open(log_path);
        if (!log) throw DataError("cannot write " + log_path);
        log << kEpochCsvHeader << '\n';
    }
    std::cout << kEpochCsvHeader << '\n';
    return with_precision(s.precision, [&](auto tag) {
        using T = decltype(tag);
        auto run = run_experiment<T>(s, raw, split, "train", spec, [&](const EpochLog& e) {
            std::cout << epoch_csv_line(e) << std::endl;
            if (log) log << epoch_csv_line(e) << '\n';
        });
        if (!run.result.ok()) throw DataError(*run.result.error);
        const auto ckpt = out_or(g, "model.ckpt");
        save_checkpoint(run.trained->params, ckpt, checkpoint_metadata(s, spec, run.trained->best_epoch));
        const auto& r = run.result;
        std::cout << "best epoch " << run.trained->best_epoch << "; dice % train " << fixed(r.train_dice, 2) << " val "
                  << fixed(r.val_dice, 2) << " test " << fixed(r.test_dice, 2) << "\ncheckpoint " << ckpt.string()
                  << '\n';
        return 0;
    });
}

template <typename T>
std::pair<Checkpoint<T>, PipelineSpec> open_checkpoint(const std::string& path, double& threshold)
{
    auto ck = load_checkpoint<T>(path);
    PipelineSpec spec;
    if (auto it = ck.metadata.find("pipeline"); it != ck.metadata.end()) spec = parse_pipeline(it->second);
    if (auto it = ck.metadata.find("threshold"); it != ck.metadata.end()) threshold = std::stod(it->second);
    return {std::move(ck), std::move(spec)};
}

template <typename T>
MaskVolume checked_predict(const UNetParams<T>& p, const FloatVolume& img, double threshold, std::size_t threads)
{
    try {
        check_input_shape(p.config(), {1, p.config().in_channels, img.dims.height, img.dims.width});
    } catch (const std::invalid_argument& e) {
        throw DataError(std::string("volume does not fit the checkpoint network: ") + e.what());
    }
    return predict_mask(p, img, threshold, 16, threads);
}

int cmd_evaluate(const Globals& g, const std::string& checkpoint, const std::string& data)
{
    return with_precision(parse_precision(g.precision), [&](auto tag) {
        using T = decltype(tag);
        double threshold = 0.5;
        auto [ck, spec] = open_checkpoint<T>(checkpoint, threshold);
        const auto raw = load_corpus(data);
        std::vector<std::string> ids;
        std::vector<MaskVolume> preds, truths;
        for (const auto& c : raw) {
            ids.push_back(c.id);
            preds.push_back(checked_predict(ck.params, apply_pipeline(c.image, spec, g.threads), threshold, g.threads));
            truths.push_back(c.mask);
        }
        const auto rep = dice_report(ids, preds, truths);
        std::ostringstream csv;
        csv << "id,dice\n";
        for (std::size_t i = 0; i < ids.size(); ++i) csv << ids[i] << ',' << fixed(100.0 * rep.per_case[i], 4) << '\n';
        csv << "mean," << fixed(100.0 * rep.mean, 4) << '\n';
        if (!g.out.empty()) write_text(g.out, csv.str());
        std::cout << csv.str() << "Dice " << fixed(100.0 * rep.mean, 2) << "% (per-volume mean over " << ids.size()
                  << " volumes)\n";
        return 0;
    });
}

int cmd_grid(const Globals& g, const NetOverrides& o, const std::string& data, const std::string& mode_name)
{
    const auto mode = parse_grid_mode(mode_name);
    const auto s = o.settings(g);
    Bm3dParams bm;
    bm.sigma = o.bm3d_sigma;
    validate(bm);
    const auto raw = load_corpus(data);
    const auto rep = with_precision(s.precision, [&](auto tag) {
        using T = decltype(tag);
        return run_grid<T>(s, raw, mode, bm, [](const ExperimentResult& r) {
            std::cerr << r.seq << (r.ok() ? " done" : " ERROR: " + *r.error) << " (" << fixed(r.seconds, 1)
                      << " s)\n";
        });
    });
    const auto dir = out_or(g, "grid");
    const std::string stem = std::string("grid_") + mode_name;
    write_text(dir / (stem + ".csv"), grid_csv(rep));
    write_text(dir / (stem + ".md"), grid_markdown(rep));
    std::cout << grid_csv(rep);
    return 0;
}

int cmd_overlay(const Globals& g, const std::string& checkpoint, const std::string& volume, std::string mask,
                std::size_t slice)
{
    return with_precision(parse_precision(g.precision), [&](auto tag) {
        using T = decltype(tag);
        double threshold = 0.5;
        auto [ck, spec] = open_checkpoint<T>(checkpoint, threshold);
        const auto vol = read_hu_volume(volume);
        if (mask.empty()) mask = volume_stem(volume).string() + std::string(kMaskSuffix);
        const auto truth = read_mask_volume(mask);
        validate_pair(vol, truth);
        const auto img = apply_pipeline(vol, spec, g.threads);
        const auto pred = checked_predict(ck.params, img, threshold, g.threads);
        const auto pix = overlay_triptych(img, truth, pred, slice);
        const auto out = out_or(g, "overlay.pgm");
        write_pgm(out, vol.dims.height, 3 * vol.dims.width, pix);
        std::cout << "wrote " << out.string() << '\n';
        return 0;
    });
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"livseg: CT preprocessing and liver segmentation toolkit"};
    app.require_subcommand(1);
    Globals g;
    app.add_option("--seed", g.seed, "random seed")->capture_default_str();
    app.add_option("--precision", g.precision, "floating point precision for the network")
        ->check(CLI::IsMember({"f32", "f64"}))
        ->capture_default_str();
    app.add_option("--out", g.out, "output file or directory");
    app.add_option("--threads", g.threads, "worker threads (0 = hardware concurrency)");

    std::size_t count = 40;
    Dims dims{16, 64, 64};
    auto* phantom = app.add_subcommand("phantom", "write synthetic CT volumes with liver masks");
    phantom->add_option("--count", count, "number of cases")->capture_default_str();
    phantom->add_option("--depth", dims.depth)->capture_default_str();
    phantom->add_option("--height", dims.height)->capture_default_str();
    phantom->add_option("--width", dims.width)->capture_default_str();

    std::string in_dir, pipeline = "hu(-100,400)|median(3)|zscore";
    auto* pre = app.add_subcommand("preprocess", "apply a pipeline to every volume in a directory");
    pre->add_option("--in", in_dir, "input corpus directory")->required();
    pre->add_option("--pipeline", pipeline, "pipeline string, e.g. hu(-100,400)|median(3)|zscore")->required();

    NetOverrides net;
    std::string data, log_path;
    auto* tr = app.add_subcommand("train", "train a U-Net on a corpus and save a checkpoint");
    tr->add_option("--data", data, "corpus directory")->required();
    tr->add_option("--pipeline", pipeline, "preprocessing pipeline")->capture_default_str();
    tr->add_option("--log", log_path, "epoch log CSV");
    net.add_to(tr);

    std::string checkpoint;
    auto* ev = app.add_subcommand("evaluate", "Dice of a checkpoint on a corpus");
    ev->add_option("--checkpoint", checkpoint)->required();
    ev->add_option("--data", data, "corpus directory")->required();

    std::string mode = "sequences";
    auto* grid = app.add_subcommand("grid", "run the single-technique or combined-sequence grid");
    grid->add_option("--data", data, "corpus directory")->required();
    grid->add_option("--mode", mode)->check(CLI::IsMember({"singles", "sequences"}))->capture_default_str();
    grid->add_option("--bm3d-sigma", net.bm3d_sigma, "BM3D noise level on the unit scale")->capture_default_str();
    net.add_to(grid);

    std::string volume, mask;
    std::size_t slice = 0;
    auto* ov = app.add_subcommand("overlay", "PGM panels: input | ground truth | prediction");
    ov->add_option("--checkpoint", checkpoint)->required();
    ov->add_option("--volume", volume, "HU volume (.hdr/.raw stem)")->required();
    ov->add_option("--mask", mask, "ground-truth mask (default <volume>_seg)");
    ov->add_option("--slice", slice)->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    try {
        if (*phantom) return cmd_phantom(g, count, dims);
        if (*pre) return cmd_preprocess(g, in_dir, pipeline);
        if (*tr) return cmd_train(g, net, data, pipeline, log_path);
        if (*ev) return cmd_evaluate(g, checkpoint, data);
        if (*grid) return cmd_grid(g, net, data, mode);
        if (*ov) return cmd_overlay(g, checkpoint, volume, mask, slice);
    } catch (const PipelineParseError& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return 1;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << '\n';
        return 3;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 1;
}
