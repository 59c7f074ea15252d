// tileforge: config-driven pipeline runner.
// Subcommands: synth | tile | curate | train | eval | infer | gradcam

#include <cstdlib>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"

#include "tileforge/config.hpp"
#include "tileforge/gradcam.hpp"
#include "tileforge/inference.hpp"
#include "tileforge/pipeline.hpp"
#include "tileforge/synth.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace tileforge;

namespace {

void log_event(const json& j) { std::cerr << j.dump() << "\n"; }

struct CommonOpts {
    std::string config_path;
    int jobs = 0; // 0 = from config / env
    bool dry_run = false;
    std::optional<uint64_t> seed_override;
};

int resolve_jobs(const CommonOpts& opts, const PipelineConfig& cfg) {
    if (opts.jobs > 0) return opts.jobs;
    if (const char* env = std::getenv("TILEFORGE_JOBS")) {
        int v = std::atoi(env);
        if (v > 0) return v;
    }
    return cfg.jobs;
}

PipelineConfig load_and_validate(const CommonOpts& opts) {
    PipelineConfig cfg = load_config(opts.config_path);
    if (opts.seed_override) {
        cfg.seed = *opts.seed_override;
        cfg.augment.master_seed = *opts.seed_override;
    }
    validate_config(cfg);
    return cfg;
}

int cmd_tile(const CommonOpts& opts) {
    PipelineConfig cfg = load_and_validate(opts);
    int jobs = resolve_jobs(opts, cfg);
    auto corpus = load_corpus(cfg.corpus);
    if (opts.dry_run) {
        std::cout << "tile: would process " << corpus.size() << " slides into "
                  << cfg.tile_store << " (jobs=" << jobs << ")\n";
        return 0;
    }
    int failures = 0;
    int64_t total_kept = 0, total_rejected = 0;
    for (const auto& cs : corpus) {
        try {
            auto slide = open_slide(cs.slide_path);
            AnnotationSet ann;
            if (cs.annotation_path) ann = load_annotations(*cs.annotation_path);
            auto records = tile_slide(*slide, ann, cfg.tiler, cs.label, cs.patient_id, jobs);
            int64_t kept = 0;
            for (const auto& r : records) kept += r.kept ? 1 : 0;
            write_tile_store(cfg.tile_store / cs.slide_id, records);
            total_kept += kept;
            total_rejected += int64_t(records.size()) - kept;
            log_event({{"event", "slide_tiled"},
                       {"slide_id", cs.slide_id},
                       {"kept", kept},
                       {"rejected", int64_t(records.size()) - kept}});
        } catch (const std::exception& e) {
            ++failures;
            log_event({{"event", "slide_failed"}, {"slide_id", cs.slide_id}, {"error", e.what()}});
        }
    }
    std::cout << "tiled " << (corpus.size() - failures) << "/" << corpus.size()
              << " slides, kept " << total_kept << " tiles, rejected "
              << total_rejected << "\n";
    return failures == 0 ? 0 : 2;
}

int cmd_curate(const CommonOpts& opts) {
    PipelineConfig cfg = load_and_validate(opts);
    int jobs = resolve_jobs(opts, cfg);
    auto corpus = load_corpus(cfg.corpus);
    std::vector<fs::path> store_dirs;
    for (const auto& cs : corpus) {
        fs::path dir = cfg.tile_store / cs.slide_id;
        if (fs::exists(dir / "tiles.jsonl")) store_dirs.push_back(dir);
    }
    if (opts.dry_run) {
        std::cout << "curate: would build manifest from " << store_dirs.size()
                  << " stores into " << cfg.manifest_path() << "\n";
        return 0;
    }
    try {
        DatasetManifest m = manifest_from_stores(store_dirs);
        m = holdout_slides(std::move(m), cfg.holdout_per_class, cfg.seed);
        if (cfg.roi_model_checkpoint) {
            nn::Model roi = nn::load_checkpoint(*cfg.roi_model_checkpoint);
            std::map<std::string, TileStore> stores;
            m = filter_with_model(std::move(m), [&](const ManifestEntry& e) {
                auto it = stores.find(e.store_dir);
                if (it == stores.end())
                    it = stores.emplace(e.store_dir, TileStore::open(e.store_dir)).first;
                return predict_images(roi, {it->second.load_pixels(e.record_index)},
                                      jobs)[0] >= 0.5;
            });
        }
        m = balance_undersample(std::move(m), cfg.seed);
        m = stratified_split(std::move(m), cfg.fractions, cfg.seed);
        m.seed = cfg.seed;
        fs::create_directories(cfg.run_dir());
        save_manifest(cfg.manifest_path(), m);
        auto counts = m.counts();
        std::cout << "manifest: pre-balance [" << m.provenance.pre_balance[0] << ", "
                  << m.provenance.pre_balance[1] << "], post-balance ["
                  << m.provenance.post_balance[0] << ", " << m.provenance.post_balance[1]
                  << "]\n";
        for (const auto& [split, c] : counts)
            std::cout << "  " << to_string(split) << ": " << c[0] + c[1] << " (" << c[0]
                      << "/" << c[1] << ")\n";
        return 0;
    } catch (const DatasetError& e) {
        log_event({{"event", "curate_failed"}, {"error", e.what()}});
        std::cout << "curate failed: " << e.what() << "\n";
        return 3;
    }
}

int cmd_train(const CommonOpts& opts, const std::string& resume) {
    PipelineConfig cfg = load_and_validate(opts);
    int jobs = resolve_jobs(opts, cfg);
    if (opts.dry_run) {
        std::cout << "train: would train " << cfg.schedule.phase1_epochs << "+"
                  << cfg.schedule.phase2_epochs << " epochs from manifest "
                  << cfg.manifest_path() << "\n";
        return 0;
    }
    try {
        DatasetManifest m = load_manifest(cfg.manifest_path());
        StoreDataSource data(m, cfg.augment, cfg.seed);
        nn::Model model = resume.empty()
                              ? nn::init_model(cfg.model, cfg.seed)
                              : nn::load_checkpoint(resume, cfg.model);
        auto result = nn::train(std::move(model), data, cfg.schedule, jobs);
        fs::create_directories(cfg.run_dir());
        nn::save_checkpoint(result.model, cfg.checkpoint_path());
        std::ofstream hist(cfg.run_dir() / "history.csv", std::ios::trunc);
        hist << "epoch,lr,train_loss,val_loss\n";
        hist.precision(10);
        for (const auto& e : result.history) {
            hist << e.epoch << ',' << e.lr << ',' << e.train_loss << ',' << e.val_loss << "\n";
            log_event({{"event", "epoch"},
                       {"epoch", e.epoch},
                       {"lr", e.lr},
                       {"train_loss", e.train_loss},
                       {"val_loss", e.val_loss}});
        }
        std::cout << "trained " << result.history.size() << " epochs, checkpoint at "
                  << cfg.checkpoint_path() << "\n";
        return 0;
    } catch (const std::exception& e) {
        log_event({{"event", "train_failed"}, {"error", e.what()}});
        std::cout << "train failed: " << e.what() << "\n";
        return 4;
    }
}

int cmd_eval(const CommonOpts& opts) {
    PipelineConfig cfg = load_and_validate(opts);
    int jobs = resolve_jobs(opts, cfg);
    if (opts.dry_run) {
        std::cout << "eval: would evaluate checkpoint " << cfg.checkpoint_path()
                  << " on TEST tiles and HELDOUT_WSI slides\n";
        return 0;
    }
    try {
        if (!fs::exists(cfg.checkpoint_path()))
            throw nn::NnError("missing checkpoint: " + cfg.checkpoint_path().string());
        nn::Model model = nn::load_checkpoint(cfg.checkpoint_path(), cfg.model);
        DatasetManifest m = load_manifest(cfg.manifest_path());
        std::vector<SlideReport> slide_reports;
        EvalReport report = evaluate(model, m, cfg.threshold, jobs, &slide_reports);
        report.config_digest = cfg.digest;
        write_eval_report(report, cfg.run_dir() / "eval", slide_reports);
        std::cout << "tile accuracy: ";
        if (report.tile_scores.accuracy) std::cout << *report.tile_scores.accuracy;
        else std::cout << "undefined";
        std::cout << ", auc: " << report.auc << ", slides correct: "
                  << report.n_correct_slides << "/" << report.slides.size() << "\n";
        return 0;
    } catch (const std::exception& e) {
        log_event({{"event", "eval_failed"}, {"error", e.what()}});
        std::cout << "eval failed: " << e.what() << "\n";
        return 5;
    }
}

// thumbnail from the stored tiles: one mean-color cell per grid position
ImageU8 store_thumbnail(const TileStore& store, int tiles_x, int tiles_y, int cell) {
    ImageU8 thumb(tiles_x * cell, tiles_y * cell, 255);
    const auto& recs = store.records();
    for (size_t i = 0; i < recs.size(); ++i) {
        if (!recs[i].kept) continue;
        ImageU8 px = store.load_pixels(i);
        double mean[3] = {};
        for (size_t k = 0; k < px.pix.size(); k += 3)
            for (int c = 0; c < 3; ++c) mean[c] += px.pix[k + c];
        size_t n = px.pix.size() / 3;
        for (int y = recs[i].grid_y * cell; y < (recs[i].grid_y + 1) * cell; ++y)
            for (int x = recs[i].grid_x * cell; x < (recs[i].grid_x + 1) * cell; ++x)
                for (int c = 0; c < 3; ++c)
                    thumb.at(x, y)[c] = uint8_t(mean[c] / double(n));
    }
    return thumb;
}

int cmd_infer(const CommonOpts& opts, const std::string& slide_id) {
    PipelineConfig cfg = load_and_validate(opts);
    int jobs = resolve_jobs(opts, cfg);
    if (opts.dry_run) {
        std::cout << "infer: would run slide inference for "
                  << (slide_id.empty() ? "all heldout slides" : slide_id) << "\n";
        return 0;
    }
    try {
        if (!fs::exists(cfg.checkpoint_path()))
            throw nn::NnError("missing checkpoint: " + cfg.checkpoint_path().string());
        nn::Model model = nn::load_checkpoint(cfg.checkpoint_path(), cfg.model);
        DatasetManifest m = load_manifest(cfg.manifest_path());
        std::set<std::pair<std::string, std::string>> targets; // (slide, store)
        for (const auto& e : m.entries)
            if ((slide_id.empty() && e.split == Split::HELDOUT_WSI) || e.slide_id == slide_id)
                targets.insert({e.slide_id, e.store_dir});
        if (targets.empty())
            throw InferenceError("no tiles found for slide selection");
        for (const auto& [sid, store_dir] : targets) {
            TileStore store = TileStore::open(store_dir);
            SlideReport report = infer_slide(model, store, jobs);
            fs::path out_dir = cfg.run_dir() / "infer" / sid;
            fs::create_directories(out_dir);
            save_slide_report(out_dir / "report.json", report);
            write_histogram_csv(out_dir / "histogram.csv", render_histogram(report));
            int tiles_x = 0, tiles_y = 0;
            for (const auto& r : store.records()) {
                tiles_x = std::max(tiles_x, r.grid_x + 1);
                tiles_y = std::max(tiles_y, r.grid_y + 1);
            }
            auto grid = heatmap_grid(report, tiles_x, tiles_y);
            ImageU8 thumb = store_thumbnail(store, tiles_x, tiles_y, 16);
            write_png(out_dir / "heatmap.png",
                      render_slide_heatmap(thumb, grid, tiles_x, tiles_y));
            log_event({{"event", "slide_inferred"},
                       {"slide_id", sid},
                       {"mean_prob", report.mean_prob}});
            std::cout << sid << ": mean_prob=" << report.mean_prob << " decision="
                      << (report.decision == TileLabel::PROGRESSOR ? "PROGRESSOR"
                                                                   : "NON_PROGRESSOR")
                      << "\n";
        }
        return 0;
    } catch (const std::exception& e) {
        log_event({{"event", "infer_failed"}, {"error", e.what()}});
        std::cout << "infer failed: " << e.what() << "\n";
        return 6;
    }
}

int cmd_gradcam(const CommonOpts& opts, const std::string& slide_id, int gx, int gy) {
    PipelineConfig cfg = load_and_validate(opts);
    if (opts.dry_run) {
        std::cout << "gradcam: would render tile (" << gx << "," << gy << ") of "
                  << slide_id << "\n";
        return 0;
    }
    try {
        if (!fs::exists(cfg.checkpoint_path()))
            throw nn::NnError("missing checkpoint: " + cfg.checkpoint_path().string());
        nn::Model model = nn::load_checkpoint(cfg.checkpoint_path(), cfg.model);
        TileStore store = TileStore::open(cfg.tile_store / slide_id);
        const auto& recs = store.records();
        size_t idx = recs.size();
        for (size_t i = 0; i < recs.size(); ++i)
            if (recs[i].grid_x == gx && recs[i].grid_y == gy && recs[i].kept) idx = i;
        if (idx == recs.size())
            throw InferenceError("no kept tile at (" + std::to_string(gx) + "," +
                                 std::to_string(gy) + ") in " + slide_id);
        ImageU8 tile = store.load_pixels(idx);
        GradCamMap map = gradcam(model, tile);
        fs::path out_dir = cfg.run_dir() / "gradcam";
        fs::create_directories(out_dir);
        std::string stem = slide_id + "_" + std::to_string(gx) + "_" + std::to_string(gy);
        write_png(out_dir / (stem + ".png"), overlay(tile, map));
        json sidecar{{"slide_id", slide_id}, {"grid_x", gx}, {"grid_y", gy},
                     {"hw", map.hw}, {"raw", map.raw}};
        std::ofstream side(out_dir / (stem + ".json"), std::ios::trunc);
        side << sidecar.dump(2) << "\n";
        std::cout << "wrote " << (out_dir / (stem + ".png")) << "\n";
        return 0;
    } catch (const std::exception& e) {
        log_event({{"event", "gradcam_failed"}, {"error", e.what()}});
        std::cout << "gradcam failed: " << e.what() << "\n";
        return 7;
    }
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"tileforge: slide tiling, curation, training and evaluation"};
    app.require_subcommand(1);

    CommonOpts opts;
    uint64_t seed_flag = 0;
    bool seed_set = false;

    auto add_common = [&](CLI::App* sub, bool needs_config = true) {
        if (needs_config)
            sub->add_option("--config", opts.config_path, "pipeline config file")->required();
        sub->add_option("--jobs", opts.jobs, "worker pool size (env TILEFORGE_JOBS)");
        sub->add_flag("--dry-run", opts.dry_run, "validate and print the plan only");
        sub->add_option("--seed", seed_flag, "override the master seed")
            ->each([&](const std::string&) { seed_set = true; });
    };

    // synth
    auto* synth = app.add_subcommand("synth", "generate the synthetic slide corpus");
    std::string synth_out = "synth_corpus";
    SynthParams sp;
    synth->add_option("--out", synth_out, "output directory")->required();
    synth->add_option("--per-class", sp.per_class, "slides per class");
    synth->add_option("--width", sp.slide_w, "slide width");
    synth->add_option("--height", sp.slide_h, "slide height");
    synth->add_option("--raw-tile", sp.raw_tile, "raw tile size the layout targets");
    synth->add_option("--seed", sp.seed, "corpus seed");

    auto* tile = app.add_subcommand("tile", "extract tiles from every corpus slide");
    add_common(tile);
    auto* curate = app.add_subcommand("curate", "holdout, balance and split the tiles");
    add_common(curate);
    auto* train = app.add_subcommand("train", "run two-phase training");
    add_common(train);
    std::string resume;
    train->add_option("--resume", resume, "resume from a checkpoint");
    auto* eval = app.add_subcommand("eval", "tile-level and slide-level evaluation");
    add_common(eval);
    auto* infer = app.add_subcommand("infer", "slide inference with heatmap and histogram");
    add_common(infer);
    std::string infer_slide_id;
    infer->add_option("--slide", infer_slide_id, "slide id (default: all heldout)");
    auto* gradcam_cmd = app.add_subcommand("gradcam", "per-tile Grad-CAM overlay");
    add_common(gradcam_cmd);
    std::string gc_slide;
    int gc_x = 0, gc_y = 0;
    gradcam_cmd->add_option("--slide", gc_slide, "slide id")->required();
    gradcam_cmd->add_option("--grid-x", gc_x, "tile grid x")->required();
    gradcam_cmd->add_option("--grid-y", gc_y, "tile grid y")->required();

    CLI11_PARSE(app, argc, argv);
    if (seed_set) opts.seed_override = seed_flag;

    try {
        if (synth->parsed()) {
            auto corpus = generate_corpus(synth_out, sp);
            std::cout << "generated " << corpus.size() << " slides under " << synth_out << "\n";
            return 0;
        }
        if (tile->parsed()) return cmd_tile(opts);
        if (curate->parsed()) return cmd_curate(opts);
        if (train->parsed()) return cmd_train(opts, resume);
        if (eval->parsed()) return cmd_eval(opts);
        if (infer->parsed()) return cmd_infer(opts, infer_slide_id);
        if (gradcam_cmd->parsed()) return cmd_gradcam(opts, gc_slide, gc_x, gc_y);
    } catch (const std::exception& e) {
        log_event({{"event", "fatal"}, {"error", e.what()}});
        std::cout << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
