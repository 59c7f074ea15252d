#include "tileforge/config.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace tileforge {

std::vector<CorpusSlide> load_corpus(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open corpus " + path.string());
    json doc;
    try {
        in >> doc;
    } catch (const json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    std::vector<CorpusSlide> slides;
    fs::path base = path.parent_path();
    for (const auto& j : doc) {
        CorpusSlide s;
        s.slide_id = j.at("slide_id").get<std::string>();
        s.slide_path = base / j.at("slide").get<std::string>();
        if (j.contains("annotations") && !j["annotations"].is_null())
            s.annotation_path = base / j["annotations"].get<std::string>();
        std::string label = j.at("label").get<std::string>();
        if (label == "PROGRESSOR") s.label = TileLabel::PROGRESSOR;
        else if (label == "NON_PROGRESSOR") s.label = TileLabel::NON_PROGRESSOR;
        else throw ConfigError(path.string() + ": unknown label " + label);
        s.patient_id = j.at("patient_id").get<std::string>();
        slides.push_back(std::move(s));
    }
    return slides;
}

void save_corpus(const fs::path& path, const std::vector<CorpusSlide>& slides) {
    json doc = json::array();
    fs::path base = path.parent_path();
    for (const auto& s : slides) {
        json j{{"slide_id", s.slide_id},
               {"slide", fs::relative(s.slide_path, base).string()},
               {"label", s.label == TileLabel::PROGRESSOR ? "PROGRESSOR" : "NON_PROGRESSOR"},
               {"patient_id", s.patient_id}};
        if (s.annotation_path)
            j["annotations"] = fs::relative(*s.annotation_path, base).string();
        else
            j["annotations"] = nullptr;
        doc.push_back(std::move(j));
    }
    std::ofstream out(path, std::ios::trunc);
    out << doc.dump(2) << "\n";
    if (!out) throw ConfigError("cannot write " + path.string());
}

namespace {

template <typename T>
void maybe(const json& j, const char* key, T& dst) {
    if (j.contains(key)) dst = j.at(key).get<T>();
}

} // namespace

PipelineConfig load_config(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open config " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    std::string bytes = buf.str();

    json doc;
    try {
        doc = json::parse(bytes);
    } catch (const json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }

    PipelineConfig cfg;
    fs::path base = path.parent_path();
    const auto& paths = doc.at("paths");
    cfg.corpus = base / paths.at("corpus").get<std::string>();
    cfg.tile_store = base / paths.at("tile_store").get<std::string>();
    cfg.run_root = base / paths.at("run_dir").get<std::string>();

    if (doc.contains("tiler")) {
        const auto& t = doc["tiler"];
        maybe(t, "raw_size", cfg.tiler.raw_size);
        maybe(t, "out_size", cfg.tiler.out_size);
        maybe(t, "tau_roi", cfg.tiler.tau_roi);
        maybe(t, "tau_exclude", cfg.tiler.tau_exclude);
        maybe(t, "white_threshold", cfg.tiler.white_threshold);
        maybe(t, "min_tissue_fraction", cfg.tiler.min_tissue_fraction);
        maybe(t, "low_variance_std", cfg.tiler.low_variance_std);
        maybe(t, "sharpen_amount", cfg.tiler.sharpen_amount);
        if (t.contains("ref_mean")) cfg.tiler.ref.mean = t["ref_mean"].get<std::array<double, 3>>();
        if (t.contains("ref_std")) cfg.tiler.ref.stdev = t["ref_std"].get<std::array<double, 3>>();
    }
    if (doc.contains("augment")) {
        const auto& a = doc["augment"];
        maybe(a, "p_color_shift", cfg.augment.p_color_shift);
        maybe(a, "p_saturation", cfg.augment.p_saturation);
        maybe(a, "p_brightness_contrast", cfg.augment.p_brightness_contrast);
        maybe(a, "p_sharpen", cfg.augment.p_sharpen);
        maybe(a, "color_shift_lo", cfg.augment.color_shift_lo);
        maybe(a, "color_shift_hi", cfg.augment.color_shift_hi);
        maybe(a, "saturation_lo", cfg.augment.saturation_lo);
        maybe(a, "saturation_hi", cfg.augment.saturation_hi);
        maybe(a, "brightness_lo", cfg.augment.brightness_lo);
        maybe(a, "brightness_hi", cfg.augment.brightness_hi);
        maybe(a, "contrast_lo", cfg.augment.contrast_lo);
        maybe(a, "contrast_hi", cfg.augment.contrast_hi);
        maybe(a, "sharpen_lo", cfg.augment.sharpen_lo);
        maybe(a, "sharpen_hi", cfg.augment.sharpen_hi);
    }
    if (doc.contains("dataset")) {
        const auto& d = doc["dataset"];
        maybe(d, "seed", cfg.seed);
        maybe(d, "holdout_per_class", cfg.holdout_per_class);
        if (d.contains("fractions")) cfg.fractions = d["fractions"].get<std::array<double, 3>>();
        if (d.contains("roi_model_checkpoint") && !d["roi_model_checkpoint"].is_null())
            cfg.roi_model_checkpoint = base / d["roi_model_checkpoint"].get<std::string>();
    }
    cfg.augment.master_seed = cfg.seed;
    if (doc.contains("model")) {
        const auto& m = doc["model"];
        maybe(m, "input_hw", cfg.model.input_hw);
        maybe(m, "stem_channels", cfg.model.stem_channels);
        maybe(m, "blocks", cfg.model.blocks);
        maybe(m, "dropout_rate", cfg.model.dropout_rate);
    }
    cfg.model.input_hw = cfg.tiler.out_size; // tiles are the model input
    if (doc.contains("model") && doc["model"].contains("input_hw"))
        cfg.model.input_hw = doc["model"]["input_hw"].get<int>();
    if (doc.contains("schedule")) {
        const auto& s = doc["schedule"];
        maybe(s, "phase1_epochs", cfg.schedule.phase1_epochs);
        maybe(s, "phase1_lr", cfg.schedule.phase1_lr);
        maybe(s, "phase2_epochs", cfg.schedule.phase2_epochs);
        maybe(s, "phase2_lr0", cfg.schedule.phase2_lr0);
        maybe(s, "decay", cfg.schedule.decay);
        maybe(s, "patience", cfg.schedule.patience);
        maybe(s, "restore_best", cfg.schedule.restore_best);
        maybe(s, "batch_size", cfg.schedule.batch_size);
    }
    maybe(doc, "threshold", cfg.threshold);
    maybe(doc, "jobs", cfg.jobs);

    char hex[17];
    std::snprintf(hex, sizeof hex, "%016llx",
                  static_cast<unsigned long long>(fnv1a64(bytes)));
    cfg.digest = hex;
    return cfg;
}

void validate_config(const PipelineConfig& cfg) {
    if (!fs::exists(cfg.corpus))
        throw ConfigError("corpus not found: " + cfg.corpus.string());
    double fsum = cfg.fractions[0] + cfg.fractions[1] + cfg.fractions[2];
    if (std::abs(fsum - 1.0) > 1e-9)
        throw ConfigError("dataset fractions must sum to 1");
    if (cfg.tiler.raw_size < 1 || cfg.tiler.out_size < 1)
        throw ConfigError("tiler sizes must be positive");
    if (cfg.threshold < 0 || cfg.threshold > 1)
        throw ConfigError("threshold must be in [0,1]");
    if (cfg.schedule.patience < 1)
        throw ConfigError("schedule patience must be >= 1");
    cfg.augment.validate();
    nn::geometry(cfg.model); // throws on impossible geometry
    if (cfg.roi_model_checkpoint && !fs::exists(*cfg.roi_model_checkpoint))
        throw ConfigError("roi model checkpoint not found: " +
                          cfg.roi_model_checkpoint->string());
}

} // namespace tileforge
