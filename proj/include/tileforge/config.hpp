#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "tileforge/augment.hpp"
#include "tileforge/nn.hpp"
#include "tileforge/tiler.hpp"

namespace tileforge {

struct ConfigError : std::runtime_error { using std::runtime_error::runtime_error; };

// One slide of the input corpus (corpus.json).
struct CorpusSlide {
    std::string slide_id;
    std::filesystem::path slide_path;
    std::optional<std::filesystem::path> annotation_path;
    TileLabel label = TileLabel::NON_PROGRESSOR;
    std::string patient_id;
};

std::vector<CorpusSlide> load_corpus(const std::filesystem::path& path);
void save_corpus(const std::filesystem::path& path, const std::vector<CorpusSlide>& slides);

struct PipelineConfig {
    std::filesystem::path corpus;     // corpus.json
    std::filesystem::path tile_store; // one subdirectory per slide
    std::filesystem::path run_root;   // runs land under run_root/<digest>/

    TilerParams tiler;
    AugmentConfig augment;

    uint64_t seed = 42;
    int holdout_per_class = 10;
    std::array<double, 3> fractions{0.70, 0.15, 0.15};
    std::optional<std::filesystem::path> roi_model_checkpoint;

    nn::ModelSpec model;
    nn::TrainSchedule schedule;

    double threshold = 0.5;
    int jobs = 1;

    std::string digest; // hex hash of the config file bytes

    std::filesystem::path run_dir() const { return run_root / digest; }
    std::filesystem::path manifest_path() const { return run_dir() / "manifest.jsonl"; }
    std::filesystem::path checkpoint_path() const { return run_dir() / "checkpoint.bin"; }
};

PipelineConfig load_config(const std::filesystem::path& path);

// Checks input paths exist and derived values are sane; throws ConfigError.
void validate_config(const PipelineConfig& cfg);

} // namespace tileforge
