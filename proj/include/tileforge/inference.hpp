#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "tileforge/nn.hpp"
#include "tileforge/tiler.hpp"

namespace tileforge {

struct InferenceError : std::runtime_error { using std::runtime_error::runtime_error; };
struct NoTiles : InferenceError { using InferenceError::InferenceError; };
struct GridMismatch : InferenceError { using InferenceError::InferenceError; };

struct SlideReport {
    struct TileProb {
        int grid_x = 0, grid_y = 0;
        double prob = 0;
    };
    std::string slide_id;
    std::vector<TileProb> tiles; // (grid_y, grid_x) order
    double mean_prob = 0;
    TileLabel decision = TileLabel::NON_PROGRESSOR; // PROGRESSOR iff mean >= 0.5
    std::array<int64_t, 20> histogram{};
};

SlideReport aggregate_report(const std::string& slide_id,
                             std::vector<SlideReport::TileProb> tiles);

// Predicts every kept tile of one store; reduction runs in fixed
// (grid_y, grid_x) order so the mean is reproducible.
SlideReport infer_slide(const nn::Model& model, const TileStore& store, int jobs = 1);

// Row-major tiles_y x tiles_x matrix; cells without kept tiles are absent.
std::vector<std::optional<double>> heatmap_grid(const SlideReport& report,
                                                int tiles_x, int tiles_y);

void save_slide_report(const std::filesystem::path& path, const SlideReport& report);
SlideReport load_slide_report(const std::filesystem::path& path);

} // namespace tileforge
