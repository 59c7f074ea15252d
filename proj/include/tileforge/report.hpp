#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "tileforge/inference.hpp"
#include "tileforge/metrics.hpp"

namespace tileforge {

// RGBA raster for renders with transparent cells.
struct ImageRGBA {
    int width = 0;
    int height = 0;
    std::vector<uint8_t> pix; // width*height*4

    ImageRGBA() = default;
    ImageRGBA(int w, int h) : width(w), height(h), pix(size_t(w) * h * 4, 0) {}
    uint8_t* at(int x, int y) { return pix.data() + (size_t(y) * width + x) * 4; }
    const uint8_t* at(int x, int y) const {
        return pix.data() + (size_t(y) * width + x) * 4;
    }
};

void write_png(const std::filesystem::path& path, const ImageU8& img);
void write_png(const std::filesystem::path& path, const ImageRGBA& img);

struct SlideEval {
    std::string slide_id;
    double mean_prob = 0;
    TileLabel decision = TileLabel::NON_PROGRESSOR;
    TileLabel truth = TileLabel::NON_PROGRESSOR;
};

struct EvalReport {
    ConfusionMatrix cm;
    Scores tile_scores;
    double auc = 0;
    RocCurve roc;
    std::vector<SlideEval> slides;
    int n_correct_slides = 0;
    std::string config_digest;
};

// Diverging orange-blue over the slide thumbnail: 1 -> orange, 0 -> blue,
// through white at 0.5. Cells without a probability stay transparent.
ImageRGBA render_slide_heatmap(const ImageU8& thumbnail,
                               const std::vector<std::optional<double>>& grid,
                               int tiles_x, int tiles_y, double alpha = 0.6);

struct HistogramRow {
    double bin_lo = 0, bin_hi = 0;
    int64_t count = 0;
};

std::vector<HistogramRow> render_histogram(const SlideReport& report);
void write_histogram_csv(const std::filesystem::path& path,
                         const std::vector<HistogramRow>& rows);

// Emits metrics.json, confusion.csv, roc.csv, slide_<id>.report.json and
// summary.txt. Every file lands via temp-name + rename.
void write_eval_report(const EvalReport& eval, const std::filesystem::path& dir,
                       const std::vector<SlideReport>& slide_reports = {});

} // namespace tileforge
