#pragma once

#include <filesystem>
#include <vector>

#include "tileforge/config.hpp"

namespace tileforge {

// Synthetic slide corpus with class-correlated texture: progressor slides
// carry a high-frequency pattern, non-progressor slides a low-frequency one,
// on the same stain-like palette. Each slide gets an ROI polygon over the
// tissue area, one EXCLUDE patch, a white margin, and a unique patient.
struct SynthParams {
    int per_class = 20;
    int64_t slide_w = 1152;
    int64_t slide_h = 768;
    int raw_tile = 128;
    uint64_t seed = 7;
};

// Writes slides/, annotations/, corpus.json and patients.csv under dir.
std::vector<CorpusSlide> generate_corpus(const std::filesystem::path& dir,
                                         const SynthParams& params);

// One standalone slide (no corpus bookkeeping); used for large tiling runs.
void generate_slide(const std::filesystem::path& slide_dir, const std::string& slide_id,
                    int64_t width, int64_t height, TileLabel label, uint64_t seed);

} // namespace tileforge
