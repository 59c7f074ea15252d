#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "tileforge/common.hpp"
#include "tileforge/slide_io.hpp"

namespace tileforge {

struct TilerError : std::runtime_error { using std::runtime_error::runtime_error; };
struct SlideTooSmall : TilerError { using TilerError::TilerError; };

enum class TileLabel : int { NON_PROGRESSOR = 0, PROGRESSOR = 1 };

enum class RejectReason { EXCLUDED, OFF_ROI, BACKGROUND, LOW_VARIANCE, ROI_MODEL };

const char* to_string(RejectReason r);
RejectReason reject_reason_from_string(const std::string& s);

struct ReferenceColorStats {
    std::array<double, 3> mean{182.0, 140.0, 173.0}; // H&E-ish default, 0..255
    std::array<double, 3> stdev{38.0, 42.0, 32.0};
};

struct TilerParams {
    int raw_size = 1024;
    int out_size = 224;
    double tau_roi = 0.5;      // keep needs ROI coverage >= tau_roi (when ROIs exist)
    double tau_exclude = 0.1;  // keep needs EXCLUDE coverage <= tau_exclude
    int white_threshold = 220; // pixel is tissue when min channel < this
    double min_tissue_fraction = 0.25;
    double low_variance_std = 4.0;
    double sharpen_amount = 0.5;
    ReferenceColorStats ref;
};

struct QcResult {
    enum class Verdict { PASS, BACKGROUND, LOW_VARIANCE };
    double tissue_fraction = 0.0;
    Verdict verdict = Verdict::PASS;
};

struct GridPos {
    int grid_x = 0, grid_y = 0;
    int64_t origin_x = 0, origin_y = 0;
};

struct TileRecord {
    std::string slide_id;
    std::string patient_id;
    int grid_x = 0, grid_y = 0;
    int64_t origin_x = 0, origin_y = 0;
    int raw_size_px = 1024;
    int out_size_px = 224;
    TileLabel label = TileLabel::NON_PROGRESSOR;
    double tissue_fraction = 0.0;
    bool kept = false;
    std::optional<RejectReason> reject_reason;
    ImageU8 pixels; // present iff kept

    uint64_t uid() const {
        uint64_t h = fnv1a64(slide_id);
        h = hash_combine(h, static_cast<uint64_t>(grid_y));
        return hash_combine(h, static_cast<uint64_t>(grid_x));
    }
};

// All full raw_size tiles of level 0, row-major; partial edge tiles dropped.
std::vector<GridPos> plan_grid(const SlideImage& slide, int raw_size);

ImageU8 resize_bilinear(const ImageU8& src, int dst_w, int dst_h);

// Same kernel on a single-channel float plane (shared with Grad-CAM upsampling).
std::vector<float> resize_bilinear_plane(const std::vector<float>& src, int src_w,
                                         int src_h, int dst_w, int dst_h);

ImageU8 normalize_color(const ImageU8& tile, const ReferenceColorStats& ref);

ImageU8 sharpen(const ImageU8& tile, double amount);

QcResult qc_tile(const ImageU8& tile, const TilerParams& params = {});

// Fixed stage order: read -> annotation gate -> QC -> resize -> normalize -> sharpen.
TileRecord extract_tile(const SlideImage& slide, const GridPos& pos,
                        const AnnotationSet& ann, const TilerParams& params,
                        TileLabel label, const std::string& patient_id);

std::vector<TileRecord> tile_slide(const SlideImage& slide, const AnnotationSet& ann,
                                   const TilerParams& params, TileLabel label,
                                   const std::string& patient_id, int jobs = 1);

// Tile store: tiles.jsonl (all records) + tiles.bin (kept pixels, jsonl order).
void write_tile_store(const std::filesystem::path& dir,
                      const std::vector<TileRecord>& records);

class TileStore {
public:
    static TileStore open(const std::filesystem::path& dir);

    const std::vector<TileRecord>& records() const { return records_; } // pixels empty
    ImageU8 load_pixels(size_t record_index) const; // record must be kept
    const std::filesystem::path& dir() const { return dir_; }
    size_t kept_count() const { return kept_count_; }

private:
    std::filesystem::path dir_;
    std::vector<TileRecord> records_;
    std::vector<int64_t> offsets_; // byte offset into tiles.bin, -1 for rejected
    size_t kept_count_ = 0;
};

} // namespace tileforge
