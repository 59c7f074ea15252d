#pragma once

#include <array>
#include <filesystem>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "tileforge/common.hpp"

namespace tileforge {

struct SlideError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct UnsupportedFormat : SlideError { using SlideError::SlideError; };
struct CorruptHeader : SlideError { using SlideError::SlideError; };
struct OutOfBounds : SlideError { using SlideError::SlideError; };
struct IoError : SlideError { using SlideError::SlideError; };
struct ParseError : SlideError { using SlideError::SlideError; };
struct UnknownLabel : SlideError { using SlideError::SlideError; };

struct LevelInfo {
    int64_t width = 0;
    int64_t height = 0;
    double downsample = 1.0;
};

// Immutable after open; read_region is safe to call from multiple threads.
class SlideImage {
public:
    virtual ~SlideImage() = default;

    const std::string& slide_id() const { return slide_id_; }
    const std::vector<LevelInfo>& levels() const { return levels_; }
    std::optional<double> mpp() const { return mpp_; }

    ImageU8 read_region(int level, int64_t x, int64_t y, int w, int h) const;

protected:
    void validate_levels() const; // throws CorruptHeader

    std::string slide_id_;
    std::vector<LevelInfo> levels_;
    std::optional<double> mpp_;

private:
    virtual void read_impl(int level, int64_t x, int64_t y, int w, int h,
                           uint8_t* dst) const = 0;
};

// Dispatches on container: raw-slide directory or tiled TIFF file.
std::unique_ptr<SlideImage> open_slide(const std::filesystem::path& path);

// Streaming writer for the raw-slide directory format
// (meta.json + level_<i>.rgb row-major RGB8 planes).
class RawSlideWriter {
public:
    RawSlideWriter(const std::filesystem::path& dir, std::string slide_id,
                   std::optional<double> mpp = std::nullopt);
    ~RawSlideWriter();

    void begin_level(int64_t width, int64_t height, double downsample);
    void write_rows(const uint8_t* rgb, int64_t n_rows);
    void finish(); // writes meta.json

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

// Convenience: one call per fully materialized pyramid.
void write_raw_slide(const std::filesystem::path& dir, const std::string& slide_id,
                     const std::vector<ImageU8>& levels,
                     std::optional<double> mpp = std::nullopt);

enum class AnnLabel { ROI, EXCLUDE };

struct AnnRegion {
    AnnLabel label;
    std::vector<std::array<double, 2>> polygon; // level-0 px, closed implicitly
};

struct AnnotationSet {
    std::vector<AnnRegion> regions;
};

AnnotationSet load_annotations(const std::filesystem::path& path);
void save_annotations(const std::filesystem::path& path, const AnnotationSet& ann);

// Fraction of the rect covered by the union of polygons with the given label,
// sampled on a fixed 16x16 sub-grid of point centers.
double coverage_fraction(const AnnotationSet& ann, AnnLabel label,
                         double x, double y, double w, double h);

bool point_in_polygon(const std::vector<std::array<double, 2>>& poly,
                      double px, double py);

} // namespace tileforge
