#include "tileforge/slide_io.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cmath>
#include <fstream>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace tileforge {

ImageU8 SlideImage::read_region(int level, int64_t x, int64_t y, int w, int h) const {
    if (level < 0 || level >= static_cast<int>(levels_.size()))
        throw OutOfBounds("read_region: level " + std::to_string(level) + " out of range");
    const auto& lv = levels_[level];
    if (w <= 0 || h <= 0 || x < 0 || y < 0 || x + w > lv.width || y + h > lv.height)
        throw OutOfBounds("read_region: rect outside level " + std::to_string(level));
    ImageU8 out(w, h);
    read_impl(level, x, y, w, h, out.pix.data());
    return out;
}

void SlideImage::validate_levels() const {
    if (levels_.empty())
        throw CorruptHeader(slide_id_ + ": no levels");
    if (levels_[0].downsample != 1.0)
        throw CorruptHeader(slide_id_ + ": level 0 downsample must be 1");
    for (size_t i = 0; i < levels_.size(); ++i) {
        const auto& lv = levels_[i];
        if (lv.width <= 0 || lv.height <= 0 || lv.downsample < 1.0)
            throw CorruptHeader(slide_id_ + ": bad level geometry");
        if (i > 0 && lv.downsample <= levels_[i - 1].downsample)
            throw CorruptHeader(slide_id_ + ": downsample not strictly increasing");
        // level dims must match level0/downsample within +-1 px
        double ew = static_cast<double>(levels_[0].width) / lv.downsample;
        double eh = static_cast<double>(levels_[0].height) / lv.downsample;
        if (std::abs(ew - static_cast<double>(lv.width)) > 1.0 + 1e-9 ||
            std::abs(eh - static_cast<double>(lv.height)) > 1.0 + 1e-9)
            throw CorruptHeader(slide_id_ + ": level " + std::to_string(i) +
                                " dims inconsistent with downsample");
    }
    if (mpp_ && *mpp_ <= 0)
        throw CorruptHeader(slide_id_ + ": mpp must be positive");
}

namespace {

// POSIX fd with RAII; pread keeps concurrent region reads independent.
class Fd {
public:
    Fd() = default;
    explicit Fd(const fs::path& p) {
        fd_ = ::open(p.c_str(), O_RDONLY);
        if (fd_ < 0) throw IoError("cannot open " + p.string());
    }
    ~Fd() { if (fd_ >= 0) ::close(fd_); }
    Fd(Fd&& o) noexcept : fd_(o.fd_) { o.fd_ = -1; }
    Fd& operator=(Fd&& o) noexcept {
        if (this != &o) { if (fd_ >= 0) ::close(fd_); fd_ = o.fd_; o.fd_ = -1; }
        return *this;
    }
    Fd(const Fd&) = delete;
    Fd& operator=(const Fd&) = delete;

    void pread_exact(void* buf, size_t n, int64_t off) const {
        auto* p = static_cast<uint8_t*>(buf);
        while (n > 0) {
            ssize_t r = ::pread(fd_, p, n, off);
            if (r <= 0) throw IoError("short read");
            p += r; off += r; n -= static_cast<size_t>(r);
        }
    }
    int64_t size() const {
        int64_t end = ::lseek(fd_, 0, SEEK_END);
        if (end < 0) throw IoError("lseek failed");
        return end;
    }

private:
    int fd_ = -1;
};

class RawSlide final : public SlideImage {
public:
    explicit RawSlide(const fs::path& dir) {
        std::ifstream in(dir / "meta.json");
        if (!in) throw IoError("cannot open " + (dir / "meta.json").string());
        json meta;
        try {
            in >> meta;
        } catch (const json::exception& e) {
            throw CorruptHeader(dir.string() + ": bad meta.json: " + e.what());
        }
        try {
            slide_id_ = meta.at("slide_id").get<std::string>();
            for (const auto& lv : meta.at("levels"))
                levels_.push_back({lv.at("w").get<int64_t>(), lv.at("h").get<int64_t>(),
                                   lv.at("downsample").get<double>()});
            if (meta.contains("mpp") && !meta["mpp"].is_null())
                mpp_ = meta["mpp"].get<double>();
        } catch (const json::exception& e) {
            throw CorruptHeader(dir.string() + ": meta.json schema: " + e.what());
        }
        validate_levels();
        for (size_t i = 0; i < levels_.size(); ++i) {
            fs::path plane = dir / ("level_" + std::to_string(i) + ".rgb");
            Fd fd(plane);
            int64_t want = levels_[i].width * levels_[i].height * 3;
            if (fd.size() != want)
                throw CorruptHeader(plane.string() + ": size mismatch");
            planes_.push_back(std::move(fd));
        }
    }

private:
    void read_impl(int level, int64_t x, int64_t y, int w, int h,
                   uint8_t* dst) const override {
        int64_t stride = levels_[level].width * 3;
        for (int row = 0; row < h; ++row) {
            int64_t off = (y + row) * stride + x * 3;
            planes_[level].pread_exact(dst + static_cast<size_t>(row) * w * 3,
                                       static_cast<size_t>(w) * 3, off);
        }
    }

    std::vector<Fd> planes_;
};

} // namespace

std::unique_ptr<SlideImage> make_tiff_slide(const fs::path& path); // tiff_slide.cpp

std::unique_ptr<SlideImage> open_slide(const fs::path& path) {
    if (fs::is_directory(path)) {
        if (!fs::exists(path / "meta.json"))
            throw UnsupportedFormat(path.string() + ": directory without meta.json");
        return std::make_unique<RawSlide>(path);
    }
    if (!fs::exists(path))
        throw IoError(path.string() + ": no such file");
    // sniff TIFF magic
    std::ifstream in(path, std::ios::binary);
    char magic[4] = {};
    in.read(magic, 4);
    bool le = magic[0] == 'I' && magic[1] == 'I' && magic[2] == 42 && magic[3] == 0;
    bool be = magic[0] == 'M' && magic[1] == 'M' && magic[2] == 0 && magic[3] == 42;
    if (!le && !be)
        throw UnsupportedFormat(path.string() + ": unknown container");
    return make_tiff_slide(path);
}

// ---------------------------------------------------------------------------
// raw-slide writer

struct RawSlideWriter::Impl {
    fs::path dir;
    std::string slide_id;
    std::optional<double> mpp;
    std::vector<LevelInfo> levels;
    std::ofstream plane;
    int64_t rows_written = 0;
    bool finished = false;
};

RawSlideWriter::RawSlideWriter(const fs::path& dir, std::string slide_id,
                               std::optional<double> mpp)
    : impl_(std::make_unique<Impl>()) {
    impl_->dir = dir;
    impl_->slide_id = std::move(slide_id);
    impl_->mpp = mpp;
    fs::create_directories(dir);
}

RawSlideWriter::~RawSlideWriter() = default;

void RawSlideWriter::begin_level(int64_t width, int64_t height, double downsample) {
    if (!impl_->levels.empty() && impl_->rows_written != impl_->levels.back().height)
        throw IoError("begin_level: previous level incomplete");
    impl_->levels.push_back({width, height, downsample});
    fs::path p = impl_->dir / ("level_" + std::to_string(impl_->levels.size() - 1) + ".rgb");
    impl_->plane.close();
    impl_->plane.open(p, std::ios::binary | std::ios::trunc);
    if (!impl_->plane) throw IoError("cannot create " + p.string());
    impl_->rows_written = 0;
}

void RawSlideWriter::write_rows(const uint8_t* rgb, int64_t n_rows) {
    const auto& lv = impl_->levels.back();
    impl_->plane.write(reinterpret_cast<const char*>(rgb), n_rows * lv.width * 3);
    if (!impl_->plane) throw IoError("write failed");
    impl_->rows_written += n_rows;
}

void RawSlideWriter::finish() {
    if (impl_->finished) return;
    if (!impl_->levels.empty() && impl_->rows_written != impl_->levels.back().height)
        throw IoError("finish: last level incomplete");
    impl_->plane.close();
    json meta;
    meta["slide_id"] = impl_->slide_id;
    meta["levels"] = json::array();
    for (const auto& lv : impl_->levels)
        meta["levels"].push_back({{"w", lv.width}, {"h", lv.height}, {"downsample", lv.downsample}});
    if (impl_->mpp) meta["mpp"] = *impl_->mpp;
    std::ofstream out(impl_->dir / "meta.json");
    out << meta.dump(2) << "\n";
    if (!out) throw IoError("cannot write meta.json");
    impl_->finished = true;
}

void write_raw_slide(const fs::path& dir, const std::string& slide_id,
                     const std::vector<ImageU8>& levels, std::optional<double> mpp) {
    RawSlideWriter w(dir, slide_id, mpp);
    for (const auto& img : levels) {
        double ds = levels[0].width / static_cast<double>(img.width);
        if (&img == &levels[0]) ds = 1.0;
        w.begin_level(img.width, img.height, ds);
        w.write_rows(img.pix.data(), img.height);
    }
    w.finish();
}

// ---------------------------------------------------------------------------
// annotations

namespace {

double polygon_area(const std::vector<std::array<double, 2>>& poly) {
    double a = 0;
    for (size_t i = 0; i < poly.size(); ++i) {
        const auto& p = poly[i];
        const auto& q = poly[(i + 1) % poly.size()];
        a += p[0] * q[1] - q[0] * p[1];
    }
    return std::abs(a) / 2.0;
}

} // namespace

AnnotationSet load_annotations(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    json doc;
    try {
        in >> doc;
    } catch (const json::exception& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
    if (!doc.is_array()) throw ParseError(path.string() + ": expected top-level array");

    AnnotationSet ann;
    for (const auto& r : doc) {
        AnnRegion region;
        std::string label;
        try {
            label = r.at("label").get<std::string>();
            for (const auto& v : r.at("polygon")) {
                double x = v.at(0).get<double>();
                double y = v.at(1).get<double>();
                region.polygon.push_back({x, y});
            }
        } catch (const json::exception& e) {
            throw ParseError(path.string() + ": " + e.what());
        }
        if (label == "ROI") region.label = AnnLabel::ROI;
        else if (label == "EXCLUDE") region.label = AnnLabel::EXCLUDE;
        else throw UnknownLabel(path.string() + ": label \"" + label + "\"");

        if (region.polygon.size() < 3)
            throw ParseError(path.string() + ": polygon needs >= 3 vertices");
        for (const auto& v : region.polygon)
            if (!std::isfinite(v[0]) || !std::isfinite(v[1]) || v[0] < 0 || v[1] < 0)
                throw ParseError(path.string() + ": vertex not finite/non-negative");
        if (polygon_area(region.polygon) <= 0)
            throw ParseError(path.string() + ": zero-area polygon");
        ann.regions.push_back(std::move(region));
    }
    return ann;
}

void save_annotations(const fs::path& path, const AnnotationSet& ann) {
    json doc = json::array();
    for (const auto& r : ann.regions) {
        json poly = json::array();
        for (const auto& v : r.polygon) poly.push_back({v[0], v[1]});
        doc.push_back({{"label", r.label == AnnLabel::ROI ? "ROI" : "EXCLUDE"},
                       {"polygon", poly}});
    }
    std::ofstream out(path);
    out << doc.dump() << "\n";
    if (!out) throw IoError("cannot write " + path.string());
}

bool point_in_polygon(const std::vector<std::array<double, 2>>& poly,
                      double px, double py) {
    // even-odd crossing test
    bool inside = false;
    size_t n = poly.size();
    for (size_t i = 0, j = n - 1; i < n; j = i++) {
        double xi = poly[i][0], yi = poly[i][1];
        double xj = poly[j][0], yj = poly[j][1];
        if ((yi > py) != (yj > py)) {
            double xcross = xj + (py - yj) / (yi - yj) * (xi - xj);
            if (px < xcross) inside = !inside;
        }
    }
    return inside;
}

double coverage_fraction(const AnnotationSet& ann, AnnLabel label,
                         double x, double y, double w, double h) {
    if (w <= 0 || h <= 0)
        throw OutOfBounds("coverage_fraction: rect must have positive area");
    constexpr int kGrid = 16;
    int hits = 0;
    for (int j = 0; j < kGrid; ++j) {
        double py = y + (j + 0.5) * h / kGrid;
        for (int i = 0; i < kGrid; ++i) {
            double px = x + (i + 0.5) * w / kGrid;
            for (const auto& r : ann.regions) {
                if (r.label != label) continue;
                if (point_in_polygon(r.polygon, px, py)) { ++hits; break; }
            }
        }
    }
    return static_cast<double>(hits) / (kGrid * kGrid);
}

} // namespace tileforge
