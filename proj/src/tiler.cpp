#include "tileforge/tiler.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace tileforge {

const char* to_string(RejectReason r) {
    switch (r) {
        case RejectReason::EXCLUDED: return "EXCLUDED";
        case RejectReason::OFF_ROI: return "OFF_ROI";
        case RejectReason::BACKGROUND: return "BACKGROUND";
        case RejectReason::LOW_VARIANCE: return "LOW_VARIANCE";
        case RejectReason::ROI_MODEL: return "ROI_MODEL";
    }
    return "?";
}

RejectReason reject_reason_from_string(const std::string& s) {
    if (s == "EXCLUDED") return RejectReason::EXCLUDED;
    if (s == "OFF_ROI") return RejectReason::OFF_ROI;
    if (s == "BACKGROUND") return RejectReason::BACKGROUND;
    if (s == "LOW_VARIANCE") return RejectReason::LOW_VARIANCE;
    if (s == "ROI_MODEL") return RejectReason::ROI_MODEL;
    throw TilerError("unknown reject reason: " + s);
}

std::vector<GridPos> plan_grid(const SlideImage& slide, int raw_size) {
    const auto& lv0 = slide.levels().at(0);
    if (lv0.width < raw_size || lv0.height < raw_size)
        throw SlideTooSmall(slide.slide_id() + ": level 0 smaller than tile size");
    int nx = static_cast<int>(lv0.width / raw_size);
    int ny = static_cast<int>(lv0.height / raw_size);
    std::vector<GridPos> plan;
    plan.reserve(static_cast<size_t>(nx) * ny);
    for (int gy = 0; gy < ny; ++gy)
        for (int gx = 0; gx < nx; ++gx)
            plan.push_back({gx, gy, int64_t(gx) * raw_size, int64_t(gy) * raw_size});
    return plan;
}

std::vector<float> resize_bilinear_plane(const std::vector<float>& src, int src_w,
                                         int src_h, int dst_w, int dst_h) {
    std::vector<float> dst(static_cast<size_t>(dst_w) * dst_h);
    double sx = static_cast<double>(src_w) / dst_w;
    double sy = static_cast<double>(src_h) / dst_h;
    for (int y = 0; y < dst_h; ++y) {
        // half-pixel centers
        double fy = (y + 0.5) * sy - 0.5;
        int y0 = static_cast<int>(std::floor(fy));
        double wy = fy - y0;
        int y0c = std::clamp(y0, 0, src_h - 1);
        int y1c = std::clamp(y0 + 1, 0, src_h - 1);
        for (int x = 0; x < dst_w; ++x) {
            double fx = (x + 0.5) * sx - 0.5;
            int x0 = static_cast<int>(std::floor(fx));
            double wx = fx - x0;
            int x0c = std::clamp(x0, 0, src_w - 1);
            int x1c = std::clamp(x0 + 1, 0, src_w - 1);
            double top = src[size_t(y0c) * src_w + x0c] * (1 - wx) +
                         src[size_t(y0c) * src_w + x1c] * wx;
            double bot = src[size_t(y1c) * src_w + x0c] * (1 - wx) +
                         src[size_t(y1c) * src_w + x1c] * wx;
            dst[size_t(y) * dst_w + x] = static_cast<float>(top * (1 - wy) + bot * wy);
        }
    }
    return dst;
}

ImageU8 resize_bilinear(const ImageU8& src, int dst_w, int dst_h) {
    if (src.width < 1 || src.height < 1 || dst_w < 1 || dst_h < 1)
        throw TilerError("resize_bilinear: dims must be >= 1");
    ImageU8 dst(dst_w, dst_h);
    size_t n = static_cast<size_t>(src.width) * src.height;
    std::vector<float> plane(n);
    for (int c = 0; c < 3; ++c) {
        for (size_t i = 0; i < n; ++i) plane[i] = src.pix[i * 3 + c];
        auto out = resize_bilinear_plane(plane, src.width, src.height, dst_w, dst_h);
        for (size_t i = 0; i < out.size(); ++i)
            dst.pix[i * 3 + c] = static_cast<uint8_t>(
                std::clamp(std::lround(out[i]), 0L, 255L));
    }
    return dst;
}

ImageU8 normalize_color(const ImageU8& tile, const ReferenceColorStats& ref) {
    size_t n = static_cast<size_t>(tile.width) * tile.height;
    double mean[3] = {}, var[3] = {};
    for (size_t i = 0; i < n; ++i)
        for (int c = 0; c < 3; ++c) mean[c] += tile.pix[i * 3 + c];
    for (int c = 0; c < 3; ++c) mean[c] /= static_cast<double>(n);
    for (size_t i = 0; i < n; ++i)
        for (int c = 0; c < 3; ++c) {
            double d = tile.pix[i * 3 + c] - mean[c];
            var[c] += d * d;
        }
    ImageU8 out(tile.width, tile.height);
    for (int c = 0; c < 3; ++c) {
        double sd = std::sqrt(var[c] / static_cast<double>(n));
        if (sd < 1e-6) {
            for (size_t i = 0; i < n; ++i)
                out.pix[i * 3 + c] = static_cast<uint8_t>(
                    std::clamp(std::lround(ref.mean[c]), 0L, 255L));
            continue;
        }
        double scale = ref.stdev[c] / sd;
        for (size_t i = 0; i < n; ++i) {
            double v = (tile.pix[i * 3 + c] - mean[c]) * scale + ref.mean[c];
            out.pix[i * 3 + c] = static_cast<uint8_t>(
                std::clamp(std::lround(v), 0L, 255L));
        }
    }
    return out;
}

ImageU8 sharpen(const ImageU8& tile, double amount) {
    if (amount == 0.0) return tile;
    int w = tile.width, h = tile.height;
    ImageU8 out(w, h);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < 3; ++c) {
                // 3x3 box blur with edge clamp
                double sum = 0;
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        int yy = std::clamp(y + dy, 0, h - 1);
                        int xx = std::clamp(x + dx, 0, w - 1);
                        sum += tile.at(xx, yy)[c];
                    }
                double blur = sum / 9.0;
                double v = tile.at(x, y)[c] + amount * (tile.at(x, y)[c] - blur);
                out.at(x, y)[c] = static_cast<uint8_t>(std::clamp(std::lround(v), 0L, 255L));
            }
        }
    }
    return out;
}

QcResult qc_tile(const ImageU8& tile, const TilerParams& params) {
    size_t n = static_cast<size_t>(tile.width) * tile.height;
    size_t tissue = 0;
    double mean[3] = {}, var[3] = {};
    for (size_t i = 0; i < n; ++i) {
        int mn = 255;
        for (int c = 0; c < 3; ++c) {
            mn = std::min<int>(mn, tile.pix[i * 3 + c]);
            mean[c] += tile.pix[i * 3 + c];
        }
        if (mn < params.white_threshold) ++tissue;
    }
    for (int c = 0; c < 3; ++c) mean[c] /= static_cast<double>(n);
    for (size_t i = 0; i < n; ++i)
        for (int c = 0; c < 3; ++c) {
            double d = tile.pix[i * 3 + c] - mean[c];
            var[c] += d * d;
        }
    QcResult qc;
    qc.tissue_fraction = static_cast<double>(tissue) / static_cast<double>(n);
    if (qc.tissue_fraction < params.min_tissue_fraction) {
        qc.verdict = QcResult::Verdict::BACKGROUND;
    } else {
        bool low_var = true;
        for (int c = 0; c < 3; ++c)
            low_var = low_var && std::sqrt(var[c] / static_cast<double>(n)) < params.low_variance_std;
        qc.verdict = low_var ? QcResult::Verdict::LOW_VARIANCE : QcResult::Verdict::PASS;
    }
    return qc;
}

TileRecord extract_tile(const SlideImage& slide, const GridPos& pos,
                        const AnnotationSet& ann, const TilerParams& params,
                        TileLabel label, const std::string& patient_id) {
    TileRecord rec;
    rec.slide_id = slide.slide_id();
    rec.patient_id = patient_id;
    rec.grid_x = pos.grid_x;
    rec.grid_y = pos.grid_y;
    rec.origin_x = pos.origin_x;
    rec.origin_y = pos.origin_y;
    rec.raw_size_px = params.raw_size;
    rec.out_size_px = params.out_size;
    rec.label = label;

    ImageU8 raw = slide.read_region(0, pos.origin_x, pos.origin_y,
                                    params.raw_size, params.raw_size);

    // annotation gate at native resolution
    double ex = coverage_fraction(ann, AnnLabel::EXCLUDE, double(pos.origin_x),
                                  double(pos.origin_y), params.raw_size, params.raw_size);
    if (ex > params.tau_exclude) {
        rec.reject_reason = RejectReason::EXCLUDED;
        return rec;
    }
    bool has_roi = std::any_of(ann.regions.begin(), ann.regions.end(),
                               [](const AnnRegion& r) { return r.label == AnnLabel::ROI; });
    if (has_roi) {
        double roi = coverage_fraction(ann, AnnLabel::ROI, double(pos.origin_x),
                                       double(pos.origin_y), params.raw_size, params.raw_size);
        if (roi < params.tau_roi) {
            rec.reject_reason = RejectReason::OFF_ROI;
            return rec;
        }
    }

    QcResult qc = qc_tile(raw, params);
    rec.tissue_fraction = qc.tissue_fraction;
    if (qc.verdict == QcResult::Verdict::BACKGROUND) {
        rec.reject_reason = RejectReason::BACKGROUND;
        return rec;
    }
    if (qc.verdict == QcResult::Verdict::LOW_VARIANCE) {
        rec.reject_reason = RejectReason::LOW_VARIANCE;
        return rec;
    }

    ImageU8 img = resize_bilinear(raw, params.out_size, params.out_size);
    img = normalize_color(img, params.ref);
    img = sharpen(img, params.sharpen_amount);
    rec.kept = true;
    rec.pixels = std::move(img);
    return rec;
}

std::vector<TileRecord> tile_slide(const SlideImage& slide, const AnnotationSet& ann,
                                   const TilerParams& params, TileLabel label,
                                   const std::string& patient_id, int jobs) {
    auto plan = plan_grid(slide, params.raw_size);
    std::vector<TileRecord> out(plan.size());
    parallel_for(plan.size(), jobs, [&](size_t i) {
        out[i] = extract_tile(slide, plan[i], ann, params, label, patient_id);
    });
    return out; // plan order == row-major (grid_y, grid_x)
}

// ---------------------------------------------------------------------------
// tile store

void write_tile_store(const fs::path& dir, const std::vector<TileRecord>& records) {
    fs::create_directories(dir);
    std::ofstream jsonl(dir / "tiles.jsonl", std::ios::trunc);
    std::ofstream bin(dir / "tiles.bin", std::ios::binary | std::ios::trunc);
    if (!jsonl || !bin) throw IoError("cannot create tile store in " + dir.string());
    for (const auto& r : records) {
        json j{{"slide_id", r.slide_id},
               {"patient_id", r.patient_id},
               {"grid_x", r.grid_x},
               {"grid_y", r.grid_y},
               {"origin_x", r.origin_x},
               {"origin_y", r.origin_y},
               {"raw_size_px", r.raw_size_px},
               {"out_size_px", r.out_size_px},
               {"label", static_cast<int>(r.label)},
               {"tissue_fraction", r.tissue_fraction},
               {"kept", r.kept}};
        if (r.reject_reason) j["reject_reason"] = to_string(*r.reject_reason);
        jsonl << j.dump() << "\n";
        if (r.kept) {
            if (r.pixels.width != r.out_size_px || r.pixels.height != r.out_size_px)
                throw TilerError("write_tile_store: pixel block size mismatch");
            bin.write(reinterpret_cast<const char*>(r.pixels.pix.data()),
                      static_cast<std::streamsize>(r.pixels.pix.size()));
        }
    }
    if (!jsonl || !bin) throw IoError("tile store write failed in " + dir.string());
}

TileStore TileStore::open(const fs::path& dir) {
    TileStore store;
    store.dir_ = dir;
    std::ifstream jsonl(dir / "tiles.jsonl");
    if (!jsonl) throw IoError("cannot open " + (dir / "tiles.jsonl").string());
    std::string line;
    int64_t offset = 0;
    while (std::getline(jsonl, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        TileRecord r;
        r.slide_id = j.at("slide_id").get<std::string>();
        r.patient_id = j.at("patient_id").get<std::string>();
        r.grid_x = j.at("grid_x").get<int>();
        r.grid_y = j.at("grid_y").get<int>();
        r.origin_x = j.at("origin_x").get<int64_t>();
        r.origin_y = j.at("origin_y").get<int64_t>();
        r.raw_size_px = j.at("raw_size_px").get<int>();
        r.out_size_px = j.at("out_size_px").get<int>();
        r.label = static_cast<TileLabel>(j.at("label").get<int>());
        r.tissue_fraction = j.at("tissue_fraction").get<double>();
        r.kept = j.at("kept").get<bool>();
        if (j.contains("reject_reason"))
            r.reject_reason = reject_reason_from_string(j["reject_reason"].get<std::string>());
        if (r.kept) {
            store.offsets_.push_back(offset);
            offset += int64_t(r.out_size_px) * r.out_size_px * 3;
            ++store.kept_count_;
        } else {
            store.offsets_.push_back(-1);
        }
        store.records_.push_back(std::move(r));
    }
    return store;
}

ImageU8 TileStore::load_pixels(size_t record_index) const {
    const auto& r = records_.at(record_index);
    int64_t off = offsets_.at(record_index);
    if (!r.kept || off < 0)
        throw TilerError("load_pixels: record has no stored pixels");
    ImageU8 img(r.out_size_px, r.out_size_px);
    std::ifstream bin(dir_ / "tiles.bin", std::ios::binary);
    if (!bin) throw IoError("cannot open " + (dir_ / "tiles.bin").string());
    bin.seekg(off);
    bin.read(reinterpret_cast<char*>(img.pix.data()),
             static_cast<std::streamsize>(img.pix.size()));
    if (!bin) throw IoError("tiles.bin truncated");
    return img;
}

} // namespace tileforge
