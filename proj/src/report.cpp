#include "tileforge/report.hpp"

#include <zlib.h>

#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "tileforge/gradcam.hpp"
#include "tileforge/inference.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace tileforge {

// ---------------------------------------------------------------------------
// minimal PNG writer (zlib deflate, filter 0)

namespace {

void put_u32be(std::vector<uint8_t>& v, uint32_t x) {
    v.push_back(uint8_t(x >> 24));
    v.push_back(uint8_t(x >> 16));
    v.push_back(uint8_t(x >> 8));
    v.push_back(uint8_t(x));
}

void png_chunk(std::ofstream& out, const char type[4], const std::vector<uint8_t>& data) {
    std::vector<uint8_t> len;
    put_u32be(len, static_cast<uint32_t>(data.size()));
    out.write(reinterpret_cast<const char*>(len.data()), 4);
    out.write(type, 4);
    out.write(reinterpret_cast<const char*>(data.data()),
              static_cast<std::streamsize>(data.size()));
    uLong crc = ::crc32(0, reinterpret_cast<const Bytef*>(type), 4);
    if (!data.empty()) // crc32(_, null, 0) would reset the running value
        crc = ::crc32(crc, data.data(), static_cast<uInt>(data.size()));
    std::vector<uint8_t> crcb;
    put_u32be(crcb, static_cast<uint32_t>(crc));
    out.write(reinterpret_cast<const char*>(crcb.data()), 4);
}

void write_png_impl(const fs::path& path, int w, int h, int channels,
                    const uint8_t* pix) {
    // scanlines with filter byte 0
    std::vector<uint8_t> raw(size_t(h) * (size_t(w) * channels + 1));
    for (int y = 0; y < h; ++y) {
        uint8_t* row = raw.data() + size_t(y) * (size_t(w) * channels + 1);
        row[0] = 0;
        std::memcpy(row + 1, pix + size_t(y) * w * channels, size_t(w) * channels);
    }
    uLongf comp_len = ::compressBound(static_cast<uLong>(raw.size()));
    std::vector<uint8_t> comp(comp_len);
    if (::compress(comp.data(), &comp_len, raw.data(), static_cast<uLong>(raw.size())) != Z_OK)
        throw IoError("png: deflate failed");
    comp.resize(comp_len);

    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp.string());
        static const uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
        out.write(reinterpret_cast<const char*>(sig), 8);
        std::vector<uint8_t> ihdr;
        put_u32be(ihdr, static_cast<uint32_t>(w));
        put_u32be(ihdr, static_cast<uint32_t>(h));
        ihdr.push_back(8);                            // bit depth
        ihdr.push_back(channels == 4 ? 6 : 2);        // RGBA / RGB
        ihdr.push_back(0);
        ihdr.push_back(0);
        ihdr.push_back(0);
        png_chunk(out, "IHDR", ihdr);
        png_chunk(out, "IDAT", comp);
        png_chunk(out, "IEND", {});
        if (!out) throw IoError("png write failed: " + tmp.string());
    }
    fs::rename(tmp, path);
}

} // namespace

void write_png(const fs::path& path, const ImageU8& img) {
    write_png_impl(path, img.width, img.height, 3, img.pix.data());
}

void write_png(const fs::path& path, const ImageRGBA& img) {
    write_png_impl(path, img.width, img.height, 4, img.pix.data());
}

// ---------------------------------------------------------------------------
// renders

namespace {

// endpoints per the diverging scale: blue(40,90,200) .. white .. orange(230,120,30)
void diverging_color(double p, uint8_t rgb[3]) {
    const double blue[3] = {40, 90, 200};
    const double orange[3] = {230, 120, 30};
    const double white[3] = {255, 255, 255};
    p = std::clamp(p, 0.0, 1.0);
    const double* a;
    const double* b;
    double t;
    if (p < 0.5) {
        a = blue; b = white; t = p * 2.0;
    } else {
        a = white; b = orange; t = (p - 0.5) * 2.0;
    }
    for (int c = 0; c < 3; ++c)
        rgb[c] = static_cast<uint8_t>(std::lround(a[c] + t * (b[c] - a[c])));
}

} // namespace

ImageRGBA render_slide_heatmap(const ImageU8& thumbnail,
                               const std::vector<std::optional<double>>& grid,
                               int tiles_x, int tiles_y, double alpha) {
    if (static_cast<int>(grid.size()) != tiles_x * tiles_y)
        throw GridMismatch("render_slide_heatmap: grid size mismatch");
    if (thumbnail.width % tiles_x != 0 || thumbnail.height % tiles_y != 0)
        throw GridMismatch("render_slide_heatmap: thumbnail not proportional to grid");
    int cell_w = thumbnail.width / tiles_x;
    int cell_h = thumbnail.height / tiles_y;
    ImageRGBA out(thumbnail.width, thumbnail.height);
    for (int gy = 0; gy < tiles_y; ++gy) {
        for (int gx = 0; gx < tiles_x; ++gx) {
            const auto& cell = grid[size_t(gy) * tiles_x + gx];
            for (int y = gy * cell_h; y < (gy + 1) * cell_h; ++y) {
                for (int x = gx * cell_w; x < (gx + 1) * cell_w; ++x) {
                    uint8_t* dst = out.at(x, y);
                    if (!cell) {
                        dst[3] = 0; // absent -> transparent
                        continue;
                    }
                    uint8_t color[3];
                    diverging_color(*cell, color);
                    for (int c = 0; c < 3; ++c) {
                        double v = (1.0 - alpha) * thumbnail.at(x, y)[c] + alpha * color[c];
                        dst[c] = static_cast<uint8_t>(std::clamp(std::lround(v), 0L, 255L));
                    }
                    dst[3] = 255;
                }
            }
        }
    }
    return out;
}

std::vector<HistogramRow> render_histogram(const SlideReport& report) {
    std::vector<HistogramRow> rows(20);
    for (int b = 0; b < 20; ++b)
        rows[b] = {b / 20.0, (b + 1) / 20.0, report.histogram[b]};
    return rows;
}

void write_histogram_csv(const fs::path& path, const std::vector<HistogramRow>& rows) {
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        out << "bin_lo,bin_hi,count\n";
        for (const auto& r : rows)
            out << r.bin_lo << ',' << r.bin_hi << ',' << r.count << "\n";
        if (!out) throw IoError("cannot write " + path.string());
    }
    fs::rename(tmp, path);
}

// ---------------------------------------------------------------------------
// eval report

namespace {

json scores_json(const Scores& s) {
    auto opt = [](const std::optional<double>& v) {
        return v ? json(*v) : json("undefined");
    };
    return {{"accuracy", opt(s.accuracy)},
            {"precision", opt(s.precision)},
            {"recall", opt(s.recall)},
            {"f1", opt(s.f1)}};
}

void write_text_atomic(const fs::path& path, const std::string& text) {
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        out << text;
        if (!out) throw IoError("cannot write " + path.string());
    }
    fs::rename(tmp, path);
}

} // namespace

void write_eval_report(const EvalReport& eval, const fs::path& dir,
                       const std::vector<SlideReport>& slide_reports) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (!fs::is_directory(dir))
        throw IoError("write_eval_report: " + dir.string() + " is not a writable directory");
    // probe writability up front so failure leaves nothing behind
    {
        fs::path probe = dir / ".write_probe.tmp";
        std::ofstream p(probe, std::ios::trunc);
        if (!p) throw IoError("write_eval_report: " + dir.string() + " is not writable");
        p.close();
        fs::remove(probe);
    }

    json metrics;
    metrics["tile_level"] = {
        {"confusion", {{"tn", eval.cm.tn}, {"fp", eval.cm.fp}, {"fn", eval.cm.fn}, {"tp", eval.cm.tp}}},
        {"scores", scores_json(eval.tile_scores)},
        {"auc", eval.auc}};
    metrics["slide_level"] = json::array();
    for (const auto& s : eval.slides)
        metrics["slide_level"].push_back(
            {{"slide_id", s.slide_id},
             {"mean_prob", s.mean_prob},
             {"decision", s.decision == TileLabel::PROGRESSOR ? "PROGRESSOR" : "NON_PROGRESSOR"},
             {"truth", s.truth == TileLabel::PROGRESSOR ? "PROGRESSOR" : "NON_PROGRESSOR"}});
    metrics["n_correct_slides"] = eval.n_correct_slides;
    metrics["n_slides"] = eval.slides.size();
    metrics["config_digest"] = eval.config_digest;
    write_text_atomic(dir / "metrics.json", metrics.dump(2) + "\n");

    {
        std::ostringstream csv;
        csv << "tn,fp,fn,tp\n"
            << eval.cm.tn << ',' << eval.cm.fp << ',' << eval.cm.fn << ',' << eval.cm.tp << "\n";
        write_text_atomic(dir / "confusion.csv", csv.str());
    }

    {
        fs::path tmp = dir / "roc.csv.tmp";
        write_roc_csv(tmp, eval.roc);
        fs::rename(tmp, dir / "roc.csv");
    }

    for (const auto& r : slide_reports)
        save_slide_report(dir / ("slide_" + r.slide_id + ".report.json"), r);

    {
        auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
        char ts[32];
        std::strftime(ts, sizeof ts, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
        std::ostringstream txt;
        txt << "run summary\n"
            << "generated: " << ts << "\n"
            << "config digest: " << eval.config_digest << "\n\n"
            << "tile level\n"
            << "  tn=" << eval.cm.tn << " fp=" << eval.cm.fp
            << " fn=" << eval.cm.fn << " tp=" << eval.cm.tp << "\n";
        auto line = [&](const char* name, const std::optional<double>& v) {
            txt << "  " << name << "=";
            if (v) txt << *v; else txt << "undefined";
            txt << "\n";
        };
        line("accuracy", eval.tile_scores.accuracy);
        line("precision", eval.tile_scores.precision);
        line("recall", eval.tile_scores.recall);
        line("f1", eval.tile_scores.f1);
        txt << "  auc=" << eval.auc << "\n\n"
            << "slide level: " << eval.n_correct_slides << "/" << eval.slides.size()
            << " correct\n";
        for (const auto& s : eval.slides)
            txt << "  " << s.slide_id << " mean_prob=" << s.mean_prob << " decision="
                << (s.decision == TileLabel::PROGRESSOR ? "PROGRESSOR" : "NON_PROGRESSOR")
                << " truth="
                << (s.truth == TileLabel::PROGRESSOR ? "PROGRESSOR" : "NON_PROGRESSOR")
                << (s.decision == s.truth ? "" : "  (WRONG)") << "\n";
        write_text_atomic(dir / "summary.txt", txt.str());
    }
}

} // namespace tileforge
