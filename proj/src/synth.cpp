#include "tileforge/synth.hpp"

#include <cmath>
#include <numbers>

#include "tileforge/dataset.hpp"
#include "tileforge/slide_io.hpp"

namespace fs = std::filesystem;

namespace tileforge {

namespace {

struct SlideTexture {
    TileLabel label;
    uint64_t seed;
    int64_t width, height;
    int64_t margin; // white border around the tissue rect

    bool in_tissue(int64_t x, int64_t y) const {
        return x >= margin && x < width - margin && y >= margin && y < height - margin;
    }

    void pixel(int64_t x, int64_t y, uint8_t rgb[3]) const {
        uint64_t h = splitmix64(seed ^ (uint64_t(x) * 0x9e3779b97f4a7c15ULL) ^
                                (uint64_t(y) << 21));
        if (!in_tissue(x, y)) {
            // near-white background with faint scanner noise
            int v = 250 + int(h % 6);
            rgb[0] = rgb[1] = rgb[2] = uint8_t(std::min(v, 255));
            return;
        }
        constexpr double kPi = std::numbers::pi;
        double phase = double(seed % 97) / 97.0 * 2.0 * kPi;
        double a;
        if (label == TileLabel::PROGRESSOR) {
            // high-frequency texture
            a = std::sin(2.0 * kPi * x / 8.0 + phase) * std::sin(2.0 * kPi * y / 8.0);
        } else {
            // smooth low-frequency field
            a = std::sin(2.0 * kPi * x / 64.0 + phase) * std::sin(2.0 * kPi * y / 80.0);
        }
        double base[3] = {200, 150, 185}; // eosin-leaning palette
        double gain[3] = {45, 36, 40};
        double noise = double(h % 17) - 8.0;
        for (int c = 0; c < 3; ++c) {
            double v = base[c] + a * gain[c] + noise;
            rgb[c] = uint8_t(std::clamp(std::lround(v), 0L, 255L));
        }
    }
};

void write_slide(const fs::path& dir, const std::string& slide_id,
                 const SlideTexture& tex) {
    RawSlideWriter w(dir, slide_id, 0.25); // 40X provenance
    w.begin_level(tex.width, tex.height, 1.0);
    std::vector<uint8_t> row(size_t(tex.width) * 3);
    for (int64_t y = 0; y < tex.height; ++y) {
        for (int64_t x = 0; x < tex.width; ++x)
            tex.pixel(x, y, &row[size_t(x) * 3]);
        w.write_rows(row.data(), 1);
    }
    w.finish();
}

} // namespace

void generate_slide(const fs::path& slide_dir, const std::string& slide_id,
                    int64_t width, int64_t height, TileLabel label, uint64_t seed) {
    SlideTexture tex{label, seed, width, height, /*margin=*/width / 16};
    write_slide(slide_dir, slide_id, tex);
}

std::vector<CorpusSlide> generate_corpus(const fs::path& dir, const SynthParams& p) {
    fs::create_directories(dir / "slides");
    fs::create_directories(dir / "annotations");

    std::vector<CorpusSlide> corpus;
    std::vector<PatientRecord> patients;
    RngStream rng(hash_combine(p.seed, 0x73796e7468ULL));

    for (int cls = 0; cls < 2; ++cls) {
        TileLabel label = static_cast<TileLabel>(cls);
        for (int i = 0; i < p.per_class; ++i) {
            char id[32];
            std::snprintf(id, sizeof id, "%s%03d", cls == 1 ? "prog" : "nonp", i);
            std::string slide_id(id);
            uint64_t slide_seed = hash_combine(p.seed, fnv1a64(slide_id));

            SlideTexture tex{label, slide_seed, p.slide_w, p.slide_h,
                             /*margin=*/p.raw_tile / 2};
            fs::path slide_dir = dir / "slides" / slide_id;
            write_slide(slide_dir, slide_id, tex);

            // ROI over the tissue rect; EXCLUDE over one interior tile
            AnnotationSet ann;
            double m = double(tex.margin);
            ann.regions.push_back(
                {AnnLabel::ROI,
                 {{m, m}, {double(p.slide_w) - m, m},
                  {double(p.slide_w) - m, double(p.slide_h) - m},
                  {m, double(p.slide_h) - m}}});
            double ex0 = 2.0 * p.raw_tile, ey0 = 1.0 * p.raw_tile;
            ann.regions.push_back(
                {AnnLabel::EXCLUDE,
                 {{ex0, ey0}, {ex0 + p.raw_tile, ey0},
                  {ex0 + p.raw_tile, ey0 + p.raw_tile}, {ex0, ey0 + p.raw_tile}}});
            fs::path ann_path = dir / "annotations" / (slide_id + ".json");
            save_annotations(ann_path, ann);

            CorpusSlide cs;
            cs.slide_id = slide_id;
            cs.slide_path = slide_dir;
            cs.annotation_path = ann_path;
            cs.label = label;
            cs.patient_id = "PT_" + slide_id;
            corpus.push_back(cs);

            PatientRecord pr;
            pr.patient_id = cs.patient_id;
            pr.cohort = label;
            pr.age_years = 54 + int(rng.next_below(40));
            pr.n_biopsies = 1 + int(rng.next_below(4));
            pr.screening_interval_days = 300 + int(rng.next_below(1500));
            patients.push_back(pr);
        }
    }
    save_corpus(dir / "corpus.json", corpus);
    save_patients_csv(dir / "patients.csv", patients);
    return corpus;
}

} // namespace tileforge
