#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <zlib.h>

#include <cstring>
#include <fstream>

#include "json.hpp"
#include "tileforge/report.hpp"

using namespace tileforge;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path scratch() {
    auto p = fs::temp_directory_path() / "tf_report_test";
    fs::create_directories(p);
    return p;
}

std::vector<uint8_t> slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

uint32_t be32(const uint8_t* p) {
    return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) | p[3];
}

// Minimal independent PNG decode: walk chunks, verify CRCs, inflate IDAT,
// undo filter type 0 and return raw samples.
struct DecodedPng {
    uint32_t width = 0, height = 0;
    int channels = 0;
    std::vector<uint8_t> samples;
};

DecodedPng decode_png(const std::vector<uint8_t>& bytes) {
    static const uint8_t sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1A, '\n'};
    REQUIRE(bytes.size() > 8);
    REQUIRE(std::memcmp(bytes.data(), sig, 8) == 0);
    DecodedPng out;
    std::vector<uint8_t> idat;
    size_t off = 8;
    bool saw_end = false;
    while (off + 12 <= bytes.size()) {
        uint32_t len = be32(&bytes[off]);
        const uint8_t* type = &bytes[off + 4];
        REQUIRE(off + 12 + len <= bytes.size());
        uint32_t crc = uint32_t(::crc32(0, type, len + 4));
        CHECK(crc == be32(&bytes[off + 8 + len]));
        if (!std::memcmp(type, "IHDR", 4)) {
            out.width = be32(&bytes[off + 8]);
            out.height = be32(&bytes[off + 12]);
            CHECK(bytes[off + 16] == 8); // bit depth
            int color = bytes[off + 17];
            REQUIRE((color == 2 || color == 6));
            out.channels = color == 2 ? 3 : 4;
        } else if (!std::memcmp(type, "IDAT", 4)) {
            idat.insert(idat.end(), &bytes[off + 8], &bytes[off + 8 + len]);
        } else if (!std::memcmp(type, "IEND", 4)) {
            saw_end = true;
        }
        off += 12 + len;
    }
    CHECK(saw_end);
    size_t row = size_t(out.width) * out.channels + 1;
    std::vector<uint8_t> raw(row * out.height);
    uLongf dest = uLongf(raw.size());
    REQUIRE(::uncompress(raw.data(), &dest, idat.data(), uLong(idat.size())) == Z_OK);
    REQUIRE(dest == raw.size());
    for (uint32_t y = 0; y < out.height; ++y) {
        REQUIRE(raw[y * row] == 0); // filter "none" on every scanline
        out.samples.insert(out.samples.end(), &raw[y * row + 1], &raw[(y + 1) * row]);
    }
    return out;
}

ImageU8 textured(int w, int h) {
    ImageU8 img(w, h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            uint64_t v = splitmix64(uint64_t(y) * 7919 + x);
            for (int c = 0; c < 3; ++c) img.at(x, y)[c] = uint8_t(v >> (8 * c));
        }
    return img;
}

} // namespace

TEST_CASE("rgb png round-trips through an independent decoder") {
    ImageU8 img = textured(37, 21); // odd sizes on purpose
    auto p = scratch() / "rgb.png";
    write_png(p, img);
    auto dec = decode_png(slurp(p));
    CHECK(dec.width == 37);
    CHECK(dec.height == 21);
    CHECK(dec.channels == 3);
    CHECK(dec.samples == img.pix);
}

TEST_CASE("rgba png preserves the alpha channel") {
    ImageRGBA img(8, 8);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
            img.at(x, y)[0] = uint8_t(x * 30);
            img.at(x, y)[1] = uint8_t(y * 30);
            img.at(x, y)[2] = 99;
            img.at(x, y)[3] = (x + y) % 2 ? 255 : 0;
        }
    auto p = scratch() / "rgba.png";
    write_png(p, img);
    auto dec = decode_png(slurp(p));
    CHECK(dec.channels == 4);
    CHECK(dec.samples == img.pix);
}

TEST_CASE("heatmap colors: blue at 0, white at half, orange at 1, clear when absent") {
    ImageU8 thumb(4 * 8, 1 * 8, 255);
    std::vector<std::optional<double>> grid{0.0, 0.5, 1.0, std::nullopt};
    ImageRGBA hm = render_slide_heatmap(thumb, grid, 4, 1, 1.0);
    const uint8_t* cold = hm.at(4, 4);
    CHECK(int(cold[2]) > int(cold[0])); // blue end
    CHECK(cold[3] == 255);
    const uint8_t* mid = hm.at(12, 4);
    CHECK(int(mid[0]) > 240);
    CHECK(int(mid[1]) > 240);
    CHECK(int(mid[2]) > 240);
    const uint8_t* hot = hm.at(20, 4);
    CHECK(int(hot[0]) > int(hot[2])); // orange end
    const uint8_t* absent = hm.at(28, 4);
    CHECK(absent[3] == 0);

    CHECK_THROWS_AS(render_slide_heatmap(thumb, grid, 3, 1), GridMismatch);
    ImageU8 odd(13, 8, 255); // 13 not divisible by 4 tiles
    CHECK_THROWS_AS(render_slide_heatmap(odd, grid, 4, 1), GridMismatch);
}

TEST_CASE("histogram rows cover [0,1] in 20 bins and sum to the tile count") {
    SlideReport r = aggregate_report(
        "h", {{0, 0, 0.02}, {1, 0, 0.98}, {2, 0, 0.5}, {3, 0, 0.51}, {0, 1, 1.0}});
    auto rows = render_histogram(r);
    REQUIRE(rows.size() == 20);
    CHECK(rows[0].bin_lo == doctest::Approx(0.0));
    CHECK(rows[19].bin_hi == doctest::Approx(1.0));
    int64_t total = 0;
    for (size_t i = 0; i < rows.size(); ++i) {
        CHECK(rows[i].bin_hi == doctest::Approx(rows[i].bin_lo + 0.05));
        total += rows[i].count;
    }
    CHECK(total == 5);
    CHECK(rows[10].count == 2); // 0.5 and 0.51
    CHECK(rows[19].count == 2); // 0.98 and 1.0

    auto p = scratch() / "hist.csv";
    write_histogram_csv(p, rows);
    std::ifstream in(p);
    std::string line;
    REQUIRE(std::getline(in, line));
    CHECK(line == "bin_lo,bin_hi,count");
    size_t n = 0;
    while (std::getline(in, line)) ++n;
    CHECK(n == 20);
}

TEST_CASE("eval report emits all expected files with consistent content") {
    EvalReport eval;
    eval.cm = {19773, 484, 374, 19883};
    eval.tile_scores = scores(eval.cm);
    std::vector<int> y{0, 0, 1, 1};
    std::vector<double> s{0.1, 0.6, 0.4, 0.9};
    eval.roc = roc_auc(y, s);
    eval.auc = eval.roc.auc;
    eval.slides.push_back({"sl1", 0.91, TileLabel::PROGRESSOR, TileLabel::PROGRESSOR});
    eval.slides.push_back({"sl2", 0.12, TileLabel::NON_PROGRESSOR, TileLabel::NON_PROGRESSOR});
    eval.n_correct_slides = 2;
    eval.config_digest = "deadbeef00000000";
    std::vector<SlideReport> reports;
    reports.push_back(aggregate_report("sl1", {{0, 0, 0.91}}));
    reports.push_back(aggregate_report("sl2", {{0, 0, 0.12}}));

    auto dir = scratch() / "eval_out";
    fs::remove_all(dir);
    write_eval_report(eval, dir, reports);
    for (const char* f : {"metrics.json", "confusion.csv", "roc.csv",
                          "slide_sl1.report.json", "slide_sl2.report.json", "summary.txt"})
        CHECK(fs::exists(dir / f));

    json metrics = json::parse(std::ifstream(dir / "metrics.json"));
    const json& tile = metrics.at("tile_level");
    CHECK(tile.at("confusion").at("tp").get<int64_t>() == 19883);
    CHECK(tile.at("scores").at("accuracy").get<double>() ==
          doctest::Approx(*eval.tile_scores.accuracy).epsilon(1e-12));
    CHECK(tile.at("auc").get<double>() == doctest::Approx(eval.auc).epsilon(1e-12));
    CHECK(metrics.at("config_digest").get<std::string>() == "deadbeef00000000");
    CHECK(metrics.at("slide_level").size() == 2);
    CHECK(metrics.at("n_slides").get<int>() == 2);
    CHECK_FALSE(metrics.contains("timestamp")); // metrics.json stays byte-stable

    auto sl1 = load_slide_report(dir / "slide_sl1.report.json");
    CHECK(sl1.slide_id == "sl1");
    CHECK(sl1.mean_prob == doctest::Approx(0.91));

    // identical inputs produce byte-identical machine-readable outputs
    auto first = slurp(dir / "metrics.json");
    auto dir2 = scratch() / "eval_out2";
    fs::remove_all(dir2);
    write_eval_report(eval, dir2, reports);
    CHECK(slurp(dir2 / "metrics.json") == first);
}

TEST_CASE("unwritable destinations raise IoError and leave no partial output") {
    auto blocker = scratch() / "blocker";
    std::ofstream(blocker) << "plain file";
    // a path under a regular file can never become a directory
    CHECK_THROWS_AS(write_eval_report(EvalReport{}, blocker / "sub"), IoError);
    CHECK(fs::is_regular_file(blocker));

    ImageU8 img = textured(4, 4);
    CHECK_THROWS_AS(write_png(blocker / "sub" / "x.png", img), IoError);
}
