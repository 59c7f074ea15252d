#include "tileforge/inference.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace tileforge {

SlideReport aggregate_report(const std::string& slide_id,
                             std::vector<SlideReport::TileProb> tiles) {
    if (tiles.empty()) throw NoTiles(slide_id + ": no kept tiles to aggregate");
    std::sort(tiles.begin(), tiles.end(), [](const auto& a, const auto& b) {
        return std::tie(a.grid_y, a.grid_x) < std::tie(b.grid_y, b.grid_x);
    });
    SlideReport r;
    r.slide_id = slide_id;
    double sum = 0;
    for (const auto& t : tiles) {
        sum += t.prob;
        int bin = std::min(19, static_cast<int>(t.prob * 20.0));
        r.histogram[bin]++;
    }
    r.mean_prob = sum / double(tiles.size());
    r.decision = r.mean_prob >= 0.5 ? TileLabel::PROGRESSOR : TileLabel::NON_PROGRESSOR;
    r.tiles = std::move(tiles);
    return r;
}

SlideReport infer_slide(const nn::Model& model, const TileStore& store, int jobs) {
    std::vector<size_t> kept;
    const auto& recs = store.records();
    for (size_t i = 0; i < recs.size(); ++i)
        if (recs[i].kept) kept.push_back(i);
    if (kept.empty())
        throw NoTiles(store.dir().string() + ": store has no kept tiles");

    int hw = model.spec.input_hw;
    std::vector<SlideReport::TileProb> tiles(kept.size());
    size_t item_len = size_t(hw) * hw * 3;
    // batch prediction; tile loads fan out, probabilities land in fixed slots
    constexpr size_t kBatch = 64;
    for (size_t start = 0; start < kept.size(); start += kBatch) {
        size_t bs = std::min(kBatch, kept.size() - start);
        nn::Tensor batch;
        batch.shape = {int(bs), hw, hw, 3};
        batch.data.resize(bs * item_len);
        parallel_for(bs, jobs, [&](size_t k) {
            const auto& rec = recs[kept[start + k]];
            if (rec.out_size_px != hw)
                throw nn::ShapeMismatch(rec.slide_id + ": tile size " +
                                        std::to_string(rec.out_size_px) +
                                        " does not match model input " + std::to_string(hw));
            ImageU8 img = store.load_pixels(kept[start + k]);
            float* dst = batch.data.data() + k * item_len;
            for (size_t i = 0; i < item_len; ++i) dst[i] = img.pix[i] / 255.0f;
        });
        auto probs = nn::predict(model, batch, jobs);
        for (size_t k = 0; k < bs; ++k) {
            const auto& rec = recs[kept[start + k]];
            tiles[start + k] = {rec.grid_x, rec.grid_y, probs[k]};
        }
    }
    return aggregate_report(recs[kept[0]].slide_id, std::move(tiles));
}

std::vector<std::optional<double>> heatmap_grid(const SlideReport& report,
                                                int tiles_x, int tiles_y) {
    std::vector<std::optional<double>> grid(size_t(tiles_x) * tiles_y);
    for (const auto& t : report.tiles) {
        if (t.grid_x < 0 || t.grid_x >= tiles_x || t.grid_y < 0 || t.grid_y >= tiles_y)
            throw GridMismatch(report.slide_id + ": tile (" + std::to_string(t.grid_x) +
                               "," + std::to_string(t.grid_y) + ") outside grid");
        grid[size_t(t.grid_y) * tiles_x + t.grid_x] = t.prob;
    }
    return grid;
}

void save_slide_report(const fs::path& path, const SlideReport& report) {
    json j;
    j["slide_id"] = report.slide_id;
    j["mean_prob"] = report.mean_prob;
    j["decision"] = report.decision == TileLabel::PROGRESSOR ? "PROGRESSOR" : "NON_PROGRESSOR";
    j["histogram"] = report.histogram;
    j["tiles"] = json::array();
    for (const auto& t : report.tiles)
        j["tiles"].push_back({{"grid_x", t.grid_x}, {"grid_y", t.grid_y}, {"prob", t.prob}});
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        out << j.dump(2) << "\n";
        if (!out) throw IoError("cannot write " + path.string());
    }
    fs::rename(tmp, path);
}

SlideReport load_slide_report(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    json j;
    in >> j;
    SlideReport r;
    r.slide_id = j.at("slide_id").get<std::string>();
    r.mean_prob = j.at("mean_prob").get<double>();
    r.decision = j.at("decision").get<std::string>() == "PROGRESSOR"
                     ? TileLabel::PROGRESSOR
                     : TileLabel::NON_PROGRESSOR;
    r.histogram = j.at("histogram").get<std::array<int64_t, 20>>();
    for (const auto& t : j.at("tiles"))
        r.tiles.push_back({t.at("grid_x").get<int>(), t.at("grid_y").get<int>(),
                           t.at("prob").get<double>()});
    return r;
}

} // namespace tileforge
