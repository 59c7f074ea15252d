#include "tileforge/pipeline.hpp"

#include <algorithm>
#include <set>

#include "tileforge/inference.hpp"

namespace tileforge {

namespace {

// canonical (slide_id, grid_y, grid_x) order keeps every downstream draw
// independent of store enumeration order
std::vector<const ManifestEntry*> entries_of(const DatasetManifest& m, Split split) {
    std::vector<const ManifestEntry*> out;
    for (const auto& e : m.entries)
        if (e.split == split) out.push_back(&e);
    std::sort(out.begin(), out.end(), [](const ManifestEntry* a, const ManifestEntry* b) {
        return std::tie(a->slide_id, a->grid_y, a->grid_x) <
               std::tie(b->slide_id, b->grid_y, b->grid_x);
    });
    return out;
}

} // namespace

StoreDataSource::StoreDataSource(const DatasetManifest& manifest,
                                 const AugmentConfig& augment, uint64_t order_seed)
    : augment_(augment), order_seed_(order_seed) {
    std::map<std::string, TileStore> stores;
    auto fetch = [&](const ManifestEntry& e) -> Item {
        auto it = stores.find(e.store_dir);
        if (it == stores.end())
            it = stores.emplace(e.store_dir, TileStore::open(e.store_dir)).first;
        Item item;
        item.pixels = it->second.load_pixels(e.record_index);
        item.label = static_cast<float>(static_cast<int>(e.label));
        item.uid = e.uid();
        if (tile_size_ == 0) tile_size_ = item.pixels.width;
        return item;
    };
    for (const auto* e : entries_of(manifest, Split::TRAIN)) train_.push_back(fetch(*e));
    for (const auto* e : entries_of(manifest, Split::VAL)) val_.push_back(fetch(*e));
}

void StoreDataSource::load_train(size_t i, int epoch, float* dst) const {
    const Item& item = train_[i];
    ImageU8 img = augment_tile(item.pixels, augment_, epoch, item.uid);
    for (size_t k = 0; k < img.pix.size(); ++k) dst[k] = img.pix[k] / 255.0f;
}

void StoreDataSource::load_val(size_t i, float* dst) const {
    const Item& item = val_[i];
    for (size_t k = 0; k < item.pixels.pix.size(); ++k)
        dst[k] = item.pixels.pix[k] / 255.0f;
}

TestSet collect_test_set(const DatasetManifest& manifest) {
    TestSet ts;
    std::map<std::string, TileStore> stores;
    for (const auto* e : entries_of(manifest, Split::TEST)) {
        auto it = stores.find(e->store_dir);
        if (it == stores.end())
            it = stores.emplace(e->store_dir, TileStore::open(e->store_dir)).first;
        ts.tiles.push_back(it->second.load_pixels(e->record_index));
        ts.labels.push_back(static_cast<int>(e->label));
    }
    return ts;
}

std::vector<double> predict_images(const nn::Model& model,
                                   const std::vector<ImageU8>& tiles, int jobs) {
    int hw = model.spec.input_hw;
    size_t item_len = size_t(hw) * hw * 3;
    std::vector<double> probs;
    constexpr size_t kBatch = 64;
    for (size_t start = 0; start < tiles.size(); start += kBatch) {
        size_t bs = std::min(kBatch, tiles.size() - start);
        nn::Tensor batch;
        batch.shape = {int(bs), hw, hw, 3};
        batch.data.resize(bs * item_len);
        parallel_for(bs, jobs, [&](size_t k) {
            const auto& img = tiles[start + k];
            if (img.width != hw || img.height != hw)
                throw nn::ShapeMismatch("predict_images: tile size mismatch");
            float* dst = batch.data.data() + k * item_len;
            for (size_t i = 0; i < item_len; ++i) dst[i] = img.pix[i] / 255.0f;
        });
        auto p = nn::predict(model, batch, jobs);
        probs.insert(probs.end(), p.begin(), p.end());
    }
    return probs;
}

EvalReport evaluate(const nn::Model& model, const DatasetManifest& manifest,
                    double threshold, int jobs,
                    std::vector<SlideReport>* slide_reports) {
    EvalReport report;

    // tile level on TEST
    TestSet ts = collect_test_set(manifest);
    if (!ts.tiles.empty()) {
        auto probs = predict_images(model, ts.tiles, jobs);
        report.cm = confusion(ts.labels, probs, threshold);
        report.tile_scores = scores(report.cm);
        report.roc = roc_auc(ts.labels, probs);
        report.auc = report.roc.auc;
    }

    // slide level on HELDOUT_WSI
    std::map<std::string, std::pair<std::string, TileLabel>> heldout; // id -> (store, truth)
    for (const auto& e : manifest.entries)
        if (e.split == Split::HELDOUT_WSI)
            heldout[e.slide_id] = {e.store_dir, e.label};
    for (const auto& [slide_id, info] : heldout) {
        TileStore store = TileStore::open(info.first);
        SlideReport sr = infer_slide(model, store, jobs);
        SlideEval se;
        se.slide_id = slide_id;
        se.mean_prob = sr.mean_prob;
        se.decision = sr.decision;
        se.truth = info.second;
        if (se.decision == se.truth) report.n_correct_slides++;
        report.slides.push_back(se);
        if (slide_reports) slide_reports->push_back(std::move(sr));
    }
    return report;
}

} // namespace tileforge
