#pragma once

#include <map>
#include <memory>

#include "tileforge/augment.hpp"
#include "tileforge/dataset.hpp"
#include "tileforge/nn.hpp"
#include "tileforge/report.hpp"

namespace tileforge {

// DataSource over a manifest's TRAIN/VAL entries. Tile pixels are cached
// in memory as RGB8; training loads re-draw augmentation per (epoch, uid).
class StoreDataSource : public nn::DataSource {
public:
    StoreDataSource(const DatasetManifest& manifest, const AugmentConfig& augment,
                    uint64_t order_seed);

    size_t train_count() const override { return train_.size(); }
    size_t val_count() const override { return val_.size(); }
    void load_train(size_t i, int epoch, float* dst) const override;
    void load_val(size_t i, float* dst) const override;
    float train_label(size_t i) const override { return train_[i].label; }
    float val_label(size_t i) const override { return val_[i].label; }
    uint64_t order_seed() const override { return order_seed_; }

    int tile_size() const { return tile_size_; }

private:
    struct Item {
        ImageU8 pixels;
        float label = 0;
        uint64_t uid = 0;
    };
    std::vector<Item> train_, val_;
    AugmentConfig augment_;
    uint64_t order_seed_ = 0;
    int tile_size_ = 0;
};

// Pixels of every TEST entry plus labels, for tile-level evaluation.
struct TestSet {
    std::vector<ImageU8> tiles;
    std::vector<int> labels;
};

TestSet collect_test_set(const DatasetManifest& manifest);

// Tile-level scores on TEST plus slide-level decisions on every
// HELDOUT_WSI slide.
EvalReport evaluate(const nn::Model& model, const DatasetManifest& manifest,
                    double threshold, int jobs,
                    std::vector<SlideReport>* slide_reports = nullptr);

std::vector<double> predict_images(const nn::Model& model,
                                   const std::vector<ImageU8>& tiles, int jobs);

} // namespace tileforge
