#include "tileforge/augment.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "tileforge/tiler.hpp"

namespace tileforge {

void AugmentConfig::validate() const {
    auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
    if (!prob(p_color_shift) || !prob(p_saturation) ||
        !prob(p_brightness_contrast) || !prob(p_sharpen))
        throw std::invalid_argument("augment: probabilities must be in [0,1]");
    if (color_shift_lo > color_shift_hi || saturation_lo > saturation_hi ||
        brightness_lo > brightness_hi || contrast_lo > contrast_hi ||
        sharpen_lo > sharpen_hi)
        throw std::invalid_argument("augment: range lo > hi");
}

namespace {

uint8_t clamp_u8(double v) {
    return static_cast<uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

void apply_color_shift(ImageU8& img, double dr, double dg, double db) {
    double d[3] = {dr, dg, db};
    for (size_t i = 0; i < img.pix.size(); ++i)
        img.pix[i] = clamp_u8(img.pix[i] + d[i % 3]);
}

// Interpolate between the pixel and its Rec.601 luma; s=1 is identity.
void apply_saturation(ImageU8& img, double s) {
    size_t n = img.pix.size() / 3;
    for (size_t i = 0; i < n; ++i) {
        uint8_t* p = &img.pix[i * 3];
        double luma = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
        for (int c = 0; c < 3; ++c)
            p[c] = clamp_u8(luma + s * (p[c] - luma));
    }
}

void apply_brightness_contrast(ImageU8& img, double brightness, double contrast) {
    for (auto& v : img.pix)
        v = clamp_u8((v - 128.0) * contrast + 128.0 + brightness);
}

} // namespace

ImageU8 augment_tile(const ImageU8& tile, const AugmentConfig& cfg, int epoch,
                     uint64_t tile_uid) {
    cfg.validate();
    uint64_t key = hash_combine(hash_combine(cfg.master_seed,
                                             static_cast<uint64_t>(epoch)),
                                tile_uid);
    RngStream rng(key);
    ImageU8 out = tile;

    // Draw order is fixed: gate then parameters, per transform.
    bool do_color = rng.next_unit() < cfg.p_color_shift;
    double dr = rng.next_uniform(cfg.color_shift_lo, cfg.color_shift_hi);
    double dg = rng.next_uniform(cfg.color_shift_lo, cfg.color_shift_hi);
    double db = rng.next_uniform(cfg.color_shift_lo, cfg.color_shift_hi);
    if (do_color) apply_color_shift(out, dr, dg, db);

    bool do_sat = rng.next_unit() < cfg.p_saturation;
    double sat = rng.next_uniform(cfg.saturation_lo, cfg.saturation_hi);
    if (do_sat) apply_saturation(out, sat);

    bool do_bc = rng.next_unit() < cfg.p_brightness_contrast;
    double brightness = rng.next_uniform(cfg.brightness_lo, cfg.brightness_hi);
    double contrast = rng.next_uniform(cfg.contrast_lo, cfg.contrast_hi);
    if (do_bc) apply_brightness_contrast(out, brightness, contrast);

    bool do_sharpen = rng.next_unit() < cfg.p_sharpen;
    double amount = rng.next_uniform(cfg.sharpen_lo, cfg.sharpen_hi);
    if (do_sharpen) out = sharpen(out, amount);

    return out;
}

} // namespace tileforge
