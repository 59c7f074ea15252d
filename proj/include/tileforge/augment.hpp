#pragma once

#include <cstdint>

#include "tileforge/common.hpp"

namespace tileforge {

// Photometric training-time augmentation. Every field configurable; the
// defaults are visually mild. All draws come from a counter-based stream
// keyed on (master_seed, epoch, tile_uid), so results are independent of
// iteration order and worker count.
struct AugmentConfig {
    double p_color_shift = 0.5;
    double p_saturation = 0.5;
    double p_brightness_contrast = 0.5;
    double p_sharpen = 0.5;

    double color_shift_lo = -25.0, color_shift_hi = 25.0; // per channel, additive
    double saturation_lo = 0.7, saturation_hi = 1.3;
    double brightness_lo = -25.0, brightness_hi = 25.0;
    double contrast_lo = 0.8, contrast_hi = 1.2;
    double sharpen_lo = 0.0, sharpen_hi = 1.0;

    uint64_t master_seed = 0;

    void validate() const; // throws std::invalid_argument
};

// Fixed transform order: color shift -> saturation -> brightness/contrast -> sharpen.
ImageU8 augment_tile(const ImageU8& tile, const AugmentConfig& cfg, int epoch,
                     uint64_t tile_uid);

} // namespace tileforge
