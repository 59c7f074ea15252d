#pragma once

#include <vector>

#include "tileforge/common.hpp"
#include "tileforge/nn.hpp"

namespace tileforge {

struct DimMismatch : std::runtime_error { using std::runtime_error::runtime_error; };

struct GradCamMap {
    int hw = 0;                    // feature-map side (7 at 224 input)
    std::vector<float> raw;        // hw*hw, >= 0
    std::vector<float> normalized; // raw / max(raw), or all zeros
    int out_size = 0;
    std::vector<float> upsampled;  // out_size*out_size in [0,1]
};

// Channel weights = spatial mean of d(logit)/d(activation); map =
// ReLU(sum_k alpha_k * A_k). Exposed separately so tests can drive it with
// hand-set activations and gradients.
GradCamMap gradcam_combine(int channels, int hw, const std::vector<float>& act,
                           const std::vector<float>& grad, int out_size);

// Target defaults to the last backbone activation; `layer` selects another
// post-block map for exploration.
GradCamMap gradcam(const nn::Model& model, const ImageU8& tile, int layer = -1);

// Blue -> green -> yellow -> red ramp blended over the tile.
ImageU8 overlay(const ImageU8& tile, const GradCamMap& map, double alpha = 0.45);

} // namespace tileforge
