#include "tileforge/gradcam.hpp"

#include <algorithm>
#include <cmath>

#include "tileforge/tiler.hpp"

namespace tileforge {

GradCamMap gradcam_combine(int channels, int hw, const std::vector<float>& act,
                           const std::vector<float>& grad, int out_size) {
    size_t plane = static_cast<size_t>(hw) * hw;
    if (act.size() != plane * channels || grad.size() != plane * channels)
        throw nn::ShapeMismatch("gradcam_combine: activation/gradient size mismatch");

    GradCamMap map;
    map.hw = hw;
    map.raw.assign(plane, 0.0f);
    for (int k = 0; k < channels; ++k) {
        double alpha = 0;
        for (size_t i = 0; i < plane; ++i) alpha += grad[size_t(k) * plane + i];
        alpha /= double(plane);
        for (size_t i = 0; i < plane; ++i)
            map.raw[i] += static_cast<float>(alpha * act[size_t(k) * plane + i]);
    }
    for (auto& v : map.raw)
        if (v < 0) v = 0;

    float mx = *std::max_element(map.raw.begin(), map.raw.end());
    map.normalized.resize(plane);
    for (size_t i = 0; i < plane; ++i)
        map.normalized[i] = mx > 0 ? map.raw[i] / mx : 0.0f;

    map.out_size = out_size;
    map.upsampled = resize_bilinear_plane(map.normalized, hw, hw, out_size, out_size);
    for (auto& v : map.upsampled) v = std::clamp(v, 0.0f, 1.0f);
    return map;
}

GradCamMap gradcam(const nn::Model& model, const ImageU8& tile, int layer) {
    if (tile.width != model.spec.input_hw || tile.height != model.spec.input_hw)
        throw nn::ShapeMismatch("gradcam: tile does not match model input size");
    std::vector<float> pixels(tile.pix.size());
    for (size_t i = 0; i < pixels.size(); ++i) pixels[i] = tile.pix[i] / 255.0f;
    auto fg = nn::feature_gradient(model, pixels.data(), layer);
    return gradcam_combine(fg.channels, fg.hw, fg.act, fg.grad, tile.width);
}

namespace {

// piecewise-linear blue(0) -> green -> yellow -> red(1)
void ramp_color(double t, uint8_t rgb[3]) {
    t = std::clamp(t, 0.0, 1.0);
    double r, g, b;
    if (t < 1.0 / 3.0) {
        double u = t * 3.0;
        r = 0; g = u; b = 1.0 - u;
    } else if (t < 2.0 / 3.0) {
        double u = (t - 1.0 / 3.0) * 3.0;
        r = u; g = 1.0; b = 0;
    } else {
        double u = (t - 2.0 / 3.0) * 3.0;
        r = 1.0; g = 1.0 - u; b = 0;
    }
    rgb[0] = static_cast<uint8_t>(std::lround(r * 255));
    rgb[1] = static_cast<uint8_t>(std::lround(g * 255));
    rgb[2] = static_cast<uint8_t>(std::lround(b * 255));
}

} // namespace

ImageU8 overlay(const ImageU8& tile, const GradCamMap& map, double alpha) {
    if (map.out_size != tile.width || map.out_size != tile.height ||
        map.upsampled.size() != size_t(map.out_size) * map.out_size)
        throw DimMismatch("overlay: map upsample dims do not match tile");
    ImageU8 out(tile.width, tile.height);
    for (int y = 0; y < tile.height; ++y) {
        for (int x = 0; x < tile.width; ++x) {
            uint8_t color[3];
            ramp_color(map.upsampled[size_t(y) * tile.width + x], color);
            for (int c = 0; c < 3; ++c) {
                double v = (1.0 - alpha) * tile.at(x, y)[c] + alpha * color[c];
                out.at(x, y)[c] = static_cast<uint8_t>(std::clamp(std::lround(v), 0L, 255L));
            }
        }
    }
    return out;
}

} // namespace tileforge
