#pragma once

// Templated numeric core for the fixed backbone:
//   stem conv 3x3 stride 2 + ReLU, then B blocks of
//   [conv 3x3 stride 1 (channels x2) + ReLU + maxpool 2x2],
//   head: global average pool -> dropout -> dense(1) raw logit.
// Instantiated at float in production; tests instantiate double for
// tight finite-difference oracles.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "tileforge/common.hpp"

namespace tileforge::nn {

struct NnError : std::runtime_error { using std::runtime_error::runtime_error; };
struct ShapeMismatch : NnError { using NnError::NnError; };
struct StaleCache : NnError { using NnError::NnError; };

struct ModelSpec {
    int input_hw = 224;
    int in_channels = 3;
    int stem_channels = 16;
    int blocks = 4;
    float dropout_rate = 0.2f;

    uint64_t digest() const {
        uint64_t h = fnv1a64(&input_hw, sizeof input_hw);
        h = fnv1a64(&in_channels, sizeof in_channels, h);
        h = fnv1a64(&stem_channels, sizeof stem_channels, h);
        h = fnv1a64(&blocks, sizeof blocks, h);
        h = fnv1a64(&dropout_rate, sizeof dropout_rate, h);
        return h;
    }
    bool operator==(const ModelSpec&) const = default;
};

struct LayerGeom {
    int in_ch = 0, out_ch = 0;
    int in_hw = 0;   // square input side
    int conv_hw = 0; // side after conv
    int out_hw = 0;  // side after pool (== conv_hw for the stem)
    int stride = 1;
    bool pooled = false;
};

inline std::vector<LayerGeom> geometry(const ModelSpec& spec) {
    if (spec.input_hw < 2 || spec.in_channels < 1 || spec.stem_channels < 1 ||
        spec.blocks < 0)
        throw ShapeMismatch("model spec: bad dimensions");
    std::vector<LayerGeom> g;
    LayerGeom stem;
    stem.in_ch = spec.in_channels;
    stem.out_ch = spec.stem_channels;
    stem.in_hw = spec.input_hw;
    stem.stride = 2;
    stem.conv_hw = (spec.input_hw + 2 - 3) / 2 + 1;
    stem.out_hw = stem.conv_hw;
    g.push_back(stem);
    for (int b = 1; b <= spec.blocks; ++b) {
        LayerGeom lg;
        lg.in_ch = g.back().out_ch;
        lg.out_ch = lg.in_ch * 2;
        lg.in_hw = g.back().out_hw;
        lg.stride = 1;
        lg.conv_hw = lg.in_hw; // pad 1 keeps the side
        lg.pooled = true;
        lg.out_hw = lg.conv_hw / 2;
        if (lg.out_hw < 1)
            throw ShapeMismatch("model spec: feature map collapses below 1x1");
        g.push_back(lg);
    }
    return g;
}

inline int feature_hw(const ModelSpec& spec) { return geometry(spec).back().out_hw; }
inline int feature_channels(const ModelSpec& spec) { return geometry(spec).back().out_ch; }

// Parameter groups: one per conv layer (weights [out][in][3][3] then bias
// [out]) and a final head group ([C] weights then 1 bias).
inline std::vector<size_t> group_sizes(const ModelSpec& spec) {
    std::vector<size_t> sizes;
    for (const auto& lg : geometry(spec))
        sizes.push_back(size_t(lg.out_ch) * lg.in_ch * 9 + lg.out_ch);
    sizes.push_back(size_t(feature_channels(spec)) + 1);
    return sizes;
}

namespace core {

template <typename T>
struct ItemCache {
    std::vector<T> input;                    // in_ch x H x W, channel-major
    std::vector<std::vector<T>> conv_out;    // post-ReLU, per layer
    std::vector<std::vector<T>> pool_out;    // per layer (empty when not pooled)
    std::vector<std::vector<int>> pool_arg;  // argmax flat index into conv_out
    std::vector<T> gap;                      // C
    std::vector<T> dropout_scale;            // per channel; empty at inference
    T logit = 0;
};

template <typename T>
void conv3x3_forward(const T* in, int in_ch, int in_hw, const T* w, const T* bias,
                     int out_ch, int stride, int out_hw, T* out) {
    for (int oc = 0; oc < out_ch; ++oc) {
        for (int oy = 0; oy < out_hw; ++oy) {
            for (int ox = 0; ox < out_hw; ++ox) {
                double acc = bias[oc];
                for (int ic = 0; ic < in_ch; ++ic) {
                    const T* plane = in + size_t(ic) * in_hw * in_hw;
                    const T* k = w + (size_t(oc) * in_ch + ic) * 9;
                    for (int ky = 0; ky < 3; ++ky) {
                        int iy = oy * stride + ky - 1;
                        if (iy < 0 || iy >= in_hw) continue;
                        for (int kx = 0; kx < 3; ++kx) {
                            int ix = ox * stride + kx - 1;
                            if (ix < 0 || ix >= in_hw) continue;
                            acc += double(plane[iy * in_hw + ix]) * double(k[ky * 3 + kx]);
                        }
                    }
                }
                out[(size_t(oc) * out_hw + oy) * out_hw + ox] = T(acc);
            }
        }
    }
}

// Accumulates dW/db into dw (same layout as the group) and writes dIn.
template <typename T>
void conv3x3_backward(const T* in, int in_ch, int in_hw, const T* w, int out_ch,
                      int stride, int out_hw, const T* dout, T* dw_group,
                      T* din) {
    T* dw = dw_group;
    T* db = dw_group + size_t(out_ch) * in_ch * 9;
    if (din)
        for (size_t i = 0; i < size_t(in_ch) * in_hw * in_hw; ++i) din[i] = 0;
    for (int oc = 0; oc < out_ch; ++oc) {
        for (int oy = 0; oy < out_hw; ++oy) {
            for (int ox = 0; ox < out_hw; ++ox) {
                T g = dout[(size_t(oc) * out_hw + oy) * out_hw + ox];
                if (g == T(0)) continue;
                db[oc] += g;
                for (int ic = 0; ic < in_ch; ++ic) {
                    const T* plane = in + size_t(ic) * in_hw * in_hw;
                    T* dplane = din ? din + size_t(ic) * in_hw * in_hw : nullptr;
                    const T* k = w + (size_t(oc) * in_ch + ic) * 9;
                    T* dk = dw + (size_t(oc) * in_ch + ic) * 9;
                    for (int ky = 0; ky < 3; ++ky) {
                        int iy = oy * stride + ky - 1;
                        if (iy < 0 || iy >= in_hw) continue;
                        for (int kx = 0; kx < 3; ++kx) {
                            int ix = ox * stride + kx - 1;
                            if (ix < 0 || ix >= in_hw) continue;
                            dk[ky * 3 + kx] += g * plane[iy * in_hw + ix];
                            if (dplane) dplane[iy * in_hw + ix] += g * k[ky * 3 + kx];
                        }
                    }
                }
            }
        }
    }
}

// Forward for one item. `pixels` is H*W*3 interleaved in [0,1].
// When training, dropout scales are drawn from a counter stream on mask_seed.
template <typename T>
ItemCache<T> item_forward(const ModelSpec& spec, const std::vector<LayerGeom>& geom,
                          const std::vector<std::vector<T>>& params,
                          const float* pixels, bool training, uint64_t mask_seed) {
    ItemCache<T> c;
    int hw = spec.input_hw;
    c.input.resize(size_t(spec.in_channels) * hw * hw);
    for (int ch = 0; ch < spec.in_channels; ++ch)
        for (int i = 0; i < hw * hw; ++i)
            c.input[size_t(ch) * hw * hw + i] = T(pixels[size_t(i) * spec.in_channels + ch]);

    size_t n_layers = geom.size();
    c.conv_out.resize(n_layers);
    c.pool_out.resize(n_layers);
    c.pool_arg.resize(n_layers);

    const T* x = c.input.data();
    for (size_t l = 0; l < n_layers; ++l) {
        const auto& lg = geom[l];
        const T* w = params[l].data();
        const T* b = w + size_t(lg.out_ch) * lg.in_ch * 9;
        c.conv_out[l].resize(size_t(lg.out_ch) * lg.conv_hw * lg.conv_hw);
        conv3x3_forward(x, lg.in_ch, lg.in_hw, w, b, lg.out_ch, lg.stride,
                        lg.conv_hw, c.conv_out[l].data());
        for (auto& v : c.conv_out[l])
            if (v < T(0)) v = T(0);
        if (lg.pooled) {
            int ph = lg.out_hw;
            c.pool_out[l].resize(size_t(lg.out_ch) * ph * ph);
            c.pool_arg[l].resize(c.pool_out[l].size());
            for (int oc = 0; oc < lg.out_ch; ++oc) {
                const T* plane = c.conv_out[l].data() + size_t(oc) * lg.conv_hw * lg.conv_hw;
                for (int py = 0; py < ph; ++py) {
                    for (int px = 0; px < ph; ++px) {
                        int best = (2 * py) * lg.conv_hw + 2 * px;
                        for (int dy = 0; dy < 2; ++dy)
                            for (int dx = 0; dx < 2; ++dx) {
                                int idx = (2 * py + dy) * lg.conv_hw + 2 * px + dx;
                                if (plane[idx] > plane[best]) best = idx;
                            }
                        size_t o = (size_t(oc) * ph + py) * ph + px;
                        c.pool_out[l][o] = plane[best];
                        c.pool_arg[l][o] = size_t(oc) * lg.conv_hw * lg.conv_hw + best;
                    }
                }
            }
            x = c.pool_out[l].data();
        } else {
            x = c.conv_out[l].data();
        }
    }

    const auto& last = geom.back();
    int fhw = last.out_hw;
    int C = last.out_ch;
    c.gap.resize(C);
    for (int ch = 0; ch < C; ++ch) {
        double acc = 0;
        for (int i = 0; i < fhw * fhw; ++i) acc += double(x[size_t(ch) * fhw * fhw + i]);
        c.gap[ch] = T(acc / (fhw * fhw));
    }

    const auto& head = params.back();
    double logit = head[C]; // bias
    if (training && spec.dropout_rate > 0) {
        c.dropout_scale.resize(C);
        RngStream rng(mask_seed);
        T keep_scale = T(1.0 / (1.0 - spec.dropout_rate));
        for (int ch = 0; ch < C; ++ch)
            c.dropout_scale[ch] = rng.next_unit() < spec.dropout_rate ? T(0) : keep_scale;
        for (int ch = 0; ch < C; ++ch)
            logit += double(head[ch]) * double(c.gap[ch] * c.dropout_scale[ch]);
    } else {
        for (int ch = 0; ch < C; ++ch)
            logit += double(head[ch]) * double(c.gap[ch]);
    }
    c.logit = T(logit);
    return c;
}

// Backward for one item. Accumulates parameter gradients into `grads`
// (each group pre-sized and zeroed by the caller). When capture_layer >= 0,
// the gradient w.r.t. that layer's post-pool output is copied there and the
// walk stops below it.
template <typename T>
void item_backward(const ModelSpec& spec, const std::vector<LayerGeom>& geom,
                   const std::vector<std::vector<T>>& params, const ItemCache<T>& c,
                   T dlogit, std::vector<std::vector<T>>& grads,
                   int capture_layer = -1, std::vector<T>* captured = nullptr) {
    const auto& last = geom.back();
    int C = last.out_ch;
    int fhw = last.out_hw;
    const auto& head = params.back();
    auto& dhead = grads.back();

    std::vector<T> dgap(C);
    bool training = !c.dropout_scale.empty();
    for (int ch = 0; ch < C; ++ch) {
        T scale = training ? c.dropout_scale[ch] : T(1);
        dhead[ch] += dlogit * c.gap[ch] * scale;
        dgap[ch] = dlogit * head[ch] * scale;
    }
    dhead[C] += dlogit;

    // spread gap gradient over the final feature map
    std::vector<T> d_post(size_t(C) * fhw * fhw);
    for (int ch = 0; ch < C; ++ch) {
        T g = dgap[ch] / T(fhw * fhw);
        for (int i = 0; i < fhw * fhw; ++i) d_post[size_t(ch) * fhw * fhw + i] = g;
    }

    for (int l = int(geom.size()) - 1; l >= 0; --l) {
        const auto& lg = geom[l];
        if (capture_layer == l) {
            if (captured) *captured = d_post;
            return;
        }
        std::vector<T> d_relu;
        if (lg.pooled) {
            d_relu.assign(c.conv_out[l].size(), T(0));
            for (size_t i = 0; i < d_post.size(); ++i)
                d_relu[c.pool_arg[l][i]] += d_post[i];
        } else {
            d_relu = std::move(d_post);
        }
        for (size_t i = 0; i < d_relu.size(); ++i)
            if (c.conv_out[l][i] <= T(0)) d_relu[i] = T(0);

        const T* in = l == 0 ? c.input.data()
                     : geom[l - 1].pooled ? c.pool_out[l - 1].data()
                                          : c.conv_out[l - 1].data();
        std::vector<T> din;
        T* din_ptr = nullptr;
        if (l > 0) {
            din.resize(size_t(lg.in_ch) * lg.in_hw * lg.in_hw);
            din_ptr = din.data();
        }
        conv3x3_backward(in, lg.in_ch, lg.in_hw, params[l].data(), lg.out_ch,
                         lg.stride, lg.conv_hw, d_relu.data(), grads[l].data(),
                         din_ptr);
        d_post = std::move(din);
    }
}

} // namespace core

} // namespace tileforge::nn
