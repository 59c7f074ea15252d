#include "tileforge/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace fs = std::filesystem;

namespace tileforge::nn {

struct BatchCache {
    uint64_t spec_digest = 0;
    bool training = false;
    std::vector<core::ItemCache<float>> items;
};

Model init_model(const ModelSpec& spec, uint64_t seed) {
    Model m;
    m.spec = spec;
    auto geom = geometry(spec);
    auto sizes = group_sizes(spec);
    m.params.resize(sizes.size());
    m.adam_m.resize(sizes.size());
    m.adam_v.resize(sizes.size());
    m.frozen.assign(sizes.size(), 0);
    RngStream rng(hash_combine(seed, 0x696e6974ULL));
    for (size_t g = 0; g < sizes.size(); ++g) {
        m.params[g].resize(sizes[g]);
        m.adam_m[g].assign(sizes[g], 0.0f);
        m.adam_v[g].assign(sizes[g], 0.0f);
        int fan_in = g < geom.size() ? geom[g].in_ch * 9 : feature_channels(spec);
        double limit = std::sqrt(6.0 / fan_in); // He-uniform
        size_t n_weights = g < geom.size() ? size_t(geom[g].out_ch) * geom[g].in_ch * 9
                                           : size_t(feature_channels(spec));
        for (size_t i = 0; i < sizes[g]; ++i)
            m.params[g][i] = i < n_weights
                                 ? static_cast<float>(rng.next_uniform(-limit, limit))
                                 : 0.0f; // biases start at zero
    }
    m.rng_state = hash_combine(seed, 0x64726f70ULL);
    return m;
}

void set_freeze_backbone(Model& m, bool freeze) {
    for (size_t g = 0; g + 1 < m.frozen.size(); ++g)
        m.frozen[g] = freeze ? 1 : 0;
    m.frozen.back() = 0;
}

ForwardOut forward(Model& m, const Tensor& batch, bool training, int jobs) {
    if (batch.shape.size() != 4 || batch.shape[1] != m.spec.input_hw ||
        batch.shape[2] != m.spec.input_hw || batch.shape[3] != m.spec.in_channels)
        throw ShapeMismatch("forward: batch shape does not match model spec");
    size_t n = static_cast<size_t>(batch.shape[0]);
    if (batch.data.size() != n * m.spec.input_hw * m.spec.input_hw * m.spec.in_channels)
        throw ShapeMismatch("forward: data length does not match shape");

    uint64_t batch_seed = 0;
    if (training) {
        // one rng advance per training forward keeps resume runs bit-equal
        m.rng_state = splitmix64(m.rng_state);
        batch_seed = m.rng_state;
    }

    auto geom = geometry(m.spec);
    auto out = ForwardOut{};
    out.cache = std::make_shared<BatchCache>();
    out.cache->spec_digest = m.spec.digest();
    out.cache->training = training;
    out.cache->items.resize(n);
    out.logits.resize(n);
    size_t item_len = size_t(m.spec.input_hw) * m.spec.input_hw * m.spec.in_channels;
    parallel_for(n, jobs, [&](size_t i) {
        uint64_t mask_seed = hash_combine(batch_seed, i);
        out.cache->items[i] = core::item_forward<float>(
            m.spec, geom, m.params, batch.data.data() + i * item_len, training, mask_seed);
        out.logits[i] = out.cache->items[i].logit;
    });
    return out;
}

BceOut bce_with_logits(const std::vector<float>& logits,
                       const std::vector<float>& labels) {
    if (logits.size() != labels.size())
        throw ShapeMismatch("bce_with_logits: length mismatch");
    if (logits.empty()) throw ShapeMismatch("bce_with_logits: empty batch");
    double n = static_cast<double>(logits.size());
    BceOut out;
    out.dlogits.resize(logits.size());
    double loss = 0;
    for (size_t i = 0; i < logits.size(); ++i) {
        double z = logits[i], y = labels[i];
        loss += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
        double sig = 1.0 / (1.0 + std::exp(-z));
        out.dlogits[i] = static_cast<float>((sig - y) / n);
    }
    out.loss = loss / n;
    return out;
}

Gradients backward(const Model& m, const BatchCache& cache,
                   const std::vector<float>& dlogits, int jobs) {
    if (cache.spec_digest != m.spec.digest())
        throw StaleCache("backward: cache from a different model spec");
    if (cache.items.size() != dlogits.size())
        throw StaleCache("backward: cache batch size mismatch");
    if (!cache.training)
        throw StaleCache("backward: cache was produced with training=false");

    auto geom = geometry(m.spec);
    auto sizes = group_sizes(m.spec);
    size_t n = cache.items.size();
    // per-item gradients reduced in index order so sums are deterministic
    std::vector<Gradients> partial(n);
    parallel_for(n, jobs, [&](size_t i) {
        Gradients g(sizes.size());
        for (size_t k = 0; k < sizes.size(); ++k) g[k].assign(sizes[k], 0.0f);
        core::item_backward<float>(m.spec, geom, m.params, cache.items[i],
                                   dlogits[i], g);
        partial[i] = std::move(g);
    });
    Gradients grads(sizes.size());
    for (size_t k = 0; k < sizes.size(); ++k) {
        if (m.frozen[k]) continue; // frozen groups stay empty
        grads[k].assign(sizes[k], 0.0f);
        for (size_t i = 0; i < n; ++i)
            for (size_t j = 0; j < sizes[k]; ++j) grads[k][j] += partial[i][k][j];
    }
    return grads;
}

void adam_step(Model& m, const Gradients& grads, double lr) {
    constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    if (grads.size() != m.params.size())
        throw ShapeMismatch("adam_step: gradient group count mismatch");
    m.step += 1;
    double bc1 = 1.0 - std::pow(beta1, double(m.step));
    double bc2 = 1.0 - std::pow(beta2, double(m.step));
    for (size_t g = 0; g < m.params.size(); ++g) {
        if (m.frozen[g] || grads[g].empty()) continue;
        if (grads[g].size() != m.params[g].size())
            throw ShapeMismatch("adam_step: gradient size mismatch in group " +
                                std::to_string(g));
        for (size_t i = 0; i < m.params[g].size(); ++i) {
            double grad = grads[g][i];
            double mm = beta1 * m.adam_m[g][i] + (1 - beta1) * grad;
            double vv = beta2 * m.adam_v[g][i] + (1 - beta2) * grad * grad;
            m.adam_m[g][i] = static_cast<float>(mm);
            m.adam_v[g][i] = static_cast<float>(vv);
            double mhat = mm / bc1;
            double vhat = vv / bc2;
            m.params[g][i] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + eps));
        }
    }
}

std::vector<double> predict(const Model& m, const Tensor& batch, int jobs) {
    Model& mut = const_cast<Model&>(m); // training=false leaves rng untouched
    auto out = forward(mut, batch, /*training=*/false, jobs);
    std::vector<double> probs(out.logits.size());
    for (size_t i = 0; i < probs.size(); ++i)
        probs[i] = 1.0 / (1.0 + std::exp(-double(out.logits[i])));
    return probs;
}

namespace {

Tensor make_batch(const Model& m, size_t n) {
    Tensor t;
    t.shape = {int(n), m.spec.input_hw, m.spec.input_hw, m.spec.in_channels};
    t.data.resize(n * size_t(m.spec.input_hw) * m.spec.input_hw * m.spec.in_channels);
    return t;
}

} // namespace

namespace {

void seeded_shuffle_epoch(std::vector<size_t>& order, uint64_t seed, int epoch) {
    RngStream rng(hash_combine(seed, 0x65706f6368ULL + uint64_t(epoch)));
    for (size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[rng.next_below(i)]);
}

} // namespace

double validation_loss(Model& m, const DataSource& data, int batch_size, int jobs) {
    size_t n_val = data.val_count();
    if (n_val == 0) throw EmptySplit("validation_loss: empty VAL split");
    size_t item_len = size_t(m.spec.input_hw) * m.spec.input_hw * m.spec.in_channels;
    double total = 0;
    size_t i = 0;
    while (i < n_val) {
        size_t bs = std::min<size_t>(batch_size, n_val - i);
        Tensor batch = make_batch(m, bs);
        std::vector<float> labels(bs);
        parallel_for(bs, jobs, [&](size_t k) {
            data.load_val(i + k, batch.data.data() + k * item_len);
            labels[k] = data.val_label(i + k);
        });
        auto fwd = forward(m, batch, /*training=*/false, jobs);
        total += bce_with_logits(fwd.logits, labels).loss * double(bs);
        i += bs;
    }
    return total / double(n_val);
}

TrainResult train(Model model, const DataSource& data, const TrainSchedule& sched,
                  int jobs) {
    size_t n_train = data.train_count();
    if (n_train == 0) throw EmptySplit("train: empty TRAIN split");
    if (data.val_count() == 0) throw EmptySplit("train: empty VAL split");

    int total_epochs = sched.phase1_epochs + sched.phase2_epochs;
    size_t item_len = size_t(model.spec.input_hw) * model.spec.input_hw *
                      model.spec.in_channels;

    TrainResult result;
    double best_val = std::numeric_limits<double>::infinity();
    Model best = model;
    int since_best = 0;

    for (int epoch = model.epoch; epoch < total_epochs; ++epoch) {
        bool phase1 = epoch < sched.phase1_epochs;
        double lr = phase1 ? sched.phase1_lr
                           : sched.phase2_lr0 *
                                 std::pow(sched.decay, double(epoch - sched.phase1_epochs));
        set_freeze_backbone(model, phase1);

        std::vector<size_t> order(n_train);
        for (size_t i = 0; i < n_train; ++i) order[i] = i;
        seeded_shuffle_epoch(order, data.order_seed(), epoch);

        double train_loss = 0;
        size_t seen = 0;
        size_t i = 0;
        while (i < n_train) {
            size_t bs = std::min<size_t>(sched.batch_size, n_train - i);
            Tensor batch = make_batch(model, bs);
            std::vector<float> labels(bs);
            parallel_for(bs, jobs, [&](size_t k) {
                size_t idx = order[i + k];
                data.load_train(idx, epoch, batch.data.data() + k * item_len);
                labels[k] = data.train_label(idx);
            });
            auto fwd = forward(model, batch, /*training=*/true, jobs);
            auto bce = bce_with_logits(fwd.logits, labels);
            auto grads = backward(model, *fwd.cache, bce.dlogits, jobs);
            adam_step(model, grads, lr);
            train_loss += bce.loss * double(bs);
            seen += bs;
            i += bs;
        }
        model.epoch = epoch + 1;

        double val_loss = validation_loss(model, data, sched.batch_size, jobs);
        result.history.push_back({epoch, lr, train_loss / double(seen), val_loss});

        if (val_loss < best_val) {
            best_val = val_loss;
            best = model;
            since_best = 0;
        } else if (++since_best >= sched.patience) {
            break;
        }
    }

    result.model = sched.restore_best ? std::move(best) : std::move(model);
    return result;
}

// ---------------------------------------------------------------------------
// checkpoints

namespace {

constexpr char kMagic[8] = {'T', 'F', 'G', 'C', 'K', 'P', 'T', '1'};

template <typename T>
void put(std::ofstream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::ifstream& in) {
    T v;
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!in) throw CorruptCheckpoint("checkpoint truncated");
    return v;
}

void put_vec(std::ofstream& out, const std::vector<float>& v) {
    put<uint64_t>(out, v.size());
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(float)));
}

std::vector<float> get_vec(std::ifstream& in) {
    auto n = get<uint64_t>(in);
    std::vector<float> v(n);
    in.read(reinterpret_cast<char*>(v.data()),
            static_cast<std::streamsize>(n * sizeof(float)));
    if (!in) throw CorruptCheckpoint("checkpoint truncated");
    return v;
}

} // namespace

void save_checkpoint(const Model& m, const fs::path& path) {
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw NnError("cannot write " + tmp.string());
        out.write(kMagic, sizeof kMagic);
        put<int32_t>(out, m.spec.input_hw);
        put<int32_t>(out, m.spec.in_channels);
        put<int32_t>(out, m.spec.stem_channels);
        put<int32_t>(out, m.spec.blocks);
        put<float>(out, m.spec.dropout_rate);
        put<uint64_t>(out, m.spec.digest());
        put<int32_t>(out, m.epoch);
        put<int64_t>(out, m.step);
        put<uint64_t>(out, m.rng_state);
        put<uint64_t>(out, m.params.size());
        for (size_t g = 0; g < m.params.size(); ++g) {
            put<uint8_t>(out, m.frozen[g]);
            put_vec(out, m.params[g]);
            put_vec(out, m.adam_m[g]);
            put_vec(out, m.adam_v[g]);
        }
        if (!out) throw NnError("checkpoint write failed: " + tmp.string());
    }
    fs::rename(tmp, path);
}

Model load_checkpoint(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw NnError("cannot open checkpoint " + path.string());
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kMagic, 8) != 0)
        throw VersionMismatch(path.string() + ": not a recognized checkpoint");
    Model m;
    m.spec.input_hw = get<int32_t>(in);
    m.spec.in_channels = get<int32_t>(in);
    m.spec.stem_channels = get<int32_t>(in);
    m.spec.blocks = get<int32_t>(in);
    m.spec.dropout_rate = get<float>(in);
    auto digest = get<uint64_t>(in);
    if (digest != m.spec.digest())
        throw CorruptCheckpoint(path.string() + ": spec digest mismatch");
    m.epoch = get<int32_t>(in);
    m.step = get<int64_t>(in);
    m.rng_state = get<uint64_t>(in);
    auto n_groups = get<uint64_t>(in);
    auto sizes = group_sizes(m.spec);
    if (n_groups != sizes.size())
        throw CorruptCheckpoint(path.string() + ": group count mismatch");
    m.frozen.resize(n_groups);
    m.params.resize(n_groups);
    m.adam_m.resize(n_groups);
    m.adam_v.resize(n_groups);
    for (size_t g = 0; g < n_groups; ++g) {
        m.frozen[g] = get<uint8_t>(in);
        m.params[g] = get_vec(in);
        m.adam_m[g] = get_vec(in);
        m.adam_v[g] = get_vec(in);
        if (m.params[g].size() != sizes[g] || m.adam_m[g].size() != sizes[g] ||
            m.adam_v[g].size() != sizes[g])
            throw CorruptCheckpoint(path.string() + ": group size mismatch");
    }
    return m;
}

Model load_checkpoint(const fs::path& path, const ModelSpec& expected) {
    Model m = load_checkpoint(path);
    if (!(m.spec == expected))
        throw VersionMismatch(path.string() + ": checkpoint spec differs from expected");
    return m;
}

FeatureGrad feature_gradient(const Model& m, const float* pixels, int layer) {
    auto geom = geometry(m.spec);
    int target = layer < 0 ? int(geom.size()) - 1 : layer;
    if (target < 0 || target >= int(geom.size()))
        throw ShapeMismatch("feature_gradient: layer index out of range");

    auto cache = core::item_forward<float>(m.spec, geom, m.params, pixels,
                                           /*training=*/false, 0);
    auto sizes = group_sizes(m.spec);
    Gradients scratch(sizes.size());
    for (size_t k = 0; k < sizes.size(); ++k) scratch[k].assign(sizes[k], 0.0f);
    std::vector<float> captured;
    core::item_backward<float>(m.spec, geom, m.params, cache, 1.0f, scratch,
                               target, &captured);

    FeatureGrad fg;
    fg.channels = geom[target].out_ch;
    fg.hw = geom[target].out_hw;
    fg.act = geom[target].pooled ? cache.pool_out[target] : cache.conv_out[target];
    fg.grad = std::move(captured);
    fg.logit = cache.logit;
    return fg;
}

} // namespace tileforge::nn
