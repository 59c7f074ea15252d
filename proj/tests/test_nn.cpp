#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <optional>

#include "tileforge/nn.hpp"

using namespace tileforge;
using namespace tileforge::nn;
namespace fs = std::filesystem;

namespace {

ModelSpec tiny_spec(int input_hw = 8, int stem = 2, int blocks = 1) {
    ModelSpec s;
    s.input_hw = input_hw;
    s.stem_channels = stem;
    s.blocks = blocks;
    return s;
}

Tensor random_batch(const ModelSpec& spec, int n, uint64_t seed) {
    Tensor t;
    t.shape = {n, spec.input_hw, spec.input_hw, 3};
    t.data.resize(size_t(n) * spec.input_hw * spec.input_hw * 3);
    RngStream rng(seed);
    for (auto& v : t.data) v = float(rng.next_unit());
    return t;
}

std::vector<float> random_labels(int n, uint64_t seed) {
    std::vector<float> y(n);
    RngStream rng(seed);
    for (auto& v : y) v = float(rng.next_below(2));
    return y;
}

// params copied to double for an accurately evaluated loss surface
std::vector<std::vector<double>> to_double(const std::vector<std::vector<float>>& p) {
    std::vector<std::vector<double>> out(p.size());
    for (size_t g = 0; g < p.size(); ++g) out[g].assign(p[g].begin(), p[g].end());
    return out;
}

double bce_scalar(double z, double y) {
    return std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
}

// single-item loss via the double core; dropout active when mask_seed is set
double loss_at(const ModelSpec& spec, const std::vector<LayerGeom>& geom,
               const std::vector<std::vector<double>>& params, const float* pixels,
               double label, std::optional<uint64_t> mask_seed) {
    auto c = core::item_forward<double>(spec, geom, params, pixels,
                                        mask_seed.has_value(),
                                        mask_seed.value_or(0));
    return bce_scalar(c.logit, label);
}

} // namespace

TEST_CASE("bce with logits: exact values and stable extremes") {
    auto at0 = bce_with_logits({0.0f}, {1.0f});
    CHECK(at0.loss == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(at0.dlogits[0] == doctest::Approx(-0.5).epsilon(1e-6));

    auto easy = bce_with_logits({100.0f}, {1.0f});
    CHECK(easy.loss == doctest::Approx(0.0).scale(1));
    CHECK(std::isfinite(easy.loss));

    auto hard = bce_with_logits({-100.0f}, {1.0f});
    CHECK(hard.loss == doctest::Approx(100.0).epsilon(1e-9));

    auto extreme = bce_with_logits({1e4f, -1e4f}, {0.0f, 1.0f});
    CHECK(std::isfinite(extreme.loss));
    CHECK(extreme.loss == doctest::Approx(1e4).epsilon(1e-9));

    // gradient averages over the batch
    auto pair = bce_with_logits({0.0f, 0.0f}, {1.0f, 0.0f});
    CHECK(pair.dlogits[0] == doctest::Approx(-0.25).epsilon(1e-6));
    CHECK(pair.dlogits[1] == doctest::Approx(0.25).epsilon(1e-6));

    CHECK_THROWS_AS(bce_with_logits({0.0f}, {1.0f, 0.0f}), ShapeMismatch);
}

TEST_CASE("conv forward matches an independent direct implementation") {
    RngStream rng(0xC0);
    int in_ch = 2, out_ch = 3, in_hw = 6;
    for (int stride : {1, 2}) {
        int out_hw = (in_hw + 2 - 3) / stride + 1;
        std::vector<double> in(size_t(in_ch) * in_hw * in_hw);
        std::vector<double> w(size_t(out_ch) * in_ch * 9), b(out_ch);
        for (auto& v : in) v = rng.next_uniform(-1, 1);
        for (auto& v : w) v = rng.next_uniform(-1, 1);
        for (auto& v : b) v = rng.next_uniform(-1, 1);
        std::vector<double> got(size_t(out_ch) * out_hw * out_hw);
        core::conv3x3_forward(in.data(), in_ch, in_hw, w.data(), b.data(), out_ch,
                              stride, out_hw, got.data());
        for (int oc = 0; oc < out_ch; ++oc)
            for (int oy = 0; oy < out_hw; ++oy)
                for (int ox = 0; ox < out_hw; ++ox) {
                    double acc = b[oc];
                    for (int ic = 0; ic < in_ch; ++ic)
                        for (int ky = 0; ky < 3; ++ky)
                            for (int kx = 0; kx < 3; ++kx) {
                                int iy = oy * stride + ky - 1, ix = ox * stride + kx - 1;
                                if (iy < 0 || iy >= in_hw || ix < 0 || ix >= in_hw) continue;
                                acc += in[(size_t(ic) * in_hw + iy) * in_hw + ix] *
                                       w[(size_t(oc) * in_ch + ic) * 9 + ky * 3 + kx];
                            }
                    CHECK(got[(size_t(oc) * out_hw + oy) * out_hw + ox] ==
                          doctest::Approx(acc).epsilon(1e-12));
                }
    }
}

TEST_CASE("analytic gradients match central finite differences") {
    // 20+ random tiny models; the loss surface is evaluated in double so the
    // finite-difference quotient itself is trustworthy, and the production
    // float gradients are held to the 1e-3 relative bound.
    int models_checked = 0;
    for (uint64_t seed = 1; seed <= 24; ++seed) {
        ModelSpec spec = tiny_spec(8 + int(seed % 3) * 2, 1 + int(seed % 2),
                                   1 + int(seed % 2));
        bool with_dropout = seed % 3 == 0;
        if (!with_dropout) spec.dropout_rate = 0.0f; // keep the float path exact
        Model m = init_model(spec, seed);
        // jitter every parameter off zero so no ReLU preactivation sits exactly
        // on its kink, where the two-sided difference quotient is undefined
        RngStream jitter(seed * 7919);
        for (auto& g : m.params)
            for (auto& v : g) v += float(jitter.next_uniform(0.01, 0.05));
        auto geom = geometry(spec);
        Tensor batch = random_batch(spec, 1, seed * 17);
        double label = double(seed % 2);
        std::optional<uint64_t> mask_seed;
        if (with_dropout) mask_seed = seed * 31;

        // analytic, double core
        auto dparams = to_double(m.params);
        auto cache = core::item_forward<double>(spec, geom, dparams, batch.data.data(),
                                                with_dropout, mask_seed.value_or(0));
        double z = cache.logit;
        double dlogit = 1.0 / (1.0 + std::exp(-z)) - label;
        std::vector<std::vector<double>> analytic(dparams.size());
        for (size_t g = 0; g < dparams.size(); ++g) analytic[g].assign(dparams[g].size(), 0);
        core::item_backward<double>(spec, geom, dparams, cache, dlogit, analytic);

        // analytic, float production path; with dropout the per-item mask
        // seeds differ from the double core's, so only the double analytic
        // gradient is compared against FD in that case
        Gradients fgrads;
        if (!with_dropout) {
            ForwardOut fwd = forward(m, batch, true, 1);
            BceOut bce = bce_with_logits(fwd.logits, {float(label)});
            fgrads = backward(m, *fwd.cache, bce.dlogits, 2);
        }

        RngStream pick(seed * 101);
        for (int probe = 0; probe < 30; ++probe) {
            size_t g = pick.next_below(dparams.size());
            size_t i = pick.next_below(dparams[g].size());
            double eps = 1e-6 * std::max(1.0, std::abs(dparams[g][i]));
            auto plus = dparams, minus = dparams;
            plus[g][i] += eps;
            minus[g][i] -= eps;
            double fd = (loss_at(spec, geom, plus, batch.data.data(), label, mask_seed) -
                         loss_at(spec, geom, minus, batch.data.data(), label, mask_seed)) /
                        (2 * eps);
            double an = analytic[g][i];
            double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-8});
            CHECK(rel < 1e-6);
            if (!with_dropout) {
                double anf = double(fgrads[g][i]);
                double relf =
                    std::abs(anf - fd) / std::max({std::abs(anf), std::abs(fd), 1e-6});
                CHECK(relf < 1e-3);
            }
        }
        ++models_checked;
    }
    CHECK(models_checked >= 20);
}

TEST_CASE("zero-weight model emits a zero logit") {
    ModelSpec spec = tiny_spec();
    Model m = init_model(spec, 1);
    for (auto& g : m.params) std::fill(g.begin(), g.end(), 0.0f);
    Tensor batch = random_batch(spec, 3, 2);
    auto out = forward(m, batch, false);
    for (float z : out.logits) CHECK(z == 0.0f);
    for (double p : predict(m, batch)) CHECK(p == doctest::Approx(0.5));
}

TEST_CASE("predict applies the sigmoid to the raw logit") {
    ModelSpec spec = tiny_spec();
    Model m = init_model(spec, 1);
    for (auto& g : m.params) std::fill(g.begin(), g.end(), 0.0f);
    m.params.back().back() = 10.0f; // head bias only
    Tensor batch = random_batch(spec, 2, 3);
    auto p = predict(m, batch);
    CHECK(p[0] == doctest::Approx(1.0 / (1.0 + std::exp(-10.0))).epsilon(1e-6));
    m.params.back().back() = -10.0f;
    CHECK(predict(m, batch)[0] == doctest::Approx(1.0 / (1.0 + std::exp(10.0))).epsilon(1e-6));
}

TEST_CASE("inference logits are batch-size invariant and parallel invariant") {
    ModelSpec spec = tiny_spec();
    Model m = init_model(spec, 9);
    Tensor four = random_batch(spec, 4, 4);
    auto all = predict(m, four, 1);
    auto all_par = predict(m, four, 4);
    CHECK(all == all_par);
    size_t item = size_t(spec.input_hw) * spec.input_hw * 3;
    for (int i = 0; i < 4; ++i) {
        Tensor one;
        one.shape = {1, spec.input_hw, spec.input_hw, 3};
        one.data.assign(four.data.begin() + i * item, four.data.begin() + (i + 1) * item);
        CHECK(predict(m, one)[0] == all[size_t(i)]);
    }
}

TEST_CASE("backward gradient reduction is parallel invariant") {
    ModelSpec spec = tiny_spec();
    Model a = init_model(spec, 5);
    Model b = init_model(spec, 5);
    Tensor batch = random_batch(spec, 6, 6);
    auto labels = random_labels(6, 7);
    auto fa = forward(a, batch, true, 1);
    auto fb = forward(b, batch, true, 8);
    CHECK(fa.logits == fb.logits);
    auto ga = backward(a, *fa.cache, bce_with_logits(fa.logits, labels).dlogits, 1);
    auto gb = backward(b, *fb.cache, bce_with_logits(fb.logits, labels).dlogits, 8);
    REQUIRE(ga.size() == gb.size());
    for (size_t g = 0; g < ga.size(); ++g) CHECK(ga[g] == gb[g]);
}

TEST_CASE("adam matches a scalar reference over several steps") {
    ModelSpec spec = tiny_spec();
    Model m = init_model(spec, 3);
    auto ref = m.params;
    std::vector<std::vector<double>> rm(ref.size()), rv(ref.size());
    for (size_t g = 0; g < ref.size(); ++g) {
        rm[g].assign(ref[g].size(), 0);
        rv[g].assign(ref[g].size(), 0);
    }
    RngStream rng(0xADA);
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8, lr = 0.01;
    for (int step = 1; step <= 3; ++step) {
        Gradients grads(m.params.size());
        for (size_t g = 0; g < grads.size(); ++g) {
            grads[g].resize(m.params[g].size());
            for (auto& v : grads[g]) v = float(rng.next_uniform(-0.1, 0.1));
        }
        adam_step(m, grads, lr);
        for (size_t g = 0; g < ref.size(); ++g)
            for (size_t i = 0; i < ref[g].size(); ++i) {
                double gr = grads[g][i];
                rm[g][i] = b1 * rm[g][i] + (1 - b1) * gr;
                rv[g][i] = b2 * rv[g][i] + (1 - b2) * gr * gr;
                double mh = rm[g][i] / (1 - std::pow(b1, step));
                double vh = rv[g][i] / (1 - std::pow(b2, step));
                ref[g][i] = float(double(ref[g][i]) - lr * mh / (std::sqrt(vh) + eps));
            }
        CHECK(m.step == step);
    }
    for (size_t g = 0; g < ref.size(); ++g)
        for (size_t i = 0; i < ref[g].size(); ++i)
            CHECK(double(m.params[g][i]) == doctest::Approx(double(ref[g][i])).epsilon(1e-6));

    // zero gradient leaves parameters exactly in place
    Model z = init_model(spec, 3);
    auto before = z.params;
    Gradients zero(z.params.size());
    for (size_t g = 0; g < zero.size(); ++g) zero[g].assign(z.params[g].size(), 0.0f);
    adam_step(z, zero, 0.1);
    CHECK(z.params == before);
}

TEST_CASE("frozen backbone is bitwise untouched by a training step") {
    ModelSpec spec = tiny_spec();
    Model m = init_model(spec, 8);
    set_freeze_backbone(m, true);
    auto before = m.params;
    Tensor batch = random_batch(spec, 4, 1);
    auto labels = random_labels(4, 2);
    auto fwd = forward(m, batch, true);
    auto grads = backward(m, *fwd.cache, bce_with_logits(fwd.logits, labels).dlogits);
    for (size_t g = 0; g + 1 < grads.size(); ++g) CHECK(grads[g].empty());
    CHECK_FALSE(grads.back().empty());
    adam_step(m, grads, 0.05);
    for (size_t g = 0; g + 1 < m.params.size(); ++g) CHECK(m.params[g] == before[g]);
    CHECK(m.params.back() != before.back());

    set_freeze_backbone(m, false);
    auto fwd2 = forward(m, batch, true);
    auto grads2 = backward(m, *fwd2.cache, bce_with_logits(fwd2.logits, labels).dlogits);
    adam_step(m, grads2, 0.05);
    bool backbone_moved = false;
    for (size_t g = 0; g + 1 < m.params.size(); ++g)
        if (m.params[g] != before[g]) backbone_moved = true;
    CHECK(backbone_moved);
}

TEST_CASE("inverted dropout keeps the expected logit") {
    ModelSpec spec = tiny_spec();
    Model m = init_model(spec, 4);
    // constant positive feature map: zero weights, positive biases
    for (auto& g : m.params) std::fill(g.begin(), g.end(), 0.0f);
    auto geom = geometry(spec);
    for (size_t l = 0; l < geom.size(); ++l) {
        float* bias = m.params[l].data() + size_t(geom[l].out_ch) * geom[l].in_ch * 9;
        for (int c = 0; c < geom[l].out_ch; ++c) bias[c] = 0.5f;
    }
    std::fill(m.params.back().begin(), m.params.back().end(), 1.0f);
    m.params.back().back() = 0.0f; // head bias

    Tensor one = random_batch(spec, 1, 9);
    auto inference = forward(m, one, false);
    double target = inference.logits[0];
    REQUIRE(target > 0);
    double sum = 0;
    const int trials = 10000;
    for (int t = 0; t < trials; ++t) sum += forward(m, one, true).logits[0];
    CHECK(sum / trials == doctest::Approx(target).epsilon(0.02));
}

TEST_CASE("stale or inference caches are rejected by backward") {
    ModelSpec spec = tiny_spec();
    Model m = init_model(spec, 2);
    Tensor batch = random_batch(spec, 2, 2);
    auto inf = forward(m, batch, false);
    CHECK_THROWS_AS(backward(m, *inf.cache, {0.1f, 0.1f}), StaleCache);

    ModelSpec other = tiny_spec(12, 2, 1);
    Model m2 = init_model(other, 2);
    auto fwd2 = forward(m2, random_batch(other, 2, 3), true);
    CHECK_THROWS_AS(backward(m, *fwd2.cache, {0.1f, 0.1f}), StaleCache);

    Tensor bad = random_batch(spec, 2, 2);
    bad.shape[1] = 5;
    CHECK_THROWS_AS(forward(m, bad, false), ShapeMismatch);
}

TEST_CASE("checkpoints round-trip bitwise and validate the spec") {
    ModelSpec spec = tiny_spec();
    Model m = init_model(spec, 77);
    m.step = 1234;
    m.epoch = 5;
    m.rng_state = 0xDEADBEEF;
    m.frozen.assign(m.params.size(), 0);
    m.frozen[0] = 1;
    auto path = fs::temp_directory_path() / "tf_nn_ckpt_test.bin";
    save_checkpoint(m, path);
    Model r = load_checkpoint(path);
    CHECK(r.spec == m.spec);
    CHECK(r.params == m.params);
    CHECK(r.adam_m == m.adam_m);
    CHECK(r.adam_v == m.adam_v);
    CHECK(r.frozen == m.frozen);
    CHECK(r.step == m.step);
    CHECK(r.epoch == m.epoch);
    CHECK(r.rng_state == m.rng_state);

    CHECK_THROWS_AS(load_checkpoint(path, tiny_spec(16, 4, 2)), VersionMismatch);

    // corrupting the spec digest must not load silently
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(30);
    f.put('X');
    f.close();
    CHECK_THROWS_AS(load_checkpoint(path), CorruptCheckpoint);

    // a foreign magic is a different format, not a silent parse
    std::fstream g(path, std::ios::in | std::ios::out | std::ios::binary);
    g.seekp(0);
    g.put('X');
    g.close();
    CHECK_THROWS_AS(load_checkpoint(path), VersionMismatch);
    fs::remove(path);
}

namespace {

// Deterministic separable toy set: bright tiles are positive, dark negative.
class ToyData : public DataSource {
public:
    ToyData(const ModelSpec& spec, size_t n_train, size_t n_val, uint64_t seed)
        : hw_(spec.input_hw) {
        make(n_train, seed, train_, train_y_);
        make(n_val, seed + 1, val_, val_y_);
    }
    size_t train_count() const override { return train_y_.size(); }
    size_t val_count() const override { return val_y_.size(); }
    void load_train(size_t i, int, float* dst) const override {
        std::copy(train_[i].begin(), train_[i].end(), dst);
    }
    void load_val(size_t i, float* dst) const override {
        std::copy(val_[i].begin(), val_[i].end(), dst);
    }
    float train_label(size_t i) const override { return train_y_[i]; }
    float val_label(size_t i) const override { return val_y_[i]; }
    uint64_t order_seed() const override { return 99; }

private:
    void make(size_t n, uint64_t seed, std::vector<std::vector<float>>& xs,
              std::vector<float>& ys) {
        RngStream rng(seed);
        for (size_t i = 0; i < n; ++i) {
            float y = float(i % 2);
            float base = y ? 0.8f : 0.2f;
            std::vector<float> img(size_t(hw_) * hw_ * 3);
            for (auto& v : img) v = base + float(rng.next_uniform(-0.05, 0.05));
            xs.push_back(std::move(img));
            ys.push_back(y);
        }
    }
    int hw_;
    std::vector<std::vector<float>> train_, val_;
    std::vector<float> train_y_, val_y_;
};

} // namespace

TEST_CASE("training separates a trivially separable toy set") {
    ModelSpec spec = tiny_spec(16, 4, 1);
    ToyData data(spec, 48, 8, 123);
    TrainSchedule sched;
    sched.phase1_epochs = 2;
    sched.phase1_lr = 0.01;
    sched.phase2_epochs = 12;
    sched.phase2_lr0 = 0.01;
    sched.batch_size = 8;
    sched.patience = 50;
    auto result = train(init_model(spec, 11), data, sched, 2);
    CHECK(result.history.size() >= 2);

    Tensor batch;
    batch.shape = {int(data.train_count()), spec.input_hw, spec.input_hw, 3};
    batch.data.resize(data.train_count() * size_t(spec.input_hw) * spec.input_hw * 3);
    size_t item = size_t(spec.input_hw) * spec.input_hw * 3;
    for (size_t i = 0; i < data.train_count(); ++i)
        data.load_train(i, 0, batch.data.data() + i * item);
    auto probs = predict(result.model, batch);
    int correct = 0;
    for (size_t i = 0; i < probs.size(); ++i)
        correct += (probs[i] >= 0.5) == (data.train_label(i) >= 0.5f);
    CHECK(double(correct) / double(probs.size()) >= 0.95);
}

TEST_CASE("schedule runs every epoch when patience never triggers") {
    ModelSpec spec = tiny_spec();
    ToyData data(spec, 8, 4, 5);
    TrainSchedule sched; // 2 + 25 epochs
    sched.batch_size = 8;
    sched.patience = 100;
    auto result = train(init_model(spec, 1), data, sched, 2);
    REQUIRE(result.history.size() == 27);
    CHECK(result.history[0].lr == doctest::Approx(0.01));
    CHECK(result.history[1].lr == doctest::Approx(0.01));
    CHECK(result.history[2].lr == doctest::Approx(1e-5));
    CHECK(result.history[3].lr == doctest::Approx(0.9e-5));
    CHECK(result.history[26].lr == doctest::Approx(1e-5 * std::pow(0.9, 24)));
    for (const auto& e : result.history) {
        CHECK(std::isfinite(e.train_loss));
        CHECK(std::isfinite(e.val_loss));
    }
}

TEST_CASE("resumed training equals a straight run") {
    ModelSpec spec = tiny_spec();
    ToyData data(spec, 16, 4, 77);
    TrainSchedule full;
    full.phase1_epochs = 1;
    full.phase2_epochs = 2;
    full.phase2_lr0 = 0.001;
    full.batch_size = 8;
    full.patience = 50;
    full.restore_best = false;

    auto straight = train(init_model(spec, 21), data, full, 2);

    TrainSchedule first = full;
    first.phase2_epochs = 1; // stop after epochs 0..1
    auto part = train(init_model(spec, 21), data, first, 2);
    CHECK(part.model.epoch == 2);

    // persist and reload mid-run, then continue under the full schedule
    auto path = fs::temp_directory_path() / "tf_nn_resume_test.bin";
    save_checkpoint(part.model, path);
    auto resumed = train(load_checkpoint(path), data, full, 2);
    fs::remove(path);

    REQUIRE(resumed.model.params.size() == straight.model.params.size());
    for (size_t g = 0; g < straight.model.params.size(); ++g)
        CHECK(resumed.model.params[g] == straight.model.params[g]);
    CHECK(resumed.model.step == straight.model.step);
    CHECK(resumed.model.rng_state == straight.model.rng_state);
}

TEST_CASE("empty splits are rejected") {
    ModelSpec spec = tiny_spec();
    ToyData none(spec, 0, 0, 1);
    TrainSchedule sched;
    CHECK_THROWS_AS(train(init_model(spec, 1), none, sched), EmptySplit);
}
