#pragma once

#include <filesystem>
#include <memory>
#include <vector>

#include "tileforge/nn_core.hpp"

namespace tileforge::nn {

struct VersionMismatch : NnError { using NnError::NnError; };
struct CorruptCheckpoint : NnError { using NnError::NnError; };
struct EmptySplit : NnError { using NnError::NnError; };

struct Tensor {
    std::vector<int> shape;  // {N, H, W, 3}
    std::vector<float> data; // pixels pre-scaled to [0,1]
};

// Layer parameters plus everything needed to resume training exactly.
struct Model {
    ModelSpec spec;
    std::vector<std::vector<float>> params; // per group
    std::vector<std::vector<float>> adam_m, adam_v;
    std::vector<uint8_t> frozen; // per group
    int64_t step = 0;
    uint64_t rng_state = 0; // dropout stream
    int epoch = 0;

    size_t head_group() const { return params.size() - 1; }
};

Model init_model(const ModelSpec& spec, uint64_t seed); // He-uniform

void set_freeze_backbone(Model& m, bool freeze); // head always trainable

struct BatchCache; // opaque

struct ForwardOut {
    std::vector<float> logits;
    std::shared_ptr<BatchCache> cache;
};

ForwardOut forward(Model& m, const Tensor& batch, bool training, int jobs = 1);

struct BceOut {
    double loss;
    std::vector<float> dlogits; // (sigmoid(z) - y) / N
};

BceOut bce_with_logits(const std::vector<float>& logits,
                       const std::vector<float>& labels);

// One vector per parameter group; frozen groups come back empty.
using Gradients = std::vector<std::vector<float>>;

Gradients backward(const Model& m, const BatchCache& cache,
                   const std::vector<float>& dlogits, int jobs = 1);

// beta1 = 0.9, beta2 = 0.999, eps = 1e-8, bias correction on.
void adam_step(Model& m, const Gradients& grads, double lr);

std::vector<double> predict(const Model& m, const Tensor& batch, int jobs = 1);

struct TrainSchedule {
    int phase1_epochs = 2;
    double phase1_lr = 0.01;
    int phase2_epochs = 25;
    double phase2_lr0 = 1e-5;
    double decay = 0.9; // per-epoch, within phase 2
    int patience = 5;
    bool restore_best = true;
    int batch_size = 32;
};

// Training-data access; implementations must be safe for concurrent loads.
class DataSource {
public:
    virtual ~DataSource() = default;
    virtual size_t train_count() const = 0;
    virtual size_t val_count() const = 0;
    // writes input_hw*input_hw*3 floats in [0,1]
    virtual void load_train(size_t i, int epoch, float* dst) const = 0;
    virtual void load_val(size_t i, float* dst) const = 0;
    virtual float train_label(size_t i) const = 0;
    virtual float val_label(size_t i) const = 0;
    virtual uint64_t order_seed() const = 0; // epoch shuffle seed base
};

struct EpochStats {
    int epoch = 0;
    double lr = 0;
    double train_loss = 0;
    double val_loss = 0;
};

struct TrainResult {
    Model model; // best-val state when restore_best, else final
    std::vector<EpochStats> history;
};

// Two-phase schedule: frozen backbone at phase1_lr, then full network with
// per-epoch decayed lr; early stopping on validation loss.
// Resumes from model.epoch, so checkpoint-and-continue matches a straight run.
TrainResult train(Model model, const DataSource& data, const TrainSchedule& sched,
                  int jobs = 1);

double validation_loss(Model& m, const DataSource& data, int batch_size, int jobs = 1);

void save_checkpoint(const Model& m, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path, const ModelSpec& expected);

// Activation of a post-block feature map and d(logit)/d(activation),
// dropout disabled. layer = -1 selects the last backbone layer.
struct FeatureGrad {
    int channels = 0, hw = 0;
    std::vector<float> act;  // channels x hw x hw
    std::vector<float> grad; // same layout
    double logit = 0;
};

FeatureGrad feature_gradient(const Model& m, const float* pixels, int layer = -1);

} // namespace tileforge::nn
