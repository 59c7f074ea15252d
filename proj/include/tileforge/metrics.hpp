#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <vector>

namespace tileforge {

struct MetricsError : std::runtime_error { using std::runtime_error::runtime_error; };
struct LengthMismatch : MetricsError { using MetricsError::MetricsError; };
struct EmptyInput : MetricsError { using MetricsError::MetricsError; };
struct OneClassOnly : MetricsError { using MetricsError::MetricsError; };

struct ConfusionMatrix {
    int64_t tn = 0, fp = 0, fn = 0, tp = 0;
    int64_t total() const { return tn + fp + fn + tp; }
};

// Positive iff prob >= threshold; the boundary is inclusive everywhere.
ConfusionMatrix confusion(const std::vector<int>& labels,
                          const std::vector<double>& probs, double threshold = 0.5);

// Degenerate denominators yield nullopt, never a silent zero.
struct Scores {
    std::optional<double> accuracy, precision, recall, f1;
};

Scores scores(const ConfusionMatrix& cm);

struct RocPoint {
    double threshold, fpr, tpr;
};

struct RocCurve {
    std::vector<RocPoint> points; // includes (0,0) and (1,1)
    double auc = 0;
};

// Trapezoidal AUROC over thresholds at unique scores; equals the
// Mann-Whitney statistic with ties credited 0.5.
RocCurve roc_auc(const std::vector<int>& labels, const std::vector<double>& scores);

void write_roc_csv(const std::filesystem::path& path, const RocCurve& roc);

} // namespace tileforge
