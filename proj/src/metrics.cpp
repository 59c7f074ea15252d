#include "tileforge/metrics.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

namespace tileforge {

ConfusionMatrix confusion(const std::vector<int>& labels,
                          const std::vector<double>& probs, double threshold) {
    if (labels.size() != probs.size())
        throw LengthMismatch("confusion: labels and probs differ in length");
    if (labels.empty()) throw EmptyInput("confusion: empty input");
    ConfusionMatrix cm;
    for (size_t i = 0; i < labels.size(); ++i) {
        bool pred = probs[i] >= threshold;
        if (labels[i] == 1) (pred ? cm.tp : cm.fn)++;
        else (pred ? cm.fp : cm.tn)++;
    }
    return cm;
}

Scores scores(const ConfusionMatrix& cm) {
    Scores s;
    if (cm.total() > 0)
        s.accuracy = double(cm.tp + cm.tn) / double(cm.total());
    if (cm.tp + cm.fp > 0)
        s.precision = double(cm.tp) / double(cm.tp + cm.fp);
    if (cm.tp + cm.fn > 0)
        s.recall = double(cm.tp) / double(cm.tp + cm.fn);
    if (s.precision && s.recall && *s.precision + *s.recall > 0)
        s.f1 = 2.0 * *s.precision * *s.recall / (*s.precision + *s.recall);
    return s;
}

RocCurve roc_auc(const std::vector<int>& labels, const std::vector<double>& scr) {
    if (labels.size() != scr.size())
        throw LengthMismatch("roc_auc: labels and scores differ in length");
    if (labels.empty()) throw EmptyInput("roc_auc: empty input");
    int64_t pos = std::count(labels.begin(), labels.end(), 1);
    int64_t neg = static_cast<int64_t>(labels.size()) - pos;
    if (pos == 0 || neg == 0)
        throw OneClassOnly("roc_auc: both classes must be present");

    std::vector<size_t> order(labels.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return scr[a] > scr[b]; });

    RocCurve roc;
    roc.points.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
    int64_t tp = 0, fp = 0;
    double auc = 0, prev_fpr = 0, prev_tpr = 0;
    size_t i = 0;
    while (i < order.size()) {
        double thr = scr[order[i]];
        // consume the whole tie group before emitting a point
        while (i < order.size() && scr[order[i]] == thr) {
            if (labels[order[i]] == 1) ++tp; else ++fp;
            ++i;
        }
        double fpr = double(fp) / double(neg);
        double tpr = double(tp) / double(pos);
        auc += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        roc.points.push_back({thr, fpr, tpr});
        prev_fpr = fpr;
        prev_tpr = tpr;
    }
    if (roc.points.back().fpr != 1.0 || roc.points.back().tpr != 1.0)
        roc.points.push_back({-std::numeric_limits<double>::infinity(), 1.0, 1.0});
    roc.auc = auc;
    return roc;
}

void write_roc_csv(const std::filesystem::path& path, const RocCurve& roc) {
    std::ofstream out(path, std::ios::trunc);
    out << "threshold,fpr,tpr\n";
    out.precision(17);
    for (const auto& p : roc.points)
        out << p.threshold << ',' << p.fpr << ',' << p.tpr << "\n";
    if (!out) throw MetricsError("cannot write " + path.string());
}

} // namespace tileforge
