#include "cect/metrics.hpp"

#include <cstdio>

namespace cect::eval {

int predict_label(float logit_neg, float logit_pos) { return logit_pos > logit_neg ? 1 : 0; }

ConfusionMatrix confusion(const std::vector<int>& predictions, const std::vector<int>& labels) {
    if (predictions.size() != labels.size())
        throw ContractError("confusion: " + std::to_string(predictions.size()) +
                            " predictions vs " + std::to_string(labels.size()) + " labels");
    ConfusionMatrix cm;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const int p = predictions[i], l = labels[i];
        if ((p != 0 && p != 1) || (l != 0 && l != 1))
            throw ContractError("confusion: values must be binary");
        if (p == 1 && l == 1)
            ++cm.tp;
        else if (p == 1 && l == 0)
            ++cm.fp;
        else if (p == 0 && l == 1)
            ++cm.fn;
        else
            ++cm.tn;
    }
    return cm;
}

MetricsReport metrics(const ConfusionMatrix& cm) {
    if (cm.total() == 0) throw ContractError("metrics: empty confusion matrix");
    MetricsReport r;
    auto ratio = [](std::int64_t num, std::int64_t den) -> std::optional<double> {
        if (den == 0) return std::nullopt;
        return static_cast<double>(num) / static_cast<double>(den);
    };
    r.acc = ratio(cm.tp + cm.tn, cm.total());
    r.npv = ratio(cm.tn, cm.tn + cm.fn);
    r.ppv = ratio(cm.tp, cm.tp + cm.fp);
    r.sen = ratio(cm.tp, cm.tp + cm.fn);
    r.spe = ratio(cm.tn, cm.tn + cm.fp);
    r.fos = ratio(2 * cm.tp, 2 * cm.tp + cm.fn + cm.fp);
    return r;
}

std::string format_metric(const std::optional<double>& m) {
    if (!m) return "undef";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.1f%%", *m * 100.0);
    return buf;
}

} // namespace cect::eval
