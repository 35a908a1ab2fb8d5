#pragma once

// Confusion-matrix construction and the six classification metrics computed
// from it: accuracy, negative/positive predictive value, sensitivity,
// specificity and F-1. Metrics with a zero denominator are reported as
// undefined rather than coerced to 0.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cect/errors.hpp"

namespace cect::eval {

struct ConfusionMatrix {
    std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;

    std::int64_t total() const { return tp + fp + fn + tn; }
};

struct MetricsReport {
    std::optional<double> acc, npv, ppv, sen, spe, fos;
};

// Prediction = argmax over the two logits; an exact tie breaks toward
// negative. Labels are {0 = negative, 1 = positive}.
int predict_label(float logit_neg, float logit_pos);

ConfusionMatrix confusion(const std::vector<int>& predictions, const std::vector<int>& labels);

MetricsReport metrics(const ConfusionMatrix& cm);

// "96.1%" style rendering; undefined metrics render as "undef".
std::string format_metric(const std::optional<double>& m);

} // namespace cect::eval
