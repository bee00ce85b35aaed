#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bdiff/grid.hpp"

namespace bdiff {

// Pixel confusion counts with the lesion (1) as the positive class.
// Counts merge by addition, so partial results can be reduced in any order.
struct ConfusionCounts {
    std::uint64_t tp = 0;
    std::uint64_t fp = 0;
    std::uint64_t fn = 0;
    std::uint64_t tn = 0;

    std::uint64_t total() const noexcept { return tp + fp + fn + tn; }
    ConfusionCounts& operator+=(const ConfusionCounts& o) noexcept {
        tp += o.tp;
        fp += o.fp;
        fn += o.fn;
        tn += o.tn;
        return *this;
    }
    friend ConfusionCounts operator+(ConfusionCounts a, const ConfusionCounts& b) noexcept {
        return a += b;
    }
    bool operator==(const ConfusionCounts&) const = default;
};

struct MetricsReport {
    double dsc = 0.0;
    double se = 0.0;
    double sp = 0.0;
    double acc = 0.0;
};

ConfusionCounts confusion(const LabelMask& pred, const LabelMask& gt);

// Dice, sensitivity, specificity and accuracy. A zero denominator yields 1.0
// when the class it measures is absent from both masks, otherwise 0.0.
MetricsReport metrics_report(const ConfusionCounts& c);

struct ImageMetrics {
    std::string id;
    ConfusionCounts counts;
    MetricsReport metrics;
};

// Dataset-level summary: micro-averaged from summed counts (the headline)
// and macro-averaged as the mean of per-image metrics.
struct EvaluationSummary {
    std::vector<ImageMetrics> images;
    MetricsReport micro;
    MetricsReport macro;
};

EvaluationSummary summarize(std::vector<ImageMetrics> images);

// CSV with header `id,dsc,se,sp,acc`, one row per image followed by the
// `micro` and `macro` summary rows.
std::string format_report_csv(const EvaluationSummary& summary);

}  // namespace bdiff
