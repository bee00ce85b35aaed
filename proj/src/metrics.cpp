#include "bdiff/metrics.hpp"

#include <cstdio>
#include <sstream>

namespace bdiff {

ConfusionCounts confusion(const LabelMask& pred, const LabelMask& gt) {
    require_same_shape(pred, gt, "confusion");
    require_binary(pred, "confusion (prediction)");
    require_binary(gt, "confusion (ground truth)");
    ConfusionCounts c;
    const auto& p = pred.values();
    const auto& g = gt.values();
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i]) {
            g[i] ? ++c.tp : ++c.fp;
        } else {
            g[i] ? ++c.fn : ++c.tn;
        }
    }
    return c;
}

namespace {

double ratio(std::uint64_t num, std::uint64_t den, bool class_absent_in_both) {
    if (den == 0) return class_absent_in_both ? 1.0 : 0.0;
    return static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

MetricsReport metrics_report(const ConfusionCounts& c) {
    // Foreground absent from both masks <=> tp = fp = fn = 0; likewise for
    // background with tn = fp = fn = 0.
    const bool no_fg = c.tp == 0 && c.fp == 0 && c.fn == 0;
    const bool no_bg = c.tn == 0 && c.fp == 0 && c.fn == 0;
    MetricsReport r;
    r.dsc = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, no_fg);
    r.se = ratio(c.tp, c.tp + c.fn, no_fg);
    r.sp = ratio(c.tn, c.tn + c.fp, no_bg);
    r.acc = ratio(c.tp + c.tn, c.total(), c.total() == 0);
    return r;
}

EvaluationSummary summarize(std::vector<ImageMetrics> images) {
    EvaluationSummary s;
    ConfusionCounts sum;
    for (const auto& im : images) {
        sum += im.counts;
        s.macro.dsc += im.metrics.dsc;
        s.macro.se += im.metrics.se;
        s.macro.sp += im.metrics.sp;
        s.macro.acc += im.metrics.acc;
    }
    if (!images.empty()) {
        const double n = static_cast<double>(images.size());
        s.macro.dsc /= n;
        s.macro.se /= n;
        s.macro.sp /= n;
        s.macro.acc /= n;
    }
    s.micro = metrics_report(sum);
    s.images = std::move(images);
    return s;
}

std::string format_report_csv(const EvaluationSummary& summary) {
    std::ostringstream out;
    auto row = [&](const std::string& id, const MetricsReport& m) {
        char buf[160];
        std::snprintf(buf, sizeof(buf), ",%.6f,%.6f,%.6f,%.6f\n", m.dsc, m.se, m.sp, m.acc);
        out << id << buf;
    };
    out << "id,dsc,se,sp,acc\n";
    for (const auto& im : summary.images) row(im.id, im.metrics);
    row("micro", summary.micro);
    row("macro", summary.macro);
    return out.str();
}

}  // namespace bdiff
