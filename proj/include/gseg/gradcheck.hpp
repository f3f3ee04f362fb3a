#pragma once

#include "gseg/executor.hpp"

namespace gseg {

struct GradCheckEntry {
    std::string param;
    double rel_error = 0.0;      // L2-relative over the parameter tensor
    double max_abs_diff = 0.0;   // worst single element deviation
    bool passed = true;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double tolerance = 1e-3;
    double abs_floor = 2e-3;
    bool passed = true;

    double worst() const {
        double w = 0.0;
        for (const auto& e : entries)
            if (!e.passed || e.max_abs_diff >= abs_floor) w = std::max(w, e.rel_error);
        return w;
    }
};

// Central finite differences (h = 1e-3, fp32 storage) against the analytic
// backward pass. Comparison is per parameter tensor: the L2-relative error
// ||a - n|| / max(||a||, ||n||) must stay under `tolerance`. Parameters whose
// worst element deviation sits under `abs_floor` pass outright: that band is
// the resolution limit of fp32 central differences (loss storage rounding
// over h, plus ReLU/maxpool kink crossings), not gradient signal. A scaled or
// transposed gradient on any layer with real signal lands far above both
// thresholds.
inline GradCheckReport grad_check(const ComputeGraph& graph, const TensorMap& inputs,
                                  ParamStore& params, const std::string& loss_output,
                                  double tolerance = 1e-3, double h = 1e-3,
                                  double abs_floor = 2e-3) {
    GradCheckReport report;
    report.tolerance = tolerance;
    report.abs_floor = abs_floor;

    ExecOptions opt;
    opt.training = true;
    opt.update_bn_stats = false;  // keep the loss a pure function of params

    Executor ex(graph);
    ex.forward(inputs, params, opt);
    auto analytic = ex.backward(loss_output);
    int loss_node = graph.output_id(loss_output);

    for (auto& [name, p] : params) {
        if (!p.requires_grad) continue;
        GradCheckEntry entry;
        entry.param = name;
        const Tensor* ag = nullptr;
        auto it = analytic.find(name);
        if (it != analytic.end()) ag = &it->second;

        double na = 0.0, nn = 0.0, nd = 0.0;
        for (int64_t i = 0; i < p.numel(); ++i) {
            float keep = p.at(i);
            p.at(i) = keep + static_cast<float>(h);
            ex.forward(inputs, params, opt);
            double lp = ex.scalar_f64(loss_node);
            p.at(i) = keep - static_cast<float>(h);
            ex.forward(inputs, params, opt);
            double lm = ex.scalar_f64(loss_node);
            p.at(i) = keep;

            double numeric = (lp - lm) / (2.0 * h);
            double a = ag ? static_cast<double>(ag->at(i)) : 0.0;
            na += a * a;
            nn += numeric * numeric;
            nd += (a - numeric) * (a - numeric);
            entry.max_abs_diff = std::max(entry.max_abs_diff, std::abs(a - numeric));
        }
        double denom = std::max(std::sqrt(na), std::sqrt(nn));
        entry.rel_error = denom > 0.0 ? std::sqrt(nd) / denom : 0.0;
        entry.passed = entry.rel_error < tolerance || entry.max_abs_diff < abs_floor;
        if (!entry.passed) report.passed = false;
        report.entries.push_back(std::move(entry));
    }
    return report;
}

}  // namespace gseg
