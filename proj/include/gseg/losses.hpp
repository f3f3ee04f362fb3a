#pragma once

#include "gseg/tensor.hpp"

namespace gseg::nn {

// Standalone loss/metric evaluation on plain tensors. The graph-level loss
// ops in the executor implement the same formulas with gradients; these are
// the reference entry points (metrics are only ever needed as values).

namespace loss_detail {

inline void check_same(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape) +
                         " vs " + shape_str(b.shape));
}

}  // namespace loss_detail

// 1 - (2*sum(p*t)+eps)/(sum p + sum t + eps), per sample, batch-averaged.
inline double dice_loss(const Tensor& pred, const Tensor& target, double smooth = 1.0) {
    loss_detail::check_same(pred, target, "dice_loss");
    int64_t n = pred.rank() > 1 ? pred.shape[0] : 1;
    int64_t per = pred.numel() / n;
    double acc = 0.0;
    for (int64_t s = 0; s < n; ++s) {
        double inter = 0.0, tot = 0.0;
        for (int64_t i = 0; i < per; ++i) {
            double p = pred.at(s * per + i), t = target.at(s * per + i);
            inter += p * t;
            tot += p + t;
        }
        acc += (2.0 * inter + smooth) / (tot + smooth);
    }
    return 1.0 - acc / static_cast<double>(n);
}

inline double bce_loss(const Tensor& pred, const Tensor& target) {
    loss_detail::check_same(pred, target, "bce_loss");
    constexpr double delta = 1e-7;
    double acc = 0.0;
    for (int64_t i = 0; i < pred.numel(); ++i) {
        double p = std::clamp(static_cast<double>(pred.at(i)), delta, 1.0 - delta);
        acc += -(target.at(i) * std::log(p) + (1.0 - target.at(i)) * std::log(1.0 - p));
    }
    return acc / static_cast<double>(pred.numel());
}

// 1 - soft Matthews correlation, per sample, batch-averaged.
inline double mcc_loss(const Tensor& pred, const Tensor& target, double eps = 1e-6) {
    loss_detail::check_same(pred, target, "mcc_loss");
    int64_t n = pred.rank() > 1 ? pred.shape[0] : 1;
    int64_t per = pred.numel() / n;
    double acc = 0.0;
    for (int64_t s = 0; s < n; ++s) {
        double tp = 0, fp = 0, fn = 0, tn = 0;
        for (int64_t i = 0; i < per; ++i) {
            double p = pred.at(s * per + i), t = target.at(s * per + i);
            tp += p * t;
            fp += p * (1.0 - t);
            fn += (1.0 - p) * t;
            tn += (1.0 - p) * (1.0 - t);
        }
        double u = tp * tn - fp * fn;
        double d = std::sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn) + eps);
        acc += u / d;
    }
    return 1.0 - acc / static_cast<double>(n);
}

// Overlap of thresholded masks. Both-empty pairs score 1.0 by convention.
inline double dice_score(const Tensor& pred, const Tensor& target, float threshold = 0.5f) {
    loss_detail::check_same(pred, target, "dice_score");
    int64_t inter = 0, a = 0, b = 0;
    for (int64_t i = 0; i < pred.numel(); ++i) {
        bool pa = pred.at(i) > threshold;
        bool pb = target.at(i) > threshold;
        a += pa;
        b += pb;
        inter += pa && pb;
    }
    if (a + b == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(a + b);
}

inline double iou_score(const Tensor& pred, const Tensor& target, float threshold = 0.5f) {
    loss_detail::check_same(pred, target, "iou_score");
    int64_t inter = 0, uni = 0;
    for (int64_t i = 0; i < pred.numel(); ++i) {
        bool pa = pred.at(i) > threshold;
        bool pb = target.at(i) > threshold;
        inter += pa && pb;
        uni += pa || pb;
    }
    if (uni == 0) return 1.0;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace gseg::nn
