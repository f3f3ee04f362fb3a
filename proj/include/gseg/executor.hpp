#pragma once

#include <array>
#include <cstring>
#include <functional>
#include <optional>

#include "gseg/graph.hpp"

namespace gseg {

namespace detail {

// C(M x N) += A(M x K) * B(K x N), all row-major.
inline void gemm_acc(const float* A, const float* B, float* C, int64_t M, int64_t K,
                     int64_t N) {
    for (int64_t i = 0; i < M; ++i) {
        const float* a = A + i * K;
        float* c = C + i * N;
        for (int64_t k = 0; k < K; ++k) {
            float av = a[k];
            if (av == 0.0f) continue;
            const float* b = B + k * N;
            for (int64_t j = 0; j < N; ++j) c[j] += av * b[j];
        }
    }
}

// C(M x N) += A(M x K) * B(N x K)^T
inline void gemm_nt_acc(const float* A, const float* B, float* C, int64_t M, int64_t K,
                        int64_t N) {
    for (int64_t i = 0; i < M; ++i) {
        const float* a = A + i * K;
        for (int64_t j = 0; j < N; ++j) {
            const float* b = B + j * K;
            float s = 0.0f;
            for (int64_t k = 0; k < K; ++k) s += a[k] * b[k];
            C[i * N + j] += s;
        }
    }
}

inline float stable_sigmoid(float x) {
    if (x >= 0.0f) {
        float e = std::exp(-x);
        return 1.0f / (1.0f + e);
    }
    float e = std::exp(x);
    return e / (1.0f + e);
}

}  // namespace detail

struct ExecOptions {
    Precision precision = Precision::F32;
    bool training = false;
    bool update_bn_stats = true;  // BN running-stat refresh during training
};

// Per-execution-context graph interpreter. Owns all forward/backward state;
// a ComputeGraph may be shared read-only across many executors. Shapes are
// planned once per input/param signature and the plan (plus scratch buffers)
// is reused on every subsequent call with the same shapes.
class Executor {
public:
    explicit Executor(const ComputeGraph& g) : g_(&g) {}

    TensorMap forward(const TensorMap& inputs, ParamStore& params, ExecOptions opt = {}) {
        opt_ = opt;
        params_ = &params;
        plan(inputs, params);
        const bool f16 = opt.precision == Precision::F16Emu;
        if (f16) round_params_f16(params);

        for (size_t id = 0; id < g_->nodes.size(); ++id) {
            const Node& n = g_->nodes[id];
            if (n.kind == OpKind::Input) {
                auto it = inputs.find(n.name);
                vals_[id] = it->second;  // presence checked during plan
                if (f16)
                    for (auto& v : vals_[id].data) v = fp16::round_f32(v);
            } else {
                run_forward(static_cast<int>(id), n);
                if (f16)
                    for (auto& v : vals_[id].data) v = fp16::round_f32(v);
            }
            if (f16) vals_[id].precision = Precision::F16Emu;
        }
        forward_done_ = true;
        TensorMap out;
        for (const auto& [name, id] : g_->outputs) out[name] = vals_[static_cast<size_t>(id)];
        return out;
    }

    // d(loss)/d(param) for every trainable parameter. The loss node must be
    // scalar and forward must have run on this executor first.
    std::map<std::string, Tensor> backward(int loss_node) {
        if (!forward_done_) throw Error("backward called before forward");
        if (loss_node < 0 || loss_node >= static_cast<int>(g_->nodes.size()))
            throw Error("backward: loss node id out of range");
        if (vals_[static_cast<size_t>(loss_node)].numel() != 1)
            throw Error("backward: loss node '" + g_->nodes[static_cast<size_t>(loss_node)].name +
                        "' is not scalar");

        grads_.assign(g_->nodes.size(), Tensor());
        param_grads_.clear();
        grads_[static_cast<size_t>(loss_node)] = Tensor::scalar(1.0f);

        for (int id = loss_node; id >= 0; --id) {
            const Node& n = g_->nodes[static_cast<size_t>(id)];
            if (n.kind == OpKind::Input) continue;
            if (grads_[static_cast<size_t>(id)].numel() == 0) continue;  // not on a path to loss
            run_backward(id, n);
        }
        std::map<std::string, Tensor> out;
        for (auto& [name, g] : param_grads_) out[name] = std::move(g);
        param_grads_.clear();
        return out;
    }

    std::map<std::string, Tensor> backward(const std::string& output_name) {
        return backward(g_->output_id(output_name));
    }

    // Loss values are reduced in double internally; this exposes the full
    // precision result for finite-difference work.
    double scalar_f64(int node) const {
        double v = scalar_f64_[static_cast<size_t>(node)];
        if (std::isnan(v) && vals_[static_cast<size_t>(node)].numel() == 1)
            return static_cast<double>(vals_[static_cast<size_t>(node)].at(0));
        return v;
    }
    double scalar_f64(const std::string& output_name) const {
        return scalar_f64(g_->output_id(output_name));
    }

    int plan_count() const { return plan_count_; }

    const Tensor& value(int node) const { return vals_.at(static_cast<size_t>(node)); }

private:
    struct BnCtx {
        std::vector<float> mean, invstd;
    };

    void plan(const TensorMap& inputs, const ParamStore& params) {
        uint64_t sig = 1469598103934665603ull;
        auto mix = [&sig](uint64_t v) {
            sig ^= v;
            sig *= 1099511628211ull;
        };
        for (const auto& [name, t] : inputs) {
            for (char c : name) mix(static_cast<uint64_t>(c));
            for (int64_t e : t.shape) mix(static_cast<uint64_t>(e));
        }
        mix(0xfeedu);
        for (const auto& [name, t] : params)
            for (int64_t e : t.shape) mix(static_cast<uint64_t>(e));
        if (planned_ && sig == plan_sig_) return;

        size_t nn = g_->nodes.size();
        vals_.assign(nn, Tensor());
        scalar_f64_.assign(nn, std::numeric_limits<double>::quiet_NaN());
        pool_arg_.assign(nn, {});
        bn_ctx_.assign(nn, {});
        shapes_.assign(nn, {});

        for (size_t id = 0; id < nn; ++id) {
            const Node& n = g_->nodes[id];
            shapes_[id] = infer_shape(static_cast<int>(id), n, inputs, params);
            if (n.kind != OpKind::Input) vals_[id] = Tensor(shapes_[id]);
        }
        plan_sig_ = sig;
        planned_ = true;
        ++plan_count_;
    }

    [[noreturn]] void shape_fail(const Node& n, const std::string& what) const {
        throw ShapeError("node '" + n.name + "' (" + op_name(n.kind) + "): " + what);
    }

    const std::vector<int64_t>& in_shape(const Node& n, size_t i) const {
        return shapes_[static_cast<size_t>(n.inputs.at(i))];
    }

    std::vector<int64_t> infer_shape(int id, const Node& n, const TensorMap& inputs,
                                     const ParamStore& params) {
        (void)id;
        auto param = [&](size_t i) -> const Tensor& {
            auto it = params.find(n.params.at(i));
            if (it == params.end())
                throw Error("node '" + n.name + "': missing parameter '" + n.params.at(i) + "'");
            return it->second;
        };
        switch (n.kind) {
            case OpKind::Input: {
                auto it = inputs.find(n.name);
                if (it == inputs.end()) throw Error("missing graph input '" + n.name + "'");
                return it->second.shape;
            }
            case OpKind::Conv2d: {
                const auto& x = in_shape(n, 0);
                const Tensor& w = param(0);
                if (x.size() != 4 || w.rank() != 4) shape_fail(n, "expects NCHW input and 4-d kernel");
                if (x[1] != w.shape[1])
                    shape_fail(n, "input channels " + std::to_string(x[1]) +
                                      " vs kernel " + std::to_string(w.shape[1]));
                int64_t ho = (x[2] + 2 * n.attrs.pad - w.shape[2]) / n.attrs.stride + 1;
                int64_t wo = (x[3] + 2 * n.attrs.pad - w.shape[3]) / n.attrs.stride + 1;
                if (ho <= 0 || wo <= 0) shape_fail(n, "kernel larger than padded input");
                return {x[0], w.shape[0], ho, wo};
            }
            case OpKind::MaxPool2d: {
                const auto& x = in_shape(n, 0);
                if (x.size() != 4) shape_fail(n, "expects NCHW input");
                int64_t ho = (x[2] - n.attrs.pool_k) / n.attrs.pool_stride + 1;
                int64_t wo = (x[3] - n.attrs.pool_k) / n.attrs.pool_stride + 1;
                if (ho <= 0 || wo <= 0) shape_fail(n, "pool window larger than input");
                return {x[0], x[1], ho, wo};
            }
            case OpKind::UpsampleNearest: {
                auto x = in_shape(n, 0);
                if (x.size() != 4) shape_fail(n, "expects NCHW input");
                x[2] *= n.attrs.up_factor;
                x[3] *= n.attrs.up_factor;
                return x;
            }
            case OpKind::BatchNorm: {
                const auto& x = in_shape(n, 0);
                if (x.size() != 4) shape_fail(n, "expects NCHW input");
                if (param(0).numel() != x[1]) shape_fail(n, "affine size mismatch");
                return x;
            }
            case OpKind::ReLU:
            case OpKind::Sigmoid:
            case OpKind::Scale:
                return in_shape(n, 0);
            case OpKind::Concat: {
                auto s = in_shape(n, 0);
                if (s.size() != 4) shape_fail(n, "expects NCHW inputs");
                for (size_t i = 1; i < n.inputs.size(); ++i) {
                    const auto& o = in_shape(n, i);
                    if (o.size() != 4 || o[0] != s[0] || o[2] != s[2] || o[3] != s[3])
                        shape_fail(n, "non-channel extents differ");
                    s[1] += o[1];
                }
                return s;
            }
            case OpKind::Add: {
                if (in_shape(n, 0) != in_shape(n, 1)) shape_fail(n, "operand shapes differ");
                return in_shape(n, 0);
            }
            case OpKind::Mul: {
                const auto& a = in_shape(n, 0);
                const auto& b = in_shape(n, 1);
                if (a == b) return a;
                if (a.size() == 4 && b.size() == 4 && b[1] == 1 && a[0] == b[0] &&
                    a[2] == b[2] && a[3] == b[3])
                    return a;  // channel-broadcast mask
                shape_fail(n, "operands must match or rhs must be single-channel");
            }
            case OpKind::GlobalAvgPool: {
                const auto& x = in_shape(n, 0);
                if (x.size() != 4) shape_fail(n, "expects NCHW input");
                return {x[0], x[1], 1, 1};
            }
            case OpKind::Linear: {
                const auto& x = in_shape(n, 0);
                const Tensor& w = param(0);
                if (x.size() != 2 || w.rank() != 2) shape_fail(n, "expects 2-d input and weight");
                if (x[1] != w.shape[1]) shape_fail(n, "feature size mismatch");
                return {x[0], w.shape[0]};
            }
            case OpKind::SumReduce:
                return {1};
            case OpKind::DiceLoss:
            case OpKind::BceLoss:
            case OpKind::MccLoss: {
                if (in_shape(n, 0) != in_shape(n, 1))
                    shape_fail(n, "prediction and target shapes differ");
                return {1};
            }
        }
        throw Error("node '" + n.name + "': unknown op kind");
    }

    const Tensor& pv(const Node& n, size_t i) const {
        const std::string& name = n.params.at(i);
        if (opt_.precision == Precision::F16Emu) {
            auto it = f16_params_.find(name);
            if (it != f16_params_.end()) return it->second;
        }
        return params_->at(name);
    }

    Tensor& mutable_param(const Node& n, size_t i) { return params_->at(n.params.at(i)); }

    void round_params_f16(const ParamStore& params) {
        for (const auto& [name, t] : params) {
            Tensor& c = f16_params_[name];
            c = t;
            for (auto& v : c.data) v = fp16::round_f32(v);
            c.precision = Precision::F16Emu;
        }
    }

    // ---- forward kernels -------------------------------------------------

    void run_forward(int id, const Node& n) {
        Tensor& y = vals_[static_cast<size_t>(id)];
        const Tensor& x = vals_[static_cast<size_t>(n.inputs.empty() ? 0 : n.inputs[0])];
        switch (n.kind) {
            case OpKind::Conv2d: conv_forward(id, n, x, y); break;
            case OpKind::MaxPool2d: pool_forward(id, n, x, y); break;
            case OpKind::UpsampleNearest: upsample_forward(n, x, y); break;
            case OpKind::BatchNorm: bn_forward(id, n, x, y); break;
            case OpKind::ReLU:
                for (int64_t i = 0; i < x.numel(); ++i) y.at(i) = x.at(i) > 0.0f ? x.at(i) : 0.0f;
                break;
            case OpKind::Sigmoid:
                for (int64_t i = 0; i < x.numel(); ++i) y.at(i) = detail::stable_sigmoid(x.at(i));
                break;
            case OpKind::Concat: concat_forward(n, y); break;
            case OpKind::Add: {
                const Tensor& b = vals_[static_cast<size_t>(n.inputs[1])];
                for (int64_t i = 0; i < x.numel(); ++i) y.at(i) = x.at(i) + b.at(i);
                break;
            }
            case OpKind::Mul: mul_forward(n, y); break;
            case OpKind::GlobalAvgPool: gap_forward(x, y); break;
            case OpKind::Linear: linear_forward(n, x, y); break;
            case OpKind::Scale:
                for (int64_t i = 0; i < x.numel(); ++i) y.at(i) = n.attrs.scale * x.at(i);
                break;
            case OpKind::SumReduce: {
                double s = 0.0;
                for (int64_t i = 0; i < x.numel(); ++i) s += x.at(i);
                y.at(0) = static_cast<float>(s);
                scalar_f64_[static_cast<size_t>(id)] = s;
                break;
            }
            case OpKind::DiceLoss: dice_forward(id, n, y); break;
            case OpKind::BceLoss: bce_forward(id, n, y); break;
            case OpKind::MccLoss: mcc_forward(id, n, y); break;
            case OpKind::Input: break;
        }
    }

    void im2col(const float* x, int64_t ci, int64_t h, int64_t w, int64_t kh, int64_t kw,
                int stride, int pad, int64_t ho, int64_t wo, float* col) const {
        for (int64_t c = 0; c < ci; ++c) {
            const float* xc = x + c * h * w;
            for (int64_t ki = 0; ki < kh; ++ki) {
                for (int64_t kj = 0; kj < kw; ++kj) {
                    float* row = col + ((c * kh + ki) * kw + kj) * ho * wo;
                    for (int64_t oi = 0; oi < ho; ++oi) {
                        int64_t ii = oi * stride - pad + ki;
                        if (ii < 0 || ii >= h) {
                            std::fill(row + oi * wo, row + (oi + 1) * wo, 0.0f);
                            continue;
                        }
                        const float* xr = xc + ii * w;
                        for (int64_t oj = 0; oj < wo; ++oj) {
                            int64_t jj = oj * stride - pad + kj;
                            row[oi * wo + oj] = (jj >= 0 && jj < w) ? xr[jj] : 0.0f;
                        }
                    }
                }
            }
        }
    }

    void col2im_acc(const float* col, int64_t ci, int64_t h, int64_t w, int64_t kh, int64_t kw,
                    int stride, int pad, int64_t ho, int64_t wo, float* x) const {
        for (int64_t c = 0; c < ci; ++c) {
            float* xc = x + c * h * w;
            for (int64_t ki = 0; ki < kh; ++ki) {
                for (int64_t kj = 0; kj < kw; ++kj) {
                    const float* row = col + ((c * kh + ki) * kw + kj) * ho * wo;
                    for (int64_t oi = 0; oi < ho; ++oi) {
                        int64_t ii = oi * stride - pad + ki;
                        if (ii < 0 || ii >= h) continue;
                        float* xr = xc + ii * w;
                        for (int64_t oj = 0; oj < wo; ++oj) {
                            int64_t jj = oj * stride - pad + kj;
                            if (jj >= 0 && jj < w) xr[jj] += row[oi * wo + oj];
                        }
                    }
                }
            }
        }
    }

    void conv_forward(int id, const Node& n, const Tensor& x, Tensor& y) {
        (void)id;
        const Tensor& w = pv(n, 0);
        const Tensor& b = pv(n, 1);
        int64_t N = x.shape[0], Ci = x.shape[1], H = x.shape[2], W = x.shape[3];
        int64_t Co = w.shape[0], Kh = w.shape[2], Kw = w.shape[3];
        int64_t Ho = y.shape[2], Wo = y.shape[3];
        int64_t ckk = Ci * Kh * Kw, hw = Ho * Wo;
        col_buf_.resize(static_cast<size_t>(ckk * hw));
        for (int64_t s = 0; s < N; ++s) {
            im2col(x.ptr() + s * Ci * H * W, Ci, H, W, Kh, Kw, n.attrs.stride, n.attrs.pad, Ho,
                   Wo, col_buf_.data());
            float* ys = y.ptr() + s * Co * hw;
            for (int64_t co = 0; co < Co; ++co)
                std::fill(ys + co * hw, ys + (co + 1) * hw, b.at(co));
            detail::gemm_acc(w.ptr(), col_buf_.data(), ys, Co, ckk, hw);
        }
    }

    void pool_forward(int id, const Node& n, const Tensor& x, Tensor& y) {
        int64_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
        int64_t Ho = y.shape[2], Wo = y.shape[3];
        int k = n.attrs.pool_k, st = n.attrs.pool_stride;
        auto& arg = pool_arg_[static_cast<size_t>(id)];
        arg.assign(static_cast<size_t>(y.numel()), 0);
        int64_t oidx = 0;
        for (int64_t nc = 0; nc < N * C; ++nc) {
            const float* xp = x.ptr() + nc * H * W;
            for (int64_t oi = 0; oi < Ho; ++oi) {
                for (int64_t oj = 0; oj < Wo; ++oj, ++oidx) {
                    int64_t bi = oi * st, bj = oj * st;
                    float best = xp[bi * W + bj];
                    int64_t besti = bi * W + bj;
                    for (int di = 0; di < k; ++di) {
                        for (int dj = 0; dj < k; ++dj) {
                            int64_t idx = (bi + di) * W + (bj + dj);
                            if (xp[idx] > best) {  // ties keep the first row-major hit
                                best = xp[idx];
                                besti = idx;
                            }
                        }
                    }
                    y.at(oidx) = best;
                    arg[static_cast<size_t>(oidx)] = static_cast<int32_t>(besti);
                }
            }
        }
    }

    void upsample_forward(const Node& n, const Tensor& x, Tensor& y) {
        int64_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
        int f = n.attrs.up_factor;
        int64_t Wo = W * f;
        for (int64_t nc = 0; nc < N * C; ++nc) {
            const float* xp = x.ptr() + nc * H * W;
            float* yp = y.ptr() + nc * H * W * f * f;
            for (int64_t i = 0; i < H; ++i)
                for (int64_t j = 0; j < W; ++j) {
                    float v = xp[i * W + j];
                    for (int di = 0; di < f; ++di) {
                        float* row = yp + (i * f + di) * Wo + j * f;
                        for (int dj = 0; dj < f; ++dj) row[dj] = v;
                    }
                }
        }
    }

    void bn_forward(int id, const Node& n, const Tensor& x, Tensor& y) {
        int64_t N = x.shape[0], C = x.shape[1], HW = x.shape[2] * x.shape[3];
        const Tensor& gamma = pv(n, 0);
        const Tensor& beta = pv(n, 1);
        auto& ctx = bn_ctx_[static_cast<size_t>(id)];
        ctx.mean.assign(static_cast<size_t>(C), 0.0f);
        ctx.invstd.assign(static_cast<size_t>(C), 0.0f);
        int64_t m = N * HW;

        if (opt_.training) {
            for (int64_t c = 0; c < C; ++c) {
                double s = 0.0, s2 = 0.0;
                for (int64_t s0 = 0; s0 < N; ++s0) {
                    const float* xp = x.ptr() + (s0 * C + c) * HW;
                    for (int64_t i = 0; i < HW; ++i) {
                        s += xp[i];
                        s2 += static_cast<double>(xp[i]) * xp[i];
                    }
                }
                double mean = s / static_cast<double>(m);
                double var = s2 / static_cast<double>(m) - mean * mean;
                if (var < 0) var = 0;
                ctx.mean[static_cast<size_t>(c)] = static_cast<float>(mean);
                ctx.invstd[static_cast<size_t>(c)] =
                    static_cast<float>(1.0 / std::sqrt(var + n.attrs.bn_eps));
                if (opt_.update_bn_stats) {
                    // torch semantics: running var tracks the unbiased estimate
                    double unbiased = m > 1 ? var * static_cast<double>(m) / (m - 1) : var;
                    Tensor& rm = mutable_param(n, 2);
                    Tensor& rv = mutable_param(n, 3);
                    float mom = n.attrs.bn_momentum;
                    rm.at(c) = (1.0f - mom) * rm.at(c) + mom * static_cast<float>(mean);
                    rv.at(c) = (1.0f - mom) * rv.at(c) + mom * static_cast<float>(unbiased);
                }
            }
        } else {
            const Tensor& rm = pv(n, 2);
            const Tensor& rv = pv(n, 3);
            for (int64_t c = 0; c < C; ++c) {
                ctx.mean[static_cast<size_t>(c)] = rm.at(c);
                ctx.invstd[static_cast<size_t>(c)] =
                    1.0f / std::sqrt(rv.at(c) + n.attrs.bn_eps);
            }
        }
        for (int64_t s0 = 0; s0 < N; ++s0)
            for (int64_t c = 0; c < C; ++c) {
                const float* xp = x.ptr() + (s0 * C + c) * HW;
                float* yp = y.ptr() + (s0 * C + c) * HW;
                float mu = ctx.mean[static_cast<size_t>(c)];
                float is = ctx.invstd[static_cast<size_t>(c)];
                float g = gamma.at(c), be = beta.at(c);
                for (int64_t i = 0; i < HW; ++i) yp[i] = (xp[i] - mu) * is * g + be;
            }
    }

    void concat_forward(const Node& n, Tensor& y) {
        int64_t N = y.shape[0], HW = y.shape[2] * y.shape[3];
        int64_t coff = 0;
        for (int in : n.inputs) {
            const Tensor& x = vals_[static_cast<size_t>(in)];
            int64_t C = x.shape[1];
            for (int64_t s = 0; s < N; ++s)
                std::memcpy(y.ptr() + (s * y.shape[1] + coff) * HW, x.ptr() + s * C * HW,
                            static_cast<size_t>(C * HW) * sizeof(float));
            coff += C;
        }
    }

    void mul_forward(const Node& n, Tensor& y) {
        const Tensor& a = vals_[static_cast<size_t>(n.inputs[0])];
        const Tensor& b = vals_[static_cast<size_t>(n.inputs[1])];
        if (a.same_shape(b)) {
            for (int64_t i = 0; i < a.numel(); ++i) y.at(i) = a.at(i) * b.at(i);
            return;
        }
        int64_t N = a.shape[0], C = a.shape[1], HW = a.shape[2] * a.shape[3];
        for (int64_t s = 0; s < N; ++s) {
            const float* mp = b.ptr() + s * HW;
            for (int64_t c = 0; c < C; ++c) {
                const float* ap = a.ptr() + (s * C + c) * HW;
                float* yp = y.ptr() + (s * C + c) * HW;
                for (int64_t i = 0; i < HW; ++i) yp[i] = ap[i] * mp[i];
            }
        }
    }

    void gap_forward(const Tensor& x, Tensor& y) {
        int64_t NC = x.shape[0] * x.shape[1], HW = x.shape[2] * x.shape[3];
        for (int64_t nc = 0; nc < NC; ++nc) {
            double s = 0.0;
            const float* xp = x.ptr() + nc * HW;
            for (int64_t i = 0; i < HW; ++i) s += xp[i];
            y.at(nc) = static_cast<float>(s / static_cast<double>(HW));
        }
    }

    void linear_forward(const Node& n, const Tensor& x, Tensor& y) {
        const Tensor& w = pv(n, 0);
        const Tensor& b = pv(n, 1);
        int64_t N = x.shape[0], F = x.shape[1], O = w.shape[0];
        for (int64_t s = 0; s < N; ++s)
            for (int64_t o = 0; o < O; ++o) {
                const float* xp = x.ptr() + s * F;
                const float* wp = w.ptr() + o * F;
                float acc = b.at(o);
                for (int64_t f = 0; f < F; ++f) acc += xp[f] * wp[f];
                y.at(s * O + o) = acc;
            }
    }

    // Per-sample dice, averaged over the batch; equals the global formula
    // for a single sample.
    void dice_forward(int id, const Node& n, Tensor& y) {
        const Tensor& p = vals_[static_cast<size_t>(n.inputs[0])];
        const Tensor& t = vals_[static_cast<size_t>(n.inputs[1])];
        int64_t N = p.rank() >= 1 ? p.shape[0] : 1;
        int64_t per = p.numel() / N;
        double eps = n.attrs.loss_smooth;
        double acc = 0.0;
        for (int64_t s = 0; s < N; ++s) {
            const float* pp = p.ptr() + s * per;
            const float* tp = t.ptr() + s * per;
            double inter = 0.0, tot = 0.0;
            for (int64_t i = 0; i < per; ++i) {
                inter += static_cast<double>(pp[i]) * tp[i];
                tot += static_cast<double>(pp[i]) + tp[i];
            }
            acc += (2.0 * inter + eps) / (tot + eps);
        }
        double loss = 1.0 - acc / static_cast<double>(N);
        y.at(0) = static_cast<float>(loss);
        scalar_f64_[static_cast<size_t>(id)] = loss;
    }

    static constexpr double kBceClamp = 1e-7;

    void bce_forward(int id, const Node& n, Tensor& y) {
        const Tensor& p = vals_[static_cast<size_t>(n.inputs[0])];
        const Tensor& t = vals_[static_cast<size_t>(n.inputs[1])];
        double acc = 0.0;
        for (int64_t i = 0; i < p.numel(); ++i) {
            double pc = std::clamp(static_cast<double>(p.at(i)), kBceClamp, 1.0 - kBceClamp);
            acc += -(t.at(i) * std::log(pc) + (1.0 - t.at(i)) * std::log(1.0 - pc));
        }
        double loss = acc / static_cast<double>(p.numel());
        y.at(0) = static_cast<float>(loss);
        scalar_f64_[static_cast<size_t>(id)] = loss;
    }

    static constexpr double kMccEps = 1e-6;

    void mcc_forward(int id, const Node& n, Tensor& y) {
        const Tensor& p = vals_[static_cast<size_t>(n.inputs[0])];
        const Tensor& t = vals_[static_cast<size_t>(n.inputs[1])];
        int64_t N = p.shape[0];
        int64_t per = p.numel() / N;
        double acc = 0.0;
        for (int64_t s = 0; s < N; ++s) {
            const float* pp = p.ptr() + s * per;
            const float* tp = t.ptr() + s * per;
            double tpv = 0, fpv = 0, fnv = 0, tnv = 0;
            for (int64_t i = 0; i < per; ++i) {
                double pv = pp[i], tv = tp[i];
                tpv += pv * tv;
                fpv += pv * (1.0 - tv);
                fnv += (1.0 - pv) * tv;
                tnv += (1.0 - pv) * (1.0 - tv);
            }
            double u = tpv * tnv - fpv * fnv;
            double d = std::sqrt((tpv + fpv) * (tpv + fnv) * (tnv + fpv) * (tnv + fnv) + kMccEps);
            acc += u / d;
        }
        double loss = 1.0 - acc / static_cast<double>(N);
        y.at(0) = static_cast<float>(loss);
        scalar_f64_[static_cast<size_t>(id)] = loss;
    }

    // ---- backward kernels ------------------------------------------------

    Tensor& grad_of(int id) {
        Tensor& g = grads_[static_cast<size_t>(id)];
        if (g.numel() == 0) g = Tensor(shapes_[static_cast<size_t>(id)]);
        return g;
    }

    bool wants_grad(int id) const {
        return g_->nodes[static_cast<size_t>(id)].kind != OpKind::Input ||
               loss_input_grads_;
    }

    void add_param_grad(const std::string& name, Tensor g) {
        auto it = param_grads_.find(name);
        if (it == param_grads_.end())
            param_grads_.emplace(name, std::move(g));
        else
            for (int64_t i = 0; i < g.numel(); ++i) it->second.at(i) += g.at(i);
    }

    void run_backward(int id, const Node& n) {
        const Tensor& gy = grads_[static_cast<size_t>(id)];
        switch (n.kind) {
            case OpKind::Conv2d: conv_backward(n, gy); break;
            case OpKind::MaxPool2d: pool_backward(id, n, gy); break;
            case OpKind::UpsampleNearest: upsample_backward(n, gy); break;
            case OpKind::BatchNorm: bn_backward(id, n, gy); break;
            case OpKind::ReLU: {
                if (!wants_grad(n.inputs[0])) break;
                const Tensor& x = vals_[static_cast<size_t>(n.inputs[0])];
                Tensor& gx = grad_of(n.inputs[0]);
                for (int64_t i = 0; i < x.numel(); ++i)
                    if (x.at(i) > 0.0f) gx.at(i) += gy.at(i);
                break;
            }
            case OpKind::Sigmoid: {
                if (!wants_grad(n.inputs[0])) break;
                const Tensor& y = vals_[static_cast<size_t>(id)];
                Tensor& gx = grad_of(n.inputs[0]);
                for (int64_t i = 0; i < y.numel(); ++i)
                    gx.at(i) += gy.at(i) * y.at(i) * (1.0f - y.at(i));
                break;
            }
            case OpKind::Concat: concat_backward(n, gy); break;
            case OpKind::Add:
                for (int k = 0; k < 2; ++k) {
                    if (!wants_grad(n.inputs[static_cast<size_t>(k)])) continue;
                    Tensor& gx = grad_of(n.inputs[static_cast<size_t>(k)]);
                    for (int64_t i = 0; i < gy.numel(); ++i) gx.at(i) += gy.at(i);
                }
                break;
            case OpKind::Mul: mul_backward(n, gy); break;
            case OpKind::GlobalAvgPool: gap_backward(n, gy); break;
            case OpKind::Linear: linear_backward(n, gy); break;
            case OpKind::Scale: {
                if (!wants_grad(n.inputs[0])) break;
                Tensor& gx = grad_of(n.inputs[0]);
                for (int64_t i = 0; i < gy.numel(); ++i) gx.at(i) += n.attrs.scale * gy.at(i);
                break;
            }
            case OpKind::SumReduce: {
                if (!wants_grad(n.inputs[0])) break;
                Tensor& gx = grad_of(n.inputs[0]);
                for (int64_t i = 0; i < gx.numel(); ++i) gx.at(i) += gy.at(0);
                break;
            }
            case OpKind::DiceLoss: dice_backward(n, gy); break;
            case OpKind::BceLoss: bce_backward(n, gy); break;
            case OpKind::MccLoss: mcc_backward(n, gy); break;
            case OpKind::Input: break;
        }
    }

    void conv_backward(const Node& n, const Tensor& gy) {
        const Tensor& x = vals_[static_cast<size_t>(n.inputs[0])];
        const Tensor& w = pv(n, 0);
        const Tensor& wp = params_->at(n.params[0]);
        const Tensor& bp = params_->at(n.params[1]);
        int64_t N = x.shape[0], Ci = x.shape[1], H = x.shape[2], W = x.shape[3];
        int64_t Co = w.shape[0], Kh = w.shape[2], Kw = w.shape[3];
        int64_t Ho = gy.shape[2], Wo = gy.shape[3];
        int64_t ckk = Ci * Kh * Kw, hw = Ho * Wo;

        bool need_w = wp.requires_grad;
        bool need_b = bp.requires_grad;
        bool need_x = wants_grad(n.inputs[0]);

        Tensor gw({Co, Ci, Kh, Kw});
        Tensor gb({Co});
        Tensor* gx = need_x ? &grad_of(n.inputs[0]) : nullptr;

        col_buf_.resize(static_cast<size_t>(ckk * hw));
        dcol_buf_.resize(static_cast<size_t>(ckk * hw));
        for (int64_t s = 0; s < N; ++s) {
            const float* gys = gy.ptr() + s * Co * hw;
            if (need_w || need_x)
                im2col(x.ptr() + s * Ci * H * W, Ci, H, W, Kh, Kw, n.attrs.stride, n.attrs.pad,
                       Ho, Wo, col_buf_.data());
            if (need_b)
                for (int64_t co = 0; co < Co; ++co) {
                    const float* g = gys + co * hw;
                    double acc = 0.0;
                    for (int64_t i = 0; i < hw; ++i) acc += g[i];
                    gb.at(co) += static_cast<float>(acc);
                }
            if (need_w) detail::gemm_nt_acc(gys, col_buf_.data(), gw.ptr(), Co, hw, ckk);
            if (need_x) {
                std::fill(dcol_buf_.begin(), dcol_buf_.end(), 0.0f);
                // dcol(ckk x hw) = w^T * gy
                for (int64_t co = 0; co < Co; ++co) {
                    const float* wr = w.ptr() + co * ckk;
                    const float* g = gys + co * hw;
                    for (int64_t i = 0; i < ckk; ++i) {
                        float wv = wr[i];
                        if (wv == 0.0f) continue;
                        float* d = dcol_buf_.data() + i * hw;
                        for (int64_t j = 0; j < hw; ++j) d[j] += wv * g[j];
                    }
                }
                col2im_acc(dcol_buf_.data(), Ci, H, W, Kh, Kw, n.attrs.stride, n.attrs.pad, Ho,
                           Wo, gx->ptr() + s * Ci * H * W);
            }
        }
        if (need_w) add_param_grad(n.params[0], std::move(gw));
        if (need_b) add_param_grad(n.params[1], std::move(gb));
    }

    void pool_backward(int id, const Node& n, const Tensor& gy) {
        if (!wants_grad(n.inputs[0])) return;
        const Tensor& x = vals_[static_cast<size_t>(n.inputs[0])];
        Tensor& gx = grad_of(n.inputs[0]);
        const auto& arg = pool_arg_[static_cast<size_t>(id)];
        int64_t HW = x.shape[2] * x.shape[3];
        int64_t oHW = gy.shape[2] * gy.shape[3];
        int64_t NC = x.shape[0] * x.shape[1];
        for (int64_t nc = 0; nc < NC; ++nc) {
            float* gxp = gx.ptr() + nc * HW;
            const float* gyp = gy.ptr() + nc * oHW;
            const int32_t* ap = arg.data() + nc * oHW;
            for (int64_t i = 0; i < oHW; ++i) gxp[ap[i]] += gyp[i];
        }
    }

    void upsample_backward(const Node& n, const Tensor& gy) {
        if (!wants_grad(n.inputs[0])) return;
        const Tensor& x = vals_[static_cast<size_t>(n.inputs[0])];
        Tensor& gx = grad_of(n.inputs[0]);
        int64_t NC = x.shape[0] * x.shape[1], H = x.shape[2], W = x.shape[3];
        int f = n.attrs.up_factor;
        int64_t Wo = W * f;
        for (int64_t nc = 0; nc < NC; ++nc) {
            float* gxp = gx.ptr() + nc * H * W;
            const float* gyp = gy.ptr() + nc * H * W * f * f;
            for (int64_t i = 0; i < H; ++i)
                for (int64_t j = 0; j < W; ++j) {
                    float acc = 0.0f;
                    for (int di = 0; di < f; ++di) {
                        const float* row = gyp + (i * f + di) * Wo + j * f;
                        for (int dj = 0; dj < f; ++dj) acc += row[dj];
                    }
                    gxp[i * W + j] += acc;
                }
        }
    }

    void bn_backward(int id, const Node& n, const Tensor& gy) {
        const Tensor& x = vals_[static_cast<size_t>(n.inputs[0])];
        const Tensor& gamma = pv(n, 0);
        const auto& ctx = bn_ctx_[static_cast<size_t>(id)];
        int64_t N = x.shape[0], C = x.shape[1], HW = x.shape[2] * x.shape[3];
        int64_t m = N * HW;
        bool need_x = wants_grad(n.inputs[0]);
        bool affine_grad = params_->at(n.params[0]).requires_grad;

        Tensor gg({C});
        Tensor gb({C});
        Tensor* gx = need_x ? &grad_of(n.inputs[0]) : nullptr;

        for (int64_t c = 0; c < C; ++c) {
            float mu = ctx.mean[static_cast<size_t>(c)];
            float is = ctx.invstd[static_cast<size_t>(c)];
            double sum_gy = 0.0, sum_gy_xhat = 0.0;
            for (int64_t s = 0; s < N; ++s) {
                const float* xp = x.ptr() + (s * C + c) * HW;
                const float* gp = gy.ptr() + (s * C + c) * HW;
                for (int64_t i = 0; i < HW; ++i) {
                    sum_gy += gp[i];
                    sum_gy_xhat += static_cast<double>(gp[i]) * (xp[i] - mu) * is;
                }
            }
            gg.at(c) = static_cast<float>(sum_gy_xhat);
            gb.at(c) = static_cast<float>(sum_gy);
            if (!need_x) continue;
            float g = gamma.at(c);
            if (opt_.training) {
                double inv_m = 1.0 / static_cast<double>(m);
                for (int64_t s = 0; s < N; ++s) {
                    const float* xp = x.ptr() + (s * C + c) * HW;
                    const float* gp = gy.ptr() + (s * C + c) * HW;
                    float* gxp = gx->ptr() + (s * C + c) * HW;
                    for (int64_t i = 0; i < HW; ++i) {
                        double xhat = (xp[i] - mu) * is;
                        double v = gp[i] - inv_m * sum_gy - inv_m * xhat * sum_gy_xhat;
                        gxp[i] += static_cast<float>(g * is * v);
                    }
                }
            } else {
                for (int64_t s = 0; s < N; ++s) {
                    const float* gp = gy.ptr() + (s * C + c) * HW;
                    float* gxp = gx->ptr() + (s * C + c) * HW;
                    for (int64_t i = 0; i < HW; ++i) gxp[i] += g * is * gp[i];
                }
            }
        }
        if (affine_grad) {
            add_param_grad(n.params[0], std::move(gg));
            add_param_grad(n.params[1], std::move(gb));
        }
    }

    void concat_backward(const Node& n, const Tensor& gy) {
        int64_t N = gy.shape[0], HW = gy.shape[2] * gy.shape[3];
        int64_t coff = 0;
        for (int in : n.inputs) {
            const auto& xs = shapes_[static_cast<size_t>(in)];
            int64_t C = xs[1];
            if (wants_grad(in)) {
                Tensor& gx = grad_of(in);
                for (int64_t s = 0; s < N; ++s) {
                    const float* src = gy.ptr() + (s * gy.shape[1] + coff) * HW;
                    float* dst = gx.ptr() + s * C * HW;
                    for (int64_t i = 0; i < C * HW; ++i) dst[i] += src[i];
                }
            }
            coff += C;
        }
    }

    void mul_backward(const Node& n, const Tensor& gy) {
        const Tensor& a = vals_[static_cast<size_t>(n.inputs[0])];
        const Tensor& b = vals_[static_cast<size_t>(n.inputs[1])];
        bool na = wants_grad(n.inputs[0]);
        bool nb = wants_grad(n.inputs[1]);
        if (a.same_shape(b)) {
            if (na) {
                Tensor& ga = grad_of(n.inputs[0]);
                for (int64_t i = 0; i < gy.numel(); ++i) ga.at(i) += gy.at(i) * b.at(i);
            }
            if (nb) {
                Tensor& gb = grad_of(n.inputs[1]);
                for (int64_t i = 0; i < gy.numel(); ++i) gb.at(i) += gy.at(i) * a.at(i);
            }
            return;
        }
        int64_t N = a.shape[0], C = a.shape[1], HW = a.shape[2] * a.shape[3];
        if (na) {
            Tensor& ga = grad_of(n.inputs[0]);
            for (int64_t s = 0; s < N; ++s) {
                const float* mp = b.ptr() + s * HW;
                for (int64_t c = 0; c < C; ++c) {
                    const float* gp = gy.ptr() + (s * C + c) * HW;
                    float* gap = ga.ptr() + (s * C + c) * HW;
                    for (int64_t i = 0; i < HW; ++i) gap[i] += gp[i] * mp[i];
                }
            }
        }
        if (nb) {
            Tensor& gb = grad_of(n.inputs[1]);
            for (int64_t s = 0; s < N; ++s) {
                float* gbp = gb.ptr() + s * HW;
                for (int64_t c = 0; c < C; ++c) {
                    const float* gp = gy.ptr() + (s * C + c) * HW;
                    const float* ap = a.ptr() + (s * C + c) * HW;
                    for (int64_t i = 0; i < HW; ++i) gbp[i] += gp[i] * ap[i];
                }
            }
        }
    }

    void gap_backward(const Node& n, const Tensor& gy) {
        if (!wants_grad(n.inputs[0])) return;
        const Tensor& x = vals_[static_cast<size_t>(n.inputs[0])];
        Tensor& gx = grad_of(n.inputs[0]);
        int64_t NC = x.shape[0] * x.shape[1], HW = x.shape[2] * x.shape[3];
        float inv = 1.0f / static_cast<float>(HW);
        for (int64_t nc = 0; nc < NC; ++nc) {
            float g = gy.at(nc) * inv;
            float* gxp = gx.ptr() + nc * HW;
            for (int64_t i = 0; i < HW; ++i) gxp[i] += g;
        }
    }

    void linear_backward(const Node& n, const Tensor& gy) {
        const Tensor& x = vals_[static_cast<size_t>(n.inputs[0])];
        const Tensor& w = pv(n, 0);
        int64_t N = x.shape[0], F = x.shape[1], O = w.shape[0];
        bool need_w = params_->at(n.params[0]).requires_grad;
        bool need_x = wants_grad(n.inputs[0]);
        if (need_w) {
            Tensor gw({O, F});
            Tensor gb({O});
            for (int64_t s = 0; s < N; ++s)
                for (int64_t o = 0; o < O; ++o) {
                    float g = gy.at(s * O + o);
                    gb.at(o) += g;
                    const float* xp = x.ptr() + s * F;
                    float* gwp = gw.ptr() + o * F;
                    for (int64_t f = 0; f < F; ++f) gwp[f] += g * xp[f];
                }
            add_param_grad(n.params[0], std::move(gw));
            add_param_grad(n.params[1], std::move(gb));
        }
        if (need_x) {
            Tensor& gx = grad_of(n.inputs[0]);
            for (int64_t s = 0; s < N; ++s)
                for (int64_t o = 0; o < O; ++o) {
                    float g = gy.at(s * O + o);
                    const float* wp = w.ptr() + o * F;
                    float* gxp = gx.ptr() + s * F;
                    for (int64_t f = 0; f < F; ++f) gxp[f] += g * wp[f];
                }
        }
    }

    void dice_backward(const Node& n, const Tensor& gy) {
        if (!wants_grad(n.inputs[0])) return;
        const Tensor& p = vals_[static_cast<size_t>(n.inputs[0])];
        const Tensor& t = vals_[static_cast<size_t>(n.inputs[1])];
        Tensor& gp = grad_of(n.inputs[0]);
        int64_t N = p.shape[0];
        int64_t per = p.numel() / N;
        double eps = n.attrs.loss_smooth;
        float g0 = gy.at(0);
        for (int64_t s = 0; s < N; ++s) {
            const float* pp = p.ptr() + s * per;
            const float* tp = t.ptr() + s * per;
            float* gpp = gp.ptr() + s * per;
            double inter = 0.0, tot = 0.0;
            for (int64_t i = 0; i < per; ++i) {
                inter += static_cast<double>(pp[i]) * tp[i];
                tot += static_cast<double>(pp[i]) + tp[i];
            }
            double denom = tot + eps;
            double num = 2.0 * inter + eps;
            for (int64_t i = 0; i < per; ++i) {
                // d(1 - dice_s/N)/dp_i = -(2 t_i denom - num) / denom^2 / N
                double d = (2.0 * tp[i] * denom - num) / (denom * denom);
                gpp[i] += static_cast<float>(-g0 * d / static_cast<double>(N));
            }
        }
    }

    void bce_backward(const Node& n, const Tensor& gy) {
        if (!wants_grad(n.inputs[0])) return;
        const Tensor& p = vals_[static_cast<size_t>(n.inputs[0])];
        const Tensor& t = vals_[static_cast<size_t>(n.inputs[1])];
        Tensor& gp = grad_of(n.inputs[0]);
        double inv_m = 1.0 / static_cast<double>(p.numel());
        float g0 = gy.at(0);
        for (int64_t i = 0; i < p.numel(); ++i) {
            double pc = static_cast<double>(p.at(i));
            if (pc < kBceClamp || pc > 1.0 - kBceClamp) continue;  // clamp region: zero grad
            double d = (pc - t.at(i)) / (pc * (1.0 - pc));
            gp.at(i) += static_cast<float>(g0 * d * inv_m);
        }
    }

    void mcc_backward(const Node& n, const Tensor& gy) {
        if (!wants_grad(n.inputs[0])) return;
        const Tensor& p = vals_[static_cast<size_t>(n.inputs[0])];
        const Tensor& t = vals_[static_cast<size_t>(n.inputs[1])];
        Tensor& gp = grad_of(n.inputs[0]);
        int64_t N = p.shape[0];
        int64_t per = p.numel() / N;
        float g0 = gy.at(0);
        for (int64_t s = 0; s < N; ++s) {
            const float* pp = p.ptr() + s * per;
            const float* tp = t.ptr() + s * per;
            float* gpp = gp.ptr() + s * per;
            double tpv = 0, fpv = 0, fnv = 0, tnv = 0;
            for (int64_t i = 0; i < per; ++i) {
                double pv = pp[i], tv = tp[i];
                tpv += pv * tv;
                fpv += pv * (1.0 - tv);
                fnv += (1.0 - pv) * tv;
                tnv += (1.0 - pv) * (1.0 - tv);
            }
            double a = tpv + fpv, b = tpv + fnv, c = tnv + fpv, d = tnv + fnv;
            double u = tpv * tnv - fpv * fnv;
            double dd = std::sqrt(a * b * c * d + kMccEps);
            double dprod_common = b * c * (d - a);  // d(abcd)/dp_i is index-independent
            for (int64_t i = 0; i < per; ++i) {
                double tv = tp[i];
                double du = tv * c - (1.0 - tv) * b;
                double dD = dprod_common / (2.0 * dd);
                double dmcc = (du * dd - u * dD) / (dd * dd);
                gpp[i] += static_cast<float>(-g0 * dmcc / static_cast<double>(N));
            }
        }
    }

    const ComputeGraph* g_;
    ParamStore* params_ = nullptr;
    ExecOptions opt_;
    bool forward_done_ = false;
    bool loss_input_grads_ = false;  // gradients w.r.t. graph inputs are never needed here

    std::vector<Tensor> vals_;
    std::vector<Tensor> grads_;
    std::vector<std::vector<int64_t>> shapes_;
    std::vector<double> scalar_f64_;
    std::vector<std::vector<int32_t>> pool_arg_;
    std::vector<BnCtx> bn_ctx_;
    std::vector<float> col_buf_, dcol_buf_;
    std::map<std::string, Tensor> param_grads_;
    std::map<std::string, Tensor> f16_params_;

    uint64_t plan_sig_ = 0;
    bool planned_ = false;
    int plan_count_ = 0;
};

// One-shot wrappers matching the operation-level contracts. Each call uses a
// fresh executor, so no plan is carried over; long-lived training paths hold
// an Executor instead.
inline TensorMap forward(const ComputeGraph& g, const TensorMap& inputs, ParamStore& params,
                         ExecOptions opt = {}) {
    Executor ex(g);
    return ex.forward(inputs, params, opt);
}

}  // namespace gseg
