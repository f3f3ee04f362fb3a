#pragma once

#include <chrono>
#include <thread>

#include "gseg/executor.hpp"
#include "gseg/optim.hpp"

namespace gseg::comm {

// ---- all-reduce -------------------------------------------------------------

// Elementwise mean with a fixed reduction tree: ranks are always accumulated
// in rank-id order in double precision, so the result is bitwise identical no
// matter when each rank arrives, and every rank receives the same bytes.
inline std::map<std::string, Tensor> allreduce_mean(
    const std::vector<std::map<std::string, Tensor>>& per_rank) {
    if (per_rank.empty()) throw Error("allreduce: no ranks");
    const auto& first = per_rank.front();
    for (size_t r = 1; r < per_rank.size(); ++r) {
        if (per_rank[r].size() != first.size())
            throw Error("allreduce: rank " + std::to_string(r) + " key set differs");
        for (const auto& [name, t] : first) {
            auto it = per_rank[r].find(name);
            if (it == per_rank[r].end())
                throw Error("allreduce: rank " + std::to_string(r) + " missing key '" + name +
                            "'");
            if (!it->second.same_shape(t))
                throw ShapeError("allreduce: shape mismatch for '" + name + "'");
        }
    }
    std::map<std::string, Tensor> out;
    double inv = 1.0 / static_cast<double>(per_rank.size());
    for (const auto& [name, t] : first) {
        Tensor acc(t.shape);
        for (int64_t i = 0; i < t.numel(); ++i) {
            double s = 0.0;
            for (const auto& rank : per_rank) s += rank.at(name).at(i);
            acc.at(i) = static_cast<float>(s * inv);
        }
        out[name] = std::move(acc);
    }
    return out;
}

// ---- PowerSGD ----------------------------------------------------------------

// Gradients of rank >= 2 fold to (dim0) x (rest); rank-1 tensors bypass
// compression and travel raw.
inline std::pair<int64_t, int64_t> fold_dims(const std::vector<int64_t>& shape) {
    int64_t rows = shape[0];
    int64_t cols = 1;
    for (size_t i = 1; i < shape.size(); ++i) cols *= shape[i];
    return {rows, cols};
}

struct PowerSgdState {
    int rank_r = 4;
    uint64_t seed = 0;
    std::map<std::string, Tensor> q;      // m x r, seeded init, warm-started
    std::map<std::string, Tensor> error;  // feedback buffer, gradient-shaped

    Tensor& q_for(const std::string& key, int64_t m) {
        auto it = q.find(key);
        if (it == q.end()) {
            // seed agreement replaces a broadcast: every rank derives the same
            // init from (seed, key)
            uint64_t h = seed;
            for (char c : key) h = h * 1099511628211ull + static_cast<unsigned char>(c);
            Rng rng(h);
            it = q.emplace(key, Tensor::normal({m, rank_r}, 0.0f, 1.0f, rng)).first;
        }
        return it->second;
    }

    Tensor& error_for(const std::string& key, const std::vector<int64_t>& shape) {
        auto it = error.find(key);
        if (it == error.end()) it = error.emplace(key, Tensor::zeros(shape)).first;
        return it->second;
    }
};

namespace comm_detail {

// in-place modified Gram-Schmidt on the r columns of P (n x r); zero columns
// stay zero so an all-zero input yields all-zero factors
inline void orthonormalize(Tensor& p) {
    int64_t n = p.shape[0], r = p.shape[1];
    for (int64_t j = 0; j < r; ++j) {
        for (int64_t k = 0; k < j; ++k) {
            double dot = 0.0;
            for (int64_t i = 0; i < n; ++i) dot += static_cast<double>(p.at(i * r + k)) * p.at(i * r + j);
            for (int64_t i = 0; i < n; ++i)
                p.at(i * r + j) -= static_cast<float>(dot * p.at(i * r + k));
        }
        double norm2 = 0.0;
        for (int64_t i = 0; i < n; ++i) norm2 += static_cast<double>(p.at(i * r + j)) * p.at(i * r + j);
        if (norm2 > 1e-30) {
            float inv = static_cast<float>(1.0 / std::sqrt(norm2));
            for (int64_t i = 0; i < n; ++i) p.at(i * r + j) *= inv;
        }
    }
}

// C(rows x cols) = A(rows x k) * B(k x cols), accumulating in double
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    int64_t rows = a.shape[0], k = a.shape[1], cols = b.shape[1];
    Tensor c({rows, cols});
    for (int64_t i = 0; i < rows; ++i)
        for (int64_t j = 0; j < cols; ++j) {
            double s = 0.0;
            for (int64_t t = 0; t < k; ++t) s += static_cast<double>(a.at(i * k + t)) * b.at(t * cols + j);
            c.at(i * cols + j) = static_cast<float>(s);
        }
    return c;
}

inline Tensor transpose(const Tensor& a) {
    int64_t rows = a.shape[0], cols = a.shape[1];
    Tensor t({cols, rows});
    for (int64_t i = 0; i < rows; ++i)
        for (int64_t j = 0; j < cols; ++j) t.at(j * rows + i) = a.at(i * cols + j);
    return t;
}

}  // namespace comm_detail

// One power iteration with error feedback on a single gradient matrix:
// M' = M + e; P = orthonormalize(M'Q); Q <- M'^T P; e <- M' - PQ^T.
inline std::pair<Tensor, Tensor> powersgd_compress(const Tensor& m_in, PowerSgdState& state,
                                                   const std::string& key = "g") {
    if (m_in.rank() != 2) throw ShapeError("powersgd: expected a 2-d gradient matrix");
    int64_t n = m_in.shape[0], m = m_in.shape[1];
    int64_t r = std::min<int64_t>(state.rank_r, std::min(n, m));

    Tensor& e = state.error_for(key, m_in.shape);
    Tensor mp = m_in;
    for (int64_t i = 0; i < mp.numel(); ++i) mp.at(i) += e.at(i);

    Tensor& q_full = state.q_for(key, m);
    if (q_full.shape[0] != m) throw ShapeError("powersgd: state does not match matrix shape");
    // effective rank may be clipped by the matrix size
    Tensor q({m, r});
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < r; ++j) q.at(i * r + j) = q_full.at(i * state.rank_r + j);

    Tensor p = comm_detail::matmul(mp, q);  // n x r
    comm_detail::orthonormalize(p);
    Tensor q_new = comm_detail::matmul(comm_detail::transpose(mp), p);  // m x r

    Tensor approx = comm_detail::matmul(p, comm_detail::transpose(q_new));  // n x m
    for (int64_t i = 0; i < e.numel(); ++i) e.at(i) = mp.at(i) - approx.at(i);

    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < r; ++j) q_full.at(i * state.rank_r + j) = q_new.at(i * r + j);
    return {std::move(p), std::move(q_new)};
}

inline Tensor powersgd_decompress(const Tensor& p, const Tensor& q) {
    if (p.rank() != 2 || q.rank() != 2 || p.shape[1] != q.shape[1])
        throw ShapeError("powersgd: factor column counts differ");
    return comm_detail::matmul(p, comm_detail::transpose(q));
}

// ---- 8-bit gradient quantization ---------------------------------------------

struct QuantizedGrads {
    std::map<std::string, std::vector<int8_t>> codes;
    std::map<std::string, float> scales;
    std::map<std::string, std::vector<int64_t>> shapes;
};

// symmetric per-tensor: scale = max|g| / 127, code = round(g / scale)
inline QuantizedGrads quantize_grads_8bit(const std::map<std::string, Tensor>& grads) {
    QuantizedGrads out;
    for (const auto& [name, g] : grads) {
        float amax = 0.0f;
        for (float v : g.data) amax = std::max(amax, std::abs(v));
        float scale = amax / 127.0f;
        std::vector<int8_t> codes(g.data.size(), 0);
        if (scale > 0.0f)
            for (size_t i = 0; i < g.data.size(); ++i)
                codes[i] = static_cast<int8_t>(std::lround(g.data[i] / scale));
        out.codes[name] = std::move(codes);
        out.scales[name] = scale;
        out.shapes[name] = g.shape;
    }
    return out;
}

inline std::map<std::string, Tensor> dequantize_grads(const QuantizedGrads& q) {
    std::map<std::string, Tensor> out;
    for (const auto& [name, codes] : q.codes) {
        Tensor t(q.shapes.at(name));
        float scale = q.scales.at(name);
        for (size_t i = 0; i < codes.size(); ++i)
            t.data[i] = static_cast<float>(codes[i]) * scale;
        out[name] = std::move(t);
    }
    return out;
}

// ---- gradient buckets -----------------------------------------------------------

struct Bucket {
    std::vector<std::string> params;  // reverse parameter order, greedily packed
    size_t bytes = 0;
};

// Greedy fill in reverse parameter order (gradients become ready back to
// front during backward). Deterministic for a fixed order.
inline std::vector<Bucket> bucket_gradients(const std::vector<std::pair<std::string, int64_t>>& params,
                                            size_t capacity_bytes) {
    std::vector<Bucket> out;
    Bucket cur;
    for (auto it = params.rbegin(); it != params.rend(); ++it) {
        size_t bytes = static_cast<size_t>(it->second) * sizeof(float);
        if (bytes > capacity_bytes)
            throw Error("bucket_gradients: parameter '" + it->first +
                        "' exceeds the bucket capacity");
        if (cur.bytes + bytes > capacity_bytes && !cur.params.empty()) {
            out.push_back(std::move(cur));
            cur = Bucket{};
        }
        cur.params.push_back(it->first);
        cur.bytes += bytes;
    }
    if (!cur.params.empty()) out.push_back(std::move(cur));
    return out;
}

// ---- simulated multi-rank training ------------------------------------------------

enum class CompressorKind : uint8_t { None, PowerSgd, Int8 };

inline const char* compressor_name(CompressorKind k) {
    switch (k) {
        case CompressorKind::None: return "none";
        case CompressorKind::PowerSgd: return "powersgd";
        case CompressorKind::Int8: return "int8";
    }
    return "?";
}

inline CompressorKind compressor_from_string(const std::string& s) {
    if (s == "none") return CompressorKind::None;
    if (s == "powersgd") return CompressorKind::PowerSgd;
    if (s == "int8") return CompressorKind::Int8;
    throw Error("unknown compressor '" + s + "'");
}

struct CompressorPolicy {
    CompressorKind kind = CompressorKind::None;
    int powersgd_rank = 4;
    uint64_t seed = 0;
};

struct StepMetrics {
    double loss = 0.0;
    size_t bytes_raw = 0;         // per-rank payload of an uncompressed reduction
    size_t bytes_compressed = 0;  // per-rank payload actually communicated
    double seconds = 0.0;
};

inline uint64_t hash_params(const ParamStore& params, bool trainable_only = true) {
    uint64_t h = 1469598103934665603ull;
    for (const auto& [name, t] : params) {
        if (trainable_only && !t.requires_grad) continue;
        for (float v : t.data) {
            uint32_t bits;
            std::memcpy(&bits, &v, 4);
            h ^= bits;
            h *= 1099511628211ull;
        }
    }
    return h;
}

// World of identical model replicas driven in lockstep. Each rank owns a
// private replica, executor, and optimizer; thread joins provide the barrier
// between local compute and the reduction. Reduction order is fixed, so the
// synchronized step is deterministic. Like the reference DDP implementation,
// batch-norm running statistics stay rank-local (only trainable parameters
// are reduced and hash-checked).
class RankGroup {
public:
    RankGroup(const ComputeGraph& train_graph, const ParamStore& init_params, int world_size,
              optim::OptimizerConfig opt_cfg, CompressorPolicy policy = {})
        : graph_(&train_graph), world_(world_size), policy_(policy) {
        if (world_size < 1) throw Error("rank group: world_size must be >= 1");
        for (int r = 0; r < world_size; ++r) {
            replicas_.push_back(init_params);
            executors_.emplace_back(train_graph);
            optimizers_.emplace_back(opt_cfg);
        }
        psgd_.rank_r = policy.powersgd_rank;
        psgd_.seed = policy.seed;
    }

    int world_size() const { return world_; }
    ParamStore& replica(int r) { return replicas_.at(static_cast<size_t>(r)); }
    const ParamStore& replica(int r) const { return replicas_.at(static_cast<size_t>(r)); }
    optim::Optimizer& optimizer(int r) { return optimizers_.at(static_cast<size_t>(r)); }

    // Synchronized data-parallel step: local forward/backward per rank,
    // gradient reduction per the compressor policy, one identical optimizer
    // step everywhere. Shards must be equal-sized.
    StepMetrics train_step(const std::vector<TensorMap>& shards,
                           const std::string& loss_output = "loss") {
        if (static_cast<int>(shards.size()) != world_)
            throw Error("ddp: shard count does not match world size");
        auto t0 = std::chrono::steady_clock::now();

        std::vector<std::map<std::string, Tensor>> grads(static_cast<size_t>(world_));
        std::vector<double> losses(static_cast<size_t>(world_), 0.0);
        std::vector<std::exception_ptr> errors(static_cast<size_t>(world_));
        {
            std::vector<std::thread> pool;
            for (int r = 0; r < world_; ++r)
                pool.emplace_back([&, r] {
                    try {
                        ExecOptions opt;
                        opt.training = true;
                        executors_[static_cast<size_t>(r)].forward(
                            shards[static_cast<size_t>(r)], replicas_[static_cast<size_t>(r)],
                            opt);
                        losses[static_cast<size_t>(r)] =
                            executors_[static_cast<size_t>(r)].scalar_f64(loss_output);
                        grads[static_cast<size_t>(r)] =
                            executors_[static_cast<size_t>(r)].backward(loss_output);
                    } catch (...) {
                        errors[static_cast<size_t>(r)] = std::current_exception();
                    }
                });
            for (auto& t : pool) t.join();  // the compute/reduce barrier
        }
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);

        StepMetrics metrics;
        for (double l : losses) metrics.loss += l;
        metrics.loss /= static_cast<double>(world_);

        auto reduced = reduce(grads, metrics);

        {
            std::vector<std::thread> pool;
            for (int r = 0; r < world_; ++r)
                pool.emplace_back([&, r] {
                    optimizers_[static_cast<size_t>(r)].step(
                        replicas_[static_cast<size_t>(r)], reduced);
                });
            for (auto& t : pool) t.join();
        }

        uint64_t h0 = hash_params(replicas_[0]);
        for (int r = 1; r < world_; ++r)
            if (hash_params(replicas_[static_cast<size_t>(r)]) != h0)
                throw Error("ddp: replica divergence detected on rank " + std::to_string(r));

        metrics.seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        return metrics;
    }

private:
    std::map<std::string, Tensor> reduce(std::vector<std::map<std::string, Tensor>>& grads,
                                         StepMetrics& metrics) {
        for (const auto& [name, g] : grads[0])
            metrics.bytes_raw += g.data.size() * sizeof(float);

        if (policy_.kind == CompressorKind::None || world_ == 0) {
            metrics.bytes_compressed = metrics.bytes_raw;
            return allreduce_mean(grads);
        }

        if (policy_.kind == CompressorKind::Int8) {
            std::vector<std::map<std::string, Tensor>> dequantized;
            dequantized.reserve(grads.size());
            for (auto& g : grads) {
                auto q = quantize_grads_8bit(g);
                dequantized.push_back(dequantize_grads(q));
            }
            for (const auto& [name, g] : grads[0])
                metrics.bytes_compressed += g.data.size() + sizeof(float);
            return allreduce_mean(dequantized);
        }

        // PowerSGD: rank >= 2 tensors go through the two-phase P/Q mean with
        // shared error feedback; rank-1 tensors are reduced raw.
        std::map<std::string, Tensor> reduced;
        std::vector<std::map<std::string, Tensor>> raw_part(grads.size());
        for (const auto& [name, g0] : grads[0]) {
            if (g0.rank() < 2) {
                for (size_t r = 0; r < grads.size(); ++r) raw_part[r][name] = grads[r][name];
                metrics.bytes_compressed += g0.data.size() * sizeof(float);
                continue;
            }
            auto [rows, cols] = fold_dims(g0.shape);
            int64_t r_eff = std::min<int64_t>(policy_.powersgd_rank, std::min(rows, cols));

            // M'_r = grad + per-rank error feedback
            std::vector<Tensor> mp(grads.size());
            for (size_t r = 0; r < grads.size(); ++r) {
                mp[r] = Tensor({rows, cols}, grads[r][name].data);
                Tensor& e = rank_error_[r][name];
                if (e.numel() == 0) e = Tensor::zeros({rows, cols});
                for (int64_t i = 0; i < mp[r].numel(); ++i) mp[r].at(i) += e.at(i);
            }

            Tensor& q_full = psgd_.q_for(name, cols);
            Tensor q({cols, r_eff});
            for (int64_t i = 0; i < cols; ++i)
                for (int64_t j = 0; j < r_eff; ++j)
                    q.at(i * r_eff + j) = q_full.at(i * psgd_.rank_r + j);

            // phase 1: P_r = M'_r Q, all-reduce mean, orthonormalize
            Tensor p_mean({rows, r_eff});
            for (size_t r = 0; r < grads.size(); ++r) {
                Tensor p = comm_detail::matmul(mp[r], q);
                for (int64_t i = 0; i < p.numel(); ++i) p_mean.at(i) += p.at(i);
            }
            for (int64_t i = 0; i < p_mean.numel(); ++i)
                p_mean.at(i) /= static_cast<float>(grads.size());
            comm_detail::orthonormalize(p_mean);

            // phase 2: Q_r = M'_r^T P, all-reduce mean
            Tensor q_mean({cols, r_eff});
            for (size_t r = 0; r < grads.size(); ++r) {
                Tensor qr = comm_detail::matmul(comm_detail::transpose(mp[r]), p_mean);
                for (int64_t i = 0; i < qr.numel(); ++i) q_mean.at(i) += qr.at(i);
            }
            for (int64_t i = 0; i < q_mean.numel(); ++i)
                q_mean.at(i) /= static_cast<float>(grads.size());

            Tensor approx = comm_detail::matmul(p_mean, comm_detail::transpose(q_mean));
            for (size_t r = 0; r < grads.size(); ++r) {
                Tensor& e = rank_error_[r][name];
                for (int64_t i = 0; i < e.numel(); ++i) e.at(i) = mp[r].at(i) - approx.at(i);
            }
            for (int64_t i = 0; i < cols; ++i)
                for (int64_t j = 0; j < r_eff; ++j)
                    q_full.at(i * psgd_.rank_r + j) = q_mean.at(i * r_eff + j);

            reduced[name] = Tensor(grads[0][name].shape, approx.data);
            metrics.bytes_compressed +=
                static_cast<size_t>(r_eff * (rows + cols)) * sizeof(float);
        }
        if (!raw_part[0].empty()) {
            auto raw_reduced = allreduce_mean(raw_part);
            for (auto& [name, t] : raw_reduced) reduced[name] = std::move(t);
        }
        return reduced;
    }

    const ComputeGraph* graph_;
    int world_;
    CompressorPolicy policy_;
    std::vector<ParamStore> replicas_;
    std::vector<Executor> executors_;
    std::vector<optim::Optimizer> optimizers_;
    PowerSgdState psgd_;
    std::map<size_t, std::map<std::string, Tensor>> rank_error_;
};

}  // namespace gseg::comm
