#pragma once

#include "gseg/checkpoint.hpp"
#include "gseg/graph.hpp"

namespace gseg::optim {

enum class OptKind : uint8_t { Sgd, Adam, Novograd };

inline const char* opt_name(OptKind k) {
    switch (k) {
        case OptKind::Sgd: return "sgd";
        case OptKind::Adam: return "adam";
        case OptKind::Novograd: return "novograd";
    }
    return "?";
}

inline OptKind opt_from_string(const std::string& s) {
    if (s == "sgd") return OptKind::Sgd;
    if (s == "adam") return OptKind::Adam;
    if (s == "novograd") return OptKind::Novograd;
    throw Error("unknown optimizer '" + s + "'");
}

struct OptimizerConfig {
    OptKind kind = OptKind::Adam;
    float lr = 1e-3f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    float weight_decay = 0.0f;
    bool amsgrad = false;

    static OptimizerConfig adam_defaults() { return {}; }

    static OptimizerConfig novograd_defaults() {
        OptimizerConfig c;
        c.kind = OptKind::Novograd;
        c.beta1 = 0.95f;
        c.beta2 = 0.98f;
        c.weight_decay = 0.001f;
        return c;
    }

    static OptimizerConfig sgd_defaults() {
        OptimizerConfig c;
        c.kind = OptKind::Sgd;
        c.beta1 = 0.9f;  // momentum
        return c;
    }
};

// Owns all moment state. Adam keeps two full-size buffers per parameter
// (three with amsgrad); Novograd keeps one full-size momentum buffer plus a
// single second-moment scalar per parameter tensor, which is where its
// memory halving comes from.
class Optimizer {
public:
    explicit Optimizer(OptimizerConfig cfg = {}) : cfg_(cfg) {}

    const OptimizerConfig& config() const { return cfg_; }
    float lr() const { return cfg_.lr; }
    void set_lr(float lr) { cfg_.lr = lr; }
    int64_t step_count() const { return step_count_; }

    void step(ParamStore& params, const std::map<std::string, Tensor>& grads) {
        ++step_count_;
        for (auto& [name, p] : params) {
            if (!p.requires_grad) continue;
            auto it = grads.find(name);
            if (it == grads.end()) continue;  // parameter off the loss path this step
            const Tensor& g = it->second;
            if (!g.same_shape(p))
                throw ShapeError("optimizer: gradient shape mismatch for '" + name + "'");
            switch (cfg_.kind) {
                case OptKind::Sgd: sgd_step(name, p, g); break;
                case OptKind::Adam: adam_step(name, p, g); break;
                case OptKind::Novograd: novograd_step(name, p, g); break;
            }
        }
    }

    // bytes held by moment buffers (parameters themselves excluded)
    size_t state_footprint() const {
        size_t bytes = 0;
        for (const auto& [name, t] : m_) bytes += t.data.size() * sizeof(float);
        for (const auto& [name, t] : v_) bytes += t.data.size() * sizeof(float);
        for (const auto& [name, t] : vmax_) bytes += t.data.size() * sizeof(float);
        bytes += v_layer_.size() * sizeof(float);
        return bytes;
    }

    // allocates the state for the given parameters without touching them
    void ensure_state(const ParamStore& params) {
        for (const auto& [name, p] : params) {
            if (!p.requires_grad) continue;
            if (!m_.count(name)) m_[name] = Tensor::zeros(p.shape);
            if (cfg_.kind == OptKind::Adam) {
                if (!v_.count(name)) v_[name] = Tensor::zeros(p.shape);
                if (cfg_.amsgrad && !vmax_.count(name)) vmax_[name] = Tensor::zeros(p.shape);
            } else if (cfg_.kind == OptKind::Novograd) {
                if (!v_layer_.count(name)) v_layer_[name] = 0.0f;
            }
        }
    }

    // state serialization into the checkpoint container namespace "opt/"
    void save_into(std::map<std::string, Tensor>& out) const {
        for (const auto& [name, t] : m_) out["opt/m/" + name] = t;
        for (const auto& [name, t] : v_) out["opt/v/" + name] = t;
        for (const auto& [name, t] : vmax_) out["opt/vmax/" + name] = t;
        if (!v_layer_.empty()) {
            Tensor vl({static_cast<int64_t>(v_layer_.size())});
            int64_t i = 0;
            for (const auto& [name, v] : v_layer_) vl.at(i++) = v;
            out["opt/vlayer"] = std::move(vl);
        }
        Tensor meta({8});
        meta.at(0) = static_cast<float>(step_count_);
        meta.at(1) = cfg_.lr;
        meta.at(2) = cfg_.beta1;
        meta.at(3) = cfg_.beta2;
        meta.at(4) = cfg_.eps;
        meta.at(5) = cfg_.weight_decay;
        meta.at(6) = cfg_.amsgrad ? 1.0f : 0.0f;
        meta.at(7) = static_cast<float>(cfg_.kind);
        out["opt/meta"] = std::move(meta);
    }

    void restore_from(const std::map<std::string, Tensor>& in) {
        auto mit = in.find("opt/meta");
        if (mit == in.end()) throw FormatError("optimizer restore: missing opt/meta");
        const Tensor& meta = mit->second;
        if (static_cast<OptKind>(static_cast<int>(meta.at(7))) != cfg_.kind)
            throw Error("optimizer restore: checkpoint holds a different optimizer kind");
        step_count_ = static_cast<int64_t>(meta.at(0));
        cfg_.lr = meta.at(1);
        cfg_.beta1 = meta.at(2);
        cfg_.beta2 = meta.at(3);
        cfg_.eps = meta.at(4);
        cfg_.weight_decay = meta.at(5);
        cfg_.amsgrad = meta.at(6) != 0.0f;

        m_.clear();
        v_.clear();
        vmax_.clear();
        std::vector<std::string> vlayer_names;
        for (const auto& [name, t] : in) {
            if (name.rfind("opt/m/", 0) == 0) m_[name.substr(6)] = t;
            if (name.rfind("opt/v/", 0) == 0) v_[name.substr(6)] = t;
            if (name.rfind("opt/vmax/", 0) == 0) vmax_[name.substr(9)] = t;
            if (name.rfind("opt/m/", 0) == 0 && cfg_.kind == OptKind::Novograd)
                vlayer_names.push_back(name.substr(6));
        }
        v_layer_.clear();
        auto vit = in.find("opt/vlayer");
        if (vit != in.end()) {
            int64_t i = 0;
            for (const auto& name : vlayer_names) v_layer_[name] = vit->second.at(i++);
        }
    }

private:
    Tensor& buffer(std::map<std::string, Tensor>& store, const std::string& name,
                   const Tensor& like) {
        auto it = store.find(name);
        if (it == store.end()) it = store.emplace(name, Tensor::zeros(like.shape)).first;
        return it->second;
    }

    void sgd_step(const std::string& name, Tensor& p, const Tensor& g) {
        Tensor& m = buffer(m_, name, p);
        for (int64_t i = 0; i < p.numel(); ++i) {
            float gi = g.at(i) + cfg_.weight_decay * p.at(i);
            m.at(i) = cfg_.beta1 * m.at(i) + gi;
            p.at(i) -= cfg_.lr * m.at(i);
        }
    }

    void adam_step(const std::string& name, Tensor& p, const Tensor& g) {
        Tensor& m = buffer(m_, name, p);
        Tensor& v = buffer(v_, name, p);
        Tensor* vmax = cfg_.amsgrad ? &buffer(vmax_, name, p) : nullptr;
        double t = static_cast<double>(step_count_);
        double bc1 = 1.0 - std::pow(static_cast<double>(cfg_.beta1), t);
        double bc2 = 1.0 - std::pow(static_cast<double>(cfg_.beta2), t);
        for (int64_t i = 0; i < p.numel(); ++i) {
            float gi = g.at(i) + cfg_.weight_decay * p.at(i);
            m.at(i) = cfg_.beta1 * m.at(i) + (1.0f - cfg_.beta1) * gi;
            v.at(i) = cfg_.beta2 * v.at(i) + (1.0f - cfg_.beta2) * gi * gi;
            double mhat = m.at(i) / bc1;
            double vhat;
            if (vmax) {
                vmax->at(i) = std::max(vmax->at(i), v.at(i));
                vhat = vmax->at(i);
            } else {
                vhat = v.at(i) / bc2;
            }
            p.at(i) -= static_cast<float>(cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
        }
    }

    void novograd_step(const std::string& name, Tensor& p, const Tensor& g) {
        Tensor& m = buffer(m_, name, p);
        auto vit = v_layer_.find(name);
        bool first = vit == v_layer_.end();
        double norm2 = 0.0;
        for (int64_t i = 0; i < g.numel(); ++i)
            norm2 += static_cast<double>(g.at(i)) * g.at(i);
        float v = first ? static_cast<float>(norm2)
                        : cfg_.beta2 * vit->second +
                              (1.0f - cfg_.beta2) * static_cast<float>(norm2);
        v_layer_[name] = v;
        float denom = std::sqrt(v) + cfg_.eps;
        for (int64_t i = 0; i < p.numel(); ++i) {
            float d = g.at(i) / denom + cfg_.weight_decay * p.at(i);
            m.at(i) = first ? d : cfg_.beta1 * m.at(i) + d;
            p.at(i) -= cfg_.lr * m.at(i);
        }
    }

    OptimizerConfig cfg_;
    int64_t step_count_ = 0;
    std::map<std::string, Tensor> m_, v_, vmax_;
    std::map<std::string, float> v_layer_;
};

// Running average of parameter snapshots collected once per epoch from
// swa_start_epoch onward.
struct SwaState {
    std::map<std::string, Tensor> running_mean;
    int64_t n_models = 0;
    int swa_start_epoch = 0;

    void update(const ParamStore& params) {
        if (n_models == 0) {
            for (const auto& [name, p] : params) running_mean[name] = p;
            n_models = 1;
            return;
        }
        if (running_mean.size() != params.size())
            throw ShapeError("swa: parameter set drifted between snapshots");
        double n = static_cast<double>(n_models);
        for (auto& [name, mean] : running_mean) {
            auto it = params.find(name);
            if (it == params.end() || !it->second.same_shape(mean))
                throw ShapeError("swa: shape drift on '" + name + "'");
            for (int64_t i = 0; i < mean.numel(); ++i)
                mean.at(i) = static_cast<float>(
                    (static_cast<double>(mean.at(i)) * n + it->second.at(i)) / (n + 1.0));
        }
        ++n_models;
    }

    void apply(ParamStore& params) const {
        for (auto& [name, p] : params) {
            auto it = running_mean.find(name);
            if (it != running_mean.end()) {
                bool rq = p.requires_grad;
                p = it->second;
                p.requires_grad = rq;
            }
        }
    }
};

}  // namespace gseg::optim
