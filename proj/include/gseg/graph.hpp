#pragma once

#include <map>
#include <string>
#include <vector>

#include "gseg/tensor.hpp"

namespace gseg {

// Op set is fixed: exactly what the segmentation architectures and their
// losses need. No general broadcasting; Mul additionally accepts a
// single-channel right operand (attention masks), Conv2d/Linear fold the
// bias add.
enum class OpKind : uint8_t {
    Input,
    Conv2d,
    MaxPool2d,
    UpsampleNearest,
    BatchNorm,
    ReLU,
    Sigmoid,
    Concat,
    Add,
    Mul,
    GlobalAvgPool,
    Linear,
    Scale,
    SumReduce,
    DiceLoss,
    BceLoss,
    MccLoss,
};

inline const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::Input: return "input";
        case OpKind::Conv2d: return "conv2d";
        case OpKind::MaxPool2d: return "maxpool2d";
        case OpKind::UpsampleNearest: return "upsample_nearest";
        case OpKind::BatchNorm: return "batch_norm";
        case OpKind::ReLU: return "relu";
        case OpKind::Sigmoid: return "sigmoid";
        case OpKind::Concat: return "concat";
        case OpKind::Add: return "add";
        case OpKind::Mul: return "mul";
        case OpKind::GlobalAvgPool: return "global_avg_pool";
        case OpKind::Linear: return "linear";
        case OpKind::Scale: return "scale";
        case OpKind::SumReduce: return "sum";
        case OpKind::DiceLoss: return "dice_loss";
        case OpKind::BceLoss: return "bce_loss";
        case OpKind::MccLoss: return "mcc_loss";
    }
    return "?";
}

struct Attrs {
    int stride = 1;
    int pad = 0;
    int pool_k = 2;
    int pool_stride = 2;
    int up_factor = 2;
    float bn_eps = 1e-5f;
    float bn_momentum = 0.1f;
    float scale = 1.0f;
    float loss_smooth = 1.0f;  // dice loss smoothing
};

struct Node {
    OpKind kind = OpKind::Input;
    std::string name;
    std::vector<int> inputs;             // node ids, all < own id
    std::vector<std::string> params;     // conv/linear: {w, b}; bn: {gamma, beta, rmean, rvar}
    Attrs attrs;
};

using ParamStore = std::map<std::string, Tensor>;
using TensorMap = std::map<std::string, Tensor>;

// Static DAG of layer ops, topologically ordered by construction.
struct ComputeGraph {
    std::vector<Node> nodes;
    std::map<std::string, int> inputs;   // input name -> Input node id
    std::map<std::string, int> outputs;  // output name -> node id

    int add(Node n) {
        int id = static_cast<int>(nodes.size());
        for (int in : n.inputs) {
            if (in < 0 || in >= id)
                throw Error("graph: node '" + n.name + "' references id " +
                            std::to_string(in) + " out of order");
        }
        if (n.kind == OpKind::Input) inputs[n.name] = id;
        nodes.push_back(std::move(n));
        return id;
    }

    void mark_output(const std::string& name, int id) {
        if (id < 0 || id >= static_cast<int>(nodes.size()))
            throw Error("graph: output id out of range");
        outputs[name] = id;
    }

    int output_id(const std::string& name) const {
        auto it = outputs.find(name);
        if (it == outputs.end()) throw Error("graph: unknown output '" + name + "'");
        return it->second;
    }

    const Node& node(int id) const { return nodes.at(static_cast<size_t>(id)); }
};

// Convenience layer-level construction API used by the model builders and
// tests. Parameters are created in the bound store as they are declared.
class GraphBuilder {
public:
    explicit GraphBuilder(ParamStore& params, uint64_t init_seed = 0)
        : params_(&params), rng_(init_seed) {}

    ComputeGraph take() { return std::move(g_); }
    ComputeGraph& graph() { return g_; }

    int input(const std::string& name) {
        Node n;
        n.kind = OpKind::Input;
        n.name = name;
        return g_.add(std::move(n));
    }

    // Declares w (co x ci x k x k, Kaiming-uniform) and b (co, zeros).
    int conv2d(int x, const std::string& name, int ci, int co, int k, int stride = 1,
               int pad = 0) {
        declare(name + ".w", kaiming({co, ci, k, k}, ci * k * k), true);
        declare(name + ".b", Tensor::zeros({co}), true);
        Node n;
        n.kind = OpKind::Conv2d;
        n.name = name;
        n.inputs = {x};
        n.params = {name + ".w", name + ".b"};
        n.attrs.stride = stride;
        n.attrs.pad = pad;
        return g_.add(std::move(n));
    }

    int batch_norm(int x, const std::string& name, int c) {
        declare(name + ".g", Tensor::full({c}, 1.0f), true);
        declare(name + ".b", Tensor::zeros({c}), true);
        declare(name + ".rm", Tensor::zeros({c}), false);
        declare(name + ".rv", Tensor::full({c}, 1.0f), false);
        Node n;
        n.kind = OpKind::BatchNorm;
        n.name = name;
        n.inputs = {x};
        n.params = {name + ".g", name + ".b", name + ".rm", name + ".rv"};
        return g_.add(std::move(n));
    }

    int linear(int x, const std::string& name, int in, int out) {
        declare(name + ".w", kaiming({out, in}, in), true);
        declare(name + ".b", Tensor::zeros({out}), true);
        Node n;
        n.kind = OpKind::Linear;
        n.name = name;
        n.inputs = {x};
        n.params = {name + ".w", name + ".b"};
        return g_.add(std::move(n));
    }

    int relu(int x, const std::string& name) { return simple(OpKind::ReLU, name, {x}); }
    int sigmoid(int x, const std::string& name) { return simple(OpKind::Sigmoid, name, {x}); }
    int add(int a, int b, const std::string& name) { return simple(OpKind::Add, name, {a, b}); }
    int mul(int a, int b, const std::string& name) { return simple(OpKind::Mul, name, {a, b}); }
    int global_avg_pool(int x, const std::string& name) {
        return simple(OpKind::GlobalAvgPool, name, {x});
    }
    int sum(int x, const std::string& name) { return simple(OpKind::SumReduce, name, {x}); }

    int maxpool2d(int x, const std::string& name, int k = 2, int stride = 2) {
        Node n;
        n.kind = OpKind::MaxPool2d;
        n.name = name;
        n.inputs = {x};
        n.attrs.pool_k = k;
        n.attrs.pool_stride = stride;
        return g_.add(std::move(n));
    }

    int upsample(int x, const std::string& name, int factor = 2) {
        Node n;
        n.kind = OpKind::UpsampleNearest;
        n.name = name;
        n.inputs = {x};
        n.attrs.up_factor = factor;
        return g_.add(std::move(n));
    }

    int concat(std::vector<int> xs, const std::string& name) {
        Node n;
        n.kind = OpKind::Concat;
        n.name = name;
        n.inputs = std::move(xs);
        return g_.add(std::move(n));
    }

    int scale(int x, const std::string& name, float s) {
        Node n;
        n.kind = OpKind::Scale;
        n.name = name;
        n.inputs = {x};
        n.attrs.scale = s;
        return g_.add(std::move(n));
    }

    int dice_loss(int pred, int target, const std::string& name, float smooth = 1.0f) {
        Node n;
        n.kind = OpKind::DiceLoss;
        n.name = name;
        n.inputs = {pred, target};
        n.attrs.loss_smooth = smooth;
        return g_.add(std::move(n));
    }

    int bce_loss(int pred, int target, const std::string& name) {
        return simple(OpKind::BceLoss, name, {pred, target});
    }

    int mcc_loss(int pred, int target, const std::string& name) {
        return simple(OpKind::MccLoss, name, {pred, target});
    }

    void mark_output(const std::string& name, int id) { g_.mark_output(name, id); }

private:
    int simple(OpKind k, const std::string& name, std::vector<int> in) {
        Node n;
        n.kind = k;
        n.name = name;
        n.inputs = std::move(in);
        return g_.add(std::move(n));
    }

    Tensor kaiming(std::vector<int64_t> shape, int64_t fan_in) {
        float bound = std::sqrt(6.0f / static_cast<float>(fan_in));
        return Tensor::uniform(std::move(shape), -bound, bound, rng_);
    }

    void declare(const std::string& name, Tensor t, bool trainable) {
        if (params_->count(name)) throw Error("duplicate parameter '" + name + "'");
        t.requires_grad = trainable;
        (*params_)[name] = std::move(t);
    }

    ParamStore* params_;
    ComputeGraph g_;
    Rng rng_;
};

// Total element count of trainable tensors.
inline int64_t param_count(const ParamStore& params) {
    int64_t n = 0;
    for (const auto& [name, t] : params)
        if (t.requires_grad) n += t.numel();
    return n;
}

}  // namespace gseg
