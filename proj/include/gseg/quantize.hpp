#pragma once

#include "gseg/checkpoint.hpp"
#include "gseg/models.hpp"

namespace gseg::quant {

// Post-training weight quantization: per-tensor symmetric int8 around zero.
// Weights only; activations stay fp32.
struct QuantizedModel {
    nn::ArchSpec spec;
    ComputeGraph graph;
    std::string input_name, output_name;
    std::map<std::string, checkpoint::Int8Record> tensors;
    std::map<std::string, bool> trainable;
};

inline QuantizedModel quantize_weights_int8(const nn::Model& model) {
    QuantizedModel q;
    q.spec = model.spec;
    q.graph = model.graph;
    q.input_name = model.input_name;
    q.output_name = model.output_name;
    for (const auto& [name, t] : model.params) {
        checkpoint::Int8Record rec;
        rec.shape = t.shape;
        float amax = 0.0f;
        for (float v : t.data) {
            if (!std::isfinite(v)) throw Error("quantize: non-finite weight in '" + name + "'");
            amax = std::max(amax, std::abs(v));
        }
        rec.scale = amax / 127.0f;
        rec.codes.resize(t.data.size(), 0);
        if (rec.scale > 0.0f)
            for (size_t i = 0; i < t.data.size(); ++i)
                rec.codes[i] = static_cast<int8_t>(std::lround(t.data[i] / rec.scale));
        q.tensors[name] = std::move(rec);
        q.trainable[name] = t.requires_grad;
    }
    return q;
}

inline ParamStore dequantize(const QuantizedModel& q) {
    ParamStore out;
    for (const auto& [name, rec] : q.tensors) {
        Tensor t(rec.shape);
        for (size_t i = 0; i < rec.codes.size(); ++i)
            t.data[i] = static_cast<float>(rec.codes[i]) * rec.scale;
        t.requires_grad = q.trainable.at(name);
        out[name] = std::move(t);
    }
    return out;
}

inline TensorMap dequantized_forward(const QuantizedModel& q, const TensorMap& inputs) {
    ParamStore params = dequantize(q);
    return forward(q.graph, inputs, params);
}

inline void save_quantized(const std::string& path, const QuantizedModel& q) {
    checkpoint::write(path, {}, q.tensors);
}

// Loads the int8 records; graph/spec come from the caller (the arch spec in
// the run config), mirroring how fp32 checkpoints are used.
inline QuantizedModel load_quantized(const std::string& path, const nn::Model& reference) {
    auto contents = checkpoint::read(path);
    QuantizedModel q;
    q.spec = reference.spec;
    q.graph = reference.graph;
    q.input_name = reference.input_name;
    q.output_name = reference.output_name;
    for (const auto& [name, p] : reference.params) {
        auto it = contents.quantized.find(name);
        if (it == contents.quantized.end())
            throw FormatError("quantized model: missing tensor '" + name + "'");
        q.tensors[name] = it->second;
        q.trainable[name] = p.requires_grad;
    }
    return q;
}

}  // namespace gseg::quant
