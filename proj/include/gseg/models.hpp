#pragma once

#include "gseg/executor.hpp"
#include "gseg/graph.hpp"

namespace gseg::nn {

enum class Family : uint8_t { UNet, SqueezeUNet, AttnSqueezeUNet };

inline const char* family_name(Family f) {
    switch (f) {
        case Family::UNet: return "unet";
        case Family::SqueezeUNet: return "squeeze_unet";
        case Family::AttnSqueezeUNet: return "attn_squeeze_unet";
    }
    return "?";
}

inline Family family_from_string(const std::string& s) {
    if (s == "unet") return Family::UNet;
    if (s == "squeeze_unet") return Family::SqueezeUNet;
    if (s == "attn_squeeze_unet") return Family::AttnSqueezeUNet;
    throw Error("unknown architecture '" + s + "'");
}

struct ArchSpec {
    Family family = Family::AttnSqueezeUNet;
    int base_channels = 8;
    int depth = 3;
    int in_channels = 1;
    int out_channels = 1;

    void validate() const {
        if (depth < 2) throw Error("arch spec: depth must be >= 2");
        if (base_channels < 4) throw Error("arch spec: base_channels must be >= 4");
        if (in_channels < 1 || out_channels < 1)
            throw Error("arch spec: channel counts must be positive");
    }

    // smallest input side the encoder/decoder round trip supports
    int min_side() const { return 1 << (depth - 1); }
};

// Full-size configurations the parameter budgets are quoted against.
inline ArchSpec reference_config(Family f) {
    ArchSpec s;
    s.family = f;
    s.base_channels = 64;
    s.depth = 5;
    s.in_channels = 1;
    s.out_channels = 1;
    return s;
}

struct Model {
    ArchSpec spec;
    ComputeGraph graph;
    ParamStore params;
    std::string input_name = "image";
    std::string output_name = "prob";
};

namespace build_detail {

inline int double_conv(GraphBuilder& b, int x, const std::string& name, int cin, int cout) {
    x = b.conv2d(x, name + ".c1", cin, cout, 3, 1, 1);
    x = b.batch_norm(x, name + ".n1", cout);
    x = b.relu(x, name + ".r1");
    x = b.conv2d(x, name + ".c2", cout, cout, 3, 1, 1);
    x = b.batch_norm(x, name + ".n2", cout);
    x = b.relu(x, name + ".r2");
    return x;
}

// squeeze 1x1 down to cout/8, then parallel 1x1 / 3x3 expands concatenated
inline int fire(GraphBuilder& b, int x, const std::string& name, int cin, int cout) {
    int s = std::max(1, cout / 8);
    int e = cout / 2;
    x = b.conv2d(x, name + ".sq", cin, s, 1);
    x = b.batch_norm(x, name + ".sqn", s);
    x = b.relu(x, name + ".sqr");
    int e1 = b.conv2d(x, name + ".e1", s, e, 1);
    int e3 = b.conv2d(x, name + ".e3", s, e, 3, 1, 1);
    int c = b.concat({e1, e3}, name + ".cat");
    c = b.batch_norm(c, name + ".n", cout);
    return b.relu(c, name + ".r");
}

// additive attention gate: mask = sigmoid(psi(relu(Wg*g + Wx*x))), applied
// onto the skip features x
inline int attention_gate(GraphBuilder& b, int skip, int gate, const std::string& name, int c) {
    int f = std::max(4, c / 16);
    int wg = b.conv2d(gate, name + ".wg", c, f, 1);
    int wx = b.conv2d(skip, name + ".wx", c, f, 1);
    int a = b.add(wg, wx, name + ".add");
    a = b.relu(a, name + ".r");
    a = b.conv2d(a, name + ".psi", f, 1, 1);
    a = b.sigmoid(a, name + ".mask");
    return b.mul(skip, a, name + ".gated");
}

}  // namespace build_detail

inline Model build_model(const ArchSpec& spec, uint64_t seed = 0) {
    spec.validate();
    Model m;
    m.spec = spec;
    GraphBuilder b(m.params, seed);
    using namespace build_detail;

    std::vector<int> ch(static_cast<size_t>(spec.depth));
    for (int i = 0; i < spec.depth; ++i) ch[static_cast<size_t>(i)] = spec.base_channels << i;

    int x = b.input(m.input_name);
    std::vector<int> skips;

    if (spec.family == Family::UNet) {
        x = double_conv(b, x, "enc0", spec.in_channels, ch[0]);
        skips.push_back(x);
        for (int i = 1; i < spec.depth; ++i) {
            x = b.maxpool2d(x, "pool" + std::to_string(i));
            x = double_conv(b, x, "enc" + std::to_string(i), ch[static_cast<size_t>(i - 1)],
                            ch[static_cast<size_t>(i)]);
            if (i != spec.depth - 1) skips.push_back(x);
        }
        for (int i = spec.depth - 2; i >= 0; --i) {
            std::string nm = "dec" + std::to_string(i);
            x = b.upsample(x, nm + ".us");
            x = b.conv2d(x, nm + ".up", ch[static_cast<size_t>(i + 1)], ch[static_cast<size_t>(i)],
                         3, 1, 1);
            x = b.batch_norm(x, nm + ".upn", ch[static_cast<size_t>(i)]);
            x = b.relu(x, nm + ".upr");
            x = b.concat({skips[static_cast<size_t>(i)], x}, nm + ".cat");
            x = double_conv(b, x, nm, 2 * ch[static_cast<size_t>(i)], ch[static_cast<size_t>(i)]);
        }
    } else {
        bool attn = spec.family == Family::AttnSqueezeUNet;
        x = b.conv2d(x, "stem", spec.in_channels, ch[0], 3, 1, 1);
        x = b.batch_norm(x, "stemn", ch[0]);
        x = b.relu(x, "stemr");
        x = fire(b, x, "enc0.f", ch[0], ch[0]);
        skips.push_back(x);
        for (int i = 1; i < spec.depth; ++i) {
            std::string nm = "enc" + std::to_string(i);
            x = b.maxpool2d(x, "pool" + std::to_string(i));
            x = fire(b, x, nm + ".f1", ch[static_cast<size_t>(i - 1)], ch[static_cast<size_t>(i)]);
            x = fire(b, x, nm + ".f2", ch[static_cast<size_t>(i)], ch[static_cast<size_t>(i)]);
            if (i != spec.depth - 1) skips.push_back(x);
        }
        for (int i = spec.depth - 2; i >= 0; --i) {
            std::string nm = "dec" + std::to_string(i);
            x = b.upsample(x, nm + ".us");
            x = fire(b, x, nm + ".up", ch[static_cast<size_t>(i + 1)], ch[static_cast<size_t>(i)]);
            int skip = skips[static_cast<size_t>(i)];
            if (attn)
                skip = attention_gate(b, skip, x, nm + ".att", ch[static_cast<size_t>(i)]);
            x = b.concat({skip, x}, nm + ".cat");
            x = fire(b, x, nm + ".f", 2 * ch[static_cast<size_t>(i)], ch[static_cast<size_t>(i)]);
        }
    }

    x = b.conv2d(x, "head", ch[0], spec.out_channels, 1);
    x = b.sigmoid(x, "prob");
    b.mark_output("prob", x);
    m.graph = b.take();
    return m;
}

enum class LossKind : uint8_t { Dice, Bce, Mcc };

inline const char* loss_name(LossKind k) {
    switch (k) {
        case LossKind::Dice: return "dice";
        case LossKind::Bce: return "bce";
        case LossKind::Mcc: return "mcc";
    }
    return "?";
}

inline LossKind loss_from_string(const std::string& s) {
    if (s == "dice") return LossKind::Dice;
    if (s == "bce") return LossKind::Bce;
    if (s == "mcc") return LossKind::Mcc;
    throw Error("unknown loss '" + s + "'");
}

// Extends a model graph with a mask input and a scalar loss output "loss".
inline ComputeGraph with_loss(const Model& m, LossKind kind,
                              const std::string& target_name = "mask") {
    ComputeGraph g = m.graph;
    Node target;
    target.kind = OpKind::Input;
    target.name = target_name;
    int t = g.add(std::move(target));
    int pred = g.output_id(m.output_name);

    Node loss;
    loss.name = "loss";
    loss.inputs = {pred, t};
    switch (kind) {
        case LossKind::Dice: loss.kind = OpKind::DiceLoss; break;
        case LossKind::Bce: loss.kind = OpKind::BceLoss; break;
        case LossKind::Mcc: loss.kind = OpKind::MccLoss; break;
    }
    int l = g.add(std::move(loss));
    g.mark_output("loss", l);
    return g;
}

}  // namespace gseg::nn
