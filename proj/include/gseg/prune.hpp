#pragma once

#include <numeric>

#include "gseg/models.hpp"

namespace gseg::prune {

// A prunable channel dimension and every parameter slice coupled to it.
// Group channel j maps to index (offset + j) along `axis` of each member.
struct GroupMember {
    std::string param;
    int axis = 0;       // 0: producer rows / affine, 1: consumer columns
    int64_t offset = 0;
    bool weight = true;  // counted in importance (false for running stats)
};

struct PruneGroup {
    int64_t channel_count = 0;
    std::vector<GroupMember> members;
    std::vector<std::string> producers;  // node names, for diagnostics
};

namespace prune_detail {

struct UnionFind {
    std::vector<int> parent;
    int make() {
        parent.push_back(static_cast<int>(parent.size()));
        return parent.back();
    }
    int find(int x) {
        while (parent[static_cast<size_t>(x)] != x) {
            parent[static_cast<size_t>(x)] = parent[static_cast<size_t>(parent[static_cast<size_t>(x)])];
            x = parent[static_cast<size_t>(x)];
        }
        return x;
    }
    void unite(int a, int b) {
        a = find(a);
        b = find(b);
        if (a != b) parent[static_cast<size_t>(std::max(a, b))] = std::min(a, b);
    }
};

// raw member entry before union-find resolution: (group id, member)
struct RawMember {
    int group;
    GroupMember member;
};

}  // namespace prune_detail

// Walks the model graph, propagating which group owns every channel of every
// node output. Convolutions open a group (their out-channels) and join the
// groups of their input channels; elementwise adds merge groups; concats
// offset them. Groups whose channels reach a graph output are withheld from
// the result (pruning the output head would change the model contract).
inline std::vector<PruneGroup> build_dependency_graph(const ComputeGraph& graph,
                                                      const ParamStore& params) {
    using namespace prune_detail;
    UnionFind uf;
    std::vector<RawMember> raw;
    std::vector<std::string> group_producer;
    // channel map per node: (group id, channel index within that group) per
    // output channel; group -1 marks unowned data channels
    struct Chan {
        int group = -1;
        int64_t index = 0;
    };
    std::vector<std::vector<Chan>> chan(graph.nodes.size());

    // attach one member per (group, consecutive channel run): member offset
    // is chosen so that group channel c maps to position offset + c
    auto attach_runs = [&](const std::vector<Chan>& map,
                           const std::function<void(int, int64_t)>& emit) {
        size_t j = 0;
        while (j < map.size()) {
            int g = map[j].group;
            int64_t c0 = map[j].index;
            size_t start = j;
            while (j < map.size() && map[j].group == g &&
                   map[j].index == c0 + static_cast<int64_t>(j - start))
                ++j;
            if (g >= 0) emit(g, static_cast<int64_t>(start) - c0);
        }
    };

    for (size_t id = 0; id < graph.nodes.size(); ++id) {
        const Node& n = graph.nodes[id];
        switch (n.kind) {
            case OpKind::Input: {
                chan[id] = {};  // data channels, unowned
                break;
            }
            case OpKind::Conv2d: {
                const Tensor& w = params.at(n.params[0]);
                const auto& in_map = chan[static_cast<size_t>(n.inputs[0])];
                if (!in_map.empty()) {
                    if (static_cast<int64_t>(in_map.size()) != w.shape[1])
                        throw Error("prune: channel map mismatch at node '" + n.name + "'");
                    attach_runs(in_map, [&](int g, int64_t off) {
                        raw.push_back({g, {n.params[0], 1, off, true}});
                    });
                }
                int g = uf.make();
                group_producer.push_back(n.name);
                raw.push_back({g, {n.params[0], 0, 0, true}});
                raw.push_back({g, {n.params[1], 0, 0, true}});
                chan[id].resize(static_cast<size_t>(w.shape[0]));
                for (int64_t c = 0; c < w.shape[0]; ++c)
                    chan[id][static_cast<size_t>(c)] = {g, c};
                break;
            }
            case OpKind::BatchNorm: {
                const auto& in_map = chan[static_cast<size_t>(n.inputs[0])];
                chan[id] = in_map;
                attach_runs(in_map, [&](int g, int64_t off) {
                    raw.push_back({g, {n.params[0], 0, off, true}});
                    raw.push_back({g, {n.params[1], 0, off, true}});
                    raw.push_back({g, {n.params[2], 0, off, false}});  // running mean
                    raw.push_back({g, {n.params[3], 0, off, false}});  // running var
                });
                break;
            }
            case OpKind::ReLU:
            case OpKind::Sigmoid:
            case OpKind::Scale:
            case OpKind::MaxPool2d:
            case OpKind::UpsampleNearest:
            case OpKind::GlobalAvgPool:
                chan[id] = chan[static_cast<size_t>(n.inputs[0])];
                break;
            case OpKind::Concat: {
                for (int in : n.inputs) {
                    const auto& m = chan[static_cast<size_t>(in)];
                    chan[id].insert(chan[id].end(), m.begin(), m.end());
                }
                break;
            }
            case OpKind::Add: {
                const auto& a = chan[static_cast<size_t>(n.inputs[0])];
                const auto& b = chan[static_cast<size_t>(n.inputs[1])];
                if (a.size() != b.size())
                    throw Error("prune: add operands disagree at node '" + n.name + "'");
                for (size_t j = 0; j < a.size(); ++j) {
                    if (a[j].group >= 0 && b[j].group >= 0) {
                        if (a[j].index != b[j].index)
                            throw Error("prune: add misaligns group channels at node '" +
                                        n.name + "'");
                        uf.unite(a[j].group, b[j].group);
                    }
                }
                chan[id] = a;
                break;
            }
            case OpKind::Mul: {
                const auto& a = chan[static_cast<size_t>(n.inputs[0])];
                const auto& b = chan[static_cast<size_t>(n.inputs[1])];
                if (a.size() == b.size() && !a.empty()) {
                    for (size_t j = 0; j < a.size(); ++j)
                        if (a[j].group >= 0 && b[j].group >= 0) uf.unite(a[j].group, b[j].group);
                    chan[id] = a;
                } else {
                    chan[id] = a;  // channel-broadcast mask leaves the lhs map
                }
                break;
            }
            default:
                throw Error(std::string("prune: unsupported op '") + op_name(n.kind) +
                            "' at node '" + n.name + "' in a dependency path");
        }
    }

    // groups reaching any graph output stay untouched
    std::set<int> protected_groups;
    for (const auto& [name, id] : graph.outputs)
        for (const auto& c : chan[static_cast<size_t>(id)])
            if (c.group >= 0) protected_groups.insert(uf.find(c.group));

    std::map<int, PruneGroup> grouped;
    for (auto& rm : raw) {
        int root = uf.find(rm.group);
        if (protected_groups.count(root)) continue;
        PruneGroup& pg = grouped[root];
        pg.members.push_back(std::move(rm.member));
        const std::string& prod = group_producer[static_cast<size_t>(rm.group)];
        if (std::find(pg.producers.begin(), pg.producers.end(), prod) == pg.producers.end())
            pg.producers.push_back(prod);
    }
    std::vector<PruneGroup> out;
    for (auto& [root, pg] : grouped) {
        // channel count from the first producer-side member
        for (const auto& m : pg.members)
            if (m.axis == 0 && m.offset == 0) {
                pg.channel_count = params.at(m.param).shape[0];
                break;
            }
        out.push_back(std::move(pg));
    }
    return out;
}

// L2 importance per channel aggregated over all trainable member slices;
// returns per-group channel orderings, least important first, ties broken
// toward the lower index.
struct GroupRanking {
    std::vector<double> importance;       // per channel
    std::vector<int64_t> ascending;       // channel indices sorted by importance
};

inline std::vector<GroupRanking> rank_groups(const ParamStore& params,
                                             const std::vector<PruneGroup>& groups) {
    std::vector<GroupRanking> out;
    out.reserve(groups.size());
    for (const auto& g : groups) {
        GroupRanking r;
        r.importance.assign(static_cast<size_t>(g.channel_count), 0.0);
        for (const auto& m : g.members) {
            if (!m.weight) continue;
            const Tensor& t = params.at(m.param);
            int64_t axis_len = t.shape[static_cast<size_t>(m.axis)];
            int64_t inner = 1;
            for (size_t d = static_cast<size_t>(m.axis) + 1; d < t.rank(); ++d) inner *= t.shape[d];
            int64_t outer = t.numel() / (axis_len * inner);
            for (int64_t j = 0; j < g.channel_count; ++j) {
                int64_t idx = m.offset + j;
                double acc = 0.0;
                for (int64_t o = 0; o < outer; ++o)
                    for (int64_t i = 0; i < inner; ++i) {
                        float v = t.at((o * axis_len + idx) * inner + i);
                        acc += static_cast<double>(v) * v;
                    }
                r.importance[static_cast<size_t>(j)] += acc;
            }
        }
        for (auto& v : r.importance) v = std::sqrt(v);
        r.ascending.resize(static_cast<size_t>(g.channel_count));
        std::iota(r.ascending.begin(), r.ascending.end(), 0);
        std::stable_sort(r.ascending.begin(), r.ascending.end(), [&](int64_t a, int64_t b) {
            return r.importance[static_cast<size_t>(a)] < r.importance[static_cast<size_t>(b)];
        });
        out.push_back(std::move(r));
    }
    return out;
}

namespace prune_detail {

inline Tensor slice_axes(const Tensor& t, const std::map<int, std::vector<bool>>& keep) {
    std::vector<int64_t> new_shape = t.shape;
    for (const auto& [axis, mask] : keep) {
        int64_t kept = 0;
        for (bool k : mask) kept += k;
        new_shape[static_cast<size_t>(axis)] = kept;
    }
    Tensor out(new_shape);
    out.requires_grad = t.requires_grad;
    out.precision = t.precision;

    // walk source indices, copying rows that survive every axis mask
    std::vector<int64_t> idx(t.rank(), 0);
    std::vector<int64_t> out_strides(t.rank(), 1), in_strides(t.rank(), 1);
    for (int d = static_cast<int>(t.rank()) - 2; d >= 0; --d) {
        out_strides[static_cast<size_t>(d)] =
            out_strides[static_cast<size_t>(d + 1)] * new_shape[static_cast<size_t>(d + 1)];
        in_strides[static_cast<size_t>(d)] =
            in_strides[static_cast<size_t>(d + 1)] * t.shape[static_cast<size_t>(d + 1)];
    }
    std::function<void(size_t, int64_t, int64_t)> walk = [&](size_t dim, int64_t in_off,
                                                             int64_t out_off) {
        if (dim == t.rank()) {
            out.at(out_off) = t.at(in_off);
            return;
        }
        auto kit = keep.find(static_cast<int>(dim));
        int64_t oi = 0;
        for (int64_t i = 0; i < t.shape[dim]; ++i) {
            if (kit != keep.end() && !kit->second[static_cast<size_t>(i)]) continue;
            walk(dim + 1, in_off + i * in_strides[dim], out_off + oi * out_strides[dim]);
            ++oi;
        }
    };
    walk(0, 0, 0);
    return out;
}

}  // namespace prune_detail

// Removes the floor(ratio * channels) least-important channels of every
// group. The graph is untouched (all shapes derive from parameters); only
// the parameter store is rewritten.
inline nn::Model prune_channels(const nn::Model& model, const std::vector<PruneGroup>& groups,
                                double ratio) {
    if (ratio <= 0.0 || ratio >= 1.0)
        throw Error("prune: ratio must sit strictly inside (0, 1)");
    auto rankings = rank_groups(model.params, groups);

    // per-param, per-axis keep masks
    std::map<std::string, std::map<int, std::vector<bool>>> keep;
    for (size_t gi = 0; gi < groups.size(); ++gi) {
        const PruneGroup& g = groups[gi];
        auto drop = static_cast<int64_t>(ratio * static_cast<double>(g.channel_count));
        if (drop == 0) continue;
        if (drop >= g.channel_count)
            throw Error("prune: group led by '" +
                        (g.producers.empty() ? std::string("?") : g.producers.front()) +
                        "' would lose every channel");
        for (const auto& m : g.members) {
            auto& mask = keep[m.param][m.axis];
            if (mask.empty())
                mask.assign(static_cast<size_t>(model.params.at(m.param)
                                                    .shape[static_cast<size_t>(m.axis)]),
                            true);
            for (int64_t k = 0; k < drop; ++k)
                mask[static_cast<size_t>(m.offset + rankings[gi].ascending[static_cast<size_t>(k)])] =
                    false;
        }
    }

    nn::Model out;
    out.spec = model.spec;
    out.graph = model.graph;
    out.input_name = model.input_name;
    out.output_name = model.output_name;
    for (const auto& [name, t] : model.params) {
        auto it = keep.find(name);
        out.params[name] = it == keep.end() ? t : prune_detail::slice_axes(t, it->second);
    }
    return out;
}

// Alternating prune / finetune driver. The callbacks keep the module free of
// any training-loop dependency; the per-stage Dice trace is the interesting
// output (the immediate post-prune dip and its partial recovery).
struct PruneStage {
    double ratio = 0.0;
    double dice_before = 0.0;
    double dice_after_prune = 0.0;
    double dice_after_finetune = 0.0;
    int64_t params_after = 0;
};

inline std::vector<PruneStage> iterative_prune_finetune(
    nn::Model& model, const std::vector<std::pair<double, int>>& schedule,
    const std::function<void(nn::Model&, int)>& finetune,
    const std::function<double(nn::Model&)>& evaluate) {
    std::vector<PruneStage> trace;
    for (const auto& [ratio, epochs] : schedule) {
        PruneStage stage;
        stage.ratio = ratio;
        stage.dice_before = evaluate(model);
        auto groups = build_dependency_graph(model.graph, model.params);
        model = prune_channels(model, groups, ratio);
        stage.dice_after_prune = evaluate(model);
        if (epochs > 0) finetune(model, epochs);
        stage.dice_after_finetune = evaluate(model);
        stage.params_after = param_count(model.params);
        trace.push_back(stage);
    }
    return trace;
}

}  // namespace gseg::prune
