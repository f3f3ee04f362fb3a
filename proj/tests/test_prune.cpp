#include <catch2/catch_amalgamated.hpp>

#include "gseg/checkpoint.hpp"
#include "gseg/losses.hpp"
#include "gseg/prune.hpp"
#include "gseg/quantize.hpp"

#include <filesystem>

using namespace gseg;
using namespace gseg::prune;

namespace {

// conv1(3->8) -> relu -> conv2(8->4) -> sigmoid, output protected
nn::Model chain_model(uint64_t seed) {
    nn::Model m;
    GraphBuilder b(m.params, seed);
    int x = b.input("image");
    int c1 = b.conv2d(x, "conv1", 3, 8, 3, 1, 1);
    int r = b.relu(c1, "r");
    int c2 = b.conv2d(r, "conv2", 8, 4, 3, 1, 1);
    int s = b.sigmoid(c2, "prob");
    b.mark_output("prob", s);
    m.graph = b.take();
    return m;
}

}  // namespace

TEST_CASE("dependency graph couples conv1 rows, bias, and conv2 columns") {
    auto m = chain_model(3);
    auto groups = build_dependency_graph(m.graph, m.params);
    REQUIRE(groups.size() == 1);  // conv2's out feeds the output: protected
    const PruneGroup& g = groups[0];
    CHECK(g.channel_count == 8);

    bool rows = false, bias = false, cols = false;
    for (const auto& mem : g.members) {
        if (mem.param == "conv1.w" && mem.axis == 0) rows = true;
        if (mem.param == "conv1.b" && mem.axis == 0) bias = true;
        if (mem.param == "conv2.w" && mem.axis == 1) cols = true;
    }
    CHECK(rows);
    CHECK(bias);
    CHECK(cols);
}

TEST_CASE("concat consumers carry the channel offset of their block") {
    nn::Model m;
    GraphBuilder b(m.params, 5);
    int x = b.input("image");
    int a = b.conv2d(x, "enc", 1, 4, 3, 1, 1);
    int p = b.maxpool2d(a, "pool");
    int u = b.upsample(p, "up");
    int c = b.concat({a, u}, "cat");  // channels: [enc 0..4) [enc-again 4..8)
    int d = b.conv2d(c, "dec", 8, 2, 3, 1, 1);
    int s = b.sigmoid(d, "prob");
    b.mark_output("prob", s);
    m.graph = b.take();

    auto groups = build_dependency_graph(m.graph, m.params);
    REQUIRE(groups.size() == 1);
    // enc's group must own dec.w columns at offsets 0 and 4
    std::set<int64_t> offsets;
    for (const auto& mem : groups[0].members)
        if (mem.param == "dec.w" && mem.axis == 1) offsets.insert(mem.offset);
    CHECK(offsets == std::set<int64_t>({0, 4}));
}

TEST_CASE("group count on U-Net matches an independent channel-walk oracle") {
    nn::ArchSpec spec;
    spec.family = nn::Family::UNet;
    spec.base_channels = 8;
    spec.depth = 3;
    auto m = nn::build_model(spec, 7);
    auto groups = build_dependency_graph(m.graph, m.params);

    // oracle: walk the node list independently, counting conv nodes whose
    // output does not reach a graph output via channel-preserving ops
    const ComputeGraph& g = m.graph;
    std::vector<std::set<int>> feeds(g.nodes.size());  // conv node ids feeding each node's channels
    int conv_count = 0;
    for (size_t id = 0; id < g.nodes.size(); ++id) {
        const Node& n = g.nodes[id];
        switch (n.kind) {
            case OpKind::Conv2d:
                feeds[id] = {static_cast<int>(id)};
                ++conv_count;
                break;
            case OpKind::Concat:
                for (int in : n.inputs)
                    feeds[id].insert(feeds[static_cast<size_t>(in)].begin(),
                                     feeds[static_cast<size_t>(in)].end());
                break;
            case OpKind::Input: break;
            default: feeds[id] = feeds[static_cast<size_t>(n.inputs[0])];
        }
    }
    std::set<int> protected_convs;
    for (const auto& [name, id] : g.outputs)
        protected_convs.insert(feeds[static_cast<size_t>(id)].begin(),
                               feeds[static_cast<size_t>(id)].end());
    size_t expected = static_cast<size_t>(conv_count) - protected_convs.size();
    CHECK(groups.size() == expected);
}

TEST_CASE("attention-gate add merges the two 1x1 conv groups") {
    nn::ArchSpec spec;
    spec.family = nn::Family::AttnSqueezeUNet;
    spec.base_channels = 8;
    spec.depth = 2;
    auto m = nn::build_model(spec, 9);
    auto groups = build_dependency_graph(m.graph, m.params);
    bool merged = false;
    for (const auto& g : groups) {
        bool wg = false, wx = false;
        for (const auto& mem : g.members) {
            if (mem.param.find(".att.wg.w") != std::string::npos && mem.axis == 0) wg = true;
            if (mem.param.find(".att.wx.w") != std::string::npos && mem.axis == 0) wx = true;
        }
        if (wg && wx) merged = true;
    }
    CHECK(merged);
}

TEST_CASE("rank_groups: zero channels rank last, duplicates tie to lower index") {
    auto m = chain_model(11);
    auto groups = build_dependency_graph(m.graph, m.params);
    REQUIRE(groups.size() == 1);

    // zero out channel 5 across all members
    for (const auto& mem : groups[0].members) {
        Tensor& t = m.params[mem.param];
        if (mem.axis == 0) {
            int64_t inner = t.numel() / t.shape[0];
            for (int64_t i = 0; i < inner; ++i) t.at((mem.offset + 5) * inner + i) = 0.0f;
        } else {
            int64_t inner = t.numel() / (t.shape[0] * t.shape[1]);
            for (int64_t o = 0; o < t.shape[0]; ++o)
                for (int64_t i = 0; i < inner; ++i)
                    t.at((o * t.shape[1] + mem.offset + 5) * inner + i) = 0.0f;
        }
    }
    auto ranks = rank_groups(m.params, groups);
    CHECK(ranks[0].importance[5] == 0.0);
    CHECK(ranks[0].ascending[0] == 5);

    // duplicate channel 2's weights into channel 6: equal importance, tie
    // breaks toward index 2
    auto m2 = chain_model(13);
    auto groups2 = build_dependency_graph(m2.graph, m2.params);
    for (const auto& mem : groups2[0].members) {
        Tensor& t = m2.params[mem.param];
        if (mem.axis == 0) {
            int64_t inner = t.numel() / t.shape[0];
            for (int64_t i = 0; i < inner; ++i)
                t.at((mem.offset + 6) * inner + i) = t.at((mem.offset + 2) * inner + i);
        } else {
            int64_t inner = t.numel() / (t.shape[0] * t.shape[1]);
            for (int64_t o = 0; o < t.shape[0]; ++o)
                for (int64_t i = 0; i < inner; ++i)
                    t.at((o * t.shape[1] + mem.offset + 6) * inner + i) =
                        t.at((o * t.shape[1] + mem.offset + 2) * inner + i);
        }
    }
    auto ranks2 = rank_groups(m2.params, groups2);
    CHECK(ranks2[0].importance[2] == Catch::Approx(ranks2[0].importance[6]));
    auto pos2 = std::find(ranks2[0].ascending.begin(), ranks2[0].ascending.end(), 2);
    auto pos6 = std::find(ranks2[0].ascending.begin(), ranks2[0].ascending.end(), 6);
    CHECK(pos2 < pos6);
}

TEST_CASE("rank_groups matches a loop-based slice-norm oracle") {
    auto m = chain_model(17);
    auto groups = build_dependency_graph(m.graph, m.params);
    auto ranks = rank_groups(m.params, groups);
    const Tensor& w1 = m.params["conv1.w"];
    const Tensor& b1 = m.params["conv1.b"];
    const Tensor& w2 = m.params["conv2.w"];
    for (int64_t j = 0; j < 8; ++j) {
        double acc = 0;
        for (int64_t ci = 0; ci < 3; ++ci)
            for (int64_t k = 0; k < 9; ++k) {
                float v = w1.at((j * 3 + ci) * 9 + k);
                acc += static_cast<double>(v) * v;
            }
        acc += static_cast<double>(b1.at(j)) * b1.at(j);
        for (int64_t co = 0; co < 4; ++co)
            for (int64_t k = 0; k < 9; ++k) {
                float v = w2.at((co * 8 + j) * 9 + k);
                acc += static_cast<double>(v) * v;
            }
        CHECK(ranks[0].importance[static_cast<size_t>(j)] ==
              Catch::Approx(std::sqrt(acc)).margin(1e-6));
    }
}

TEST_CASE("pruning 2 of 8 chain channels removes exactly 128 parameters") {
    auto m = chain_model(19);
    auto groups = build_dependency_graph(m.graph, m.params);
    int64_t before = param_count(m.params);
    auto pruned = prune_channels(m, groups, 0.25);  // floor(0.25 * 8) = 2
    int64_t after = param_count(pruned.params);
    // 2 * (3*9 + 1) + 2 * (4*9) = 128
    CHECK(before - after == 128);

    // pruned model still forward-executes
    Rng rng(1);
    Tensor in = Tensor::uniform({1, 3, 8, 8}, 0, 1, rng);
    auto out = forward(pruned.graph, {{"image", in}}, pruned.params);
    CHECK(out.at("prob").shape == std::vector<int64_t>({1, 4, 8, 8}));
}

TEST_CASE("pruning all-zero channels preserves the function") {
    auto m = chain_model(23);
    auto groups = build_dependency_graph(m.graph, m.params);
    // zero the 2 channels that will be dropped at ratio 0.25
    for (const auto& mem : groups[0].members) {
        Tensor& t = m.params[mem.param];
        if (mem.axis != 0 || mem.param != "conv1.w") continue;
        int64_t inner = t.numel() / t.shape[0];
        for (int64_t ch : {1, 4})
            for (int64_t i = 0; i < inner; ++i) t.at(ch * inner + i) = 0.0f;
    }
    m.params["conv1.b"].at(1) = 0.0f;
    m.params["conv1.b"].at(4) = 0.0f;
    // note: conv2 columns for those channels can stay nonzero; a zero
    // producer makes them inert

    Rng rng(29);
    Tensor in = Tensor::uniform({2, 3, 8, 8}, -1, 1, rng);
    auto before = forward(m.graph, {{"image", in}}, m.params);
    auto pruned = prune_channels(m, groups, 0.25);
    auto after = forward(pruned.graph, {{"image", in}}, pruned.params);
    for (int64_t i = 0; i < before.at("prob").numel(); ++i)
        CHECK(std::abs(before.at("prob").at(i) - after.at("prob").at(i)) < 1e-6f);
}

TEST_CASE("50% pruning of U-Net(base 8, depth 3) cuts at least 40% of parameters") {
    nn::ArchSpec spec;
    spec.family = nn::Family::UNet;
    spec.base_channels = 8;
    spec.depth = 3;
    auto m = nn::build_model(spec, 31);
    int64_t before = param_count(m.params);
    auto groups = build_dependency_graph(m.graph, m.params);
    auto pruned = prune_channels(m, groups, 0.5);
    int64_t after = param_count(pruned.params);
    INFO("params " << before << " -> " << after);
    CHECK(static_cast<double>(after) <= 0.6 * static_cast<double>(before));

    Rng rng(3);
    Tensor in = Tensor::uniform({1, 1, 16, 16}, 0, 1, rng);
    auto out = forward(pruned.graph, {{"image", in}}, pruned.params);
    CHECK(out.at("prob").shape == std::vector<int64_t>({1, 1, 16, 16}));
}

TEST_CASE("pruned squeeze and attention models still execute at random ratios") {
    Rng rr(41);
    for (auto family : {nn::Family::SqueezeUNet, nn::Family::AttnSqueezeUNet}) {
        nn::ArchSpec spec;
        spec.family = family;
        spec.base_channels = 8;
        spec.depth = 3;
        auto m = nn::build_model(spec, 37);
        for (int trial = 0; trial < 3; ++trial) {
            double ratio = 0.1 + 0.5 * rr.uniform01();
            auto groups = build_dependency_graph(m.graph, m.params);
            auto pruned = prune_channels(m, groups, ratio);
            CHECK(param_count(pruned.params) < param_count(m.params));
            Rng rng(5);
            Tensor in = Tensor::uniform({1, 1, 16, 16}, 0, 1, rng);
            auto out = forward(pruned.graph, {{"image", in}}, pruned.params);
            CHECK(out.at("prob").shape == std::vector<int64_t>({1, 1, 16, 16}));
        }
    }
}

TEST_CASE("prune rejects bad ratios; groups always retain a channel") {
    auto m = chain_model(43);
    auto groups = build_dependency_graph(m.graph, m.params);
    CHECK_THROWS_AS(prune_channels(m, groups, 0.0), Error);
    CHECK_THROWS_AS(prune_channels(m, groups, 1.0), Error);
    // floor(ratio * count) < count for every ratio < 1, so even the most
    // aggressive legal ratio keeps one channel per group
    auto pruned = prune_channels(m, groups, 0.999);
    CHECK(m.params.at("conv1.w").shape[0] == 8);
    CHECK(pruned.params.at("conv1.w").shape[0] == 1);
    Rng rng(1);
    auto out = forward(pruned.graph, {{"image", Tensor::uniform({1, 3, 8, 8}, 0, 1, rng)}},
                       pruned.params);
    CHECK(out.at("prob").numel() > 0);
}

TEST_CASE("iterative prune-finetune records the dice trace") {
    auto m = chain_model(47);
    int finetuned_epochs = 0;
    auto finetune = [&](nn::Model&, int epochs) { finetuned_epochs += epochs; };
    auto evaluate = [](nn::Model&) { return 0.75; };

    auto trace = iterative_prune_finetune(m, {}, finetune, evaluate);
    CHECK(trace.empty());  // empty schedule: model untouched

    auto m2 = chain_model(53);
    auto trace2 = iterative_prune_finetune(m2, {{0.25, 2}, {0.25, 1}}, finetune, evaluate);
    REQUIRE(trace2.size() == 2);
    CHECK(finetuned_epochs == 3);
    CHECK(trace2[1].params_after < trace2[0].params_after);
}

TEST_CASE("int8 weight quantization: error bound and idempotent codes") {
    auto m = chain_model(59);
    auto q = quant::quantize_weights_int8(m);
    auto back = quant::dequantize(q);
    for (const auto& [name, t] : m.params) {
        float amax = 0.0f;
        for (float v : t.data) amax = std::max(amax, std::abs(v));
        for (int64_t i = 0; i < t.numel(); ++i)
            CHECK(std::abs(back[name].at(i) - t.at(i)) <= amax / 254.0f + 1e-7f);
    }

    // second pass: codes reproduce exactly
    nn::Model round;
    round.spec = m.spec;
    round.graph = m.graph;
    round.params = back;
    auto q2 = quant::quantize_weights_int8(round);
    for (const auto& [name, rec] : q.tensors) CHECK(q2.tensors.at(name).codes == rec.codes);
}

TEST_CASE("weights on the quantization grid forward bitwise-identically") {
    auto m = chain_model(61);
    // snap every parameter onto its own grid first
    auto q0 = quant::quantize_weights_int8(m);
    m.params = quant::dequantize(q0);

    Rng rng(3);
    Tensor in = Tensor::uniform({1, 3, 8, 8}, 0, 1, rng);
    auto direct = forward(m.graph, {{"image", in}}, m.params);
    auto q = quant::quantize_weights_int8(m);
    auto viaq = quant::dequantized_forward(q, {{"image", in}});
    CHECK(direct.at("prob").data == viaq.at("prob").data);
}

TEST_CASE("quantized file is at most 30% of the fp32 checkpoint") {
    // payload must dominate the per-record name headers for the 4-byte vs
    // 1-byte encoding argument to show; base 32 is the smallest comfortable
    nn::ArchSpec spec;
    spec.family = nn::Family::SqueezeUNet;
    spec.base_channels = 32;
    spec.depth = 4;
    auto m = nn::build_model(spec, 67);

    namespace fs = std::filesystem;
    auto fp32 = fs::temp_directory_path() / "gseg_q_fp32.bin";
    auto int8 = fs::temp_directory_path() / "gseg_q_int8.bin";
    checkpoint::write(fp32.string(), m.params);
    auto q = quant::quantize_weights_int8(m);
    quant::save_quantized(int8.string(), q);
    auto s32 = fs::file_size(fp32);
    auto s8 = fs::file_size(int8);
    INFO("fp32 " << s32 << " int8 " << s8);
    CHECK(static_cast<double>(s8) <= 0.30 * static_cast<double>(s32));

    // round trip through the container
    auto loaded = quant::load_quantized(int8.string(), m);
    Rng rng(5);
    Tensor in = Tensor::uniform({1, 1, 16, 16}, 0, 1, rng);
    auto a = quant::dequantized_forward(q, {{"image", in}});
    auto b = quant::dequantized_forward(loaded, {{"image", in}});
    CHECK(a.at("prob").data == b.at("prob").data);
    fs::remove(fp32);
    fs::remove(int8);
}
