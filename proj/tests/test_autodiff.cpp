#include <catch2/catch_amalgamated.hpp>

#include "gseg/executor.hpp"
#include "gseg/gradcheck.hpp"
#include "gseg/losses.hpp"
#include "gseg/models.hpp"

using namespace gseg;

namespace {

Tensor t4(int64_t n, int64_t c, int64_t h, int64_t w, std::vector<float> v) {
    return Tensor({n, c, h, w}, std::move(v));
}

}  // namespace

TEST_CASE("conv with a dirac kernel is the identity") {
    ParamStore params;
    GraphBuilder b(params);
    int x = b.input("x");
    int y = b.conv2d(x, "conv", 1, 1, 3, 1, 1);
    b.mark_output("y", y);
    ComputeGraph g = b.take();

    params["conv.w"].data = {0, 0, 0, 0, 1, 0, 0, 0, 0};
    Rng rng(1);
    Tensor in = Tensor::uniform({1, 1, 4, 4}, -2.0f, 2.0f, rng);
    auto out = forward(g, {{"x", in}}, params);
    for (int64_t i = 0; i < in.numel(); ++i) CHECK(out["y"].at(i) == in.at(i));
}

TEST_CASE("conv+relu maps all-zero input to all-zero output") {
    ParamStore params;
    GraphBuilder b(params, 5);
    int x = b.input("x");
    int y = b.conv2d(x, "conv", 2, 3, 3, 1, 1);
    y = b.relu(y, "r");
    b.mark_output("y", y);
    ComputeGraph g = b.take();

    auto out = forward(g, {{"x", Tensor({1, 2, 4, 4})}}, params);
    for (int64_t i = 0; i < out["y"].numel(); ++i) CHECK(out["y"].at(i) == 0.0f);
}

TEST_CASE("conv cross-correlation matches a scalar-loop oracle") {
    // 3x3 input [[1..9]], 2x2 kernel [[1,0],[0,1]], stride 1, no padding
    ParamStore params;
    GraphBuilder b(params);
    int x = b.input("x");
    int y = b.conv2d(x, "conv", 1, 1, 2, 1, 0);
    b.mark_output("y", y);
    ComputeGraph g = b.take();
    const std::vector<float> kern = {1, 0, 0, 1};
    const std::vector<float> img = {1, 2, 3, 4, 5, 6, 7, 8, 9};
    params["conv.w"].data = kern;

    auto out = forward(g, {{"x", t4(1, 1, 3, 3, img)}}, params);
    REQUIRE(out["y"].shape == std::vector<int64_t>({1, 1, 2, 2}));

    // independent oracle: plain cross-correlation loops
    std::vector<float> expect(4, 0.0f);
    for (int oi = 0; oi < 2; ++oi)
        for (int oj = 0; oj < 2; ++oj)
            for (int ki = 0; ki < 2; ++ki)
                for (int kj = 0; kj < 2; ++kj)
                    expect[static_cast<size_t>(oi * 2 + oj)] +=
                        img[static_cast<size_t>((oi + ki) * 3 + (oj + kj))] *
                        kern[static_cast<size_t>(ki * 2 + kj)];
    CHECK(out["y"].data == expect);
    CHECK(expect == std::vector<float>({6, 8, 12, 14}));  // frozen from the oracle
}

TEST_CASE("shape mismatch error names the offending node") {
    ParamStore params;
    GraphBuilder b(params);
    int x = b.input("x");
    int y = b.conv2d(x, "badconv", 3, 4, 3, 1, 1);
    b.mark_output("y", y);
    ComputeGraph g = b.take();
    try {
        forward(g, {{"x", Tensor({1, 2, 4, 4})}}, params);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        CHECK(std::string(e.what()).find("badconv") != std::string::npos);
    }
}

TEST_CASE("sum loss over a conv of ones gives position-count gradients") {
    ParamStore ps;
    GraphBuilder b(ps, 3);
    int x = b.input("x");
    int c = b.conv2d(x, "conv", 1, 1, 2, 1, 0);
    int s = b.sum(c, "loss");
    b.mark_output("loss", s);
    ComputeGraph g2 = b.take();

    // conv of a ones image: d(sum)/d(w_ij) = count of valid positions = 9
    Executor ex(g2);
    ex.forward({{"x", Tensor({1, 1, 4, 4}, 1.0f)}}, ps);
    auto grads = ex.backward("loss");
    REQUIRE(grads.count("conv.w") == 1);
    for (float v : grads["conv.w"].data) CHECK(v == 9.0f);
    for (float v : grads["conv.b"].data) CHECK(v == 9.0f);
}

TEST_CASE("parameter not reaching the loss gets a zero gradient") {
    ParamStore ps;
    GraphBuilder b(ps, 4);
    int x = b.input("x");
    int used = b.conv2d(x, "used", 1, 1, 3, 1, 1);
    int dead = b.conv2d(x, "dead", 1, 1, 3, 1, 1);
    (void)dead;
    int s = b.sum(used, "loss");
    b.mark_output("loss", s);
    ComputeGraph g = b.take();

    Executor ex(g);
    Rng rng(2);
    ex.forward({{"x", Tensor::uniform({1, 1, 4, 4}, -1, 1, rng)}}, ps);
    auto grads = ex.backward("loss");
    CHECK(grads.count("dead.w") == 0);  // simply absent: zero by definition
    CHECK(grads.count("used.w") == 1);
}

TEST_CASE("backward rejects non-scalar loss and backward-before-forward") {
    ParamStore ps;
    GraphBuilder b(ps, 4);
    int x = b.input("x");
    int y = b.conv2d(x, "c", 1, 2, 3, 1, 1);
    b.mark_output("y", y);
    ComputeGraph g = b.take();

    Executor ex(g);
    CHECK_THROWS_WITH(ex.backward("y"), Catch::Matchers::ContainsSubstring("before forward"));
    Rng rng(2);
    ex.forward({{"x", Tensor::uniform({1, 1, 4, 4}, -1, 1, rng)}}, ps);
    CHECK_THROWS_WITH(ex.backward("y"), Catch::Matchers::ContainsSubstring("not scalar"));
}

TEST_CASE("gradients accumulate across multiple consumer paths") {
    ParamStore ps;
    GraphBuilder b(ps, 9);
    int x = b.input("x");
    int c = b.conv2d(x, "c", 1, 1, 3, 1, 1);
    int a = b.add(c, c, "twice");
    int s = b.sum(a, "loss");
    b.mark_output("loss", s);
    ComputeGraph g = b.take();

    Executor ex(g);
    ex.forward({{"x", Tensor({1, 1, 4, 4}, 1.0f)}}, ps);
    auto grads = ex.backward("loss");
    // every path contributes once: gradient is twice the single-path value
    for (float v : grads["c.b"].data) CHECK(v == 32.0f);  // 2 * 16 positions
}

namespace {

// builds a single-op graph wrapped to a scalar loss and runs grad_check
GradCheckReport check_op(const std::function<int(GraphBuilder&, int)>& make,
                         std::vector<int64_t> in_shape, uint64_t seed) {
    ParamStore ps;
    GraphBuilder b(ps, seed);
    int x = b.input("x");
    int y = make(b, x);
    // squash to keep the sum well-conditioned, then reduce
    y = b.sigmoid(y, "sig");
    int s = b.sum(y, "loss");
    b.mark_output("loss", s);
    ComputeGraph g = b.take();

    Rng rng(seed + 100);
    TensorMap inputs;
    inputs["x"] = Tensor::uniform(std::move(in_shape), -1.5f, 1.5f, rng);
    return grad_check(g, inputs, ps, "loss", 1e-3);
}

}  // namespace

TEST_CASE("per-op gradients match central finite differences") {
    SECTION("conv2d stride 1 pad 1") {
        auto r = check_op([](GraphBuilder& b, int x) { return b.conv2d(x, "op", 2, 3, 3, 1, 1); },
                          {2, 2, 6, 6}, 1);
        INFO("worst rel err " << r.worst());
        CHECK(r.passed);
    }
    SECTION("conv2d stride 2 no pad") {
        auto r = check_op([](GraphBuilder& b, int x) { return b.conv2d(x, "op", 2, 2, 3, 2, 0); },
                          {1, 2, 7, 7}, 2);
        CHECK(r.passed);
    }
    SECTION("linear") {
        auto r = check_op([](GraphBuilder& b, int x) { return b.linear(x, "op", 6, 4); },
                          {3, 6}, 3);
        CHECK(r.passed);
    }
    SECTION("batch norm (train mode)") {
        auto r = check_op(
            [](GraphBuilder& b, int x) {
                int c = b.conv2d(x, "pre", 2, 4, 3, 1, 1);
                return b.batch_norm(c, "op", 4);
            },
            {2, 2, 5, 5}, 4);
        CHECK(r.passed);
    }
    SECTION("maxpool + upsample + concat") {
        auto r = check_op(
            [](GraphBuilder& b, int x) {
                int c = b.conv2d(x, "pre", 1, 2, 3, 1, 1);
                int p = b.maxpool2d(c, "pool");
                int u = b.upsample(p, "up");
                return b.concat({c, u}, "cat");
            },
            {1, 1, 6, 6}, 5);
        CHECK(r.passed);
    }
    SECTION("relu + add + mul + scale") {
        auto r = check_op(
            [](GraphBuilder& b, int x) {
                int c1 = b.conv2d(x, "c1", 1, 2, 3, 1, 1);
                int c2 = b.conv2d(x, "c2", 1, 2, 3, 1, 1);
                int rl = b.relu(c1, "r");
                int ad = b.add(rl, c2, "a");
                int ml = b.mul(ad, c2, "m");
                return b.scale(ml, "s", 0.5f);
            },
            {1, 1, 5, 5}, 6);
        CHECK(r.passed);
    }
    SECTION("channel-broadcast mul (attention mask pattern)") {
        auto r = check_op(
            [](GraphBuilder& b, int x) {
                int feats = b.conv2d(x, "f", 1, 3, 3, 1, 1);
                int mask = b.conv2d(x, "m", 1, 1, 3, 1, 1);
                int sm = b.sigmoid(mask, "sm");
                return b.mul(feats, sm, "gated");
            },
            {2, 1, 5, 5}, 7);
        CHECK(r.passed);
    }
    SECTION("global average pool") {
        auto r = check_op(
            [](GraphBuilder& b, int x) {
                int c = b.conv2d(x, "pre", 1, 3, 3, 1, 1);
                return b.global_avg_pool(c, "op");
            },
            {2, 1, 6, 6}, 8);
        CHECK(r.passed);
    }
    SECTION("sigmoid chain") {
        auto r = check_op([](GraphBuilder& b, int x) { return b.conv2d(x, "op", 1, 1, 3, 1, 1); },
                          {1, 1, 8, 8}, 9);
        CHECK(r.passed);
    }
}

TEST_CASE("loss op gradients match finite differences") {
    auto run = [](nn::LossKind kind, uint64_t seed) {
        ParamStore ps;
        GraphBuilder b(ps, seed);
        int x = b.input("x");
        int t = b.input("t");
        int c = b.conv2d(x, "c", 1, 1, 3, 1, 1);
        int p = b.sigmoid(c, "p");
        int l = kind == nn::LossKind::Dice  ? b.dice_loss(p, t, "loss")
                : kind == nn::LossKind::Bce ? b.bce_loss(p, t, "loss")
                                            : b.mcc_loss(p, t, "loss");
        b.mark_output("loss", l);
        ComputeGraph g = b.take();

        Rng rng(seed);
        TensorMap in;
        in["x"] = Tensor::uniform({2, 1, 4, 4}, -1.0f, 1.0f, rng);
        Tensor mask({2, 1, 4, 4});
        for (auto& v : mask.data) v = rng.coin() ? 1.0f : 0.0f;
        in["t"] = mask;
        return grad_check(g, in, ps, "loss", 1e-3);
    };
    CHECK(run(nn::LossKind::Dice, 21).passed);
    CHECK(run(nn::LossKind::Bce, 22).passed);
    CHECK(run(nn::LossKind::Mcc, 23).passed);
}

TEST_CASE("grad_check flags a planted corrupted gradient") {
    // corrupt by doubling the analytic gradient: scale the graph by 2 but
    // hand grad_check a store whose analytic path sees the unscaled loss is
    // not expressible; instead verify via a direct comparison: a x2-scaled
    // finite difference disagrees with the analytic gradient.
    ParamStore ps;
    GraphBuilder b(ps, 13);
    int x = b.input("x");
    int c = b.conv2d(x, "c", 1, 2, 3, 1, 1);
    int sg = b.sigmoid(c, "s");
    int l = b.sum(sg, "loss");
    b.mark_output("loss", l);
    ComputeGraph g = b.take();

    Rng rng(13);
    TensorMap in{{"x", Tensor::uniform({1, 1, 5, 5}, -1, 1, rng)}};

    Executor ex(g);
    ExecOptions opt;
    opt.training = true;
    opt.update_bn_stats = false;
    ex.forward(in, ps, opt);
    auto grads = ex.backward("loss");
    for (auto& v : grads["c.w"].data) v *= 2.0f;  // the planted fault

    // pit the corrupted analytic gradient against fresh finite differences
    double h = 1e-3;
    bool caught = false;
    Tensor& w = ps["c.w"];
    for (int64_t i = 0; i < w.numel() && !caught; ++i) {
        float keep = w.at(i);
        w.at(i) = keep + static_cast<float>(h);
        ex.forward(in, ps, opt);
        double lp = ex.scalar_f64("loss");
        w.at(i) = keep - static_cast<float>(h);
        ex.forward(in, ps, opt);
        double lm = ex.scalar_f64("loss");
        w.at(i) = keep;
        double numeric = (lp - lm) / (2 * h);
        double a = grads["c.w"].at(i);
        double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 0.01});
        if (rel > 1e-3) caught = true;
    }
    CHECK(caught);
}

TEST_CASE("grad_check passes vacuously with no trainable parameters") {
    ParamStore ps;
    GraphBuilder b(ps, 1);
    int x = b.input("x");
    int s = b.sum(x, "loss");
    b.mark_output("loss", s);
    ComputeGraph g = b.take();
    Rng rng(5);
    auto r = grad_check(g, {{"x", Tensor::uniform({1, 1, 2, 2}, -1, 1, rng)}}, ps, "loss");
    CHECK(r.passed);
    CHECK(r.entries.empty());
}

TEST_CASE("forward is deterministic and reuses its plan") {
    ParamStore ps;
    GraphBuilder b(ps, 17);
    int x = b.input("x");
    int c1 = b.conv2d(x, "c1", 1, 4, 3, 1, 1);
    int r = b.relu(c1, "r");
    int p = b.maxpool2d(r, "p");
    int c2 = b.conv2d(p, "c2", 4, 2, 3, 1, 1);
    int sg = b.sigmoid(c2, "s");
    b.mark_output("y", sg);
    ComputeGraph g = b.take();

    Rng rng(17);
    Tensor in = Tensor::uniform({2, 1, 8, 8}, -1, 1, rng);
    Executor ex(g);
    auto a = ex.forward({{"x", in}}, ps);
    auto bb = ex.forward({{"x", in}}, ps);
    CHECK(a["y"].data == bb["y"].data);
    CHECK(ex.plan_count() == 1);  // static-graph contract: planned once

    // a different batch size forces one replan, then sticks
    Tensor in2 = Tensor::uniform({3, 1, 8, 8}, -1, 1, rng);
    ex.forward({{"x", in2}}, ps);
    ex.forward({{"x", in2}}, ps);
    CHECK(ex.plan_count() == 2);
}

TEST_CASE("relu(x) + relu(-x) equals |x|") {
    ParamStore ps;
    GraphBuilder b(ps);
    int x = b.input("x");
    int r1 = b.relu(x, "r1");
    int neg = b.scale(x, "neg", -1.0f);
    int r2 = b.relu(neg, "r2");
    int s = b.add(r1, r2, "abs");
    b.mark_output("abs", s);
    ComputeGraph g = b.take();

    Rng rng(23);
    Tensor in = Tensor::uniform({1, 1, 8, 8}, -3, 3, rng);
    auto out = forward(g, {{"x", in}}, ps);
    for (int64_t i = 0; i < in.numel(); ++i) CHECK(out["abs"].at(i) == std::abs(in.at(i)));
}

TEST_CASE("concat then complementary split is the identity") {
    ParamStore ps;
    GraphBuilder b(ps);
    int a = b.input("a");
    int c = b.input("c");
    int cat = b.concat({a, c}, "cat");
    b.mark_output("cat", cat);
    ComputeGraph g = b.take();

    Rng rng(29);
    Tensor ta = Tensor::uniform({2, 3, 4, 4}, -1, 1, rng);
    Tensor tc = Tensor::uniform({2, 2, 4, 4}, -1, 1, rng);
    auto out = forward(g, {{"a", ta}, {"c", tc}}, ps);
    const Tensor& y = out["cat"];
    REQUIRE(y.shape == std::vector<int64_t>({2, 5, 4, 4}));
    // split back: channels [0,3) must be a, [3,5) must be c
    for (int64_t n = 0; n < 2; ++n)
        for (int64_t ch = 0; ch < 5; ++ch)
            for (int64_t i = 0; i < 16; ++i) {
                float v = y.at((n * 5 + ch) * 16 + i);
                float expect = ch < 3 ? ta.at((n * 3 + ch) * 16 + i) : tc.at((n * 2 + ch - 3) * 16 + i);
                CHECK(v == expect);
            }
}

TEST_CASE("f16-emulated forward tracks f32 within 1e-2 relative error") {
    ParamStore ps;
    GraphBuilder b(ps, 31);
    int x = b.input("x");
    int c1 = b.conv2d(x, "c1", 1, 4, 3, 1, 1);
    int n1 = b.batch_norm(c1, "n1", 4);
    int r1 = b.relu(n1, "r1");
    int c2 = b.conv2d(r1, "c2", 4, 1, 3, 1, 1);
    int sg = b.sigmoid(c2, "s");
    b.mark_output("y", sg);
    ComputeGraph g = b.take();

    Rng rng(31);
    Tensor in = Tensor::uniform({2, 1, 8, 8}, 0.0f, 1.0f, rng);
    ParamStore ps2 = ps;
    auto f32 = forward(g, {{"x", in}}, ps);
    ExecOptions opt;
    opt.precision = Precision::F16Emu;
    auto f16 = forward(g, {{"x", in}}, ps2, opt);
    CHECK(f16["y"].precision == Precision::F16Emu);
    for (int64_t i = 0; i < f32["y"].numel(); ++i) {
        double a = f32["y"].at(i), h = f16["y"].at(i);
        CHECK(std::abs(a - h) <= 1e-2 * std::max(1.0, std::abs(a)));
    }
}

TEST_CASE("f16-emulated outputs land exactly on the half grid") {
    ParamStore ps;
    GraphBuilder b(ps, 37);
    int x = b.input("x");
    int c = b.conv2d(x, "c", 1, 2, 3, 1, 1);
    b.mark_output("y", c);
    ComputeGraph g = b.take();

    Rng rng(37);
    Tensor in = Tensor::uniform({1, 1, 6, 6}, -1, 1, rng);
    ExecOptions opt;
    opt.precision = Precision::F16Emu;
    auto out = forward(g, {{"x", in}}, ps, opt);
    for (float v : out["y"].data) CHECK(v == fp16::round_f32(v));
}

TEST_CASE("unknown op kind is rejected") {
    ComputeGraph g;
    Node in;
    in.kind = OpKind::Input;
    in.name = "x";
    g.add(std::move(in));
    Node bad;
    bad.kind = static_cast<OpKind>(250);
    bad.name = "mystery";
    bad.inputs = {0};
    g.add(std::move(bad));
    g.mark_output("y", 1);
    ParamStore ps;
    CHECK_THROWS_AS(forward(g, {{"x", Tensor({1, 1, 2, 2})}}, ps), Error);
}
