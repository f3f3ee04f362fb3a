#include <catch2/catch_amalgamated.hpp>

#include "gseg/checkpoint.hpp"
#include "gseg/tensor.hpp"

#include <cstdio>
#include <filesystem>

using namespace gseg;

TEST_CASE("tensor shape and data stay consistent") {
    Tensor t({2, 3, 4});
    CHECK(t.numel() == 24);
    CHECK_THROWS_AS(Tensor({2, 0, 4}), ShapeError);
    CHECK_THROWS_AS(Tensor({2, 2}, std::vector<float>{1.0f, 2.0f}), ShapeError);
}

TEST_CASE("grad slot keeps shape and f32 precision") {
    Tensor t({4});
    t.requires_grad = true;
    Tensor g({4}, std::vector<float>{1, 2, 3, 4});
    g.precision = Precision::F16Emu;
    t.set_grad(g);
    REQUIRE(t.grad() != nullptr);
    CHECK(t.grad()->precision == Precision::F32);
    CHECK_THROWS_AS(t.set_grad(Tensor({5})), ShapeError);

    t.accumulate_grad(Tensor({4}, std::vector<float>{1, 1, 1, 1}));
    CHECK(t.grad()->at(2) == 4.0f);

    Tensor copy = t;  // deep copy carries the grad
    copy.grad()->at(0) = 99.0f;
    CHECK(t.grad()->at(0) == 2.0f);
}

TEST_CASE("half rounding: exactly representable values survive") {
    CHECK(fp16::round_f32(1.0f) == 1.0f);
    CHECK(fp16::round_f32(-2.5f) == -2.5f);
    CHECK(fp16::round_f32(0.0f) == 0.0f);
    CHECK(fp16::round_f32(65504.0f) == 65504.0f);  // max finite half
}

TEST_CASE("half rounding: 1 + 2^-12 rounds back to 1") {
    float v = 1.000244140625f;  // 1 + 2^-12, below half precision
    CHECK(fp16::round_f32(v) == 1.0f);
}

TEST_CASE("half rounding obeys the 2^-11 relative bound on normal values") {
    Rng rng(7);
    for (int i = 0; i < 10000; ++i) {
        float mag = std::pow(10.0f, rng.uniform(-4.0f, 4.0f));
        float x = rng.coin() ? mag : -mag;
        float r = fp16::round_f32(x);
        CHECK(std::abs(r - x) <= std::abs(x) * (1.0f / 2048.0f));
    }
}

TEST_CASE("half rounding uses round-to-nearest-even") {
    // 2049 is exactly between 2048 and 2050 at half precision (ulp = 2);
    // nearest-even picks 2048
    CHECK(fp16::round_f32(2049.0f) == 2048.0f);
    CHECK(fp16::round_f32(2051.0f) == 2052.0f);
}

TEST_CASE("cast_precision is identity for same mode and idempotent") {
    Rng rng(3);
    Tensor t = Tensor::uniform({64}, -10.0f, 10.0f, rng);
    Tensor same = cast_precision(t, Precision::F32);
    CHECK(same.data == t.data);

    Tensor h = cast_precision(t, Precision::F16Emu);
    CHECK(h.precision == Precision::F16Emu);
    Tensor h2 = cast_precision(cast_precision(h, Precision::F32), Precision::F16Emu);
    CHECK(h2.data == h.data);
}

TEST_CASE("rng streams are reproducible") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.uniform(-1, 1) == b.uniform(-1, 1));
}

TEST_CASE("checkpoint container round trips bit-exactly") {
    Rng rng(11);
    std::map<std::string, Tensor> tensors;
    tensors["enc0.c1.w"] = Tensor::normal({8, 1, 3, 3}, 0.0f, 1.0f, rng);
    tensors["enc0.c1.b"] = Tensor::uniform({8}, -2.0f, 2.0f, rng);
    tensors["weird/name with spaces"] = Tensor::uniform({3, 5}, -1e6f, 1e6f, rng);

    auto path = std::filesystem::temp_directory_path() / "gseg_ckpt_test.bin";
    checkpoint::write(path.string(), tensors);
    auto back = checkpoint::read(path.string());

    REQUIRE(back.tensors.size() == tensors.size());
    for (auto& [name, t] : tensors) {
        REQUIRE(back.tensors.count(name) == 1);
        CHECK(back.tensors[name].shape == t.shape);
        CHECK(std::memcmp(back.tensors[name].ptr(), t.ptr(), t.data.size() * 4) == 0);
    }
    std::filesystem::remove(path);
}

TEST_CASE("checkpoint rejects bad magic and truncation") {
    auto path = std::filesystem::temp_directory_path() / "gseg_ckpt_bad.bin";
    {
        std::ofstream os(path, std::ios::binary);
        os << "NOPE1234";
    }
    CHECK_THROWS_AS(checkpoint::read(path.string()), FormatError);
    {
        std::ofstream os(path, std::ios::binary);
        os << "GSEG";
        uint32_t v = 1;
        os.write(reinterpret_cast<const char*>(&v), 4);
        uint32_t len = 100;  // claims a name longer than the file
        os.write(reinterpret_cast<const char*>(&len), 4);
        os << "abc";
    }
    CHECK_THROWS_AS(checkpoint::read(path.string()), FormatError);
    std::filesystem::remove(path);
}

TEST_CASE("checkpoint stores int8 records with scales") {
    std::map<std::string, checkpoint::Int8Record> q;
    q["w"].shape = {2, 2};
    q["w"].codes = {-127, 0, 64, 127};
    q["w"].scale = 0.03125f;
    auto path = std::filesystem::temp_directory_path() / "gseg_ckpt_q.bin";
    checkpoint::write(path.string(), {}, q);
    auto back = checkpoint::read(path.string());
    REQUIRE(back.quantized.count("w") == 1);
    CHECK(back.quantized["w"].codes == q["w"].codes);
    CHECK(back.quantized["w"].scale == q["w"].scale);
    std::filesystem::remove(path);
}
