#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace gseg {

class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class ShapeError : public Error {
public:
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

class FormatError : public Error {
public:
    explicit FormatError(const std::string& msg) : Error(msg) {}
};

[[noreturn]] inline void fail(const std::string& msg) { throw Error(msg); }

// Deterministic RNG. mt19937_64 core with hand-rolled distributions so that
// streams are reproducible across standard libraries.
struct Rng {
    std::mt19937_64 eng;

    explicit Rng(uint64_t seed = 0) : eng(seed) {}

    double uniform01() { return static_cast<double>(eng() >> 11) * 0x1.0p-53; }

    float uniform(float lo, float hi) {
        return lo + static_cast<float>(uniform01()) * (hi - lo);
    }

    float normal(float mean = 0.0f, float sd = 1.0f) {
        // Box-Muller, one value per call (second discarded for simplicity)
        double u1 = std::max(uniform01(), 1e-300);
        double u2 = uniform01();
        double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
        return mean + sd * static_cast<float>(z);
    }

    // uniform integer in [0, n)
    uint64_t randint(uint64_t n) { return n ? eng() % n : 0; }

    bool coin() { return (eng() & 1u) != 0; }
};

namespace fp16 {

// Round-to-nearest-even f32 -> IEEE 754 binary16 bit pattern.
inline uint16_t from_f32(float f) {
    uint32_t x;
    std::memcpy(&x, &f, 4);
    uint32_t sign = (x >> 16) & 0x8000u;
    uint32_t mant = x & 0x007fffffu;
    int32_t exp = static_cast<int32_t>((x >> 23) & 0xff) - 127;

    if (exp == 128) {  // inf / nan
        return static_cast<uint16_t>(sign | 0x7c00u | (mant ? 0x0200u : 0u));
    }
    if (exp > 15) {  // overflow -> inf
        return static_cast<uint16_t>(sign | 0x7c00u);
    }
    if (exp >= -14) {  // normal range
        uint32_t m = mant >> 13;
        uint32_t rem = mant & 0x1fffu;
        // round to nearest even on the 13 dropped bits
        if (rem > 0x1000u || (rem == 0x1000u && (m & 1u))) {
            ++m;
            if (m == 0x400u) {  // mantissa overflow bumps the exponent
                m = 0;
                ++exp;
                if (exp > 15) return static_cast<uint16_t>(sign | 0x7c00u);
            }
        }
        return static_cast<uint16_t>(sign | (static_cast<uint32_t>(exp + 15) << 10) | m);
    }
    if (exp >= -25) {  // subnormal half
        uint32_t full = mant | 0x00800000u;
        int shift = -exp - 14 + 13;  // 13 for the f32->f16 mantissa cut
        uint32_t m = full >> shift;
        uint32_t rem = full & ((1u << shift) - 1u);
        uint32_t half = 1u << (shift - 1);
        if (rem > half || (rem == half && (m & 1u))) ++m;
        return static_cast<uint16_t>(sign | m);
    }
    return static_cast<uint16_t>(sign);  // underflow to zero
}

inline float to_f32(uint16_t h) {
    uint32_t sign = static_cast<uint32_t>(h & 0x8000u) << 16;
    uint32_t exp = (h >> 10) & 0x1fu;
    uint32_t mant = h & 0x3ffu;
    uint32_t x;
    if (exp == 0x1f) {
        x = sign | 0x7f800000u | (mant << 13);
    } else if (exp == 0) {
        if (mant == 0) {
            x = sign;
        } else {
            // normalize subnormal
            int e = -1;
            uint32_t m = mant;
            while (!(m & 0x400u)) {
                m <<= 1;
                --e;
            }
            m &= 0x3ffu;
            x = sign | (static_cast<uint32_t>(e - 14 + 127) << 23) | (m << 13);
        }
    } else {
        x = sign | ((exp - 15 + 127) << 23) | (mant << 13);
    }
    float f;
    std::memcpy(&f, &x, 4);
    return f;
}

// f32 value snapped to the nearest representable half value.
inline float round_f32(float f) { return to_f32(from_f32(f)); }

}  // namespace fp16

enum class Precision : uint8_t { F32, F16Emu };

// Dense n-dimensional fp32 array. F16Emu tensors keep their payload in fp32
// storage but every value is exactly representable in binary16.
class Tensor {
public:
    std::vector<int64_t> shape;
    std::vector<float> data;
    Precision precision = Precision::F32;
    bool requires_grad = false;

    Tensor() = default;

    explicit Tensor(std::vector<int64_t> s, float fill = 0.0f)
        : shape(std::move(s)), data(checked_numel(shape), fill) {}

    Tensor(std::vector<int64_t> s, std::vector<float> d)
        : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<size_t>(checked_numel(shape)) != data.size())
            throw ShapeError("tensor: data length does not match shape product");
    }

    Tensor(const Tensor& o)
        : shape(o.shape), data(o.data), precision(o.precision),
          requires_grad(o.requires_grad) {
        if (o.grad_) grad_ = std::make_unique<Tensor>(*o.grad_);
    }

    Tensor(Tensor&&) noexcept = default;

    Tensor& operator=(const Tensor& o) {
        if (this != &o) {
            shape = o.shape;
            data = o.data;
            precision = o.precision;
            requires_grad = o.requires_grad;
            grad_ = o.grad_ ? std::make_unique<Tensor>(*o.grad_) : nullptr;
        }
        return *this;
    }

    Tensor& operator=(Tensor&&) noexcept = default;

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int64_t dim(size_t i) const { return shape.at(i); }
    size_t rank() const { return shape.size(); }

    float* ptr() { return data.data(); }
    const float* ptr() const { return data.data(); }

    float& at(int64_t i) { return data[static_cast<size_t>(i)]; }
    float at(int64_t i) const { return data[static_cast<size_t>(i)]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    const Tensor* grad() const { return grad_.get(); }
    Tensor* grad() { return grad_.get(); }

    void set_grad(Tensor g) {
        if (g.shape != shape)
            throw ShapeError("grad shape must match tensor shape");
        g.precision = Precision::F32;
        grad_ = std::make_unique<Tensor>(std::move(g));
    }

    void accumulate_grad(const Tensor& g) {
        if (g.shape != shape)
            throw ShapeError("grad shape must match tensor shape");
        if (!grad_) {
            grad_ = std::make_unique<Tensor>(g);
            grad_->precision = Precision::F32;
            grad_->requires_grad = false;
        } else {
            for (size_t i = 0; i < data.size(); ++i) grad_->data[i] += g.data[i];
        }
    }

    void clear_grad() { grad_.reset(); }

    static Tensor zeros(std::vector<int64_t> s) { return Tensor(std::move(s)); }

    static Tensor full(std::vector<int64_t> s, float v) { return Tensor(std::move(s), v); }

    static Tensor scalar(float v) { return Tensor({1}, std::vector<float>{v}); }

    static Tensor uniform(std::vector<int64_t> s, float lo, float hi, Rng& rng) {
        Tensor t(std::move(s));
        for (auto& v : t.data) v = rng.uniform(lo, hi);
        return t;
    }

    static Tensor normal(std::vector<int64_t> s, float mean, float sd, Rng& rng) {
        Tensor t(std::move(s));
        for (auto& v : t.data) v = rng.normal(mean, sd);
        return t;
    }

    static int64_t checked_numel(const std::vector<int64_t>& s) {
        int64_t n = 1;
        for (int64_t e : s) {
            if (e <= 0) throw ShapeError("tensor extents must be positive");
            n *= e;
        }
        return n;
    }

private:
    std::unique_ptr<Tensor> grad_;
};

// Storage-level precision cast. F16Emu rounds every element to the nearest
// binary16 value (round-to-nearest-even) and keeps it widened in fp32 storage.
inline Tensor cast_precision(const Tensor& t, Precision mode) {
    if (t.precision == mode) return t;
    Tensor out = t;
    out.precision = mode;
    if (mode == Precision::F16Emu) {
        for (auto& v : out.data) v = fp16::round_f32(v);
    }
    return out;
}

inline std::string shape_str(const std::vector<int64_t>& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

}  // namespace gseg
