#pragma once

#include <cstdio>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "gseg/tensor.hpp"

namespace gseg {

// Little-endian tensor container:
//   magic "GSEG" | version u32 | repeat: name_len u32, name bytes,
//   dtype u32 (0 = f32, 1 = i8), rank u32, extents u64[rank],
//   (i8 only) scale f32, payload.
// Round trips are bit-exact for f32 payloads.
namespace checkpoint {

constexpr uint32_t kVersion = 1;
constexpr uint32_t kDtypeF32 = 0;
constexpr uint32_t kDtypeI8 = 1;

struct Int8Record {
    std::vector<int64_t> shape;
    std::vector<int8_t> codes;
    float scale = 0.0f;
};

namespace io_detail {

template <typename T>
void put(std::ostream& os, T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw FormatError("checkpoint: truncated file");
    return v;
}

inline void put_name(std::ostream& os, const std::string& s) {
    put<uint32_t>(os, static_cast<uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_name(std::istream& is) {
    uint32_t len = get<uint32_t>(is);
    if (len > (1u << 20)) throw FormatError("checkpoint: implausible name length");
    std::string s(len, '\0');
    is.read(s.data(), len);
    if (!is) throw FormatError("checkpoint: truncated name");
    return s;
}

inline void put_header(std::ostream& os, const std::string& name, uint32_t dtype,
                       const std::vector<int64_t>& shape) {
    put_name(os, name);
    put<uint32_t>(os, dtype);
    put<uint32_t>(os, static_cast<uint32_t>(shape.size()));
    for (int64_t e : shape) put<uint64_t>(os, static_cast<uint64_t>(e));
}

}  // namespace io_detail

inline void write(const std::string& path, const std::map<std::string, Tensor>& tensors,
                  const std::map<std::string, Int8Record>& quantized = {}) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("checkpoint: cannot open '" + path + "' for writing");
    os.write("GSEG", 4);
    io_detail::put<uint32_t>(os, kVersion);
    for (const auto& [name, t] : tensors) {
        io_detail::put_header(os, name, kDtypeF32, t.shape);
        os.write(reinterpret_cast<const char*>(t.ptr()),
                 static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    }
    for (const auto& [name, q] : quantized) {
        io_detail::put_header(os, name, kDtypeI8, q.shape);
        io_detail::put<float>(os, q.scale);
        os.write(reinterpret_cast<const char*>(q.codes.data()),
                 static_cast<std::streamsize>(q.codes.size()));
    }
    if (!os) throw Error("checkpoint: write failed for '" + path + "'");
}

struct Contents {
    std::map<std::string, Tensor> tensors;
    std::map<std::string, Int8Record> quantized;
};

inline Contents read(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("checkpoint: cannot open '" + path + "'");
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "GSEG")
        throw FormatError("checkpoint: bad magic in '" + path + "'");
    uint32_t version = io_detail::get<uint32_t>(is);
    if (version != kVersion)
        throw FormatError("checkpoint: unsupported version " + std::to_string(version));

    Contents out;
    while (true) {
        is.peek();
        if (is.eof()) break;
        std::string name = io_detail::get_name(is);
        uint32_t dtype = io_detail::get<uint32_t>(is);
        uint32_t rank = io_detail::get<uint32_t>(is);
        if (rank > 8) throw FormatError("checkpoint: implausible rank");
        std::vector<int64_t> shape(rank);
        size_t n = 1;
        for (uint32_t i = 0; i < rank; ++i) {
            shape[i] = static_cast<int64_t>(io_detail::get<uint64_t>(is));
            n *= static_cast<size_t>(shape[i]);
        }
        if (dtype == kDtypeF32) {
            Tensor t(shape);
            is.read(reinterpret_cast<char*>(t.ptr()),
                    static_cast<std::streamsize>(n * sizeof(float)));
            if (!is) throw FormatError("checkpoint: truncated payload for '" + name + "'");
            out.tensors[name] = std::move(t);
        } else if (dtype == kDtypeI8) {
            Int8Record q;
            q.shape = shape;
            q.scale = io_detail::get<float>(is);
            q.codes.resize(n);
            is.read(reinterpret_cast<char*>(q.codes.data()), static_cast<std::streamsize>(n));
            if (!is) throw FormatError("checkpoint: truncated payload for '" + name + "'");
            out.quantized[name] = std::move(q);
        } else {
            throw FormatError("checkpoint: unknown dtype code " + std::to_string(dtype));
        }
    }
    return out;
}

}  // namespace checkpoint
}  // namespace gseg
