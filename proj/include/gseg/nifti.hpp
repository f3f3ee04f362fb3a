#pragma once

#include <zlib.h>

#include <array>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "gseg/tensor.hpp"

namespace gseg::data {

// NIfTI-1 single-file volumes (.nii, .nii.gz). The 348-byte header is read
// field-by-field; byte order is inferred from sizeof_hdr. Supported datatype
// codes: 2 (u8), 4 (i16), 8 (i32), 16 (f32), 64 (f64). scl_slope/scl_inter
// are applied on read (slope 0 means unscaled per the standard).
struct Volume {
    std::vector<int64_t> extents;  // X, Y, Z or X, Y, Z, T
    std::vector<float> voxels;     // scaled, x-fastest (NIfTI layout)
    float slope = 1.0f;
    float inter = 0.0f;
    std::string source_path;

    int64_t nx() const { return extents.size() > 0 ? extents[0] : 1; }
    int64_t ny() const { return extents.size() > 1 ? extents[1] : 1; }
    int64_t nz() const { return extents.size() > 2 ? extents[2] : 1; }
    int64_t nt() const { return extents.size() > 3 ? extents[3] : 1; }

    float at(int64_t x, int64_t y, int64_t z, int64_t t = 0) const {
        return voxels[static_cast<size_t>(x + nx() * (y + ny() * (z + nz() * t)))];
    }
};

namespace nifti_detail {

constexpr size_t kHeaderBytes = 348;

inline int dtype_bytes(int16_t code) {
    switch (code) {
        case 2: return 1;   // u8
        case 4: return 2;   // i16
        case 8: return 4;   // i32
        case 16: return 4;  // f32
        case 64: return 8;  // f64
        default: return 0;
    }
}

template <typename T>
T swab(T v) {
    auto* p = reinterpret_cast<unsigned char*>(&v);
    for (size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(p[i], p[sizeof(T) - 1 - i]);
    return v;
}

template <typename T>
T read_field(const unsigned char* hdr, size_t off, bool swap) {
    T v;
    std::memcpy(&v, hdr + off, sizeof(T));
    return swap ? swab(v) : v;
}

template <typename T>
void write_field(unsigned char* hdr, size_t off, T v) {
    std::memcpy(hdr + off, &v, sizeof(T));
}

// reads a whole file through zlib, which transparently handles both gzip and
// plain payloads
inline std::vector<unsigned char> slurp(const std::string& path) {
    gzFile f = gzopen(path.c_str(), "rb");
    if (!f) throw Error("nifti: cannot open '" + path + "'");
    std::vector<unsigned char> out;
    std::array<unsigned char, 1 << 16> buf;
    int n;
    while ((n = gzread(f, buf.data(), static_cast<unsigned>(buf.size()))) > 0)
        out.insert(out.end(), buf.data(), buf.data() + n);
    bool bad = n < 0;
    gzclose(f);
    if (bad) throw FormatError("nifti: decompression failed for '" + path + "'");
    return out;
}

}  // namespace nifti_detail

inline Volume read_nifti(const std::string& path) {
    using namespace nifti_detail;
    std::vector<unsigned char> raw = slurp(path);
    if (raw.size() < kHeaderBytes)
        throw FormatError("nifti: '" + path + "' shorter than the 348-byte header");
    const unsigned char* h = raw.data();

    int32_t sizeof_hdr = read_field<int32_t>(h, 0, false);
    bool swap = false;
    if (sizeof_hdr != 348) {
        if (swab(sizeof_hdr) == 348)
            swap = true;
        else
            throw FormatError("nifti: bad sizeof_hdr in '" + path + "'");
    }
    char magic[4];
    std::memcpy(magic, h + 344, 4);
    bool single_file = std::memcmp(magic, "n+1", 4) == 0;
    if (!single_file && std::memcmp(magic, "ni1", 4) != 0)
        throw FormatError("nifti: bad magic in '" + path + "'");

    int16_t ndim = read_field<int16_t>(h, 40, swap);
    if (ndim < 1 || ndim > 7)
        throw FormatError("nifti: dim[0] out of range in '" + path + "'");
    std::vector<int64_t> extents;
    int64_t nvox = 1;
    for (int d = 1; d <= ndim; ++d) {
        int16_t e = read_field<int16_t>(h, 40 + 2 * static_cast<size_t>(d), swap);
        if (e < 1) e = 1;
        extents.push_back(e);
        nvox *= e;
    }

    int16_t datatype = read_field<int16_t>(h, 70, swap);
    int bytes = dtype_bytes(datatype);
    if (bytes == 0)
        throw FormatError("nifti: unsupported datatype code " + std::to_string(datatype) +
                          " in '" + path + "'");
    float vox_offset = read_field<float>(h, 108, swap);
    float slope = read_field<float>(h, 112, swap);
    float inter = read_field<float>(h, 116, swap);
    if (slope == 0.0f) {  // standard: zero slope means "ignore scaling"
        slope = 1.0f;
        inter = 0.0f;
    }

    const unsigned char* payload;
    std::vector<unsigned char> img_data;
    if (single_file) {
        auto off = static_cast<size_t>(vox_offset);
        if (off < kHeaderBytes) off = kHeaderBytes;
        if (raw.size() < off + static_cast<size_t>(nvox) * static_cast<size_t>(bytes))
            throw FormatError("nifti: truncated voxel payload in '" + path + "'");
        payload = raw.data() + off;
    } else {
        std::filesystem::path img = path;
        if (img.extension() == ".gz") img.replace_extension();
        img.replace_extension(".img");
        img_data = slurp(img.string());
        if (img_data.size() < static_cast<size_t>(nvox) * static_cast<size_t>(bytes))
            throw FormatError("nifti: truncated .img payload for '" + path + "'");
        payload = img_data.data();
    }

    Volume v;
    v.extents = std::move(extents);
    v.slope = slope;
    v.inter = inter;
    v.source_path = path;
    v.voxels.resize(static_cast<size_t>(nvox));

    bool scaled = slope != 1.0f || inter != 0.0f;
    auto decode = [&](auto sample_of) {
        if (scaled)
            for (int64_t i = 0; i < nvox; ++i)
                v.voxels[static_cast<size_t>(i)] = sample_of(i) * slope + inter;
        else
            for (int64_t i = 0; i < nvox; ++i) v.voxels[static_cast<size_t>(i)] = sample_of(i);
    };
    switch (datatype) {
        case 2:
            decode([&](int64_t i) { return static_cast<float>(payload[i]); });
            break;
        case 4:
            decode([&](int64_t i) {
                return static_cast<float>(
                    read_field<int16_t>(payload, static_cast<size_t>(i) * 2, swap));
            });
            break;
        case 8:
            decode([&](int64_t i) {
                return static_cast<float>(
                    read_field<int32_t>(payload, static_cast<size_t>(i) * 4, swap));
            });
            break;
        case 16:
            decode([&](int64_t i) {
                return read_field<float>(payload, static_cast<size_t>(i) * 4, swap);
            });
            break;
        case 64:
            decode([&](int64_t i) {
                return static_cast<float>(
                    read_field<double>(payload, static_cast<size_t>(i) * 8, swap));
            });
            break;
    }
    return v;
}

struct NiftiWriteOptions {
    int16_t datatype = 16;  // f32
    float slope = 1.0f;
    float inter = 0.0f;
};

// Writes a single-file NIfTI-1 volume in native byte order. `raw_values` are
// in storage units (pre-scaling); gzip compression kicks in for *.gz paths.
inline void write_nifti(const std::string& path, const std::vector<int64_t>& extents,
                        const std::vector<float>& raw_values, NiftiWriteOptions opt = {}) {
    using namespace nifti_detail;
    int bytes = dtype_bytes(opt.datatype);
    if (bytes == 0)
        throw Error("nifti: unsupported datatype code " + std::to_string(opt.datatype));
    if (extents.empty() || extents.size() > 7) throw Error("nifti: bad extent count");
    int64_t nvox = 1;
    for (int64_t e : extents) nvox *= e;
    if (static_cast<size_t>(nvox) != raw_values.size())
        throw ShapeError("nifti: value count does not match extents");

    std::vector<unsigned char> hdr(kHeaderBytes, 0);
    write_field<int32_t>(hdr.data(), 0, 348);
    write_field<int16_t>(hdr.data(), 40, static_cast<int16_t>(extents.size()));
    for (size_t d = 0; d < 7; ++d)
        write_field<int16_t>(hdr.data(), 42 + 2 * d,
                             d < extents.size() ? static_cast<int16_t>(extents[d]) : 1);
    write_field<int16_t>(hdr.data(), 70, opt.datatype);
    write_field<int16_t>(hdr.data(), 72, static_cast<int16_t>(bytes * 8));  // bitpix
    for (size_t d = 0; d < 8; ++d) write_field<float>(hdr.data(), 76 + 4 * d, 1.0f);
    write_field<float>(hdr.data(), 108, 352.0f);  // vox_offset
    write_field<float>(hdr.data(), 112, opt.slope);
    write_field<float>(hdr.data(), 116, opt.inter);
    hdr[344] = 'n';
    hdr[345] = '+';
    hdr[346] = '1';
    hdr[347] = '\0';

    std::vector<unsigned char> body(static_cast<size_t>(nvox) * static_cast<size_t>(bytes));
    for (int64_t i = 0; i < nvox; ++i) {
        float f = raw_values[static_cast<size_t>(i)];
        switch (opt.datatype) {
            case 2: body[static_cast<size_t>(i)] = static_cast<unsigned char>(f); break;
            case 4: {
                auto v = static_cast<int16_t>(f);
                std::memcpy(body.data() + i * 2, &v, 2);
                break;
            }
            case 8: {
                auto v = static_cast<int32_t>(f);
                std::memcpy(body.data() + i * 4, &v, 4);
                break;
            }
            case 16: std::memcpy(body.data() + i * 4, &f, 4); break;
            case 64: {
                double v = f;
                std::memcpy(body.data() + i * 8, &v, 8);
                break;
            }
        }
    }

    std::array<unsigned char, 4> gap = {0, 0, 0, 0};  // pad header to vox_offset 352
    if (path.size() > 3 && path.substr(path.size() - 3) == ".gz") {
        gzFile f = gzopen(path.c_str(), "wb");
        if (!f) throw Error("nifti: cannot open '" + path + "' for writing");
        bool ok = gzwrite(f, hdr.data(), static_cast<unsigned>(hdr.size())) ==
                      static_cast<int>(hdr.size()) &&
                  gzwrite(f, gap.data(), 4) == 4 &&
                  (body.empty() || gzwrite(f, body.data(), static_cast<unsigned>(body.size())) ==
                                       static_cast<int>(body.size()));
        gzclose(f);
        if (!ok) throw Error("nifti: write failed for '" + path + "'");
    } else {
        std::ofstream os(path, std::ios::binary);
        if (!os) throw Error("nifti: cannot open '" + path + "' for writing");
        os.write(reinterpret_cast<const char*>(hdr.data()), static_cast<std::streamsize>(hdr.size()));
        os.write(reinterpret_cast<const char*>(gap.data()), 4);
        os.write(reinterpret_cast<const char*>(body.data()), static_cast<std::streamsize>(body.size()));
        if (!os) throw Error("nifti: write failed for '" + path + "'");
    }
}

}  // namespace gseg::data
