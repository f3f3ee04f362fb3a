#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "gseg/checkpoint.hpp"
#include "gseg/nifti.hpp"

namespace gseg::data {

struct Grid2D {
    int64_t h = 0, w = 0;
    std::vector<float> v;

    Grid2D() = default;
    Grid2D(int64_t h_, int64_t w_, float fill = 0.0f)
        : h(h_), w(w_), v(static_cast<size_t>(h_ * w_), fill) {}

    float& at(int64_t r, int64_t c) { return v[static_cast<size_t>(r * w + c)]; }
    float at(int64_t r, int64_t c) const { return v[static_cast<size_t>(r * w + c)]; }
    int64_t numel() const { return h * w; }
};

struct SlicePair {
    Grid2D image;
    Grid2D mask;  // strictly {0,1}
    std::string patient_id;
    int volume_index = 0;  // time frame the slice came from
    int slice_index = 0;   // axial (z) position
};

// ---- raw/mask discovery ----------------------------------------------------

struct PairEntry {
    std::string raw_path;
    std::string mask_path;
    std::string patient_id;
};

struct CleanResult {
    std::vector<PairEntry> pairs;
    std::vector<std::string> skipped;  // files without a matching partner
};

namespace data_detail {

// strips ".nii" / ".nii.gz" and a trailing "_raw" / "_mask"; empty if the
// name does not follow the convention
inline std::string stem_role(const std::string& filename, std::string& role) {
    std::string s = filename;
    if (s.size() > 3 && s.substr(s.size() - 3) == ".gz") s.resize(s.size() - 3);
    if (s.size() > 4 && s.substr(s.size() - 4) == ".nii")
        s.resize(s.size() - 4);
    else
        return {};
    for (const char* suffix : {"_raw", "_mask"}) {
        size_t len = std::strlen(suffix);
        if (s.size() > len && s.compare(s.size() - len, len, suffix) == 0) {
            role = suffix + 1;
            return s.substr(0, s.size() - len);
        }
    }
    return {};
}

// patient id = stem up to the first underscore, allowing several volumes per
// patient ("p003_run1_raw.nii.gz" -> "p003")
inline std::string patient_of(const std::string& stem) {
    auto pos = stem.find('_');
    return pos == std::string::npos ? stem : stem.substr(0, pos);
}

}  // namespace data_detail

// Pairs "<stem>_raw.nii[.gz]" with "<stem>_mask.nii[.gz]" inside a directory.
// Files without a partner land in the skip report.
inline CleanResult clean_pairs(const std::string& directory) {
    namespace fs = std::filesystem;
    std::error_code ec;
    if (!fs::is_directory(directory, ec))
        throw Error("clean_pairs: '" + directory + "' is not a readable directory");

    std::map<std::string, std::string> raws, masks;  // stem -> path
    std::vector<std::string> entries;
    for (const auto& e : fs::directory_iterator(directory)) {
        if (!e.is_regular_file()) continue;
        entries.push_back(e.path().filename().string());
    }
    std::sort(entries.begin(), entries.end());

    CleanResult out;
    for (const auto& name : entries) {
        std::string role;
        std::string stem = data_detail::stem_role(name, role);
        std::string full = (fs::path(directory) / name).string();
        if (stem.empty()) continue;  // not part of the convention at all
        if (role == "raw")
            raws[stem] = full;
        else
            masks[stem] = full;
    }
    for (const auto& [stem, path] : raws) {
        auto it = masks.find(stem);
        if (it == masks.end()) {
            out.skipped.push_back(path);
            continue;
        }
        out.pairs.push_back({path, it->second, data_detail::patient_of(stem)});
    }
    for (const auto& [stem, path] : masks)
        if (!raws.count(stem)) out.skipped.push_back(path);
    return out;
}

// ---- manifest (csv: raw_path,mask_path,patient_id) -------------------------

inline void write_manifest(const std::string& path, const std::vector<PairEntry>& pairs) {
    std::ofstream os(path);
    if (!os) throw Error("manifest: cannot open '" + path + "' for writing");
    for (const auto& p : pairs) os << p.raw_path << ',' << p.mask_path << ',' << p.patient_id << '\n';
}

inline std::vector<PairEntry> read_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw Error("manifest: cannot open '" + path + "'");
    std::vector<PairEntry> out;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ss(line);
        PairEntry e;
        if (!std::getline(ss, e.raw_path, ',') || !std::getline(ss, e.mask_path, ',') ||
            !std::getline(ss, e.patient_id))
            throw FormatError("manifest: malformed line " + std::to_string(lineno) + " in '" +
                              path + "'");
        out.push_back(std::move(e));
    }
    return out;
}

// ---- 4D -> 2D slicing -------------------------------------------------------

enum class TimePolicy : uint8_t { AllFrames, FirstFrame };

// Pairs every axial slice of the selected frames with the corresponding mask
// slice. The mask is 3-d (drawn once) and binarized at > 0.
inline std::vector<SlicePair> extract_and_slice(const Volume& raw, const Volume& mask,
                                                TimePolicy policy = TimePolicy::AllFrames,
                                                const std::string& patient_id = {},
                                                bool drop_empty = false) {
    if (raw.nx() != mask.nx() || raw.ny() != mask.ny() || raw.nz() != mask.nz())
        throw ShapeError("extract_and_slice: spatial extents differ (" +
                         shape_str(raw.extents) + " vs " + shape_str(mask.extents) + ")");
    int64_t frames = policy == TimePolicy::FirstFrame ? 1 : raw.nt();
    std::vector<SlicePair> out;
    for (int64_t t = 0; t < frames; ++t) {
        for (int64_t z = 0; z < raw.nz(); ++z) {
            SlicePair sp;
            sp.patient_id = patient_id;
            sp.volume_index = static_cast<int>(t);
            sp.slice_index = static_cast<int>(z);
            sp.image = Grid2D(raw.ny(), raw.nx());
            sp.mask = Grid2D(raw.ny(), raw.nx());
            bool any = false;
            for (int64_t y = 0; y < raw.ny(); ++y)
                for (int64_t x = 0; x < raw.nx(); ++x) {
                    sp.image.at(y, x) = raw.at(x, y, z, t);
                    float m = mask.at(x, y, z) > 0.0f ? 1.0f : 0.0f;
                    sp.mask.at(y, x) = m;
                    any = any || m > 0.0f;
                }
            if (drop_empty && !any) continue;
            out.push_back(std::move(sp));
        }
    }
    return out;
}

// ---- patient-wise split -----------------------------------------------------

struct Split {
    std::vector<SlicePair> train, val, test;
    std::vector<std::string> train_patients, val_patients, test_patients;
};

// 80/10/10 over patients (round half up, at least one patient per subset);
// every slice of a patient lands in exactly one subset.
inline Split split_by_patient(const std::vector<SlicePair>& pairs, uint64_t seed) {
    std::set<std::string> ids;
    for (const auto& p : pairs) ids.insert(p.patient_id);
    if (ids.size() < 3)
        throw Error("split_by_patient: need at least 3 patients, got " +
                    std::to_string(ids.size()));

    std::vector<std::string> order(ids.begin(), ids.end());
    Rng rng(seed);
    for (size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[rng.randint(i)]);

    auto share = [&](double frac) {
        return std::max<size_t>(
            1, static_cast<size_t>(std::floor(frac * static_cast<double>(order.size()) + 0.5)));
    };
    size_t n_test = share(0.10);
    size_t n_val = share(0.10);

    Split s;
    for (size_t i = 0; i < order.size(); ++i) {
        if (i < n_test)
            s.test_patients.push_back(order[i]);
        else if (i < n_test + n_val)
            s.val_patients.push_back(order[i]);
        else
            s.train_patients.push_back(order[i]);
    }
    auto contains = [](const std::vector<std::string>& v, const std::string& x) {
        return std::find(v.begin(), v.end(), x) != v.end();
    };
    for (const auto& p : pairs) {
        if (contains(s.test_patients, p.patient_id))
            s.test.push_back(p);
        else if (contains(s.val_patients, p.patient_id))
            s.val.push_back(p);
        else
            s.train.push_back(p);
    }
    return s;
}

// ---- augmentation ------------------------------------------------------------

// k*90-degree rotation (k uniform in 0..3) plus horizontal/vertical flips at
// p = 0.5 each, identical on image and mask.
inline Grid2D rotate90(const Grid2D& g, int k) {
    k = ((k % 4) + 4) % 4;
    if (k == 0) return g;
    Grid2D out = (k == 2) ? Grid2D(g.h, g.w) : Grid2D(g.w, g.h);
    for (int64_t r = 0; r < g.h; ++r)
        for (int64_t c = 0; c < g.w; ++c) {
            float v = g.at(r, c);
            if (k == 1)
                out.at(c, g.h - 1 - r) = v;  // clockwise
            else if (k == 2)
                out.at(g.h - 1 - r, g.w - 1 - c) = v;
            else
                out.at(g.w - 1 - c, r) = v;
        }
    return out;
}

inline Grid2D flip(const Grid2D& g, bool horizontal) {
    Grid2D out(g.h, g.w);
    for (int64_t r = 0; r < g.h; ++r)
        for (int64_t c = 0; c < g.w; ++c)
            out.at(r, c) = horizontal ? g.at(r, g.w - 1 - c) : g.at(g.h - 1 - r, c);
    return out;
}

inline SlicePair augment(const SlicePair& pair, Rng& rng) {
    int k = static_cast<int>(rng.randint(4));
    bool hf = rng.uniform01() < 0.5;
    bool vf = rng.uniform01() < 0.5;
    SlicePair out = pair;
    if (k) {
        out.image = rotate90(out.image, k);
        out.mask = rotate90(out.mask, k);
    }
    if (hf) {
        out.image = flip(out.image, true);
        out.mask = flip(out.mask, true);
    }
    if (vf) {
        out.image = flip(out.image, false);
        out.mask = flip(out.mask, false);
    }
    return out;
}

// per-slice min-max normalization to [0,1]; flat slices collapse to zero
inline void minmax_normalize(Grid2D& g) {
    auto [lo, hi] = std::minmax_element(g.v.begin(), g.v.end());
    float span = *hi - *lo;
    if (span <= 0.0f) {
        std::fill(g.v.begin(), g.v.end(), 0.0f);
        return;
    }
    for (auto& v : g.v) v = (v - *lo) / span;
}

// ---- synthetic phantoms --------------------------------------------------------

// Head-like phantoms: noisy background, bright elliptical "skull" ring, and
// an interior "brain" blob that doubles as the mask. Slices are grouped into
// synthetic patients of ~8 with correlated geometry. Fully deterministic in
// the seed.
inline std::vector<SlicePair> generate_phantoms(int n, int side, uint64_t seed) {
    if (n > 0 && side < 16) throw Error("generate_phantoms: side must be >= 16");
    std::vector<SlicePair> out;
    out.reserve(static_cast<size_t>(std::max(n, 0)));
    Rng rng(seed);
    int per_patient = 8;
    int patient = -1;
    double cx = 0, cy = 0, rx = 0, ry = 0, angle = 0;

    for (int i = 0; i < n; ++i) {
        if (i % per_patient == 0) {
            ++patient;
            cx = side * (0.45 + 0.10 * rng.uniform01());
            cy = side * (0.45 + 0.10 * rng.uniform01());
            rx = side * (0.18 + 0.12 * rng.uniform01());
            ry = side * (0.18 + 0.12 * rng.uniform01());
            angle = rng.uniform01() * M_PI;
        }
        // per-slice jitter within the patient
        double jcx = cx + side * 0.02 * (rng.uniform01() - 0.5);
        double jcy = cy + side * 0.02 * (rng.uniform01() - 0.5);
        double jrx = rx * (0.92 + 0.16 * rng.uniform01());
        double jry = ry * (0.92 + 0.16 * rng.uniform01());
        double ca = std::cos(angle), sa = std::sin(angle);

        SlicePair sp;
        char pid[16];
        std::snprintf(pid, sizeof(pid), "synth%03d", patient);
        sp.patient_id = pid;
        sp.volume_index = 0;
        sp.slice_index = i % per_patient;
        sp.image = Grid2D(side, side);
        sp.mask = Grid2D(side, side);

        for (int r = 0; r < side; ++r)
            for (int c = 0; c < side; ++c) {
                double dx = c - jcx, dy = r - jcy;
                double u = (ca * dx + sa * dy) / jrx;
                double v = (-sa * dx + ca * dy) / jry;
                double rad = std::sqrt(u * u + v * v);  // 1.0 on the skull ellipse
                float val = 0.12f;                      // background tissue
                float m = 0.0f;
                if (rad <= 1.0 && rad >= 0.85) {
                    val = 0.88f;  // skull ring, bright but unmasked
                } else if (rad <= 0.72) {
                    val = 0.55f + 0.08f * static_cast<float>(std::sin(3.0 * u) * std::cos(3.0 * v));
                    m = 1.0f;  // brain blob = ground truth
                } else if (rad < 0.85) {
                    val = 0.22f;  // csf gap
                }
                val += rng.normal(0.0f, 0.04f);
                sp.image.at(r, c) = std::clamp(val, 0.0f, 1.0f);
                sp.mask.at(r, c) = m;
            }
        out.push_back(std::move(sp));
    }
    return out;
}

// ---- slice dataset dump (checkpoint container) -----------------------------------

inline void save_slices(const std::string& path, const std::vector<SlicePair>& slices) {
    std::map<std::string, Tensor> tensors;
    for (size_t i = 0; i < slices.size(); ++i) {
        const SlicePair& sp = slices[i];
        char key[96];
        std::snprintf(key, sizeof(key), "%s/v%04d/s%04d/%06zu", sp.patient_id.c_str(),
                      sp.volume_index, sp.slice_index, i);
        tensors[std::string(key) + "/img"] = Tensor({sp.image.h, sp.image.w}, sp.image.v);
        tensors[std::string(key) + "/msk"] = Tensor({sp.mask.h, sp.mask.w}, sp.mask.v);
    }
    checkpoint::write(path, tensors);
}

inline std::vector<SlicePair> load_slices(const std::string& path) {
    auto contents = checkpoint::read(path);
    std::map<std::string, SlicePair> by_key;
    for (auto& [name, t] : contents.tensors) {
        auto slash = name.rfind('/');
        if (slash == std::string::npos) throw FormatError("slice dump: bad record '" + name + "'");
        std::string key = name.substr(0, slash);
        std::string role = name.substr(slash + 1);
        SlicePair& sp = by_key[key];
        if (t.rank() != 2) throw FormatError("slice dump: record '" + name + "' is not 2-d");
        Grid2D g(t.shape[0], t.shape[1]);
        g.v = t.data;
        if (role == "img")
            sp.image = std::move(g);
        else if (role == "msk")
            sp.mask = std::move(g);
        else
            throw FormatError("slice dump: unknown role '" + role + "'");

        // key layout: patient/vNNNN/sNNNN/index
        std::istringstream ss(key);
        std::string pid, vtok, stok;
        std::getline(ss, pid, '/');
        std::getline(ss, vtok, '/');
        std::getline(ss, stok, '/');
        sp.patient_id = pid;
        if (vtok.size() > 1) sp.volume_index = std::atoi(vtok.c_str() + 1);
        if (stok.size() > 1) sp.slice_index = std::atoi(stok.c_str() + 1);
    }
    std::vector<SlicePair> out;
    out.reserve(by_key.size());
    for (auto& [key, sp] : by_key) {
        if (sp.image.numel() == 0 || sp.mask.numel() == 0)
            throw FormatError("slice dump: incomplete pair '" + key + "'");
        out.push_back(std::move(sp));
    }
    return out;
}

}  // namespace gseg::data
