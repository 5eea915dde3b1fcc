#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "divseg/denoiser.hpp"
#include "divseg/grid.hpp"
#include "divseg/rng.hpp"

namespace divseg {

// The valid output masks of one input, with normalized probabilities.
struct ModeSet {
    std::vector<BinaryMask> masks;
    std::vector<double> weights;
};

struct ConditionedInstance {
    Conditioning conditioning;
    ModeSet modes;
};

using Dataset = std::vector<ConditionedInstance>;

struct FireScenarioConfig {
    int grid_size = 32;
    double fuel_density = 0.95;
    int pre_steps = 3;        // isotropic growth before the wind branch point
    int post_steps = 9;       // wind-driven steps after branching
    double anisotropy_threshold = 0.7;
    int iso_period = 8;       // every iso_period-th post step spreads isotropically
    int n_wind = 8;           // wind directions at i * (360/n_wind) degrees
    double weight_base = 2.0; // mode i gets weight base^i
    uint64_t seed = 0;
};

struct FlipSceneConfig {
    int grid_size = 16;
    int classes = 4;
    std::vector<double> flip_probs = {0.05, 0.25, 0.75, 0.95};
    uint64_t seed = 0;
};

namespace detail {

inline const int kNeighborOffsets[8][2] = {{-1, -1}, {-1, 0}, {-1, 1}, {0, -1},
                                           {0, 1},   {1, -1}, {1, 0},  {1, 1}};

// One synchronous spread step: a burning cell ignites fueled cells reached
// through the allowed neighbor offsets.
inline void spread(const BinaryMask& fuel, BinaryMask& burn, const std::vector<int>& offsets) {
    BinaryMask next = burn;
    int h = burn.height, w = burn.width;
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            if (next.at(i, j) || !fuel.at(i, j)) continue;
            for (int o : offsets) {
                int si = i - kNeighborOffsets[o][0];
                int sj = j - kNeighborOffsets[o][1];
                if (si < 0 || si >= h || sj < 0 || sj >= w) continue;
                if (burn.at(si, sj)) {
                    next.at(i, j) = 1;
                    break;
                }
            }
        }
    burn = next;
}

}  // namespace detail

// Toy wind-spread scenario: grow a fire isotropically for a few steps, then
// branch it into n_wind futures that spread mostly along their wind direction.
// Mode i (wind at i * 360/n_wind degrees) is weighted base^i.
inline ConditionedInstance generate_fire_instance(const FireScenarioConfig& cfg, int instance_id = 0) {
    if (cfg.grid_size < 3) throw DataError("generate_fire_instance: grid too small");
    if (!(cfg.fuel_density > 0.0 && cfg.fuel_density <= 1.0))
        throw DataError("generate_fire_instance: fuel density must be in (0,1]");
    if (cfg.n_wind < 1) throw DataError("generate_fire_instance: need at least one wind direction");
    int h = cfg.grid_size, w = cfg.grid_size;
    int ci = h / 2, cj = w / 2;

    BinaryMask fuel(h, w);
    bool ignitable = false;
    for (int attempt = 0; attempt < 100; ++attempt) {
        Rng rng = substream(cfg.seed + attempt, StreamKind::dataset, 0xf1e1);
        BinaryMask raw(h, w);
        for (auto& v : raw.values) v = rng.uniform() < cfg.fuel_density ? 1 : 0;
        // One 3x3 majority pass; cells outside the grid count as unfueled.
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) {
                int count = 0;
                for (int di = -1; di <= 1; ++di)
                    for (int dj = -1; dj <= 1; ++dj) {
                        int si = i + di, sj = j + dj;
                        if (si < 0 || si >= h || sj < 0 || sj >= w) continue;
                        count += raw.at(si, sj);
                    }
                fuel.at(i, j) = count >= 5 ? 1 : 0;
            }
        if (fuel.at(ci, cj)) {
            ignitable = true;
            break;
        }
    }
    if (!ignitable)
        throw DataError("generate_fire_instance: no fuel at ignition point after 100 reseeds");

    std::vector<int> all_offsets{0, 1, 2, 3, 4, 5, 6, 7};
    BinaryMask burn(h, w);
    burn.at(ci, cj) = 1;
    for (int s = 0; s < cfg.pre_steps; ++s) detail::spread(fuel, burn, all_offsets);
    BinaryMask branch_state = burn;

    ConditionedInstance inst;
    inst.modes.masks.reserve(cfg.n_wind);
    inst.modes.weights.reserve(cfg.n_wind);
    double weight_sum = 0.0;
    for (int d = 0; d < cfg.n_wind; ++d) {
        double theta = 2.0 * 3.14159265358979323846 * d / cfg.n_wind;
        double wi = std::cos(theta), wj = std::sin(theta);
        std::vector<int> aligned;
        for (int o = 0; o < 8; ++o) {
            double oi = detail::kNeighborOffsets[o][0], oj = detail::kNeighborOffsets[o][1];
            double norm = std::sqrt(oi * oi + oj * oj);
            if ((oi * wi + oj * wj) / norm >= cfg.anisotropy_threshold) aligned.push_back(o);
        }
        BinaryMask b = branch_state;
        for (int s = 1; s <= cfg.post_steps; ++s)
            detail::spread(fuel, b, (cfg.iso_period > 0 && s % cfg.iso_period == 0) ? all_offsets
                                                                                    : aligned);
        inst.modes.masks.push_back(std::move(b));
        double wgt = std::pow(cfg.weight_base, d);
        inst.modes.weights.push_back(wgt);
        weight_sum += wgt;
    }
    for (auto& wgt : inst.modes.weights) wgt /= weight_sum;

    // Channels: fuel map, burned area at the branch point, flat elevation placeholder.
    Conditioning c;
    c.id = instance_id;
    c.channels = 3;
    c.height = h;
    c.width = w;
    c.data.resize(static_cast<size_t>(3) * h * w, 0.0);
    for (size_t i = 0; i < fuel.size(); ++i) {
        c.data[i] = fuel.values[i];
        c.data[fuel.size() + i] = branch_state.values[i];
    }
    inst.conditioning = std::move(c);
    return inst;
}

// Factorized scene: disjoint class regions that flip on independently; all 2^C
// subset modes are enumerated with exact product weights. Mode index s has
// class c present iff bit c of s is set.
inline ConditionedInstance generate_flip_instance(const FlipSceneConfig& cfg, int instance_id = 0) {
    int h = cfg.grid_size, w = cfg.grid_size;
    int C = cfg.classes;
    if (C < 1 || C > 16) throw DataError("generate_flip_instance: classes must be in [1,16]");
    if (static_cast<int>(cfg.flip_probs.size()) != C)
        throw DataError("generate_flip_instance: need one flip probability per class");
    for (double p : cfg.flip_probs)
        if (!(p > 0.0 && p < 1.0))
            throw DataError("generate_flip_instance: flip probabilities must be in (0,1)");
    if (h < 8) throw DataError("generate_flip_instance: grid too small");

    Rng rng = substream(cfg.seed, StreamKind::dataset, 0xf11b);
    BinaryMask occupied(h, w);
    std::vector<BinaryMask> regions;
    for (int c = 0; c < C; ++c) {
        bool placed = false;
        for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
            bool ellipse = rng.next_u64() & 1;
            int max_half = std::max(2, h / 5);
            int a = 2 + static_cast<int>(rng.below(std::max(1, max_half - 1)));
            int b = 2 + static_cast<int>(rng.below(std::max(1, max_half - 1)));
            if (2 * a + 1 > h || 2 * b + 1 > w) continue;
            int ri = a + static_cast<int>(rng.below(static_cast<uint64_t>(h - 2 * a)));
            int rj = b + static_cast<int>(rng.below(static_cast<uint64_t>(w - 2 * b)));
            BinaryMask region(h, w);
            for (int di = -a; di <= a; ++di)
                for (int dj = -b; dj <= b; ++dj) {
                    bool inside = ellipse
                                      ? (static_cast<double>(di) * di) / (a * a) +
                                                (static_cast<double>(dj) * dj) / (b * b) <=
                                            1.0
                                      : true;
                    if (inside) region.at(ri + di, rj + dj) = 1;
                }
            bool overlaps = false;
            for (size_t i = 0; i < region.size() && !overlaps; ++i)
                overlaps = region.values[i] && occupied.values[i];
            if (overlaps) continue;
            for (size_t i = 0; i < region.size(); ++i)
                occupied.values[i] |= region.values[i];
            regions.push_back(std::move(region));
            placed = true;
        }
        if (!placed)
            throw DataError("generate_flip_instance: could not place disjoint region for class " +
                            std::to_string(c));
    }

    ConditionedInstance inst;
    size_t n_modes = static_cast<size_t>(1) << C;
    inst.modes.masks.reserve(n_modes);
    inst.modes.weights.reserve(n_modes);
    for (size_t s = 0; s < n_modes; ++s) {
        BinaryMask m(h, w);
        double wgt = 1.0;
        for (int c = 0; c < C; ++c) {
            if (s & (static_cast<size_t>(1) << c)) {
                wgt *= cfg.flip_probs[c];
                for (size_t i = 0; i < m.size(); ++i) m.values[i] |= regions[c].values[i];
            } else {
                wgt *= 1.0 - cfg.flip_probs[c];
            }
        }
        inst.modes.masks.push_back(std::move(m));
        inst.modes.weights.push_back(wgt);
    }

    Conditioning c;
    c.id = instance_id;
    c.channels = C;
    c.height = h;
    c.width = w;
    c.data.resize(static_cast<size_t>(C) * h * w, 0.0);
    for (int k = 0; k < C; ++k)
        for (size_t i = 0; i < regions[k].size(); ++i)
            c.data[static_cast<size_t>(k) * h * w + i] = regions[k].values[i];
    inst.conditioning = std::move(c);
    return inst;
}

inline Dataset generate_fire_dataset(FireScenarioConfig cfg, int n_instances, uint64_t root_seed) {
    Dataset ds;
    ds.reserve(n_instances);
    for (int i = 0; i < n_instances; ++i) {
        cfg.seed = substream_seed(root_seed, StreamKind::dataset, static_cast<uint64_t>(i));
        ds.push_back(generate_fire_instance(cfg, i));
    }
    return ds;
}

inline Dataset generate_flip_dataset(FlipSceneConfig cfg, int n_instances, uint64_t root_seed) {
    Dataset ds;
    ds.reserve(n_instances);
    for (int i = 0; i < n_instances; ++i) {
        cfg.seed = substream_seed(root_seed, StreamKind::dataset, static_cast<uint64_t>(i));
        ds.push_back(generate_flip_instance(cfg, i));
    }
    return ds;
}

// Builds the exact posterior-mean denoiser over the dataset's mode sets.
inline MixtureDenoiser make_mixture_denoiser(const Dataset& ds) {
    MixtureDenoiser model;
    for (const auto& inst : ds) {
        std::vector<LatentGrid> prototypes;
        prototypes.reserve(inst.modes.masks.size());
        for (const auto& m : inst.modes.masks) prototypes.push_back(encode(m));
        model.add_instance(inst.conditioning.id, std::move(prototypes), inst.modes.weights);
    }
    return model;
}

enum class Split { train, val, test };

// Deterministic 70/15/15 split by hashed instance index. Datasets too small to
// populate every split fall back to all instances in every split.
inline std::vector<int> split_indices(int n_instances, Split which, uint64_t seed = 0) {
    std::vector<int> train, val, test;
    for (int i = 0; i < n_instances; ++i) {
        uint64_t h = substream_seed(seed, StreamKind::dataset, 0x5117, static_cast<uint64_t>(i));
        uint64_t bucket = h % 100;
        if (bucket < 70)
            train.push_back(i);
        else if (bucket < 85)
            val.push_back(i);
        else
            test.push_back(i);
    }
    if (train.empty() || val.empty() || test.empty()) {
        std::vector<int> all(n_instances);
        for (int i = 0; i < n_instances; ++i) all[i] = i;
        return all;
    }
    return which == Split::train ? train : which == Split::val ? val : test;
}

namespace detail {

inline void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(v & 0xff);
    out.push_back((v >> 8) & 0xff);
    out.push_back((v >> 16) & 0xff);
    out.push_back((v >> 24) & 0xff);
}

inline void put_f32(std::vector<uint8_t>& out, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

inline void put_f64(std::vector<uint8_t>& out, double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u32(out, static_cast<uint32_t>(bits & 0xffffffffull));
    put_u32(out, static_cast<uint32_t>(bits >> 32));
}

struct ByteReader {
    const std::vector<uint8_t>& buf;
    size_t pos = 0;
    const char* ctx = "read_dataset";

    void need(size_t n, const char* what) const {
        if (pos + n > buf.size())
            throw DataError(std::string(ctx) + ": truncated " + what + " at byte offset " +
                            std::to_string(pos));
    }
    uint32_t u32(const char* what) {
        need(4, what);
        uint32_t v = buf[pos] | (buf[pos + 1] << 8) | (buf[pos + 2] << 16) |
                     (static_cast<uint32_t>(buf[pos + 3]) << 24);
        pos += 4;
        return v;
    }
    float f32(const char* what) {
        uint32_t bits = u32(what);
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    double f64(const char* what) {
        uint64_t lo = u32(what);
        uint64_t hi = u32(what);
        uint64_t bits = lo | (hi << 32);
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    uint8_t u8(const char* what) {
        need(1, what);
        return buf[pos++];
    }
};

}  // namespace detail

inline constexpr char kDatasetMagic[8] = {'M', 'M', 'S', 'E', 'G', '1', '\0', '\0'};

// Container layout (little-endian): magic "MMSEG1\0\0"; u32 n_instances, H, W,
// C; per instance u32 n_modes, conditioning C*H*W f32, per mode f64 weight
// then H*W u8 mask bytes.
inline void write_dataset(const Dataset& ds, const std::string& path) {
    int H = 0, W = 0, C = 0;
    if (!ds.empty()) {
        H = ds[0].conditioning.height;
        W = ds[0].conditioning.width;
        C = ds[0].conditioning.channels;
    }
    for (const auto& inst : ds) {
        if (inst.conditioning.height != H || inst.conditioning.width != W ||
            inst.conditioning.channels != C)
            throw DataError("write_dataset: instances must share grid size and channel count");
        if (inst.modes.masks.size() != inst.modes.weights.size() || inst.modes.masks.empty())
            throw DataError("write_dataset: malformed mode set");
    }

    std::vector<uint8_t> out;
    out.insert(out.end(), kDatasetMagic, kDatasetMagic + 8);
    detail::put_u32(out, static_cast<uint32_t>(ds.size()));
    detail::put_u32(out, static_cast<uint32_t>(H));
    detail::put_u32(out, static_cast<uint32_t>(W));
    detail::put_u32(out, static_cast<uint32_t>(C));
    for (const auto& inst : ds) {
        detail::put_u32(out, static_cast<uint32_t>(inst.modes.masks.size()));
        for (double v : inst.conditioning.data) detail::put_f32(out, static_cast<float>(v));
        for (size_t k = 0; k < inst.modes.masks.size(); ++k) {
            detail::put_f64(out, inst.modes.weights[k]);
            const auto& m = inst.modes.masks[k];
            if (m.height != H || m.width != W)
                throw DataError("write_dataset: mask shape differs from header");
            out.insert(out.end(), m.values.begin(), m.values.end());
        }
    }

    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("write_dataset: cannot open " + path);
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!f) throw DataError("write_dataset: write failed for " + path);
}

inline Dataset read_dataset(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("read_dataset: cannot open " + path);
    std::vector<uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    detail::ByteReader r{buf};
    r.need(8, "magic");
    if (std::memcmp(buf.data(), kDatasetMagic, 8) != 0)
        throw DataError("read_dataset: bad magic at byte offset 0");
    r.pos = 8;

    uint32_t n = r.u32("instance count");
    uint32_t H = r.u32("height");
    uint32_t W = r.u32("width");
    uint32_t C = r.u32("channel count");
    if (H == 0 || W == 0)
        throw DataError("read_dataset: zero grid dimension at byte offset 12");

    Dataset ds;
    ds.reserve(n);
    for (uint32_t i = 0; i < n; ++i) {
        ConditionedInstance inst;
        uint32_t n_modes = r.u32("mode count");
        if (n_modes == 0)
            throw DataError("read_dataset: instance " + std::to_string(i) +
                            " has zero modes at byte offset " + std::to_string(r.pos - 4));
        inst.conditioning.id = static_cast<int>(i);
        inst.conditioning.channels = static_cast<int>(C);
        inst.conditioning.height = static_cast<int>(H);
        inst.conditioning.width = static_cast<int>(W);
        inst.conditioning.data.resize(static_cast<size_t>(C) * H * W);
        for (auto& v : inst.conditioning.data) v = r.f32("conditioning");
        double weight_sum = 0.0;
        for (uint32_t k = 0; k < n_modes; ++k) {
            double wgt = r.f64("mode weight");
            if (!(wgt > 0.0))
                throw DataError("read_dataset: non-positive mode weight at byte offset " +
                                std::to_string(r.pos - 8));
            weight_sum += wgt;
            BinaryMask m(static_cast<int>(H), static_cast<int>(W));
            for (auto& v : m.values) {
                v = r.u8("mask byte");
                if (v > 1)
                    throw DataError("read_dataset: mask byte not 0/1 at byte offset " +
                                    std::to_string(r.pos - 1));
            }
            inst.modes.masks.push_back(std::move(m));
            inst.modes.weights.push_back(wgt);
        }
        if (std::abs(weight_sum - 1.0) > 1e-9)
            throw DataError("read_dataset: instance " + std::to_string(i) +
                            " weights sum to " + std::to_string(weight_sum));
        ds.push_back(std::move(inst));
    }
    if (r.pos != buf.size())
        throw DataError("read_dataset: trailing bytes at byte offset " + std::to_string(r.pos));
    return ds;
}

}  // namespace divseg
