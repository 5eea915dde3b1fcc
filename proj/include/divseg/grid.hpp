#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace divseg {

// Thrown for malformed inputs: shape mismatches, bad files, unknown ids.
struct DataError : std::runtime_error {
    explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

// Thrown when a computation produced or received non-finite values.
struct NumericalError : std::runtime_error {
    explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

// H*W real-valued field; the noisy/denoised state during sampling.
struct LatentGrid {
    int height = 0;
    int width = 0;
    std::vector<double> values;

    LatentGrid() = default;
    LatentGrid(int h, int w, double fill = 0.0) : height(h), width(w) {
        if (h <= 0 || w <= 0) throw DataError("LatentGrid: dimensions must be positive");
        values.assign(static_cast<size_t>(h) * w, fill);
    }

    size_t size() const { return values.size(); }
    double& at(int r, int c) { return values[static_cast<size_t>(r) * width + c]; }
    double at(int r, int c) const { return values[static_cast<size_t>(r) * width + c]; }

    bool same_shape(const LatentGrid& o) const { return height == o.height && width == o.width; }

    bool finite() const {
        for (double v : values)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

// H*W field of {0,1}.
struct BinaryMask {
    int height = 0;
    int width = 0;
    std::vector<uint8_t> values;

    BinaryMask() = default;
    BinaryMask(int h, int w, uint8_t fill = 0) : height(h), width(w) {
        if (h <= 0 || w <= 0) throw DataError("BinaryMask: dimensions must be positive");
        values.assign(static_cast<size_t>(h) * w, fill);
    }

    size_t size() const { return values.size(); }
    uint8_t& at(int r, int c) { return values[static_cast<size_t>(r) * width + c]; }
    uint8_t at(int r, int c) const { return values[static_cast<size_t>(r) * width + c]; }

    bool same_shape(const BinaryMask& o) const { return height == o.height && width == o.width; }

    size_t count() const {
        size_t n = 0;
        for (uint8_t v : values) n += v;
        return n;
    }
};

inline bool operator==(const BinaryMask& a, const BinaryMask& b) {
    return a.height == b.height && a.width == b.width && a.values == b.values;
}
inline bool operator!=(const BinaryMask& a, const BinaryMask& b) { return !(a == b); }

// Mask pixel 0 -> -1.0, pixel 1 -> +1.0.
inline LatentGrid encode(const BinaryMask& mask) {
    LatentGrid g(mask.height, mask.width);
    for (size_t i = 0; i < mask.size(); ++i) g.values[i] = mask.values[i] ? 1.0 : -1.0;
    return g;
}

// Value > 0 -> 1, else 0 (ties at exactly 0 go to 0).
inline BinaryMask threshold(const LatentGrid& grid) {
    if (!grid.finite()) throw NumericalError("threshold: non-finite latent values");
    BinaryMask m(grid.height, grid.width);
    for (size_t i = 0; i < grid.size(); ++i) m.values[i] = grid.values[i] > 0.0 ? 1 : 0;
    return m;
}

inline double l2_distance(const LatentGrid& a, const LatentGrid& b) {
    if (!a.same_shape(b)) throw DataError("l2_distance: shape mismatch");
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        double d = a.values[i] - b.values[i];
        s += d * d;
    }
    return std::sqrt(s);
}

inline size_t hamming(const BinaryMask& a, const BinaryMask& b) {
    if (!a.same_shape(b)) throw DataError("hamming: shape mismatch");
    size_t n = 0;
    for (size_t i = 0; i < a.size(); ++i) n += a.values[i] != b.values[i];
    return n;
}

// |a & b| / |a | b|; both masks empty -> 1.0.
inline double iou(const BinaryMask& a, const BinaryMask& b) {
    if (!a.same_shape(b)) throw DataError("iou: shape mismatch");
    size_t inter = 0, uni = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        inter += a.values[i] & b.values[i];
        uni += a.values[i] | b.values[i];
    }
    if (uni == 0) return 1.0;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

namespace detail {

// 1-D squared distance transform (Felzenszwalb & Huttenlocher).
inline void dt1d(const double* f, double* d, int n, int* v, double* z) {
    int k = 0;
    v[0] = 0;
    z[0] = -std::numeric_limits<double>::infinity();
    z[1] = std::numeric_limits<double>::infinity();
    for (int q = 1; q < n; ++q) {
        double s = ((f[q] + q * (double)q) - (f[v[k]] + v[k] * (double)v[k])) / (2.0 * (q - v[k]));
        while (s <= z[k]) {
            --k;
            s = ((f[q] + q * (double)q) - (f[v[k]] + v[k] * (double)v[k])) / (2.0 * (q - v[k]));
        }
        ++k;
        v[k] = q;
        z[k] = s;
        z[k + 1] = std::numeric_limits<double>::infinity();
    }
    k = 0;
    for (int q = 0; q < n; ++q) {
        while (z[k + 1] < q) ++k;
        double dq = q - v[k];
        d[q] = dq * dq + f[v[k]];
    }
}

// Exact Euclidean distance (not squared) from every pixel to the nearest positive pixel.
// Mask must contain at least one positive pixel.
inline std::vector<double> distance_field(const BinaryMask& m) {
    const double kFar = 1e18;
    int h = m.height, w = m.width;
    std::vector<double> d(m.size());
    for (size_t i = 0; i < m.size(); ++i) d[i] = m.values[i] ? 0.0 : kFar;

    int n = std::max(h, w);
    std::vector<double> f(n), out(n), z(n + 1);
    std::vector<int> v(n);
    for (int c = 0; c < w; ++c) {  // columns
        for (int r = 0; r < h; ++r) f[r] = d[static_cast<size_t>(r) * w + c];
        dt1d(f.data(), out.data(), h, v.data(), z.data());
        for (int r = 0; r < h; ++r) d[static_cast<size_t>(r) * w + c] = out[r];
    }
    for (int r = 0; r < h; ++r) {  // rows
        for (int c = 0; c < w; ++c) f[c] = d[static_cast<size_t>(r) * w + c];
        dt1d(f.data(), out.data(), w, v.data(), z.data());
        for (int c = 0; c < w; ++c) d[static_cast<size_t>(r) * w + c] = out[c];
    }
    for (double& x : d) x = std::sqrt(x);
    return d;
}

inline double chamfer_one_sided(const BinaryMask& from, const std::vector<double>& dist_to_other) {
    double s = 0.0;
    size_t n = 0;
    for (size_t i = 0; i < from.size(); ++i)
        if (from.values[i]) {
            s += dist_to_other[i];
            ++n;
        }
    return s / static_cast<double>(n);
}

}  // namespace detail

// Mean distance from positives of a to nearest positive of b, plus the symmetric
// term. Both empty -> 0; exactly one empty -> grid diagonal as a sentinel.
inline double chamfer_distance(const BinaryMask& a, const BinaryMask& b) {
    if (!a.same_shape(b)) throw DataError("chamfer_distance: shape mismatch");
    size_t na = a.count(), nb = b.count();
    if (na == 0 && nb == 0) return 0.0;
    if (na == 0 || nb == 0)
        return std::sqrt(static_cast<double>(a.height) * a.height +
                         static_cast<double>(a.width) * a.width);
    std::vector<double> da = detail::distance_field(a);
    std::vector<double> db = detail::distance_field(b);
    return detail::chamfer_one_sided(a, db) + detail::chamfer_one_sided(b, da);
}

// All-pairs chamfer matrix; computes each distance field once.
inline std::vector<std::vector<double>> chamfer_distance_matrix(const std::vector<BinaryMask>& masks) {
    size_t n = masks.size();
    std::vector<std::vector<double>> fields(n);
    for (size_t i = 0; i < n; ++i)
        if (masks[i].count() > 0) fields[i] = detail::distance_field(masks[i]);

    std::vector<std::vector<double>> dist(n, std::vector<double>(n, 0.0));
    for (size_t i = 0; i < n; ++i) {
        for (size_t j = i + 1; j < n; ++j) {
            if (!masks[i].same_shape(masks[j]))
                throw DataError("chamfer_distance_matrix: shape mismatch");
            double d;
            size_t ni = masks[i].count(), nj = masks[j].count();
            if (ni == 0 && nj == 0) {
                d = 0.0;
            } else if (ni == 0 || nj == 0) {
                d = std::sqrt(static_cast<double>(masks[i].height) * masks[i].height +
                              static_cast<double>(masks[i].width) * masks[i].width);
            } else {
                d = detail::chamfer_one_sided(masks[i], fields[j]) +
                    detail::chamfer_one_sided(masks[j], fields[i]);
            }
            dist[i][j] = dist[j][i] = d;
        }
    }
    return dist;
}

// P5 binary PGM, maxval 255; mask pixels map to 0/255.
inline void write_pgm(const BinaryMask& m, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("write_pgm: cannot open " + path);
    out << "P5\n" << m.width << " " << m.height << "\n255\n";
    std::vector<uint8_t> row(m.size());
    for (size_t i = 0; i < m.size(); ++i) row[i] = m.values[i] ? 255 : 0;
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    if (!out) throw DataError("write_pgm: write failed for " + path);
}

// Latent values are mapped affinely from [-1,1] to [0,255] and clamped.
inline void write_pgm(const LatentGrid& g, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("write_pgm: cannot open " + path);
    out << "P5\n" << g.width << " " << g.height << "\n255\n";
    std::vector<uint8_t> row(g.size());
    for (size_t i = 0; i < g.size(); ++i) {
        double v = std::lround((g.values[i] + 1.0) * 0.5 * 255.0);
        row[i] = static_cast<uint8_t>(std::clamp(v, 0.0, 255.0));
    }
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    if (!out) throw DataError("write_pgm: write failed for " + path);
}

}  // namespace divseg
