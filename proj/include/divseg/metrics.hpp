#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "divseg/dataset.hpp"
#include "divseg/grid.hpp"
#include "divseg/rng.hpp"

namespace divseg {

namespace detail {

// Indices of the first occurrence of each distinct mask, in order.
inline std::vector<size_t> unique_mask_indices(const std::vector<BinaryMask>& masks) {
    std::vector<size_t> keep;
    for (size_t i = 0; i < masks.size(); ++i) {
        bool seen = false;
        for (size_t j : keep)
            if (masks[i] == masks[j]) {
                seen = true;
                break;
            }
        if (!seen) keep.push_back(i);
    }
    return keep;
}

}  // namespace detail

// Minimum-cost assignment on a square matrix (potentials method, O(n^3)).
// Returns for each row the column it is assigned to.
inline std::vector<int> hungarian_match(const std::vector<std::vector<double>>& cost) {
    int n = static_cast<int>(cost.size());
    if (n == 0) return {};
    for (const auto& row : cost)
        if (static_cast<int>(row.size()) != n)
            throw DataError("hungarian_match: matrix must be square");
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
    std::vector<int> p(n + 1, 0), way(n + 1, 0);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(n + 1, inf);
        std::vector<char> used(n + 1, 0);
        do {
            used[j0] = 1;
            int i0 = p[j0], j1 = -1;
            double delta = inf;
            for (int j = 1; j <= n; ++j)
                if (!used[j]) {
                    double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if (cur < minv[j]) {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if (minv[j] < delta) {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            for (int j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            int j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0);
    }
    std::vector<int> row_to_col(n, -1);
    for (int j = 1; j <= n; ++j)
        if (p[j] > 0) row_to_col[p[j] - 1] = j - 1;
    return row_to_col;
}

// Matched mean IoU: targets and samples are zero-padded to a square matrix,
// optimally paired to maximize total IoU, and the sum is divided by the number
// of targets (targets left without a real sample contribute zero).
inline double hm_iou(const std::vector<BinaryMask>& samples, const std::vector<BinaryMask>& targets) {
    if (targets.empty()) throw DataError("hm_iou: no targets");
    size_t n = std::max(samples.size(), targets.size());
    std::vector<std::vector<double>> cost(n, std::vector<double>(n, 0.0));
    for (size_t i = 0; i < targets.size(); ++i)
        for (size_t j = 0; j < samples.size(); ++j) cost[i][j] = -iou(targets[i], samples[j]);
    auto match = hungarian_match(cost);
    double total = 0.0;
    for (size_t i = 0; i < targets.size(); ++i)
        if (match[i] >= 0 && static_cast<size_t>(match[i]) < samples.size())
            total += -cost[i][match[i]];
    return total / static_cast<double>(targets.size());
}

// Same, but duplicate target masks are collapsed first so repeated modes are
// not demanded multiple times.
inline double hm_iou_star(const std::vector<BinaryMask>& samples,
                          const std::vector<BinaryMask>& targets) {
    auto keep = detail::unique_mask_indices(targets);
    std::vector<BinaryMask> unique;
    unique.reserve(keep.size());
    for (size_t i : keep) unique.push_back(targets[i]);
    return hm_iou(samples, unique);
}

// Index of the target each sample resembles most (highest IoU, ties toward the
// lowest target index).
inline std::vector<int> nearest_mode_assignment(const std::vector<BinaryMask>& samples,
                                                const std::vector<BinaryMask>& targets) {
    if (targets.empty()) throw DataError("nearest_mode_assignment: no targets");
    std::vector<int> out;
    out.reserve(samples.size());
    for (const auto& s : samples) {
        int best = 0;
        double best_iou = iou(s, targets[0]);
        for (size_t k = 1; k < targets.size(); ++k) {
            double v = iou(s, targets[k]);
            if (v > best_iou) {
                best_iou = v;
                best = static_cast<int>(k);
            }
        }
        out.push_back(best);
    }
    return out;
}

// Number of distinct ground-truth modes that are the nearest match of at
// least one sample (duplicate modes collapse before assignment).
inline int distinct_modes(const std::vector<BinaryMask>& samples,
                          const std::vector<BinaryMask>& targets) {
    auto keep = detail::unique_mask_indices(targets);
    std::vector<BinaryMask> unique;
    unique.reserve(keep.size());
    for (size_t i : keep) unique.push_back(targets[i]);
    auto assign = nearest_mode_assignment(samples, unique);
    std::vector<char> hit(unique.size(), 0);
    for (int k : assign) hit[k] = 1;
    int count = 0;
    for (char h : hit) count += h;
    return count;
}

// Mean per-sample validity: 1 minus the sample's IoU with the region no mode
// ever covers. A sample that stays inside the union of modes scores 1.
inline double image_quality(const std::vector<BinaryMask>& samples,
                            const std::vector<BinaryMask>& targets) {
    if (targets.empty()) throw DataError("image_quality: no targets");
    if (samples.empty()) throw DataError("image_quality: no samples");
    BinaryMask forbidden(targets[0].height, targets[0].width);
    for (size_t i = 0; i < forbidden.size(); ++i) {
        uint8_t covered = 0;
        for (const auto& t : targets) covered |= t.values[i];
        forbidden.values[i] = covered ? 0 : 1;
    }
    double total = 0.0;
    for (const auto& s : samples) total += 1.0 - iou(s, forbidden);
    return total / static_cast<double>(samples.size());
}

// Total variation distance between two categorical distributions.
inline double tvd_calibration(const std::vector<double>& empirical,
                              const std::vector<double>& weights) {
    if (empirical.size() != weights.size() || empirical.empty())
        throw DataError("tvd_calibration: distribution supports differ");
    double tvd = 0.0;
    for (size_t k = 0; k < weights.size(); ++k) tvd += std::abs(weights[k] - empirical[k]);
    return 0.5 * tvd;
}

// TVD between the mode weights and the empirical histogram of nearest-mode
// assignments. Duplicate modes are collapsed with their weights summed.
inline double tvd_calibration(const std::vector<BinaryMask>& samples, const ModeSet& modes) {
    if (samples.empty()) throw DataError("tvd_calibration: no samples");
    if (modes.masks.size() != modes.weights.size() || modes.masks.empty())
        throw DataError("tvd_calibration: malformed mode set");
    auto keep = detail::unique_mask_indices(modes.masks);
    std::vector<BinaryMask> unique;
    std::vector<double> weights(keep.size(), 0.0);
    unique.reserve(keep.size());
    for (size_t u = 0; u < keep.size(); ++u) unique.push_back(modes.masks[keep[u]]);
    for (size_t k = 0; k < modes.masks.size(); ++k)
        for (size_t u = 0; u < keep.size(); ++u)
            if (modes.masks[k] == unique[u]) {
                weights[u] += modes.weights[k];
                break;
            }
    auto assign = nearest_mode_assignment(samples, unique);
    std::vector<double> freq(unique.size(), 0.0);
    for (int k : assign) freq[k] += 1.0 / static_cast<double>(samples.size());
    return tvd_calibration(freq, weights);
}

// Per-class marginal calibration for factorized scenes: a sample counts as
// containing a class when it covers at least half of that class's region.
// Returns the mean over classes of |p_c - empirical frequency|.
inline double tvd_factorized(const std::vector<BinaryMask>& samples,
                             const std::vector<BinaryMask>& regions,
                             const std::vector<double>& flip_probs) {
    if (samples.empty()) throw DataError("tvd_factorized: no samples");
    if (regions.empty() || regions.size() != flip_probs.size())
        throw DataError("tvd_factorized: need one region per flip probability");
    double total = 0.0;
    for (size_t c = 0; c < regions.size(); ++c) {
        size_t region_area = regions[c].count();
        if (region_area == 0) throw DataError("tvd_factorized: empty class region");
        double freq = 0.0;
        for (const auto& s : samples) {
            size_t inter = 0;
            for (size_t i = 0; i < s.size(); ++i) inter += s.values[i] & regions[c].values[i];
            if (2 * inter >= region_area) freq += 1.0 / static_cast<double>(samples.size());
        }
        total += std::abs(flip_probs[c] - freq);
    }
    return total / static_cast<double>(regions.size());
}

// Mean squared error between the pixelwise sample frequency and the
// weight-averaged ground-truth occupancy.
inline double brier_calibration(const std::vector<BinaryMask>& samples, const ModeSet& modes) {
    if (samples.empty()) throw DataError("brier_calibration: no samples");
    if (modes.masks.size() != modes.weights.size() || modes.masks.empty())
        throw DataError("brier_calibration: malformed mode set");
    size_t npx = modes.masks[0].size();
    std::vector<double> gt(npx, 0.0), est(npx, 0.0);
    for (size_t k = 0; k < modes.masks.size(); ++k)
        for (size_t i = 0; i < npx; ++i) gt[i] += modes.weights[k] * modes.masks[k].values[i];
    for (const auto& s : samples) {
        if (s.size() != npx) throw DataError("brier_calibration: sample shape mismatch");
        for (size_t i = 0; i < npx; ++i) est[i] += s.values[i] / static_cast<double>(samples.size());
    }
    double mse = 0.0;
    for (size_t i = 0; i < npx; ++i) {
        double d = est[i] - gt[i];
        mse += d * d;
    }
    return mse / static_cast<double>(npx);
}

// Expected number of independent draws from the mode distribution until every
// mode has appeared at least once, by inclusion-exclusion over mode subsets:
//   E[T] = sum over nonempty S of (-1)^(|S|+1) / w(S).
inline double expected_coverage(const std::vector<double>& weights) {
    size_t m = weights.size();
    if (m == 0) throw DataError("expected_coverage: no modes");
    if (m > 20) throw DataError("expected_coverage: exact form limited to 20 modes");
    double sum = 0.0;
    for (double w : weights) {
        if (!(w > 0.0)) throw DataError("expected_coverage: weights must be positive");
        sum += w;
    }
    std::vector<double> subset_weight(static_cast<size_t>(1) << m, 0.0);
    double expected = 0.0;
    for (size_t mask = 1; mask < subset_weight.size(); ++mask) {
        size_t low = mask & (~mask + 1);
        int low_bit = 0;
        while ((static_cast<size_t>(1) << low_bit) != low) ++low_bit;
        subset_weight[mask] = subset_weight[mask ^ low] + weights[low_bit] / sum;
        int bits = __builtin_popcountll(mask);
        expected += (bits % 2 == 1 ? 1.0 : -1.0) / subset_weight[mask];
    }
    return expected;
}

// Monte Carlo estimate of the same quantity: simulates draw-until-complete
// trials with CDF inversion.
inline double expected_coverage_monte_carlo(const std::vector<double>& weights, int trials,
                                            uint64_t seed) {
    size_t m = weights.size();
    if (m == 0) throw DataError("expected_coverage_monte_carlo: no modes");
    if (trials < 1) throw DataError("expected_coverage_monte_carlo: need at least one trial");
    double sum = 0.0;
    for (double w : weights) {
        if (!(w > 0.0)) throw DataError("expected_coverage_monte_carlo: weights must be positive");
        sum += w;
    }
    std::vector<double> cdf(m);
    double acc = 0.0;
    for (size_t k = 0; k < m; ++k) {
        acc += weights[k] / sum;
        cdf[k] = acc;
    }
    cdf[m - 1] = 1.0;

    Rng rng = substream(seed, StreamKind::clustering, 0xc0u);
    double total_draws = 0.0;
    for (int t = 0; t < trials; ++t) {
        std::vector<char> seen(m, 0);
        size_t remaining = m;
        uint64_t draws = 0;
        while (remaining > 0) {
            double u = rng.uniform();
            size_t k = static_cast<size_t>(
                std::lower_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
            if (k >= m) k = m - 1;
            ++draws;
            if (!seen[k]) {
                seen[k] = 1;
                --remaining;
            }
        }
        total_draws += static_cast<double>(draws);
    }
    return total_draws / trials;
}

// Everything the sweep reports for one (instance, method) cell.
struct EvaluationReport {
    double hm_iou = 0.0;
    double hm_iou_star = 0.0;
    int distinct_modes = 0;
    double image_quality = 0.0;
    double tvd = 0.0;
    double brier = 0.0;
};

inline EvaluationReport evaluate_samples(const std::vector<BinaryMask>& samples,
                                         const ModeSet& modes) {
    EvaluationReport r;
    r.hm_iou = hm_iou(samples, modes.masks);
    r.hm_iou_star = hm_iou_star(samples, modes.masks);
    r.distinct_modes = distinct_modes(samples, modes.masks);
    r.image_quality = image_quality(samples, modes.masks);
    r.tvd = tvd_calibration(samples, modes);
    r.brier = brier_calibration(samples, modes);
    return r;
}

}  // namespace divseg
