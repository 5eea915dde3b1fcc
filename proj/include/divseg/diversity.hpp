#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "divseg/denoiser.hpp"
#include "divseg/grid.hpp"
#include "divseg/rng.hpp"

namespace divseg {

// Which finished/concurrent samples a particle is repelled from.
enum class RepellencePolicy { batch, bank, batch_and_bank };

// Finished continuous latents from earlier batches; entries are constants
// (no gradient flows into them).
struct MemoryBank {
    std::vector<LatentGrid> entries;

    void add(const LatentGrid& g) { entries.push_back(g); }
    bool empty() const { return entries.empty(); }
    size_t size() const { return entries.size(); }
};

enum class GuidanceSteps { first, all };

// Default rule squares the median of already-squared pairwise distances; the
// dimensionally conventional m/log(B) variant stays available behind the
// switch.
enum class BandwidthRule { median_squared_over_log, median_over_log };

struct PgConfig {
    double alpha = 25.0;
    GuidanceSteps guidance_steps = GuidanceSteps::first;
    RepellencePolicy policy = RepellencePolicy::batch;
    BandwidthRule bandwidth_rule = BandwidthRule::median_squared_over_log;
};

struct SpellConfig {
    double r = 0.0;
    double s_min = 40.0;  // active while t >= s_min
    RepellencePolicy policy = RepellencePolicy::batch;
};

struct CadsConfig {
    double gamma = 0.0;  // attenuation in [0,1]; 0 disables the transform entirely
};

inline double pg_kernel(const LatentGrid& a, const LatentGrid& b, double h) {
    if (!(h > 0.0)) throw DataError("pg_kernel: bandwidth must be positive");
    double d = l2_distance(a, b);
    return std::exp(-(d * d) / h);
}

// Bandwidth from the median m of pairwise squared L2 distances (off-diagonal,
// i<j; even count -> mean of the middle two), floored at 1e-8.
inline double pg_bandwidth(std::vector<double> pairwise_squared, size_t batch,
                           BandwidthRule rule = BandwidthRule::median_squared_over_log) {
    if (batch < 2) throw DataError("pg_bandwidth: need at least two particles");
    if (pairwise_squared.empty()) throw DataError("pg_bandwidth: no pairwise distances");
    std::sort(pairwise_squared.begin(), pairwise_squared.end());
    size_t n = pairwise_squared.size();
    double m = (n % 2 == 1) ? pairwise_squared[n / 2]
                            : 0.5 * (pairwise_squared[n / 2 - 1] + pairwise_squared[n / 2]);
    double lb = std::log(static_cast<double>(batch));
    double h = rule == BandwidthRule::median_squared_over_log ? m * m / lb : m / lb;
    return std::max(h, 1e-8);
}

namespace detail {

// Repellence targets for one particle: peer one-step predictions and/or bank
// latents, depending on policy.
inline std::vector<const LatentGrid*> repellence_set(const std::vector<LatentGrid>& preds, size_t i,
                                                     RepellencePolicy policy,
                                                     const MemoryBank* bank) {
    std::vector<const LatentGrid*> set;
    if (policy == RepellencePolicy::batch || policy == RepellencePolicy::batch_and_bank)
        for (size_t j = 0; j < preds.size(); ++j)
            if (j != i) set.push_back(&preds[j]);
    if ((policy == RepellencePolicy::bank || policy == RepellencePolicy::batch_and_bank) && bank)
        for (const auto& e : bank->entries) set.push_back(&e);
    return set;
}

}  // namespace detail

// Gradient of g(x_i) = -sum_j k(x~_i, x~_j; h) with respect to x_i, where
// x~ = D(x;t,c) are one-step predictions. The bandwidth is a constant of the
// batch (no gradient through the median); bank entries are constants.
inline std::vector<LatentGrid> pg_guidance_gradient(const DenoiserModel& model,
                                                    const std::vector<LatentGrid>& batch, double t,
                                                    const Conditioning& c, const PgConfig& cfg,
                                                    const MemoryBank* bank = nullptr) {
    size_t B = batch.size();
    std::vector<LatentGrid> preds;
    preds.reserve(B);
    for (const auto& x : batch) preds.push_back(model.denoise(x, t, c));

    std::vector<LatentGrid> grads;
    grads.reserve(B);

    // Bandwidth from within-batch pairs; with a lone particle repelled only by
    // the bank, fall back to particle-bank distances.
    std::vector<double> sq;
    for (size_t i = 0; i < B; ++i)
        for (size_t j = i + 1; j < B; ++j) {
            double d = l2_distance(preds[i], preds[j]);
            sq.push_back(d * d);
        }
    size_t log_count = B;
    if (sq.empty()) {
        bool use_bank = cfg.policy != RepellencePolicy::batch && bank && !bank->empty();
        if (!use_bank) {
            for (size_t i = 0; i < B; ++i) grads.emplace_back(batch[i].height, batch[i].width);
            return grads;
        }
        for (size_t i = 0; i < B; ++i)
            for (const auto& e : bank->entries) {
                double d = l2_distance(preds[i], e);
                sq.push_back(d * d);
            }
        log_count = std::max<size_t>(2, bank->size() + B);
    }
    double h = pg_bandwidth(std::move(sq), std::max<size_t>(log_count, 2), cfg.bandwidth_rule);

    for (size_t i = 0; i < B; ++i) {
        auto set = detail::repellence_set(preds, i, cfg.policy, bank);
        LatentGrid upstream(batch[i].height, batch[i].width);
        for (const LatentGrid* other : set) {
            double dsq = 0.0;
            for (size_t p = 0; p < upstream.size(); ++p) {
                double d = preds[i].values[p] - other->values[p];
                dsq += d * d;
            }
            double k = std::exp(-dsq / h);
            double coef = 2.0 * k / h;
            for (size_t p = 0; p < upstream.size(); ++p)
                upstream.values[p] += coef * (preds[i].values[p] - other->values[p]);
        }
        grads.push_back(model.vjp(batch[i], t, c, upstream));
    }
    return grads;
}

namespace detail {

// Deterministic unit direction for exactly coincident predictions,
// antisymmetric under swapping the pair.
inline LatentGrid coincident_direction(size_t i, size_t j, int h, int w) {
    size_t lo = std::min(i, j), hi = std::max(i, j);
    Rng rng(substream_seed(0x5be11d1ull, StreamKind::clustering, lo, hi));
    LatentGrid u(h, w);
    double norm = 0.0;
    for (auto& v : u.values) {
        v = rng.normal();
        norm += v * v;
    }
    norm = std::sqrt(norm);
    if (norm < 1e-300) {  // astronomically unlikely; fall back to a basis vector
        u.values.assign(u.size(), 0.0);
        u.values[0] = 1.0;
        norm = 1.0;
    }
    double sign = (i == lo) ? 1.0 : -1.0;
    for (auto& v : u.values) v *= sign / norm;
    return u;
}

}  // namespace detail

// SPELL correction: Delta_i = sum_b relu(r/|x~_i - x~_b| - 1) (x~_i - x~_b)
// over each particle's repellence set. Pairs at distance >= r contribute
// nothing; exactly coincident pairs contribute r along a deterministic
// pseudo-random direction (the d -> 0 limit of the formula).
inline std::vector<LatentGrid> spell_delta(const std::vector<LatentGrid>& preds, double r,
                                           RepellencePolicy policy = RepellencePolicy::batch,
                                           const MemoryBank* bank = nullptr) {
    size_t B = preds.size();
    std::vector<LatentGrid> deltas;
    deltas.reserve(B);
    for (size_t i = 0; i < B; ++i) deltas.emplace_back(preds[i].height, preds[i].width);
    if (r <= 0.0) return deltas;

    size_t bank_offset = B;  // bank entry j gets pair index B+j for the jitter rule
    for (size_t i = 0; i < B; ++i) {
        auto add_repulsion = [&](const LatentGrid& other, size_t other_index) {
            double d = l2_distance(preds[i], other);
            if (d >= r) return;
            if (d < 1e-9) {
                LatentGrid u = detail::coincident_direction(i, other_index, preds[i].height,
                                                            preds[i].width);
                for (size_t p = 0; p < u.size(); ++p) deltas[i].values[p] += r * u.values[p];
                return;
            }
            double coef = r / d - 1.0;
            for (size_t p = 0; p < preds[i].size(); ++p)
                deltas[i].values[p] += coef * (preds[i].values[p] - other.values[p]);
        };
        if (policy == RepellencePolicy::batch || policy == RepellencePolicy::batch_and_bank)
            for (size_t j = 0; j < B; ++j)
                if (j != i) add_repulsion(preds[j], j);
        if ((policy == RepellencePolicy::bank || policy == RepellencePolicy::batch_and_bank) && bank)
            for (size_t j = 0; j < bank->entries.size(); ++j)
                add_repulsion(bank->entries[j], bank_offset + j);
    }
    return deltas;
}

// Denoise with the SPELL correction applied when t >= s_min. `peers` holds the
// one-step predictions of the other particles in the batch.
inline LatentGrid spell_modified_denoise(const DenoiserModel& model, const LatentGrid& x, double t,
                                         const Conditioning& c,
                                         const std::vector<LatentGrid>& peers,
                                         const SpellConfig& cfg, const MemoryBank* bank = nullptr) {
    LatentGrid d = model.denoise(x, t, c);
    if (t < cfg.s_min || cfg.r <= 0.0) return d;
    std::vector<LatentGrid> preds;
    preds.reserve(peers.size() + 1);
    preds.push_back(d);
    for (const auto& p : peers) preds.push_back(p);
    auto deltas = spell_delta(preds, cfg.r, cfg.policy, bank);
    for (size_t i = 0; i < d.size(); ++i) d.values[i] += deltas[0].values[i];
    return d;
}

// Data-driven shield radius: per input, the minimum pairwise L2 distance among
// unique encoded targets; r0 is the mean of these minima. Inputs with fewer
// than two unique targets are skipped and counted.
inline double estimate_r0(const std::vector<std::vector<BinaryMask>>& modes_per_input,
                          size_t* skipped_out = nullptr) {
    double sum = 0.0;
    size_t used = 0, skipped = 0;
    for (const auto& modes : modes_per_input) {
        std::vector<const BinaryMask*> unique;
        for (const auto& m : modes) {
            bool dup = false;
            for (const BinaryMask* u : unique)
                if (*u == m) {
                    dup = true;
                    break;
                }
            if (!dup) unique.push_back(&m);
        }
        if (unique.size() < 2) {
            ++skipped;
            continue;
        }
        double best = std::numeric_limits<double>::infinity();
        for (size_t a = 0; a < unique.size(); ++a)
            for (size_t b = a + 1; b < unique.size(); ++b)
                best = std::min(best, l2_distance(encode(*unique[a]), encode(*unique[b])));
        sum += best;
        ++used;
    }
    if (skipped_out) *skipped_out = skipped;
    if (used == 0) throw DataError("estimate_r0: no input has two unique targets");
    return sum / static_cast<double>(used);
}

// Conditioning-noise ablation: c -> (c + gamma*eps) / (1 + t^2) with
// eps ~ N(0, t^2 I). gamma = 0 bypasses entirely (no RNG consumption).
inline Conditioning cads_perturb(const Conditioning& c, double t, const CadsConfig& cfg, Rng& rng) {
    if (cfg.gamma < 0.0 || cfg.gamma > 1.0) throw DataError("cads_perturb: gamma must be in [0,1]");
    if (cfg.gamma == 0.0) return c;
    Conditioning out = c;
    double scale = 1.0 / (1.0 + t * t);
    for (auto& v : out.data) v = (v + cfg.gamma * t * rng.normal()) * scale;
    return out;
}

}  // namespace divseg
