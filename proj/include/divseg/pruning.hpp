#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <numeric>
#include <vector>

#include "divseg/grid.hpp"
#include "divseg/rng.hpp"
#include "divseg/sampler.hpp"

namespace divseg {

struct KmedoidsResult {
    std::vector<int> medoids;     // point indices, ascending
    std::vector<int> assignment;  // per point: position in `medoids`
    double objective = 0.0;       // sum of distances to assigned medoids
};

namespace detail {

inline double kmedoids_objective(const std::vector<std::vector<double>>& dist,
                                 const std::vector<int>& medoids) {
    double total = 0.0;
    for (size_t p = 0; p < dist.size(); ++p) {
        double best = std::numeric_limits<double>::infinity();
        for (int m : medoids) best = std::min(best, dist[p][m]);
        total += best;
    }
    return total;
}

// One full local search from a fixed first medoid: greedy objective-minimizing
// seeding, assign/update alternation to a fixed point, then single-swap
// refinement. Every stage is deterministic with ties broken by lowest index.
inline std::vector<int> kmedoids_single_run(const std::vector<std::vector<double>>& dist, int k,
                                            int first, int iteration_cap) {
    int n = static_cast<int>(dist.size());
    std::vector<int> meds{first};
    std::vector<double> nearest(dist[0].size());
    for (int p = 0; p < n; ++p) nearest[p] = dist[p][first];

    while (static_cast<int>(meds.size()) < k) {
        int best_c = -1;
        double best_obj = std::numeric_limits<double>::infinity();
        for (int c = 0; c < n; ++c) {
            if (std::find(meds.begin(), meds.end(), c) != meds.end()) continue;
            double obj = 0.0;
            for (int p = 0; p < n; ++p) obj += std::min(nearest[p], dist[p][c]);
            if (obj < best_obj - 1e-12) {
                best_obj = obj;
                best_c = c;
            }
        }
        meds.push_back(best_c);
        for (int p = 0; p < n; ++p) nearest[p] = std::min(nearest[p], dist[p][best_c]);
    }

    // Assign/update alternation. Duplicate points need care: a medoid whose
    // twin sits in an earlier slot loses its whole cluster to the tie-break,
    // and naively keeping its old index while the earlier slot re-picks that
    // same point would collapse two slots onto one. The taken set keeps the
    // medoid indices distinct; orphaned slots grab any free point, which never
    // raises the objective because such a slot was fully shadowed by its twin.
    for (int it = 0; it < iteration_cap; ++it) {
        std::vector<std::vector<int>> members(meds.size());
        for (int p = 0; p < n; ++p) {
            int arg = 0;
            for (size_t m = 1; m < meds.size(); ++m)
                if (dist[p][meds[m]] < dist[p][meds[arg]]) arg = static_cast<int>(m);
            members[arg].push_back(p);
        }
        std::vector<int> next = meds;
        std::vector<char> taken(n, 0);
        for (size_t m = 0; m < meds.size(); ++m) {
            if (members[m].empty()) continue;
            double best = std::numeric_limits<double>::infinity();
            int arg = meds[m];
            for (int cand : members[m]) {
                double s = 0.0;
                for (int p : members[m]) s += dist[cand][p];
                if (s < best - 1e-12) {
                    best = s;
                    arg = cand;
                }
            }
            next[m] = arg;
            taken[arg] = 1;
        }
        for (size_t m = 0; m < meds.size(); ++m) {
            if (!members[m].empty()) continue;
            if (!taken[next[m]]) {
                taken[next[m]] = 1;
                continue;
            }
            for (int q = 0; q < n; ++q)
                if (!taken[q]) {
                    next[m] = q;
                    taken[q] = 1;
                    break;
                }
        }
        if (next == meds) break;
        meds = next;
    }

    // Swap refinement: repeatedly apply the best improving single-medoid swap.
    for (int it = 0; it < iteration_cap; ++it) {
        double cur = kmedoids_objective(dist, meds);
        double best = cur;
        int best_slot = -1, best_pt = -1;
        for (size_t m = 0; m < meds.size(); ++m) {
            for (int q = 0; q < n; ++q) {
                if (std::find(meds.begin(), meds.end(), q) != meds.end()) continue;
                std::vector<int> cand = meds;
                cand[m] = q;
                double obj = kmedoids_objective(dist, cand);
                if (obj < best - 1e-12) {
                    best = obj;
                    best_slot = static_cast<int>(m);
                    best_pt = q;
                }
            }
        }
        if (best_slot < 0) break;
        meds[best_slot] = best_pt;
    }

    std::sort(meds.begin(), meds.end());
    return meds;
}

}  // namespace detail

// k-medoids on a precomputed symmetric distance matrix. The local search runs
// from a spread of starting medoids and keeps the best objective, which makes
// the result exhaustive-equivalent on small inputs; deterministic throughout
// (the seed only shuffles nothing today but stays part of the contract).
inline KmedoidsResult kmedoids(const std::vector<std::vector<double>>& dist, int k,
                               uint64_t /*seed*/ = 0, int iteration_cap = 100) {
    int n = static_cast<int>(dist.size());
    if (k < 1) throw DataError("kmedoids: k must be >= 1");
    if (k > n) throw DataError("kmedoids: k exceeds number of points");
    for (const auto& row : dist)
        if (static_cast<int>(row.size()) != n) throw DataError("kmedoids: distance matrix not square");

    const int max_restarts = 128;
    int restarts = std::min(n, max_restarts);

    std::vector<int> best_meds;
    double best_obj = std::numeric_limits<double>::infinity();
    for (int s = 0; s < restarts; ++s) {
        int first = static_cast<int>(static_cast<int64_t>(s) * n / restarts);
        std::vector<int> meds = detail::kmedoids_single_run(dist, k, first, iteration_cap);
        double obj = detail::kmedoids_objective(dist, meds);
        if (obj < best_obj - 1e-12 ||
            (obj <= best_obj + 1e-12 && (best_meds.empty() || meds < best_meds))) {
            best_obj = obj;
            best_meds = meds;
        }
    }

    KmedoidsResult res;
    res.medoids = best_meds;
    res.objective = best_obj;
    res.assignment.resize(n);
    for (int p = 0; p < n; ++p) {
        int arg = 0;
        for (size_t m = 1; m < best_meds.size(); ++m)
            if (dist[p][best_meds[m]] < dist[p][best_meds[arg]]) arg = static_cast<int>(m);
        res.assignment[p] = arg;
    }
    return res;
}

enum class PruneDistance { chamfer, l2 };

struct PruneConfig {
    int b_init = 64;
    int k = 8;
    int prune_after_step = 0;  // full Heun steps taken before clustering
    PruneDistance distance = PruneDistance::chamfer;
    int medoid_iteration_cap = 100;
};

struct PruneResult {
    std::vector<BinaryMask> masks;
    std::vector<LatentGrid> latents;
    std::vector<int> survivor_indices;  // particle indices within the initial batch
};

// Oversample -> advance -> cluster one-step predictions -> keep medoid
// trajectories -> finish. Both sampling phases are naive, so every survivor
// is bitwise identical to the naive trajectory from the same initial noise.
inline PruneResult prune_and_finish(const DenoiserModel& model, const PruneConfig& pcfg,
                                    const SamplerConfig& scfg, const Conditioning& c) {
    if (pcfg.k < 1 || pcfg.k > pcfg.b_init)
        throw DataError("prune_and_finish: need 1 <= k <= b_init");
    if (pcfg.prune_after_step < 0 || pcfg.prune_after_step > scfg.schedule.steps)
        throw DataError("prune_and_finish: prune_after_step outside schedule");

    SamplerConfig naive_cfg = scfg;
    naive_cfg.method = SamplingMethod::naive;

    std::vector<double> ts = make_schedule(naive_cfg.schedule);
    std::vector<LatentGrid> xs = detail::draw_initial_latents(naive_cfg, c, pcfg.b_init);
    Rng cads_rng = substream(naive_cfg.seed, StreamKind::conditioning,
                             static_cast<uint64_t>(c.id), naive_cfg.batch_index);
    detail::advance(model, naive_cfg, c, nullptr, xs, 0, pcfg.prune_after_step, &cads_rng);

    // One-step predictions at the current noise level; at the schedule end the
    // particles are already noise-free.
    std::vector<LatentGrid> preds;
    preds.reserve(xs.size());
    if (pcfg.prune_after_step == naive_cfg.schedule.steps) {
        preds = xs;
    } else {
        double t = ts[pcfg.prune_after_step];
        for (const auto& x : xs) preds.push_back(model.denoise(x, t, c));
    }

    std::vector<std::vector<double>> dist;
    if (pcfg.distance == PruneDistance::chamfer) {
        std::vector<BinaryMask> pred_masks;
        pred_masks.reserve(preds.size());
        for (const auto& p : preds) pred_masks.push_back(threshold(p));
        dist = chamfer_distance_matrix(pred_masks);
    } else {
        size_t n = preds.size();
        dist.assign(n, std::vector<double>(n, 0.0));
        for (size_t i = 0; i < n; ++i)
            for (size_t j = i + 1; j < n; ++j)
                dist[i][j] = dist[j][i] = l2_distance(preds[i], preds[j]);
    }

    KmedoidsResult km = kmedoids(dist, pcfg.k,
                                 substream_seed(naive_cfg.seed, StreamKind::clustering,
                                                static_cast<uint64_t>(c.id), naive_cfg.batch_index),
                                 pcfg.medoid_iteration_cap);

    std::vector<LatentGrid> survivors;
    survivors.reserve(km.medoids.size());
    for (int idx : km.medoids) survivors.push_back(xs[idx]);
    detail::advance(model, naive_cfg, c, nullptr, survivors, pcfg.prune_after_step,
                    naive_cfg.schedule.steps, &cads_rng);

    PruneResult res;
    res.survivor_indices = km.medoids;
    res.masks.reserve(survivors.size());
    for (const auto& x : survivors) res.masks.push_back(threshold(x));
    res.latents = std::move(survivors);
    return res;
}

}  // namespace divseg
