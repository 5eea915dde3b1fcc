#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "divseg/denoiser.hpp"
#include "divseg/diversity.hpp"
#include "divseg/grid.hpp"
#include "divseg/rng.hpp"

namespace divseg {

struct NoiseSchedule {
    double sigma_max = 80.0;
    double sigma_min = 0.002;
    double rho = 7.0;
    int steps = 10;
};

// t_i = (smax^(1/rho) + (i/(n-1)) * (smin^(1/rho) - smax^(1/rho)))^rho for
// i = 0..n-1, with t_n = 0 appended.
inline std::vector<double> make_schedule(const NoiseSchedule& s) {
    if (!(s.sigma_max > s.sigma_min) || !(s.sigma_min > 0.0))
        throw DataError("make_schedule: need sigma_max > sigma_min > 0");
    if (s.steps < 2) throw DataError("make_schedule: need at least 2 steps");
    if (!(s.rho > 0.0)) throw DataError("make_schedule: rho must be positive");
    std::vector<double> t(static_cast<size_t>(s.steps) + 1, 0.0);
    double a = std::pow(s.sigma_max, 1.0 / s.rho);
    double b = std::pow(s.sigma_min, 1.0 / s.rho);
    for (int i = 1; i + 1 < s.steps; ++i) {
        double frac = static_cast<double>(i) / (s.steps - 1);
        t[i] = std::pow(a + frac * (b - a), s.rho);
    }
    // Pin the endpoints so they don't pick up pow() round-trip error.
    t[0] = s.sigma_max;
    t[s.steps - 1] = s.sigma_min;
    t[s.steps] = 0.0;
    return t;
}

enum class SamplingMethod { naive, particle_guidance, spell };

struct SamplerConfig {
    NoiseSchedule schedule;
    double s_churn = 0.0;  // 0 keeps sampling fully deterministic
    SamplingMethod method = SamplingMethod::naive;
    PgConfig pg;
    SpellConfig spell;
    CadsConfig cads;  // conditioning-noise ablation; gamma=0 off
    bool hooks_at_correction = true;
    int batch_size = 8;
    uint64_t seed = 0;
    uint64_t batch_index = 0;
};

// Per-evaluation ODE slope of the whole batch; `correction` marks the second
// (Heun corrector) evaluation of a step.
using BatchSlopeFn = std::function<std::vector<LatentGrid>(const std::vector<LatentGrid>& x,
                                                           double t, bool correction)>;

// One deterministic 2nd-order Heun step of the batch from t_cur to t_next.
inline std::vector<LatentGrid> heun_step(const BatchSlopeFn& slope, const std::vector<LatentGrid>& x,
                                         double t_cur, double t_next) {
    if (!(t_cur > t_next) || t_next < 0.0)
        throw DataError("heun_step: need t_cur > t_next >= 0");
    double dt = t_next - t_cur;
    std::vector<LatentGrid> d = slope(x, t_cur, false);
    std::vector<LatentGrid> xp = x;
    for (size_t i = 0; i < x.size(); ++i)
        for (size_t p = 0; p < x[i].size(); ++p) xp[i].values[p] += dt * d[i].values[p];
    if (t_next <= 0.0) return xp;

    std::vector<LatentGrid> d2 = slope(xp, t_next, true);
    std::vector<LatentGrid> out = x;
    for (size_t i = 0; i < x.size(); ++i)
        for (size_t p = 0; p < x[i].size(); ++p)
            out[i].values[p] += dt * 0.5 * (d[i].values[p] + d2[i].values[p]);
    return out;
}

// Plain single-particle convenience overload: naive slope (x - D)/t.
inline LatentGrid heun_step(const DenoiserModel& model, const LatentGrid& x, double t_cur,
                            double t_next, const Conditioning& c) {
    BatchSlopeFn slope = [&](const std::vector<LatentGrid>& xs, double t, bool) {
        std::vector<LatentGrid> d;
        d.reserve(xs.size());
        for (const auto& xi : xs) {
            LatentGrid den = model.denoise(xi, t, c);
            LatentGrid di(xi.height, xi.width);
            for (size_t p = 0; p < xi.size(); ++p)
                di.values[p] = (xi.values[p] - den.values[p]) / t;
            d.push_back(std::move(di));
        }
        return d;
    };
    return heun_step(slope, {x}, t_cur, t_next)[0];
}

struct BatchResult {
    std::vector<LatentGrid> latents;  // final continuous states
    std::vector<BinaryMask> masks;    // thresholded outputs
};

namespace detail {

// Initial latents x ~ N(0, sigma_max^2 I), one substream per particle so the
// draw for particle p never depends on batch composition.
inline std::vector<LatentGrid> draw_initial_latents(const SamplerConfig& cfg, const Conditioning& c,
                                                    int count) {
    std::vector<LatentGrid> xs;
    xs.reserve(count);
    for (int p = 0; p < count; ++p) {
        Rng rng = substream(cfg.seed, StreamKind::init_noise, static_cast<uint64_t>(c.id),
                            cfg.batch_index, static_cast<uint64_t>(p));
        LatentGrid x(c.height, c.width);
        for (auto& v : x.values) v = cfg.schedule.sigma_max * rng.normal();
        xs.push_back(std::move(x));
    }
    return xs;
}

// Builds the slope function with the method's hooks wired in. `step_index`
// is read through the pointer so one closure serves the whole schedule.
inline BatchSlopeFn make_slope(const DenoiserModel& model, const SamplerConfig& cfg,
                               const Conditioning& c, const MemoryBank* bank,
                               const int* step_index, Rng* cads_rng) {
    return [&model, &cfg, &c, bank, step_index, cads_rng](const std::vector<LatentGrid>& xs,
                                                          double t, bool correction) {
        bool hooks_active = !correction || cfg.hooks_at_correction;

        Conditioning c_eval = c;
        if (cfg.cads.gamma > 0.0) c_eval = cads_perturb(c, t, cfg.cads, *cads_rng);

        // Denoiser outputs, optionally SPELL-modified before forming slopes.
        std::vector<LatentGrid> preds;
        preds.reserve(xs.size());
        for (const auto& x : xs) preds.push_back(model.denoise(x, t, c_eval));

        bool spell_on = cfg.method == SamplingMethod::spell && cfg.spell.r > 0.0 &&
                        hooks_active && t >= cfg.spell.s_min;
        if (spell_on) {
            auto deltas = spell_delta(preds, cfg.spell.r, cfg.spell.policy, bank);
            for (size_t i = 0; i < preds.size(); ++i)
                for (size_t p = 0; p < preds[i].size(); ++p)
                    preds[i].values[p] += deltas[i].values[p];
        }

        std::vector<LatentGrid> d;
        d.reserve(xs.size());
        for (size_t i = 0; i < xs.size(); ++i) {
            LatentGrid di(xs[i].height, xs[i].width);
            for (size_t p = 0; p < di.size(); ++p)
                di.values[p] = (xs[i].values[p] - preds[i].values[p]) / t;
            d.push_back(std::move(di));
        }

        bool pg_on = cfg.method == SamplingMethod::particle_guidance && cfg.pg.alpha > 0.0 &&
                     hooks_active &&
                     (cfg.pg.guidance_steps == GuidanceSteps::all || *step_index == 0);
        if (pg_on) {
            auto grads = pg_guidance_gradient(model, xs, t, c_eval, cfg.pg, bank);
            for (size_t i = 0; i < d.size(); ++i)
                for (size_t p = 0; p < d[i].size(); ++p)
                    d[i].values[p] -= t * cfg.pg.alpha * grads[i].values[p];
        }
        return d;
    };
}

// Advances the batch through schedule steps [step_begin, step_end) in lockstep.
inline void advance(const DenoiserModel& model, const SamplerConfig& cfg, const Conditioning& c,
                    const MemoryBank* bank, std::vector<LatentGrid>& xs, int step_begin,
                    int step_end, Rng* cads_rng) {
    std::vector<double> ts = make_schedule(cfg.schedule);
    int step_index = 0;
    BatchSlopeFn slope = make_slope(model, cfg, c, bank, &step_index, cads_rng);
    const double churn_cap = std::sqrt(2.0) - 1.0;

    for (int i = step_begin; i < step_end; ++i) {
        step_index = i;
        double t_cur = ts[i], t_next = ts[i + 1];

        if (cfg.s_churn > 0.0) {
            double gamma = std::min(cfg.s_churn / cfg.schedule.steps, churn_cap);
            double t_hat = t_cur * (1.0 + gamma);
            double extra = std::sqrt(t_hat * t_hat - t_cur * t_cur);
            for (size_t p = 0; p < xs.size(); ++p) {
                Rng rng = substream(cfg.seed, StreamKind::churn, static_cast<uint64_t>(c.id),
                                    cfg.batch_index, p);
                // Burn the draws of earlier steps so churn stays step-addressable.
                for (int skip = 0; skip < i; ++skip)
                    for (size_t q = 0; q < xs[p].size(); ++q) rng.normal();
                for (size_t q = 0; q < xs[p].size(); ++q)
                    xs[p].values[q] += extra * rng.normal();
            }
            t_cur = t_hat;
        }

        xs = heun_step(slope, xs, t_cur, t_next);
        for (size_t p = 0; p < xs.size(); ++p)
            if (!xs[p].finite())
                throw NumericalError("sample_batch: non-finite latent after step " +
                                     std::to_string(i));
    }
}

}  // namespace detail

// Runs the full schedule over one batch. All particles advance in lockstep so
// the diversity hooks can couple them; final continuous latents are appended
// to the bank when one is supplied.
inline BatchResult sample_batch(const DenoiserModel& model, const SamplerConfig& cfg,
                                const Conditioning& c, MemoryBank* bank = nullptr) {
    if (cfg.batch_size < 1) throw DataError("sample_batch: batch_size must be >= 1");
    std::vector<LatentGrid> xs = detail::draw_initial_latents(cfg, c, cfg.batch_size);
    Rng cads_rng = substream(cfg.seed, StreamKind::conditioning, static_cast<uint64_t>(c.id),
                             cfg.batch_index);
    detail::advance(model, cfg, c, bank, xs, 0, cfg.schedule.steps, &cads_rng);

    BatchResult res;
    res.masks.reserve(xs.size());
    for (const auto& x : xs) res.masks.push_back(threshold(x));
    res.latents = std::move(xs);
    if (bank)
        for (const auto& x : res.latents) bank->add(x);
    return res;
}

}  // namespace divseg
