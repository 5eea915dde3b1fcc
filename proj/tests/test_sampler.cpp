#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "divseg/denoiser.hpp"
#include "divseg/rng.hpp"
#include "divseg/sampler.hpp"

using namespace divseg;

namespace {

LatentGrid block_prototype(int h, int w, bool left) {
    BinaryMask m(h, w);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) m.at(r, c) = (left ? c < w / 2 : c >= w / 2) ? 1 : 0;
    return encode(m);
}

bool bitwise_equal(const std::vector<LatentGrid>& a, const std::vector<LatentGrid>& b) {
    if (a.size() != b.size()) return false;
    for (size_t i = 0; i < a.size(); ++i)
        if (a[i].values != b[i].values) return false;
    return true;
}

// D(x) = x makes the naive slope exactly zero, so the final latents reproduce
// every perturbation along the way instead of being erased by convergence onto
// a prototype.
struct IdentityModel final : DenoiserModel {
    LatentGrid denoise(const LatentGrid& x, double, const Conditioning&) const override {
        return x;
    }
    LatentGrid vjp(const LatentGrid&, double, const Conditioning&,
                   const LatentGrid& upstream) const override {
        return upstream;
    }
};

}  // namespace

TEST(Sampler, ScheduleTwoSteps) {
    NoiseSchedule s;
    s.steps = 2;
    auto t = make_schedule(s);
    ASSERT_EQ(t.size(), 3u);
    EXPECT_DOUBLE_EQ(t[0], 80.0);
    EXPECT_DOUBLE_EQ(t[1], 0.002);
    EXPECT_DOUBLE_EQ(t[2], 0.0);
}

TEST(Sampler, ScheduleDefaultValues) {
    auto t = make_schedule(NoiseSchedule{});
    ASSERT_EQ(t.size(), 11u);
    EXPECT_DOUBLE_EQ(t[0], 80.0);
    EXPECT_NEAR(t[1], 42.4151893185, 1e-9);
    EXPECT_NEAR(t[2], 21.1086767362, 1e-9);
    EXPECT_NEAR(t[9], 0.002, 1e-12);
    EXPECT_DOUBLE_EQ(t[10], 0.0);
    for (size_t i = 0; i + 1 < t.size(); ++i) EXPECT_GT(t[i], t[i + 1]);
}

TEST(Sampler, ScheduleValidation) {
    NoiseSchedule s;
    s.steps = 1;
    EXPECT_THROW(make_schedule(s), DataError);
    s = NoiseSchedule{};
    s.sigma_min = 0.0;
    EXPECT_THROW(make_schedule(s), DataError);
    s = NoiseSchedule{};
    s.sigma_max = s.sigma_min;
    EXPECT_THROW(make_schedule(s), DataError);
    s = NoiseSchedule{};
    s.rho = 0.0;
    EXPECT_THROW(make_schedule(s), DataError);
}

TEST(Sampler, HeunStepValidation) {
    BatchSlopeFn zero = [](const std::vector<LatentGrid>& xs, double, bool) {
        std::vector<LatentGrid> d;
        for (const auto& x : xs) d.emplace_back(x.height, x.width);
        return d;
    };
    std::vector<LatentGrid> x = {LatentGrid(2, 2)};
    EXPECT_THROW(heun_step(zero, x, 1.0, 1.0), DataError);
    EXPECT_THROW(heun_step(zero, x, 1.0, 2.0), DataError);
    EXPECT_THROW(heun_step(zero, x, 1.0, -0.5), DataError);
}

TEST(Sampler, HeunSkipsCorrectorAtZero) {
    int calls = 0;
    std::vector<bool> correction_flags;
    BatchSlopeFn count = [&](const std::vector<LatentGrid>& xs, double, bool corr) {
        ++calls;
        correction_flags.push_back(corr);
        std::vector<LatentGrid> d;
        for (const auto& x : xs) d.emplace_back(x.height, x.width, 1.0);
        return d;
    };
    std::vector<LatentGrid> x = {LatentGrid(2, 2, 5.0)};

    heun_step(count, x, 1.0, 0.5);
    EXPECT_EQ(calls, 2);
    ASSERT_EQ(correction_flags.size(), 2u);
    EXPECT_FALSE(correction_flags[0]);
    EXPECT_TRUE(correction_flags[1]);

    calls = 0;
    auto out = heun_step(count, x, 1.0, 0.0);
    EXPECT_EQ(calls, 1);  // Euler only on the final step
    EXPECT_DOUBLE_EQ(out[0].values[0], 4.0);  // x + dt * d = 5 - 1
}

TEST(Sampler, HeunTrapezoidalUpdate) {
    // Slope depends on t only, so the two evaluations are known exactly.
    BatchSlopeFn slope = [](const std::vector<LatentGrid>& xs, double t, bool) {
        std::vector<LatentGrid> d;
        for (const auto& x : xs) d.emplace_back(x.height, x.width, t * t);
        return d;
    };
    std::vector<LatentGrid> x = {LatentGrid(1, 1, 10.0)};
    auto out = heun_step(slope, x, 2.0, 1.0);
    // x + dt * (d(t=2) + d(t=1)) / 2 = 10 + (-1) * (4 + 1)/2 = 7.5
    EXPECT_DOUBLE_EQ(out[0].values[0], 7.5);
}

TEST(Sampler, SinglePrototypeTrajectoryIsExact) {
    // With one prototype the ODE slope is (x - y)/t, whose solution is a straight
    // line into y; Heun reproduces it exactly, so the full schedule must land on
    // the prototype to high accuracy.
    MixtureDenoiser model;
    LatentGrid y = block_prototype(8, 8, true);
    model.add_instance(0, {y}, {1.0});
    Conditioning c = Conditioning::empty(0, 8, 8);

    for (uint64_t seed : {1ull, 2ull, 3ull, 4ull, 5ull}) {
        SamplerConfig cfg;
        cfg.batch_size = 1;
        cfg.seed = seed;
        auto res = sample_batch(model, cfg, c);
        for (size_t i = 0; i < y.size(); ++i)
            EXPECT_NEAR(res.latents[0].values[i], y.values[i], 1e-4) << "seed " << seed;
    }
}

TEST(Sampler, WellSeparatedModesRecovered) {
    MixtureDenoiser model;
    LatentGrid a = block_prototype(8, 8, true);
    LatentGrid b = block_prototype(8, 8, false);
    model.add_instance(0, {a, b}, {1.0, 1.0});
    Conditioning c = Conditioning::empty(0, 8, 8);

    SamplerConfig cfg;
    cfg.batch_size = 16;
    cfg.seed = 99;
    auto res = sample_batch(model, cfg, c);

    BinaryMask ma = threshold(a), mb = threshold(b);
    int hits_a = 0, hits_b = 0;
    for (const auto& m : res.masks) {
        double best = std::max(iou(m, ma), iou(m, mb));
        EXPECT_GE(best, 0.99);
        if (iou(m, ma) > iou(m, mb)) ++hits_a; else ++hits_b;
    }
    EXPECT_GT(hits_a, 0);
    EXPECT_GT(hits_b, 0);
}

TEST(Sampler, DeterministicAcrossRuns) {
    MixtureDenoiser model;
    model.add_instance(0, {block_prototype(6, 6, true), block_prototype(6, 6, false)}, {2.0, 1.0});
    Conditioning c = Conditioning::empty(0, 6, 6);

    SamplerConfig cfg;
    cfg.batch_size = 4;
    cfg.seed = 7;
    auto r1 = sample_batch(model, cfg, c);
    auto r2 = sample_batch(model, cfg, c);
    EXPECT_TRUE(bitwise_equal(r1.latents, r2.latents));
    for (size_t i = 0; i < r1.masks.size(); ++i) EXPECT_EQ(r1.masks[i], r2.masks[i]);
}

TEST(Sampler, NaiveParticleIndependentOfBatchSize) {
    MixtureDenoiser model;
    model.add_instance(0, {block_prototype(6, 6, true), block_prototype(6, 6, false)}, {1.0, 1.0});
    Conditioning c = Conditioning::empty(0, 6, 6);

    SamplerConfig solo;
    solo.batch_size = 1;
    solo.seed = 21;
    SamplerConfig wide = solo;
    wide.batch_size = 5;

    auto r1 = sample_batch(model, solo, c);
    auto r5 = sample_batch(model, wide, c);
    EXPECT_EQ(r1.latents[0].values, r5.latents[0].values);
}

TEST(Sampler, SeedBatchIndexAndParticleAllMatter) {
    // An exact mixture pulls every trajectory onto a prototype, which would
    // hide where each one started; the identity model keeps the slope at zero
    // so the finals preserve the initial draws.
    IdentityModel model;
    Conditioning c = Conditioning::empty(0, 6, 6);

    SamplerConfig base;
    base.batch_size = 2;
    base.seed = 1;

    auto r = sample_batch(model, base, c);
    EXPECT_NE(r.latents[0].values, r.latents[1].values);

    SamplerConfig other_seed = base;
    other_seed.seed = 2;
    EXPECT_NE(sample_batch(model, other_seed, c).latents[0].values, r.latents[0].values);

    SamplerConfig other_batch = base;
    other_batch.batch_index = 1;
    EXPECT_NE(sample_batch(model, other_batch, c).latents[0].values, r.latents[0].values);
}

TEST(Sampler, DisabledHooksReproduceNaiveBitwise) {
    MixtureDenoiser model;
    model.add_instance(0, {block_prototype(8, 8, true), block_prototype(8, 8, false)}, {3.0, 1.0});
    Conditioning c = Conditioning::empty(0, 8, 8);

    SamplerConfig naive;
    naive.batch_size = 4;
    naive.seed = 31;
    auto base = sample_batch(model, naive, c);

    SamplerConfig pg0 = naive;
    pg0.method = SamplingMethod::particle_guidance;
    pg0.pg.alpha = 0.0;
    EXPECT_TRUE(bitwise_equal(sample_batch(model, pg0, c).latents, base.latents));

    SamplerConfig sp0 = naive;
    sp0.method = SamplingMethod::spell;
    sp0.spell.r = 0.0;
    EXPECT_TRUE(bitwise_equal(sample_batch(model, sp0, c).latents, base.latents));

    SamplerConfig cads0 = naive;
    cads0.cads.gamma = 0.0;
    EXPECT_TRUE(bitwise_equal(sample_batch(model, cads0, c).latents, base.latents));
}

TEST(Sampler, ActiveHooksChangeTrajectories) {
    IdentityModel model;
    Conditioning c = Conditioning::empty(0, 8, 8);

    SamplerConfig naive;
    naive.batch_size = 4;
    naive.seed = 13;
    auto base = sample_batch(model, naive, c);

    SamplerConfig pg = naive;
    pg.method = SamplingMethod::particle_guidance;
    pg.pg.alpha = 25.0;
    EXPECT_FALSE(bitwise_equal(sample_batch(model, pg, c).latents, base.latents));

    // The shield only fires once predictions sit closer than r; identity
    // predictions at the first noise level are ~sigma_max * sqrt(2 * 64)
    // apart, so r has to sit above that.
    SamplerConfig sp = naive;
    sp.method = SamplingMethod::spell;
    sp.spell.r = 2000.0;
    EXPECT_FALSE(bitwise_equal(sample_batch(model, sp, c).latents, base.latents));
}

TEST(Sampler, CadsPerturbationReachesTheModel) {
    // The conditioning anneal only shows up through a model that actually
    // reads the conditioning channels.
    struct CondShiftModel final : DenoiserModel {
        LatentGrid denoise(const LatentGrid& x, double, const Conditioning& c) const override {
            LatentGrid out = x;
            if (!c.data.empty())
                for (auto& v : out.values) v += c.data[0];
            return out;
        }
        LatentGrid vjp(const LatentGrid&, double, const Conditioning&,
                       const LatentGrid& upstream) const override {
            return upstream;
        }
    } model;

    Conditioning c = Conditioning::empty(0, 8, 8);
    c.channels = 1;
    c.data.assign(64, 0.25);

    SamplerConfig naive;
    naive.batch_size = 4;
    naive.seed = 13;
    auto base = sample_batch(model, naive, c);

    SamplerConfig cads = naive;
    cads.cads.gamma = 0.8;
    auto perturbed = sample_batch(model, cads, c);
    EXPECT_FALSE(bitwise_equal(perturbed.latents, base.latents));

    // Seeded: the anneal draws from the run's own streams.
    EXPECT_TRUE(bitwise_equal(sample_batch(model, cads, c).latents, perturbed.latents));
}

TEST(Sampler, ChurnIsSeededAndRepeatable) {
    IdentityModel model;
    Conditioning c = Conditioning::empty(0, 6, 6);

    SamplerConfig cfg;
    cfg.batch_size = 2;
    cfg.seed = 17;
    cfg.s_churn = 4.0;
    auto r1 = sample_batch(model, cfg, c);
    auto r2 = sample_batch(model, cfg, c);
    EXPECT_TRUE(bitwise_equal(r1.latents, r2.latents));

    SamplerConfig quiet = cfg;
    quiet.s_churn = 0.0;
    EXPECT_FALSE(bitwise_equal(sample_batch(model, quiet, c).latents, r1.latents));

    // Even with churn noise a single-prototype instance still converges.
    MixtureDenoiser mix;
    mix.add_instance(0, {block_prototype(6, 6, true)}, {1.0});
    auto conv = sample_batch(mix, cfg, c);
    for (size_t i = 0; i < conv.latents[0].size(); ++i)
        EXPECT_NEAR(conv.latents[0].values[i], block_prototype(6, 6, true).values[i], 1e-2);
}

TEST(Sampler, GuidanceOnAllStepsDiffersFromFirstOnly) {
    IdentityModel model;
    Conditioning c = Conditioning::empty(0, 8, 8);

    SamplerConfig first;
    first.batch_size = 4;
    first.seed = 3;
    first.method = SamplingMethod::particle_guidance;
    first.pg.guidance_steps = GuidanceSteps::first;

    SamplerConfig all = first;
    all.pg.guidance_steps = GuidanceSteps::all;

    EXPECT_FALSE(bitwise_equal(sample_batch(model, first, c).latents,
                               sample_batch(model, all, c).latents));
}

TEST(Sampler, CorrectorHookToggleMatters) {
    IdentityModel model;
    Conditioning c = Conditioning::empty(0, 8, 8);

    // Two particles: the predictor's repulsion lands them at distance
    // 0.06*d + 0.94*r, still inside the shield, so the correction
    // evaluation has something to do when it is enabled.
    SamplerConfig on;
    on.batch_size = 2;
    on.seed = 5;
    on.method = SamplingMethod::spell;
    on.spell.r = 2000.0;
    on.hooks_at_correction = true;

    SamplerConfig off = on;
    off.hooks_at_correction = false;

    EXPECT_FALSE(bitwise_equal(sample_batch(model, on, c).latents,
                               sample_batch(model, off, c).latents));
}

TEST(Sampler, BatchSizeValidation) {
    MixtureDenoiser model;
    model.add_instance(0, {block_prototype(4, 4, true)}, {1.0});
    Conditioning c = Conditioning::empty(0, 4, 4);
    SamplerConfig cfg;
    cfg.batch_size = 0;
    EXPECT_THROW(sample_batch(model, cfg, c), DataError);
}

TEST(Sampler, CadsGammaZeroConsumesNoRandomness) {
    Conditioning c = Conditioning::empty(0, 2, 2);
    c.channels = 1;
    c.data = {0.5, -0.5, 1.0, 0.0};
    Rng rng(77);
    CadsConfig off;  // gamma = 0
    Conditioning out = cads_perturb(c, 3.0, off, rng);
    EXPECT_EQ(out.data, c.data);
    Rng fresh(77);
    EXPECT_EQ(rng.next_u64(), fresh.next_u64());  // untouched state
}

TEST(Sampler, CadsTransformFormula) {
    Conditioning c = Conditioning::empty(0, 1, 2);
    c.channels = 1;
    c.data = {1.0, -2.0};
    CadsConfig cfg;
    cfg.gamma = 0.5;
    double t = 2.0;

    Rng rng(123);
    Conditioning out = cads_perturb(c, t, cfg, rng);

    Rng replay(123);
    for (size_t i = 0; i < c.data.size(); ++i) {
        double expected = (c.data[i] + cfg.gamma * t * replay.normal()) / (1.0 + t * t);
        EXPECT_DOUBLE_EQ(out.data[i], expected);
    }
}

TEST(Sampler, CadsGammaRange) {
    Conditioning c = Conditioning::empty(0, 1, 1);
    c.data = {0.0};
    Rng rng(1);
    CadsConfig bad;
    bad.gamma = -0.1;
    EXPECT_THROW(cads_perturb(c, 1.0, bad, rng), DataError);
    bad.gamma = 1.5;
    EXPECT_THROW(cads_perturb(c, 1.0, bad, rng), DataError);
    CadsConfig edge;
    edge.gamma = 1.0;
    EXPECT_NO_THROW(cads_perturb(c, 1.0, edge, rng));
}
