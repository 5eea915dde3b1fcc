#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "divseg/denoiser.hpp"
#include "divseg/rng.hpp"

using namespace divseg;

namespace {

LatentGrid random_grid(Rng& rng, int h, int w, double scale = 1.0) {
    LatentGrid g(h, w);
    for (auto& v : g.values) v = scale * rng.normal();
    return g;
}

LatentGrid random_prototype(Rng& rng, int h, int w) {
    LatentGrid g(h, w);
    for (auto& v : g.values) v = (rng.next_u64() & 1) ? 1.0 : -1.0;
    return g;
}

struct Fixture {
    MixtureDenoiser model;
    std::vector<LatentGrid> protos;
    std::vector<double> weights;
    Conditioning cond;

    Fixture(uint64_t seed, int k, int h, int w) {
        Rng rng(seed);
        for (int i = 0; i < k; ++i) protos.push_back(random_prototype(rng, h, w));
        for (int i = 0; i < k; ++i) weights.push_back(1.0 + rng.uniform() * 3.0);
        model.add_instance(0, protos, weights);
        cond = Conditioning::empty(0, h, w);
    }
};

// log p(x) up to an x-independent constant, for p = sum_k w_k N(x; y_k, t^2 I).
double log_density(const Fixture& f, const LatentGrid& x, double t) {
    double total = 0.0;
    for (double w : f.weights) total += w;
    double mx = -1e300;
    std::vector<double> logits;
    for (size_t k = 0; k < f.protos.size(); ++k) {
        double sq = 0.0;
        for (size_t i = 0; i < x.size(); ++i) {
            double d = x.values[i] - f.protos[k].values[i];
            sq += d * d;
        }
        double l = std::log(f.weights[k] / total) - sq / (2.0 * t * t);
        logits.push_back(l);
        mx = std::max(mx, l);
    }
    double z = 0.0;
    for (double l : logits) z += std::exp(l - mx);
    return mx + std::log(z);
}

double dot(const LatentGrid& a, const LatentGrid& b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += a.values[i] * b.values[i];
    return s;
}

double norm(const LatentGrid& a) { return std::sqrt(dot(a, a)); }

}  // namespace

TEST(Denoiser, ValidationErrors) {
    MixtureDenoiser m;
    LatentGrid p(2, 2, 1.0);
    EXPECT_THROW(m.add_instance(0, {}, {}), DataError);
    EXPECT_THROW(m.add_instance(0, {p}, {1.0, 2.0}), DataError);
    EXPECT_THROW(m.add_instance(0, {p}, {0.0}), DataError);
    EXPECT_THROW(m.add_instance(0, {p}, {-1.0}), DataError);
    EXPECT_THROW(m.add_instance(0, {p, LatentGrid(3, 2)}, {1.0, 1.0}), DataError);

    m.add_instance(0, {p}, {2.0});
    Conditioning c = Conditioning::empty(0, 2, 2);
    LatentGrid x(2, 2);
    EXPECT_THROW(m.denoise(x, 1.0, Conditioning::empty(9, 2, 2)), DataError);
    EXPECT_THROW(m.denoise(x, 0.0, c), NumericalError);
    EXPECT_THROW(m.denoise(x, -1.0, c), NumericalError);
    EXPECT_THROW(m.denoise(LatentGrid(3, 3), 1.0, c), DataError);
    EXPECT_THROW(m.vjp(x, 1.0, c, LatentGrid(3, 3)), DataError);
    EXPECT_TRUE(m.has_instance(0));
    EXPECT_FALSE(m.has_instance(1));
}

TEST(Denoiser, ResponsibilitiesFormDistribution) {
    Fixture f(101, 5, 6, 6);
    Rng rng(55);
    for (double t : {0.01, 1.0, 10.0, 80.0}) {
        LatentGrid x = random_grid(rng, 6, 6, t);
        auto g = f.model.responsibilities(x, t, 0);
        ASSERT_EQ(g.size(), 5u);
        double sum = 0.0;
        for (double v : g) {
            EXPECT_GE(v, 0.0);
            sum += v;
        }
        EXPECT_NEAR(sum, 1.0, 1e-12);
    }
}

TEST(Denoiser, EquidistantPointFollowsWeights) {
    // Two prototypes mirrored around zero: at x = 0 the squared distances
    // cancel and the posterior must equal the prior weights.
    MixtureDenoiser m;
    LatentGrid a(1, 2), b(1, 2);
    a.values = {1.0, -1.0};
    b.values = {-1.0, 1.0};
    m.add_instance(0, {a, b}, {3.0, 1.0});
    LatentGrid x(1, 2);  // zeros
    auto g = m.responsibilities(x, 2.0, 0);
    EXPECT_NEAR(g[0], 0.75, 1e-12);
    EXPECT_NEAR(g[1], 0.25, 1e-12);
}

TEST(Denoiser, LowNoiseCollapsesToNearestPrototype) {
    Fixture f(7, 4, 8, 8);
    Rng rng(8);
    for (int trial = 0; trial < 10; ++trial) {
        size_t k = rng.below(4);
        LatentGrid x = f.protos[k];
        for (auto& v : x.values) v += 0.01 * rng.normal();  // small perturbation
        LatentGrid d = f.model.denoise(x, 0.01, f.cond);
        for (size_t i = 0; i < d.size(); ++i)
            EXPECT_NEAR(d.values[i], f.protos[k].values[i], 1e-6);
    }
}

TEST(Denoiser, HighNoiseApproachesPriorMean) {
    Fixture f(3, 3, 4, 4);
    double total = 0.0;
    for (double w : f.weights) total += w;
    LatentGrid mean(4, 4);
    for (size_t k = 0; k < f.protos.size(); ++k)
        for (size_t i = 0; i < mean.size(); ++i)
            mean.values[i] += f.weights[k] / total * f.protos[k].values[i];

    LatentGrid x(4, 4, 0.3);
    LatentGrid d = f.model.denoise(x, 1e6, f.cond);
    for (size_t i = 0; i < d.size(); ++i) EXPECT_NEAR(d.values[i], mean.values[i], 1e-6);
}

TEST(Denoiser, ExtremeDistancesStayFinite) {
    Fixture f(15, 3, 8, 8);
    LatentGrid x(8, 8, 300.0);  // very far from every prototype
    LatentGrid d = f.model.denoise(x, 1e-3, f.cond);
    EXPECT_TRUE(d.finite());
    LatentGrid g = f.model.vjp(x, 1e-3, f.cond, LatentGrid(8, 8, 1.0));
    EXPECT_TRUE(g.finite());
}

TEST(Denoiser, ScoreMatchesFiniteDifferenceLogDensity) {
    Fixture f(21, 4, 4, 4);
    Rng rng(33);
    for (double t : {0.5, 2.0, 10.0}) {
        for (int trial = 0; trial < 5; ++trial) {
            LatentGrid x = random_grid(rng, 4, 4, std::max(1.0, t));
            LatentGrid s = score(f.model, x, t, f.cond);

            LatentGrid fd(4, 4);
            const double h = 1e-5 * std::max(1.0, t);
            for (size_t i = 0; i < x.size(); ++i) {
                LatentGrid xp = x, xm = x;
                xp.values[i] += h;
                xm.values[i] -= h;
                fd.values[i] = (log_density(f, xp, t) - log_density(f, xm, t)) / (2.0 * h);
            }
            LatentGrid diff = s;
            for (size_t i = 0; i < diff.size(); ++i) diff.values[i] -= fd.values[i];
            EXPECT_LE(norm(diff) / std::max(norm(fd), 1e-30), 1e-3)
                << "t=" << t << " trial=" << trial;
        }
    }
}

TEST(Denoiser, VjpMatchesFiniteDifference) {
    Fixture f(77, 5, 4, 4);
    Rng rng(78);
    for (double t : {0.7, 3.0, 42.0}) {
        LatentGrid x = random_grid(rng, 4, 4, t);
        LatentGrid u = random_grid(rng, 4, 4);
        LatentGrid g = f.model.vjp(x, t, f.cond, u);

        LatentGrid fd(4, 4);
        const double h = 1e-5 * std::max(1.0, t);
        for (size_t i = 0; i < x.size(); ++i) {
            LatentGrid xp = x, xm = x;
            xp.values[i] += h;
            xm.values[i] -= h;
            double fp = dot(u, f.model.denoise(xp, t, f.cond));
            double fm = dot(u, f.model.denoise(xm, t, f.cond));
            fd.values[i] = (fp - fm) / (2.0 * h);
        }
        LatentGrid diff = g;
        for (size_t i = 0; i < diff.size(); ++i) diff.values[i] -= fd.values[i];
        EXPECT_LE(norm(diff) / std::max(norm(fd), 1e-30), 1e-5) << "t=" << t;
    }
}

TEST(Denoiser, VjpIsLinearInUpstream) {
    Fixture f(5, 3, 5, 5);
    Rng rng(6);
    LatentGrid x = random_grid(rng, 5, 5, 2.0);
    LatentGrid u = random_grid(rng, 5, 5);
    LatentGrid v = random_grid(rng, 5, 5);
    double a = 1.7, b = -0.4;

    LatentGrid combo(5, 5);
    for (size_t i = 0; i < combo.size(); ++i) combo.values[i] = a * u.values[i] + b * v.values[i];

    LatentGrid lhs = f.model.vjp(x, 1.5, f.cond, combo);
    LatentGrid gu = f.model.vjp(x, 1.5, f.cond, u);
    LatentGrid gv = f.model.vjp(x, 1.5, f.cond, v);
    for (size_t i = 0; i < lhs.size(); ++i)
        EXPECT_NEAR(lhs.values[i], a * gu.values[i] + b * gv.values[i], 1e-10);
}

TEST(Denoiser, ScoreDefinition) {
    Fixture f(9, 2, 3, 3);
    Rng rng(10);
    LatentGrid x = random_grid(rng, 3, 3, 5.0);
    double t = 4.0;
    LatentGrid d = f.model.denoise(x, t, f.cond);
    LatentGrid s = score(f.model, x, t, f.cond);
    for (size_t i = 0; i < x.size(); ++i)
        EXPECT_NEAR(s.values[i], (d.values[i] - x.values[i]) / (t * t), 1e-12);
    EXPECT_THROW(score(f.model, x, 0.0, f.cond), NumericalError);
}

TEST(Denoiser, MultipleInstancesAreIndependent) {
    MixtureDenoiser m;
    LatentGrid p0(2, 2, 1.0), p1(2, 2, -1.0);
    m.add_instance(0, {p0}, {1.0});
    m.add_instance(1, {p1}, {1.0});
    LatentGrid x(2, 2);
    EXPECT_NEAR(m.denoise(x, 1.0, Conditioning::empty(0, 2, 2)).values[0], 1.0, 1e-12);
    EXPECT_NEAR(m.denoise(x, 1.0, Conditioning::empty(1, 2, 2)).values[0], -1.0, 1e-12);
}
