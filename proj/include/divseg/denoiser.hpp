#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "divseg/grid.hpp"

namespace divseg {

// Per-input conditioning: raw channels plus a stable input id. Closed-form
// denoisers key their prototypes by the id; the MLP consumes the channels.
struct Conditioning {
    int id = -1;
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<double> data;  // channels * height * width

    static Conditioning empty(int id, int h, int w) {
        Conditioning c;
        c.id = id;
        c.height = h;
        c.width = w;
        return c;
    }
};

// D(x;t,c) plus the vector-Jacobian product needed by guidance gradients.
class DenoiserModel {
  public:
    virtual ~DenoiserModel() = default;

    virtual LatentGrid denoise(const LatentGrid& x, double t, const Conditioning& c) const = 0;

    // Gradient of <upstream, denoise(x,t,c)> with respect to x.
    virtual LatentGrid vjp(const LatentGrid& x, double t, const Conditioning& c,
                           const LatentGrid& upstream) const = 0;
};

// Exact posterior-mean denoiser for atomic data distributions: for each
// conditioning id it holds prototypes y_k with weights w_k and evaluates
//   D(x;t) = sum_k gamma_k y_k,  gamma = softmax_k(log w_k - |x-y_k|^2 / (2 t^2)).
class MixtureDenoiser : public DenoiserModel {
  public:
    void add_instance(int id, std::vector<LatentGrid> prototypes, const std::vector<double>& weights) {
        if (prototypes.empty()) throw DataError("MixtureDenoiser: no prototypes for id " + std::to_string(id));
        if (prototypes.size() != weights.size())
            throw DataError("MixtureDenoiser: prototype/weight count mismatch");
        double total = 0.0;
        for (double w : weights) {
            if (!(w > 0.0)) throw DataError("MixtureDenoiser: weights must be strictly positive");
            total += w;
        }
        Entry e;
        e.prototypes = std::move(prototypes);
        for (size_t k = 1; k < e.prototypes.size(); ++k)
            if (!e.prototypes[k].same_shape(e.prototypes[0]))
                throw DataError("MixtureDenoiser: prototype shape mismatch");
        e.log_weights.reserve(weights.size());
        for (double w : weights) e.log_weights.push_back(std::log(w / total));
        entries_[id] = std::move(e);
    }

    LatentGrid denoise(const LatentGrid& x, double t, const Conditioning& c) const override {
        const Entry& e = lookup(c.id);
        std::vector<double> gamma = posterior(e, x, t);
        LatentGrid out(x.height, x.width);
        for (size_t k = 0; k < e.prototypes.size(); ++k) {
            double g = gamma[k];
            const auto& y = e.prototypes[k].values;
            for (size_t i = 0; i < out.size(); ++i) out.values[i] += g * y[i];
        }
        return out;
    }

    // d<u, D>/dx = (1/t^2) sum_k gamma_k <u, y_k> (y_k - D).
    LatentGrid vjp(const LatentGrid& x, double t, const Conditioning& c,
                   const LatentGrid& upstream) const override {
        if (!x.same_shape(upstream)) throw DataError("MixtureDenoiser::vjp: upstream shape mismatch");
        const Entry& e = lookup(c.id);
        std::vector<double> gamma = posterior(e, x, t);

        LatentGrid d(x.height, x.width);
        std::vector<double> dots(e.prototypes.size());
        for (size_t k = 0; k < e.prototypes.size(); ++k) {
            const auto& y = e.prototypes[k].values;
            double dot = 0.0;
            for (size_t i = 0; i < x.size(); ++i) {
                d.values[i] += gamma[k] * y[i];
                dot += upstream.values[i] * y[i];
            }
            dots[k] = dot;
        }

        LatentGrid grad(x.height, x.width);
        double inv_t2 = 1.0 / (t * t);
        for (size_t k = 0; k < e.prototypes.size(); ++k) {
            double coef = inv_t2 * gamma[k] * dots[k];
            const auto& y = e.prototypes[k].values;
            for (size_t i = 0; i < grad.size(); ++i)
                grad.values[i] += coef * (y[i] - d.values[i]);
        }
        return grad;
    }

    // Posterior mixture responsibilities gamma at (x,t); exposed for tests.
    std::vector<double> responsibilities(const LatentGrid& x, double t, int id) const {
        return posterior(lookup(id), x, t);
    }

    const std::vector<LatentGrid>& prototypes(int id) const { return lookup(id).prototypes; }

    bool has_instance(int id) const { return entries_.count(id) > 0; }

  private:
    struct Entry {
        std::vector<LatentGrid> prototypes;
        std::vector<double> log_weights;
    };

    const Entry& lookup(int id) const {
        auto it = entries_.find(id);
        if (it == entries_.end())
            throw DataError("MixtureDenoiser: unknown conditioning id " + std::to_string(id));
        return it->second;
    }

    std::vector<double> posterior(const Entry& e, const LatentGrid& x, double t) const {
        if (!(t > 0.0)) throw NumericalError("MixtureDenoiser: noise level must be positive");
        if (!e.prototypes[0].same_shape(x))
            throw DataError("MixtureDenoiser: latent shape does not match prototypes");
        size_t n = e.prototypes.size();
        std::vector<double> logits(n);
        double inv = 1.0 / (2.0 * t * t);
        for (size_t k = 0; k < n; ++k) {
            const auto& y = e.prototypes[k].values;
            double sq = 0.0;
            for (size_t i = 0; i < x.size(); ++i) {
                double d = x.values[i] - y[i];
                sq += d * d;
            }
            logits[k] = e.log_weights[k] - sq * inv;
        }
        double mx = logits[0];
        for (double v : logits) mx = std::max(mx, v);
        double z = 0.0;
        for (size_t k = 0; k < n; ++k) {
            logits[k] = std::exp(logits[k] - mx);
            z += logits[k];
        }
        for (double& v : logits) v /= z;
        return logits;
    }

    std::map<int, Entry> entries_;
};

// Score of the Gaussian-smoothed data distribution: (D(x;t,c) - x) / t^2.
inline LatentGrid score(const DenoiserModel& model, const LatentGrid& x, double t,
                        const Conditioning& c) {
    if (!(t > 0.0)) throw NumericalError("score: noise level must be positive");
    LatentGrid d = model.denoise(x, t, c);
    double inv_t2 = 1.0 / (t * t);
    for (size_t i = 0; i < d.size(); ++i) d.values[i] = (d.values[i] - x.values[i]) * inv_t2;
    return d;
}

}  // namespace divseg
