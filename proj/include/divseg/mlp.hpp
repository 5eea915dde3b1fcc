#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "divseg/dataset.hpp"
#include "divseg/denoiser.hpp"
#include "divseg/grid.hpp"
#include "divseg/rng.hpp"

namespace divseg {

struct TrainConfig {
    int steps = 2000;
    int batch_size = 16;
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double weight_decay = 1e-4;
    double mu_train = 0.5;     // mean of the log noise level
    double sigma_train = 1.2;  // std of the log noise level
    double sigma_data = 1.0;
    int width = 256;
    int hidden_layers = 2;
    int val_interval = 200;
    int val_batch = 64;
    uint64_t seed = 0;
};

class MlpDenoiser;
struct TrainResult;
inline TrainResult train_mlp(const Dataset& ds, const TrainConfig& cfg);
inline MlpDenoiser load_checkpoint(const std::string& path);

// Fully connected denoiser on flattened grids. The input vector is the noisy
// latent scaled by 1/sqrt(sigma_data^2 + t^2), the raw conditioning channels,
// and ln(t)/4; the network predicts the clean latent directly.
class MlpDenoiser final : public DenoiserModel {
  public:
    struct Layer {
        int in = 0, out = 0;
        std::vector<double> w;  // row-major [out][in]
        std::vector<double> b;
    };

    // Pre- and post-activation values of one forward pass. post[0] is the
    // input vector; post[l+1] is what layer l feeds forward; pre[l] is layer
    // l's value before the nonlinearity.
    struct ForwardCache {
        std::vector<std::vector<double>> pre;
        std::vector<std::vector<double>> post;
    };

    MlpDenoiser() = default;

    MlpDenoiser(int height, int width, int channels, int hidden_width, int hidden_layers,
                double sigma_data, uint64_t init_seed)
        : height_(height), width_(width), channels_(channels), sigma_data_(sigma_data) {
        if (height < 1 || width < 1 || channels < 0)
            throw DataError("MlpDenoiser: bad grid shape");
        if (hidden_width < 1 || hidden_layers < 1)
            throw DataError("MlpDenoiser: bad architecture");
        int npx = height * width;
        int in_dim = npx * (1 + channels) + 1;
        Rng rng = substream(init_seed, StreamKind::training, 0x1417);
        int prev = in_dim;
        for (int l = 0; l < hidden_layers; ++l) {
            layers_.push_back(random_layer(prev, hidden_width, rng));
            prev = hidden_width;
        }
        layers_.push_back(random_layer(prev, npx, rng));
    }

    int height() const { return height_; }
    int width() const { return width_; }
    int channels() const { return channels_; }
    double sigma_data() const { return sigma_data_; }
    const std::vector<Layer>& layers() const { return layers_; }

    bool parameters_finite() const {
        for (const auto& l : layers_) {
            for (double v : l.w)
                if (!std::isfinite(v)) return false;
            for (double v : l.b)
                if (!std::isfinite(v)) return false;
        }
        return true;
    }

    LatentGrid denoise(const LatentGrid& x, double t, const Conditioning& c) const override {
        ForwardCache cache;
        return forward(x, t, c, cache);
    }

    LatentGrid vjp(const LatentGrid& x, double t, const Conditioning& c,
                   const LatentGrid& upstream) const override {
        if (!upstream.same_shape(x)) throw DataError("MlpDenoiser::vjp: upstream shape mismatch");
        ForwardCache cache;
        forward(x, t, c, cache);
        std::vector<double> grad_in = backward(upstream.values, cache, nullptr);
        LatentGrid g(x.height, x.width);
        double scale = 1.0 / std::sqrt(sigma_data_ * sigma_data_ + t * t);
        for (size_t i = 0; i < g.values.size(); ++i) g.values[i] = grad_in[i] * scale;
        return g;
    }

    LatentGrid forward(const LatentGrid& x, double t, const Conditioning& c,
                       ForwardCache& cache) const {
        if (x.height != height_ || x.width != width_)
            throw DataError("MlpDenoiser: latent shape mismatch");
        if (c.channels != channels_ || (channels_ > 0 && (c.height != height_ || c.width != width_)))
            throw DataError("MlpDenoiser: conditioning shape mismatch");
        if (!(t > 0.0)) throw NumericalError("MlpDenoiser: noise level must be positive");
        int npx = height_ * width_;
        std::vector<double> in(static_cast<size_t>(npx) * (1 + channels_) + 1);
        double scale = 1.0 / std::sqrt(sigma_data_ * sigma_data_ + t * t);
        for (int i = 0; i < npx; ++i) in[i] = x.values[i] * scale;
        for (size_t i = 0; i < c.data.size(); ++i) in[npx + i] = c.data[i];
        in.back() = std::log(t) / 4.0;

        cache.pre.clear();
        cache.post.clear();
        cache.post.push_back(std::move(in));
        for (size_t l = 0; l < layers_.size(); ++l) {
            const Layer& ly = layers_[l];
            const std::vector<double>& prev = cache.post.back();
            std::vector<double> z(ly.out);
            for (int o = 0; o < ly.out; ++o) {
                const double* wrow = ly.w.data() + static_cast<size_t>(o) * ly.in;
                double acc = ly.b[o];
                for (int i = 0; i < ly.in; ++i) acc += wrow[i] * prev[i];
                z[o] = acc;
            }
            bool hidden = l + 1 < layers_.size();
            cache.pre.push_back(z);
            if (hidden)
                for (double& v : z) v = silu(v);
            cache.post.push_back(std::move(z));
        }
        LatentGrid d(height_, width_);
        d.values = cache.post.back();
        return d;
    }

    // Backpropagates <upstream, output>; accumulates parameter gradients into
    // grads when given (same layout as layers()) and returns the gradient
    // with respect to the raw input vector.
    std::vector<double> backward(const std::vector<double>& upstream, const ForwardCache& cache,
                                 std::vector<Layer>* grads) const {
        std::vector<double> delta = upstream;
        for (size_t li = layers_.size(); li-- > 0;) {
            const Layer& ly = layers_[li];
            if (li + 1 < layers_.size())
                for (int o = 0; o < ly.out; ++o) delta[o] *= silu_deriv(cache.pre[li][o]);
            const std::vector<double>& prev = cache.post[li];
            if (grads) {
                Layer& g = (*grads)[li];
                for (int o = 0; o < ly.out; ++o) {
                    double* grow = g.w.data() + static_cast<size_t>(o) * ly.in;
                    double d = delta[o];
                    for (int i = 0; i < ly.in; ++i) grow[i] += d * prev[i];
                    g.b[o] += d;
                }
            }
            std::vector<double> prev_delta(ly.in, 0.0);
            for (int o = 0; o < ly.out; ++o) {
                const double* wrow = ly.w.data() + static_cast<size_t>(o) * ly.in;
                double d = delta[o];
                for (int i = 0; i < ly.in; ++i) prev_delta[i] += wrow[i] * d;
            }
            delta = std::move(prev_delta);
        }
        return delta;
    }

    static double silu(double z) { return z / (1.0 + std::exp(-z)); }
    static double silu_deriv(double z) {
        double s = 1.0 / (1.0 + std::exp(-z));
        return s * (1.0 + z * (1.0 - s));
    }

    friend TrainResult train_mlp(const Dataset& ds, const TrainConfig& cfg);
    friend MlpDenoiser load_checkpoint(const std::string& path);

  private:
    static Layer random_layer(int in, int out, Rng& rng) {
        Layer l;
        l.in = in;
        l.out = out;
        l.w.resize(static_cast<size_t>(in) * out);
        l.b.assign(out, 0.0);
        double std = std::sqrt(2.0 / in);
        for (auto& v : l.w) v = rng.normal() * std;
        return l;
    }

    int height_ = 0, width_ = 0, channels_ = 0;
    double sigma_data_ = 1.0;
    std::vector<Layer> layers_;
};

struct TrainResult {
    MlpDenoiser model;          // checkpoint with the lowest validation loss
    std::vector<double> loss_history;
    std::vector<std::pair<int, double>> val_history;  // (step, validation loss)
    int best_step = 0;
    double best_val_loss = 0.0;
};

namespace detail {

// Owns the Adam state and the sampling streams for one training run.
class MlpTrainState {
  public:
    MlpTrainState(const Dataset& ds, const std::vector<int>& indices, const TrainConfig& cfg)
        : ds_(ds), indices_(indices), cfg_(cfg) {}

    // Draws one (clean latent, conditioning id) pair: instance uniform over
    // the split, mode by its weight.
    std::pair<LatentGrid, const Conditioning*> draw_example(Rng& rng) const {
        int idx = indices_[static_cast<size_t>(rng.below(indices_.size()))];
        const ConditionedInstance& inst = ds_[idx];
        double u = rng.uniform();
        double acc = 0.0;
        size_t k = inst.modes.masks.size() - 1;
        for (size_t j = 0; j < inst.modes.weights.size(); ++j) {
            acc += inst.modes.weights[j];
            if (u < acc) {
                k = j;
                break;
            }
        }
        return {encode(inst.modes.masks[k]), &inst.conditioning};
    }

    double draw_noise_level(Rng& rng) const {
        return std::exp(cfg_.mu_train + cfg_.sigma_train * rng.normal());
    }

  private:
    const Dataset& ds_;
    std::vector<int> indices_;
    const TrainConfig& cfg_;
};

}  // namespace detail

// Denoising-objective trainer: per step draws (y, c) from the data, corrupts
// y with noise at a log-normal level, and regresses the network output back
// to y (per-pixel mean squared error, averaged over the batch). Updates are
// Adam moments with decoupled weight decay. Validation uses held-out
// instances with freshly sampled noise; the returned model is the checkpoint
// with the lowest validation loss seen (initialization included).
inline TrainResult train_mlp(const Dataset& ds, const TrainConfig& cfg) {
    if (ds.empty()) throw DataError("train_mlp: empty dataset");
    int H = ds[0].conditioning.height, W = ds[0].conditioning.width;
    int C = ds[0].conditioning.channels;
    for (const auto& inst : ds)
        if (inst.conditioning.height != H || inst.conditioning.width != W ||
            inst.conditioning.channels != C)
            throw DataError("train_mlp: instances must share grid size and channel count");
    if (cfg.steps < 0 || cfg.batch_size < 1) throw DataError("train_mlp: bad step/batch counts");

    auto train_idx = split_indices(static_cast<int>(ds.size()), Split::train, cfg.seed);
    auto val_idx = split_indices(static_cast<int>(ds.size()), Split::val, cfg.seed);
    detail::MlpTrainState train_state(ds, train_idx, cfg);
    detail::MlpTrainState val_state(ds, val_idx, cfg);

    TrainResult result;
    MlpDenoiser model(H, W, C, cfg.width, cfg.hidden_layers, cfg.sigma_data, cfg.seed);
    Rng data_rng = substream(cfg.seed, StreamKind::training, 0xda7a);
    Rng val_rng = substream(cfg.seed, StreamKind::training, 0x7a1);

    auto& layers = model.layers_;
    std::vector<MlpDenoiser::Layer> grads, m1, m2;
    auto zero_like = [&](std::vector<MlpDenoiser::Layer>& dst) {
        dst.clear();
        for (const auto& l : layers) {
            MlpDenoiser::Layer z;
            z.in = l.in;
            z.out = l.out;
            z.w.assign(l.w.size(), 0.0);
            z.b.assign(l.b.size(), 0.0);
            dst.push_back(std::move(z));
        }
    };
    zero_like(m1);
    zero_like(m2);

    int npx = H * W;
    auto validate = [&]() {
        double total = 0.0;
        for (int s = 0; s < cfg.val_batch; ++s) {
            auto [y, c] = val_state.draw_example(val_rng);
            double t = val_state.draw_noise_level(val_rng);
            LatentGrid x = y;
            for (auto& v : x.values) v += t * val_rng.normal();
            LatentGrid d = model.denoise(x, t, *c);
            double mse = 0.0;
            for (int i = 0; i < npx; ++i) {
                double e = d.values[i] - y.values[i];
                mse += e * e;
            }
            total += mse / npx;
        }
        return total / cfg.val_batch;
    };

    result.best_val_loss = validate();
    result.best_step = 0;
    MlpDenoiser best = model;

    double lr = cfg.learning_rate;
    for (int step = 1; step <= cfg.steps; ++step) {
        zero_like(grads);
        double loss = 0.0;
        for (int b = 0; b < cfg.batch_size; ++b) {
            auto [y, c] = train_state.draw_example(data_rng);
            double t = train_state.draw_noise_level(data_rng);
            LatentGrid x = y;
            for (auto& v : x.values) v += t * data_rng.normal();
            MlpDenoiser::ForwardCache cache;
            LatentGrid d = model.forward(x, t, *c, cache);
            std::vector<double> upstream(npx);
            for (int i = 0; i < npx; ++i) {
                double e = d.values[i] - y.values[i];
                loss += e * e / (static_cast<double>(npx) * cfg.batch_size);
                upstream[i] = 2.0 * e / (static_cast<double>(npx) * cfg.batch_size);
            }
            model.backward(upstream, cache, &grads);
        }
        if (!std::isfinite(loss))
            throw NumericalError("train_mlp: loss diverged (not finite) at step " +
                                 std::to_string(step));
        result.loss_history.push_back(loss);

        double bc1 = 1.0 - std::pow(cfg.beta1, step);
        double bc2 = 1.0 - std::pow(cfg.beta2, step);
        for (size_t li = 0; li < layers.size(); ++li) {
            auto update = [&](std::vector<double>& p, const std::vector<double>& g,
                              std::vector<double>& mo1, std::vector<double>& mo2) {
                for (size_t i = 0; i < p.size(); ++i) {
                    mo1[i] = cfg.beta1 * mo1[i] + (1.0 - cfg.beta1) * g[i];
                    mo2[i] = cfg.beta2 * mo2[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                    double mhat = mo1[i] / bc1;
                    double vhat = mo2[i] / bc2;
                    p[i] -= lr * (mhat / (std::sqrt(vhat) + 1e-8) + cfg.weight_decay * p[i]);
                }
            };
            update(layers[li].w, grads[li].w, m1[li].w, m2[li].w);
            update(layers[li].b, grads[li].b, m1[li].b, m2[li].b);
        }

        if (step % cfg.val_interval == 0 || step == cfg.steps) {
            if (!model.parameters_finite())
                throw NumericalError("train_mlp: non-finite parameters at step " +
                                     std::to_string(step));
            double vl = validate();
            result.val_history.emplace_back(step, vl);
            if (vl < result.best_val_loss) {
                result.best_val_loss = vl;
                result.best_step = step;
                best = model;
            }
        }
    }
    result.model = std::move(best);
    return result;
}

inline constexpr char kModelMagic[7] = {'D', 'V', 'S', 'M', 'D', 'L', '1'};

// Checkpoint layout (little-endian): magic "DVSMDL1"; u32 layer count, grid
// height, width, conditioning channels; f32 sigma_data; per layer u32 in/out
// dims; then every layer's f32 parameters (weights row-major, then biases).
inline void save_checkpoint(const MlpDenoiser& model, const std::string& path) {
    std::vector<uint8_t> out;
    out.insert(out.end(), kModelMagic, kModelMagic + 7);
    detail::put_u32(out, static_cast<uint32_t>(model.layers().size()));
    detail::put_u32(out, static_cast<uint32_t>(model.height()));
    detail::put_u32(out, static_cast<uint32_t>(model.width()));
    detail::put_u32(out, static_cast<uint32_t>(model.channels()));
    detail::put_f32(out, static_cast<float>(model.sigma_data()));
    for (const auto& l : model.layers()) {
        detail::put_u32(out, static_cast<uint32_t>(l.in));
        detail::put_u32(out, static_cast<uint32_t>(l.out));
    }
    for (const auto& l : model.layers()) {
        for (double v : l.w) detail::put_f32(out, static_cast<float>(v));
        for (double v : l.b) detail::put_f32(out, static_cast<float>(v));
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("save_checkpoint: cannot open " + path);
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!f) throw DataError("save_checkpoint: write failed for " + path);
}

inline MlpDenoiser load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("load_checkpoint: cannot open " + path);
    std::vector<uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    detail::ByteReader r{buf, 0, "load_checkpoint"};
    r.need(7, "magic");
    if (std::memcmp(buf.data(), kModelMagic, 7) != 0)
        throw DataError("load_checkpoint: bad magic at byte offset 0");
    r.pos = 7;

    uint32_t n_layers = r.u32("layer count");
    if (n_layers == 0 || n_layers > 64)
        throw DataError("load_checkpoint: implausible layer count at byte offset 7");
    MlpDenoiser model;
    model.height_ = static_cast<int>(r.u32("height"));
    model.width_ = static_cast<int>(r.u32("width"));
    model.channels_ = static_cast<int>(r.u32("channel count"));
    model.sigma_data_ = r.f32("sigma_data");
    if (model.height_ < 1 || model.width_ < 1 || model.channels_ < 0 ||
        !(model.sigma_data_ > 0.0))
        throw DataError("load_checkpoint: bad header fields at byte offset 11");

    for (uint32_t l = 0; l < n_layers; ++l) {
        MlpDenoiser::Layer ly;
        ly.in = static_cast<int>(r.u32("layer input dim"));
        ly.out = static_cast<int>(r.u32("layer output dim"));
        if (ly.in < 1 || ly.out < 1)
            throw DataError("load_checkpoint: bad layer dims at byte offset " +
                            std::to_string(r.pos - 8));
        model.layers_.push_back(std::move(ly));
    }
    int npx = model.height_ * model.width_;
    int expect_in = npx * (1 + model.channels_) + 1;
    if (model.layers_.front().in != expect_in || model.layers_.back().out != npx)
        throw DataError("load_checkpoint: layer dims inconsistent with grid header");
    for (size_t l = 0; l + 1 < model.layers_.size(); ++l)
        if (model.layers_[l].out != model.layers_[l + 1].in)
            throw DataError("load_checkpoint: consecutive layer dims do not chain");

    for (auto& ly : model.layers_) {
        ly.w.resize(static_cast<size_t>(ly.in) * ly.out);
        ly.b.resize(ly.out);
        for (auto& v : ly.w) v = r.f32("layer weights");
        for (auto& v : ly.b) v = r.f32("layer biases");
    }
    if (r.pos != buf.size())
        throw DataError("load_checkpoint: trailing bytes at byte offset " + std::to_string(r.pos));
    return model;
}

}  // namespace divseg
