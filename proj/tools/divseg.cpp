// Command-line front end: dataset generation, denoiser training, the
// sampling/evaluation sweep, coverage analytics, and mask export.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "divseg/divseg.hpp"

namespace {

using json = nlohmann::json;
using namespace divseg;

constexpr const char* kVersion = "0.1.0";

std::vector<double> parse_weight_list(const std::string& s) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        out.push_back(std::stod(item));
    }
    return out;
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

void write_manifest(const std::string& path, const json& j) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot open manifest file " + path);
    f << j.dump(2) << "\n";
    if (!f) throw DataError("manifest write failed for " + path);
}

// Applies values from a JSON config file as new defaults before the flags are
// parsed; flags given on the command line win because CLI11 only writes bound
// variables it actually saw.
json load_config_overlay(int argc, char** argv) {
    for (int i = 1; i + 1 < argc; ++i)
        if (std::string(argv[i]) == "--config") {
            std::ifstream f(argv[i + 1]);
            if (!f) throw DataError(std::string("cannot open config file ") + argv[i + 1]);
            json j;
            f >> j;
            return j;
        }
    return json::object();
}

template <typename T>
void overlay(const json& j, const char* key, T& target) {
    if (j.contains(key)) target = j.at(key).get<T>();
}

struct SweepFlags {
    std::string dataset_path;
    std::string checkpoint;  // empty → exact mixture denoiser
    std::string methods = "naive";
    std::string out_csv = "report.csv";
    std::string dump_dir;
    int batches = 1;
    int batch_size = 8;
    uint64_t seed = 0;
    double alpha = 25.0;
    std::string guidance_steps = "first";
    double r = -1.0;  // negative → estimate from the dataset
    double s_min = 40.0;
    std::string policy = "batch";
    double gamma = 0.0;
    double s_churn = 0.0;
    int b_init = 64;
    int k = 8;
    int prune_after_step = 0;
    std::string prune_distance = "chamfer";
    bool timing = false;
    int jobs = 0;
};

RepellencePolicy parse_policy(const std::string& s) {
    if (s == "batch") return RepellencePolicy::batch;
    if (s == "bank") return RepellencePolicy::bank;
    if (s == "batch_and_bank") return RepellencePolicy::batch_and_bank;
    throw DataError("unknown repellence policy: " + s);
}

int run_sample_eval(const SweepFlags& fl) {
    Dataset ds = read_dataset(fl.dataset_path);
    if (ds.empty()) throw DataError("dataset has no instances");

    MixtureDenoiser mixture;
    MlpDenoiser mlp;
    const DenoiserModel* model = nullptr;
    if (fl.checkpoint.empty()) {
        mixture = make_mixture_denoiser(ds);
        model = &mixture;
    } else {
        mlp = load_checkpoint(fl.checkpoint);
        model = &mlp;
    }

    double r = fl.r;
    if (r < 0.0) r = dataset_r0(ds);

    ExperimentConfig ec;
    ec.batches_per_input = fl.batches;
    ec.batch_size = fl.batch_size;
    ec.seed = fl.seed;
    ec.timing = fl.timing;
    ec.jobs = fl.jobs > 0 ? fl.jobs
                          : static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));

    for (const std::string& name : split_list(fl.methods)) {
        MethodSpec spec;
        spec.name = name;
        spec.sampler.s_churn = fl.s_churn;
        spec.sampler.cads.gamma = fl.gamma;
        if (name == "naive") {
            spec.sampler.method = SamplingMethod::naive;
        } else if (name == "pg") {
            spec.sampler.method = SamplingMethod::particle_guidance;
            spec.sampler.pg.alpha = fl.alpha;
            spec.sampler.pg.guidance_steps =
                fl.guidance_steps == "first" ? GuidanceSteps::first : GuidanceSteps::all;
            spec.sampler.pg.policy = parse_policy(fl.policy);
        } else if (name == "spell") {
            spec.sampler.method = SamplingMethod::spell;
            spec.sampler.spell.r = r;
            spec.sampler.spell.s_min = fl.s_min;
            spec.sampler.spell.policy = parse_policy(fl.policy);
        } else if (name == "prune") {
            spec.sampler.method = SamplingMethod::naive;
            spec.prune = true;
            spec.prune_cfg.b_init = fl.b_init;
            spec.prune_cfg.k = fl.k;
            spec.prune_cfg.prune_after_step = fl.prune_after_step;
            spec.prune_cfg.distance = fl.prune_distance == "l2" ? PruneDistance::l2
                                                                : PruneDistance::chamfer;
        } else {
            throw DataError("unknown method: " + name);
        }
        ec.methods.push_back(std::move(spec));
    }

    auto cells = run_experiment(*model, ds, ec);
    write_csv(cells, fl.out_csv);

    if (!fl.dump_dir.empty()) {
        std::filesystem::create_directories(fl.dump_dir);
        int per_batch = fl.batch_size;
        for (const auto& cell : cells) {
            if (cell.status != "ok") continue;
            int denom = cell.b_total / std::max(1, fl.batches);
            if (denom > 0) per_batch = denom;
            for (size_t i = 0; i < cell.masks.size(); ++i) {
                int batch = static_cast<int>(i) / per_batch;
                int within = static_cast<int>(i) % per_batch;
                std::string name = std::to_string(cell.instance_id) + "_" + cell.method + "_" +
                                   std::to_string(batch) + "_" + std::to_string(within) + ".pgm";
                write_pgm(cell.masks[i], fl.dump_dir + "/" + name);
            }
        }
    }

    json manifest = {
        {"tool", "divseg"},
        {"version", kVersion},
        {"command", "sample-eval"},
        {"dataset", fl.dataset_path},
        {"denoiser", fl.checkpoint.empty() ? std::string("mixture") : fl.checkpoint},
        {"methods", fl.methods},
        {"batches_per_input", fl.batches},
        {"batch_size", fl.batch_size},
        {"seed", fl.seed},
        {"alpha", fl.alpha},
        {"guidance_steps", fl.guidance_steps},
        {"r", r},
        {"s_min", fl.s_min},
        {"policy", fl.policy},
        {"gamma", fl.gamma},
        {"s_churn", fl.s_churn},
        {"b_init", fl.b_init},
        {"k", fl.k},
        {"prune_after_step", fl.prune_after_step},
        {"prune_distance", fl.prune_distance},
        {"timing", fl.timing},
        {"csv", fl.out_csv},
    };
    write_manifest(fl.out_csv + ".manifest.json", manifest);
    std::cout << "wrote " << fl.out_csv << " (" << cells.size() << " cells)\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Diversity-aware diffusion sampling for ambiguous binary segmentation"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kVersion);
    std::string config_path;
    app.add_option("--config", config_path, "JSON config file; flags override its values")
        ->expected(1);

    json cfg;
    try {
        cfg = load_config_overlay(argc, argv);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }

    // generate-dataset
    auto* gen = app.add_subcommand("generate-dataset", "Generate a toy dataset file");
    gen->fallthrough();
    std::string gen_kind = "fire", gen_out;
    int gen_n = 5, gen_size = 0;
    uint64_t gen_seed = 0;
    double gen_density = 0.95, gen_threshold = 0.7;
    int gen_pre = 3, gen_post = 9, gen_iso = 8, gen_wind = 8, gen_classes = 4;
    std::string gen_probs = "0.05,0.25,0.75,0.95";
    overlay(cfg, "kind", gen_kind);
    overlay(cfg, "n", gen_n);
    overlay(cfg, "size", gen_size);
    overlay(cfg, "seed", gen_seed);
    overlay(cfg, "out", gen_out);
    gen->add_option("--kind", gen_kind, "fire | flip")->check(CLI::IsMember({"fire", "flip"}));
    gen->add_option("--n", gen_n, "number of instances");
    gen->add_option("--size", gen_size, "grid side length (0 = kind default)");
    gen->add_option("--seed", gen_seed, "root seed");
    gen->add_option("--out", gen_out, "output dataset path")->required();
    gen->add_option("--density", gen_density, "fire: fuel density");
    gen->add_option("--threshold", gen_threshold, "fire: anisotropy threshold");
    gen->add_option("--pre-steps", gen_pre, "fire: spread steps before branching");
    gen->add_option("--post-steps", gen_post, "fire: spread steps after branching");
    gen->add_option("--iso-period", gen_iso, "fire: isotropic-spread period");
    gen->add_option("--wind-directions", gen_wind, "fire: number of wind branches");
    gen->add_option("--classes", gen_classes, "flip: number of classes");
    gen->add_option("--flip-probs", gen_probs, "flip: comma-separated per-class probabilities");

    // train
    auto* tr = app.add_subcommand("train", "Train the MLP denoiser");
    tr->fallthrough();
    std::string tr_dataset, tr_out = "model.ckpt", tr_sweep;
    TrainConfig tr_cfg;
    int tr_eval_batch = 64;
    overlay(cfg, "dataset", tr_dataset);
    overlay(cfg, "steps", tr_cfg.steps);
    overlay(cfg, "mu_train", tr_cfg.mu_train);
    tr->add_option("--dataset", tr_dataset, "training dataset path")->required();
    tr->add_option("--out", tr_out, "checkpoint output path");
    tr->add_option("--steps", tr_cfg.steps, "optimizer steps");
    tr->add_option("--batch-size", tr_cfg.batch_size, "examples per step");
    tr->add_option("--lr", tr_cfg.learning_rate, "learning rate");
    tr->add_option("--weight-decay", tr_cfg.weight_decay, "decoupled weight decay");
    tr->add_option("--mu-train", tr_cfg.mu_train, "mean of the log noise level");
    tr->add_option("--sigma-train", tr_cfg.sigma_train, "std of the log noise level");
    tr->add_option("--width", tr_cfg.width, "hidden width");
    tr->add_option("--val-interval", tr_cfg.val_interval, "steps between validations");
    tr->add_option("--seed", tr_cfg.seed, "training seed");
    tr->add_option("--mu-sweep", tr_sweep,
                   "comma-separated mu values; train one model per value, report TVD on "
                   "sampled batches, keep the best");
    tr->add_option("--sweep-batch", tr_eval_batch, "samples per instance for sweep TVD");

    // sample-eval
    auto* se = app.add_subcommand("sample-eval", "Run the sampling/evaluation sweep");
    se->fallthrough();
    SweepFlags fl;
    overlay(cfg, "dataset", fl.dataset_path);
    overlay(cfg, "checkpoint", fl.checkpoint);
    overlay(cfg, "methods", fl.methods);
    overlay(cfg, "out", fl.out_csv);
    overlay(cfg, "batches", fl.batches);
    overlay(cfg, "batch_size", fl.batch_size);
    overlay(cfg, "seed", fl.seed);
    overlay(cfg, "alpha", fl.alpha);
    overlay(cfg, "guidance_steps", fl.guidance_steps);
    overlay(cfg, "r", fl.r);
    overlay(cfg, "s_min", fl.s_min);
    overlay(cfg, "policy", fl.policy);
    overlay(cfg, "gamma", fl.gamma);
    overlay(cfg, "s_churn", fl.s_churn);
    overlay(cfg, "b_init", fl.b_init);
    overlay(cfg, "k", fl.k);
    overlay(cfg, "prune_after_step", fl.prune_after_step);
    overlay(cfg, "prune_distance", fl.prune_distance);
    overlay(cfg, "timing", fl.timing);
    overlay(cfg, "jobs", fl.jobs);
    se->add_option("--dataset", fl.dataset_path, "dataset path")->required();
    se->add_option("--checkpoint", fl.checkpoint,
                   "MLP checkpoint; omitted → exact mixture denoiser");
    se->add_option("--methods", fl.methods, "comma list: naive,pg,spell,prune");
    se->add_option("--out", fl.out_csv, "CSV output path");
    se->add_option("--dump-masks", fl.dump_dir, "directory for per-sample PGM dumps");
    se->add_option("--batches", fl.batches, "batches per input (threads the memory bank)");
    se->add_option("--batch-size", fl.batch_size, "samples per batch");
    se->add_option("--seed", fl.seed, "root seed");
    se->add_option("--alpha", fl.alpha, "particle-guidance strength");
    se->add_option("--guidance-steps", fl.guidance_steps, "pg activity: first | all")
        ->check(CLI::IsMember({"first", "all"}));
    se->add_option("--r", fl.r, "shield radius (negative → estimate from dataset)");
    se->add_option("--s-min", fl.s_min, "lowest noise level with the shield active");
    se->add_option("--policy", fl.policy, "repellence set: batch | bank | batch_and_bank")
        ->check(CLI::IsMember({"batch", "bank", "batch_and_bank"}));
    se->add_option("--gamma", fl.gamma, "conditioning-noise attenuation (0 disables)");
    se->add_option("--s-churn", fl.s_churn, "stochastic churn amount");
    se->add_option("--b-init", fl.b_init, "prune: initial batch size");
    se->add_option("--k", fl.k, "prune: surviving medoids");
    se->add_option("--prune-after-step", fl.prune_after_step, "prune: solver steps before pruning");
    se->add_option("--prune-distance", fl.prune_distance, "prune: chamfer | l2")
        ->check(CLI::IsMember({"chamfer", "l2"}));
    se->add_flag("--timing", fl.timing, "record wall-clock milliseconds per cell");
    se->add_option("--jobs", fl.jobs, "worker threads (0 = available parallelism)");

    // expected-coverage
    auto* ecov = app.add_subcommand("expected-coverage",
                                    "Expected draws until every mode is observed");
    ecov->fallthrough();
    std::string ec_weights, ec_dataset;
    int ec_trials = 0;
    uint64_t ec_seed = 0;
    ecov->add_option("--weights", ec_weights, "comma-separated mode weights");
    ecov->add_option("--dataset", ec_dataset, "compute per instance of this dataset");
    ecov->add_option("--monte-carlo", ec_trials, "also estimate with this many trials");
    ecov->add_option("--seed", ec_seed, "Monte Carlo seed");

    // export-masks
    auto* ex = app.add_subcommand("export-masks", "Write dataset modes and conditioning as PGM");
    ex->fallthrough();
    std::string ex_dataset, ex_dir = ".";
    int ex_instance = -1;
    ex->add_option("--dataset", ex_dataset, "dataset path")->required();
    ex->add_option("--out-dir", ex_dir, "output directory");
    ex->add_option("--instance", ex_instance, "only this instance id (-1 = all)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (gen->parsed()) {
            Dataset ds;
            if (gen_kind == "fire") {
                FireScenarioConfig fc;
                if (gen_size > 0) fc.grid_size = gen_size;
                fc.fuel_density = gen_density;
                fc.anisotropy_threshold = gen_threshold;
                fc.pre_steps = gen_pre;
                fc.post_steps = gen_post;
                fc.iso_period = gen_iso;
                fc.n_wind = gen_wind;
                ds = generate_fire_dataset(fc, gen_n, gen_seed);
            } else {
                FlipSceneConfig fc;
                if (gen_size > 0) fc.grid_size = gen_size;
                fc.classes = gen_classes;
                fc.flip_probs = parse_weight_list(gen_probs);
                ds = generate_flip_dataset(fc, gen_n, gen_seed);
            }
            write_dataset(ds, gen_out);
            json manifest = {{"tool", "divseg"},   {"version", kVersion},
                             {"command", "generate-dataset"}, {"kind", gen_kind},
                             {"n", gen_n},         {"size", gen_size},
                             {"seed", gen_seed},   {"out", gen_out}};
            write_manifest(gen_out + ".manifest.json", manifest);
            std::cout << "wrote " << gen_out << " (" << ds.size() << " instances)\n";
        } else if (tr->parsed()) {
            Dataset ds = read_dataset(tr_dataset);
            if (tr_sweep.empty()) {
                TrainResult res = train_mlp(ds, tr_cfg);
                save_checkpoint(res.model, tr_out);
                std::cout << "best validation loss " << res.best_val_loss << " at step "
                          << res.best_step << "\n";
            } else {
                std::vector<double> mus = parse_weight_list(tr_sweep);
                if (mus.empty()) throw DataError("empty --mu-sweep list");
                double best_tvd = std::numeric_limits<double>::infinity();
                std::printf("%10s %14s %10s\n", "mu_train", "val_loss", "tvd");
                for (double mu : mus) {
                    TrainConfig c = tr_cfg;
                    c.mu_train = mu;
                    TrainResult res = train_mlp(ds, c);
                    double tvd_sum = 0.0;
                    for (const auto& inst : ds) {
                        SamplerConfig scfg;
                        scfg.batch_size = tr_eval_batch;
                        scfg.seed = tr_cfg.seed;
                        BatchResult br = sample_batch(res.model, scfg, inst.conditioning);
                        tvd_sum += tvd_calibration(br.masks, inst.modes);
                    }
                    double tvd = tvd_sum / static_cast<double>(ds.size());
                    std::printf("%10.3f %14.6f %10.6f\n", mu, res.best_val_loss, tvd);
                    if (tvd < best_tvd) {
                        best_tvd = tvd;
                        save_checkpoint(res.model, tr_out);
                    }
                }
                std::cout << "kept checkpoint with tvd " << best_tvd << "\n";
            }
            json manifest = {{"tool", "divseg"},
                             {"version", kVersion},
                             {"command", "train"},
                             {"dataset", tr_dataset},
                             {"out", tr_out},
                             {"steps", tr_cfg.steps},
                             {"batch_size", tr_cfg.batch_size},
                             {"lr", tr_cfg.learning_rate},
                             {"weight_decay", tr_cfg.weight_decay},
                             {"mu_train", tr_cfg.mu_train},
                             {"sigma_train", tr_cfg.sigma_train},
                             {"width", tr_cfg.width},
                             {"val_interval", tr_cfg.val_interval},
                             {"seed", tr_cfg.seed},
                             {"mu_sweep", tr_sweep}};
            write_manifest(tr_out + ".manifest.json", manifest);
        } else if (se->parsed()) {
            return run_sample_eval(fl);
        } else if (ecov->parsed()) {
            std::vector<std::vector<double>> weight_sets;
            if (!ec_weights.empty()) {
                weight_sets.push_back(parse_weight_list(ec_weights));
            } else if (!ec_dataset.empty()) {
                Dataset ds = read_dataset(ec_dataset);
                for (const auto& inst : ds) weight_sets.push_back(inst.modes.weights);
            } else {
                throw DataError("expected-coverage needs --weights or --dataset");
            }
            for (size_t i = 0; i < weight_sets.size(); ++i) {
                const auto& w = weight_sets[i];
                std::string label = weight_sets.size() > 1
                                        ? "instance " + std::to_string(i) + ": "
                                        : "";
                if (w.size() > 20 && ec_trials <= 0)
                    throw DataError(
                        "more than 20 modes: exact form unavailable, pass --monte-carlo");
                if (w.size() <= 20)
                    std::cout << label << "expected draws " << expected_coverage(w) << "\n";
                if (ec_trials > 0)
                    std::cout << label << "monte carlo (" << ec_trials << " trials) "
                              << expected_coverage_monte_carlo(w, ec_trials, ec_seed) << "\n";
            }
        } else if (ex->parsed()) {
            Dataset ds = read_dataset(ex_dataset);
            std::filesystem::create_directories(ex_dir);
            int written = 0;
            for (const auto& inst : ds) {
                if (ex_instance >= 0 && inst.conditioning.id != ex_instance) continue;
                std::string stem = ex_dir + "/instance" + std::to_string(inst.conditioning.id);
                for (size_t k = 0; k < inst.modes.masks.size(); ++k)
                    write_pgm(inst.modes.masks[k], stem + "_mode" + std::to_string(k) + ".pgm");
                int npx = inst.conditioning.height * inst.conditioning.width;
                for (int ch = 0; ch < inst.conditioning.channels; ++ch) {
                    LatentGrid g(inst.conditioning.height, inst.conditioning.width);
                    for (int i = 0; i < npx; ++i)
                        g.values[i] = inst.conditioning.data[static_cast<size_t>(ch) * npx + i] *
                                          2.0 - 1.0;
                    write_pgm(g, stem + "_cond" + std::to_string(ch) + ".pgm");
                }
                ++written;
            }
            if (written == 0) throw DataError("no matching instance");
            std::cout << "exported " << written << " instance(s) to " << ex_dir << "\n";
        }
    } catch (const NumericalError& e) {
        std::cerr << "numerical error: " << e.what() << "\n";
        return 3;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
