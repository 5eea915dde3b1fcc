#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "divseg/dataset.hpp"
#include "divseg/denoiser.hpp"
#include "divseg/diversity.hpp"
#include "divseg/grid.hpp"
#include "divseg/metrics.hpp"
#include "divseg/pruning.hpp"
#include "divseg/sampler.hpp"

namespace divseg {

// One entry of the method grid. The runner owns batch size, seed, and batch
// index; everything else (method, guidance parameters, schedule) comes from
// the embedded sampler config.
struct MethodSpec {
    std::string name;
    SamplerConfig sampler;
    bool prune = false;
    PruneConfig prune_cfg;
};

struct ExperimentConfig {
    std::vector<MethodSpec> methods;
    int batches_per_input = 1;
    int batch_size = 8;
    uint64_t seed = 0;
    bool timing = false;  // leave wall_ms at 0 unless enabled
    int jobs = 1;
};

struct CellResult {
    int instance_id = 0;
    std::string method;
    int b_total = 0;
    EvaluationReport report;
    double wall_ms = 0.0;
    std::string status = "ok";
    std::vector<BinaryMask> masks;  // kept for optional PGM dumps
};

// Mean of the per-input minimum L2 separation between unique encoded targets.
inline double dataset_r0(const Dataset& ds, size_t* skipped_out = nullptr) {
    std::vector<std::vector<BinaryMask>> modes_per_input;
    modes_per_input.reserve(ds.size());
    for (const auto& inst : ds) modes_per_input.push_back(inst.modes.masks);
    return estimate_r0(modes_per_input, skipped_out);
}

namespace detail {

inline CellResult run_cell(const DenoiserModel& model, const ConditionedInstance& inst,
                           const MethodSpec& spec, const ExperimentConfig& cfg) {
    CellResult cell;
    cell.instance_id = inst.conditioning.id;
    cell.method = spec.name;
    auto started = std::chrono::steady_clock::now();
    try {
        MemoryBank bank;
        MemoryBank* bank_ptr = cfg.batches_per_input > 1 ? &bank : nullptr;
        std::vector<BinaryMask> samples;
        for (int b = 0; b < cfg.batches_per_input; ++b) {
            SamplerConfig scfg = spec.sampler;
            scfg.batch_size = cfg.batch_size;
            scfg.seed = cfg.seed;
            scfg.batch_index = b;
            if (spec.prune) {
                PruneConfig pcfg = spec.prune_cfg;
                PruneResult pr = prune_and_finish(model, pcfg, scfg, inst.conditioning);
                samples.insert(samples.end(), pr.masks.begin(), pr.masks.end());
                if (bank_ptr)
                    for (const auto& lat : pr.latents) bank_ptr->add(lat);
            } else {
                BatchResult br = sample_batch(model, scfg, inst.conditioning, bank_ptr);
                samples.insert(samples.end(), br.masks.begin(), br.masks.end());
            }
        }
        cell.b_total = static_cast<int>(samples.size());
        cell.report = evaluate_samples(samples, inst.modes);
        cell.masks = std::move(samples);
    } catch (const std::exception& e) {
        cell.status = e.what();
        cell.report = EvaluationReport{};
        cell.b_total = 0;
    }
    if (cfg.timing) {
        auto ended = std::chrono::steady_clock::now();
        cell.wall_ms = std::chrono::duration<double, std::milli>(ended - started).count();
    }
    return cell;
}

}  // namespace detail

// Runs the full (instance x method) grid. Cells are independent and may be
// processed by several workers; batches inside a cell stay sequential so the
// memory bank sees earlier batches. Results come back sorted by
// (instance, method) regardless of worker interleaving.
inline std::vector<CellResult> run_experiment(const DenoiserModel& model, const Dataset& ds,
                                              const ExperimentConfig& cfg) {
    if (cfg.methods.empty()) throw DataError("run_experiment: empty method grid");
    if (cfg.batches_per_input < 1 || cfg.batch_size < 1)
        throw DataError("run_experiment: bad batch counts");
    struct Job {
        const ConditionedInstance* inst;
        const MethodSpec* spec;
    };
    std::vector<Job> jobs;
    for (const auto& inst : ds)
        for (const auto& spec : cfg.methods) jobs.push_back({&inst, &spec});

    std::vector<CellResult> results(jobs.size());
    int workers = std::max(1, cfg.jobs);
    if (workers == 1 || jobs.size() <= 1) {
        for (size_t i = 0; i < jobs.size(); ++i)
            results[i] = detail::run_cell(model, *jobs[i].inst, *jobs[i].spec, cfg);
    } else {
        std::atomic<size_t> next{0};
        auto worker = [&]() {
            for (;;) {
                size_t i = next.fetch_add(1);
                if (i >= jobs.size()) return;
                results[i] = detail::run_cell(model, *jobs[i].inst, *jobs[i].spec, cfg);
            }
        };
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }

    std::stable_sort(results.begin(), results.end(), [](const CellResult& a, const CellResult& b) {
        if (a.instance_id != b.instance_id) return a.instance_id < b.instance_id;
        return a.method < b.method;
    });
    return results;
}

namespace detail {

inline std::string csv_real(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

inline std::string csv_field(const std::string& s) {
    bool quote = s.find_first_of(",\"\n") != std::string::npos;
    if (!quote) return s;
    std::string out = "\"";
    for (char ch : s) {
        if (ch == '"') out += '"';
        out += ch;
    }
    out += '"';
    return out;
}

}  // namespace detail

// CSV report: one row per (instance, method) plus one aggregate row per
// method with instance_id "ALL" averaging the successful cells.
inline std::string render_csv(const std::vector<CellResult>& results) {
    std::string out =
        "instance_id,method,b_total,hm_iou,hm_iou_star,distinct_modes,"
        "image_quality,tvd,brier,wall_ms,status\n";
    for (const auto& c : results) {
        out += std::to_string(c.instance_id) + "," + detail::csv_field(c.method) + "," +
               std::to_string(c.b_total) + "," + detail::csv_real(c.report.hm_iou) + "," +
               detail::csv_real(c.report.hm_iou_star) + "," +
               std::to_string(c.report.distinct_modes) + "," +
               detail::csv_real(c.report.image_quality) + "," + detail::csv_real(c.report.tvd) +
               "," + detail::csv_real(c.report.brier) + "," + detail::csv_real(c.wall_ms) + "," +
               detail::csv_field(c.status) + "\n";
    }

    std::vector<std::string> methods;
    for (const auto& c : results)
        if (std::find(methods.begin(), methods.end(), c.method) == methods.end())
            methods.push_back(c.method);
    std::sort(methods.begin(), methods.end());
    for (const auto& m : methods) {
        int n = 0, failed = 0, b_total = 0;
        EvaluationReport sum;
        double dm = 0.0, wall = 0.0;
        for (const auto& c : results) {
            if (c.method != m) continue;
            if (c.status != "ok") {
                ++failed;
                continue;
            }
            ++n;
            b_total = c.b_total;
            sum.hm_iou += c.report.hm_iou;
            sum.hm_iou_star += c.report.hm_iou_star;
            dm += c.report.distinct_modes;
            sum.image_quality += c.report.image_quality;
            sum.tvd += c.report.tvd;
            sum.brier += c.report.brier;
            wall += c.wall_ms;
        }
        if (n == 0) {
            out += "ALL," + detail::csv_field(m) + ",0,0.000000,0.000000,0.000000,0.000000," +
                   "0.000000,0.000000,0.000000,failed\n";
            continue;
        }
        out += "ALL," + detail::csv_field(m) + "," + std::to_string(b_total) + "," +
               detail::csv_real(sum.hm_iou / n) + "," + detail::csv_real(sum.hm_iou_star / n) +
               "," + detail::csv_real(dm / n) + "," + detail::csv_real(sum.image_quality / n) +
               "," + detail::csv_real(sum.tvd / n) + "," + detail::csv_real(sum.brier / n) + "," +
               detail::csv_real(wall / n) + "," + (failed ? "partial" : "ok") + "\n";
    }
    return out;
}

inline void write_csv(const std::vector<CellResult>& results, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw DataError("write_csv: cannot open " + path);
    f << render_csv(results);
    if (!f) throw DataError("write_csv: write failed for " + path);
}

}  // namespace divseg
