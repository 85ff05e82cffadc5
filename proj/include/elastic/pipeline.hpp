// SPDX-License-Identifier: Apache-2.0
//
// End-to-end orchestration: full-model warm-up, importance rearrangement,
// curriculum training, Pareto search, router training and budget-grid
// evaluation. Every stage writes its artifacts under the output directory
// and records its completion in state.json so a run can be resumed.
#pragma once

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "elastic/checkpoint.hpp"
#include "elastic/config.hpp"
#include "elastic/csv.hpp"
#include "elastic/importance.hpp"
#include "elastic/metrics.hpp"

namespace elastic {

namespace fs = std::filesystem;

/// Error raised by a pipeline stage, keeping the original exit code.
class StageError : public Error {
   public:
    StageError(const std::string& stage, const Error& cause)
        : Error(cause.code(), "stage " + stage + " failed: " + cause.what()), stage_(stage) {}
    const std::string& stage() const { return stage_; }

   private:
    std::string stage_;
};

inline const std::vector<std::string>& pipeline_stages() {
    static const std::vector<std::string> kStages{"stage0", "rearrange", "stage1", "search",
                                                  "router", "reference", "eval"};
    return kStages;
}

/// Independent per-stage seed derived from the run seed (splitmix64).
inline std::uint64_t stage_seed(std::uint64_t base, const std::string& stage) {
    std::uint64_t z = base;
    for (char c : stage) z = z * 131 + static_cast<unsigned char>(c);
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

template <typename T>
Dataset<T> load_dataset(const RunConfig& cfg) {
    Dataset<T> d = cfg.data.kind == "blobs" ? generate_blobs<T>(cfg.data.blobs) : load_idx<T>(cfg.data.idx);
    const auto& b = cfg.backbone;
    if (d.train.tokens != static_cast<std::size_t>(b.patch_tokens()))
        throw ConfigError("data has " + std::to_string(d.train.tokens) + " tokens per sample, backbone expects " +
                          std::to_string(b.patch_tokens()));
    if (d.train.features != static_cast<std::size_t>(b.input_dim))
        throw ConfigError("data has " + std::to_string(d.train.features) + " features per token, backbone expects " +
                          std::to_string(b.input_dim));
    if (d.num_classes > b.num_classes)
        throw ConfigError("data has " + std::to_string(d.num_classes) + " classes, backbone has " +
                          std::to_string(b.num_classes));
    return d;
}

// ---------------------------------------------------------------- artifacts

inline void write_step_log(const std::string& path, const std::vector<StepLog>& logs) {
    CsvWriter w(path, {"step", "config", "loss"});
    for (const auto& l : logs) w.row({std::to_string(l.step), l.config, format_double(l.loss)});
}

inline void write_importance_csv(const std::string& path, const ImportanceReport& r) {
    CsvWriter w(path, {"field", "layer", "index", "score"});
    for (std::size_t i = 0; i < r.emb_scores.size(); ++i)
        w.row({"embedding", "-1", std::to_string(i), format_double(r.emb_scores[i])});
    for (std::size_t l = 0; l < r.mlp_scores.size(); ++l) {
        for (std::size_t i = 0; i < r.mlp_scores[l].size(); ++i)
            w.row({"mlp", std::to_string(l), std::to_string(i), format_double(r.mlp_scores[l][i])});
        for (std::size_t i = 0; i < r.head_scores[l].size(); ++i)
            w.row({"heads", std::to_string(l), std::to_string(i), format_double(r.head_scores[l][i])});
    }
}

inline void write_archive_csv(const std::string& path, const std::vector<Individual>& pool) {
    CsvWriter w(path, {"genome-hex", "macs_norm", "macs_absolute", "loss", "front_rank"});
    for (const auto& ind : pool)
        w.row({bits_to_hex(ind.genome), format_double(ind.macs_norm), std::to_string(ind.macs),
               format_double(ind.loss), std::to_string(ind.front_rank)});
}

/// Reads an archive or front CSV back into individuals.
inline std::vector<Individual> read_archive_csv(const std::string& path, const GateLayout& layout) {
    const auto t = read_csv(path);
    std::vector<Individual> out;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        Individual ind;
        ind.genome = hex_to_bits(t.at(r, "genome-hex"), layout.size());
        ind.macs_norm = t.number(r, "macs_norm");
        ind.macs = static_cast<std::uint64_t>(std::stoull(t.at(r, "macs_absolute")));
        ind.loss = t.number(r, "loss");
        ind.front_rank = static_cast<int>(t.number(r, "front_rank"));
        out.push_back(std::move(ind));
    }
    return out;
}

inline void write_history_csv(const std::string& path, const std::vector<GenerationRecord>& history) {
    // One fixed reference point for the whole run.
    double worst = 0;
    for (const auto& g : history)
        for (const auto& p : g.front)
            if (std::isfinite(p.loss)) worst = std::max(worst, p.loss);
    const Objectives ref{worst * 1.1 + 1e-9, 1.1};
    CsvWriter w(path, {"generation", "front_size", "hypervolume", "best_population_loss", "evaluations",
                       "ref_loss", "ref_macs_norm"});
    for (const auto& g : history)
        w.row({std::to_string(g.generation), std::to_string(g.front.size()), format_double(hypervolume(g.front, ref)),
               format_double(g.best_population_loss), std::to_string(g.evaluations), format_double(ref.loss),
               format_double(ref.macs_norm)});
}

struct BudgetRow {
    double m_t = 0;
    std::uint64_t realized_macs = 0;
    double macs_norm = 0;
    double accuracy = 0;
    std::string genome_hex;
};

inline void write_budget_csv(const std::string& path, const std::vector<BudgetRow>& rows) {
    CsvWriter w(path, {"M_t", "realized_macs", "macs_norm", "accuracy", "genome-hex"});
    for (const auto& r : rows)
        w.row({format_double(r.m_t), std::to_string(r.realized_macs), format_double(r.macs_norm),
               format_double(r.accuracy), r.genome_hex});
}

inline std::vector<BudgetRow> read_budget_csv(const std::string& path) {
    const auto t = read_csv(path);
    std::vector<BudgetRow> out;
    for (std::size_t r = 0; r < t.rows.size(); ++r)
        out.push_back({t.number(r, "M_t"), static_cast<std::uint64_t>(std::stoull(t.at(r, "realized_macs"))),
                       t.number(r, "macs_norm"), t.number(r, "accuracy"), t.at(r, "genome-hex")});
    return out;
}

/// Backbone and router tensors in one checkpoint.
template <typename T>
void save_combined(const std::string& path, const ElasticParams<T>& params, const RouterParams<T>& router,
                   const std::map<std::string, std::string>& meta = {}) {
    auto tensors = named_tensors(params);
    router.for_each([&](const std::string& n, const Tensor<T>& t) { tensors.emplace_back(n, &t); });
    save_checkpoint(path, params.spec, tensors, meta);
}

template <typename T>
RouterParams<T> router_from_checkpoint(const Checkpoint& ck) {
    const auto* w_out = ck.find("router.w_out");
    if (!w_out) throw FormatError("checkpoint has no router tensors");
    RouterParams<T> r(w_out->rows(), w_out->cols());
    r.for_each([&](const std::string& n, Tensor<T>& t) { restore_tensor(ck, n, t); });
    return r;
}

/// Routes each budget deterministically and evaluates the resulting
/// submodel on `split`.
template <typename T>
std::vector<BudgetRow> evaluate_budgets(ElasticParams<T>& params, RouterParams<T>& router,
                                        const RouterSettings& s, const std::vector<double>& budgets,
                                        const TokenBatch<T>& split) {
    const GateLayout layout(params.spec);
    const double m0 = static_cast<double>(macs(SubmodelConfig::maximal(params.spec), params.spec));
    std::vector<BudgetRow> rows;
    for (double m : budgets) {
        const auto cfg = route_config(router, layout, m, s);
        const auto metrics = evaluate(build_submodel(params, cfg), split);
        rows.push_back({m, metrics.macs, static_cast<double>(metrics.macs) / m0, metrics.accuracy,
                        bits_to_hex(layout.encode(cfg))});
    }
    return rows;
}

/// Mean cross-entropy fitness on a fixed evaluation set.
template <typename T>
FitnessFn loss_fitness(ElasticParams<T>& params, const TokenBatch<T>& eval_set) {
    return [&params, &eval_set](const SubmodelConfig& cfg) {
        return evaluate(build_submodel(params, cfg), eval_set).mean_ce;
    };
}

/// Writes manifest.csv: every regular file in `dir` (except the manifest)
/// with its size and SHA-256, sorted by name.
inline std::vector<std::pair<std::string, std::string>> write_manifest(const std::string& dir) {
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().filename() != "manifest.csv") names.push_back(e.path().filename().string());
    std::sort(names.begin(), names.end());
    std::vector<std::pair<std::string, std::string>> out;
    CsvWriter w((fs::path(dir) / "manifest.csv").string(), {"artifact", "bytes", "sha256"});
    for (const auto& n : names) {
        const auto p = (fs::path(dir) / n).string();
        const auto h = sha256_file(p);
        w.row({n, std::to_string(fs::file_size(p)), h});
        out.emplace_back(n, h);
    }
    return out;
}

// ----------------------------------------------------------------- pipeline

struct PipelineOptions {
    bool resume = false;  ///< continue after the last stage recorded in state.json
    std::function<void(const std::string&)> log;
};

struct PipelineResult {
    std::vector<std::string> stages_run;
    std::vector<BudgetRow> budgets;
    double reference_accuracy = 0;
    std::vector<std::pair<std::string, std::string>> manifest;
};

namespace detail {

inline std::vector<std::string> read_state(const fs::path& dir) {
    std::ifstream in(dir / "state.json");
    if (!in) return {};
    try {
        return nlohmann::json::parse(in).at("completed").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError((dir / "state.json").string() + ": " + e.what());
    }
}

inline void write_state(const fs::path& dir, const std::vector<std::string>& done) {
    std::ofstream out(dir / "state.json");
    out << nlohmann::json{{"completed", done}}.dump(2) << '\n';
    if (!out) throw FormatError("cannot write " + (dir / "state.json").string());
}

}  // namespace detail

template <typename T>
PipelineResult run_pipeline(const RunConfig& cfg, const PipelineOptions& opts = {}) {
    cfg.validate();
    const fs::path dir(cfg.output_dir);
    fs::create_directories(dir);
    auto say = [&](const std::string& m) {
        if (opts.log) opts.log(m);
    };
    auto path = [&](const char* name) { return (dir / name).string(); };
    std::vector<std::string> done = opts.resume ? detail::read_state(dir) : std::vector<std::string>{};
    const auto& stages = pipeline_stages();
    for (std::size_t i = 0; i < done.size(); ++i)
        if (i >= stages.size() || done[i] != stages[i])
            throw FormatError((dir / "state.json").string() + ": unexpected stage list");
    {
        std::ofstream out(path("config.json"));
        out << dump_config(cfg);
    }

    const auto& spec = cfg.backbone;
    const GateLayout layout(spec);
    const std::map<std::string, std::string> meta{{"seed", std::to_string(cfg.seed)}};
    PipelineResult result;
    Dataset<T> data;
    std::optional<ElasticParams<T>> params;
    std::optional<RouterParams<T>> router;
    std::vector<Individual> front;

    // Restore the state left by the last completed stage.
    if (!done.empty()) {
        const auto& last = done.back();
        const char* ck = last == "stage0"      ? "stage0.ckpt"
                         : last == "rearrange" ? "rearranged.ckpt"
                         : last == "stage1" || last == "search" ? "supernet.ckpt"
                                                                : "router.ckpt";
        const auto loaded = load_checkpoint(path(ck));
        if (!(loaded.spec == spec)) throw ConfigError(path(ck) + " was written for a different backbone");
        params = params_from_checkpoint<T>(loaded);
        if (loaded.find("router.w_out")) router = router_from_checkpoint<T>(loaded);
        if (std::find(done.begin(), done.end(), "search") != done.end()) front = read_archive_csv(path("front.csv"), layout);
        say("resuming after stage " + last);
    }

    auto run = [&](const std::string& stage, const std::function<void()>& body) {
        if (std::find(done.begin(), done.end(), stage) != done.end()) return;
        say("stage " + stage);
        const auto start = std::chrono::steady_clock::now();
        try {
            body();
        } catch (const Error& e) {
            throw StageError(stage, e);
        } catch (const std::exception& e) {
            throw StageError(stage, FormatError(e.what()));
        }
        const std::chrono::duration<double> took = std::chrono::steady_clock::now() - start;
        char secs[32];
        std::snprintf(secs, sizeof secs, "%.1f", took.count());
        say("stage " + stage + " done in " + secs + " s");
        done.push_back(stage);
        detail::write_state(dir, done);
        result.stages_run.push_back(stage);
    };

    try {
        data = load_dataset<T>(cfg);
    } catch (const Error& e) {
        throw StageError("data", e);
    }

    run("stage0", [&] {
        params = ElasticParams<T>::random(spec, stage_seed(cfg.seed, "init"));
        std::vector<StepLog> logs;
        train_maximal(*params, data.train, cfg.stage0.steps, cfg.stage0.train, stage_seed(cfg.seed, "stage0"),
                      [&](const StepLog& l) { logs.push_back(l); });
        write_step_log(path("stage0_log.csv"), logs);
        save_params(path("stage0.ckpt"), *params, meta);
    });

    run("rearrange", [&] {
        const auto report = score_importance(*params, data.train, cfg.importance_samples);
        write_importance_csv(path("importance.csv"), report);
        const auto rec = rearrange(*params, report);
        std::ofstream audit(path("permutation_audit.txt"));
        write_permutation_audit(audit, rec);
        save_params(path("rearranged.ckpt"), *params, meta);
    });

    run("stage1", [&] {
        std::vector<StepLog> logs;
        stage1_train(*params, cfg.curriculum, data.train, cfg.stage1, stage_seed(cfg.seed, "stage1"),
                     [&](const StepLog& l) { logs.push_back(l); });
        write_step_log(path("stage1_log.csv"), logs);
        save_params(path("supernet.ckpt"), *params, meta);
    });

    run("search", [&] {
        const auto eval_set = first_n(data.train, static_cast<std::size_t>(cfg.search.eval_batch));
        auto res = evolve(spec, cfg.search, loss_fitness(*params, eval_set), stage_seed(cfg.seed, "search"));
        for (const auto& w : res.warnings) say("search: " + w);
        write_archive_csv(path("archive.csv"), res.archive);
        write_archive_csv(path("front.csv"), res.front);
        write_history_csv(path("search_history.csv"), res.history);
        front = res.front;
    });

    run("router", [&] {
        router = RouterParams<T>::random(cfg.router.hidden, layout.size(), stage_seed(cfg.seed, "router-init"));
        std::vector<RouterStepLog> logs;
        stage2_train(*params, *router, front, data.train, cfg.router, stage_seed(cfg.seed, "router"),
                     [&](const RouterStepLog& l) { logs.push_back(l); });
        CsvWriter w(path("stage2_log.csv"),
                    {"phase", "step", "budget", "ce", "budget_term", "imitation_term", "tau", "config"});
        for (const auto& l : logs)
            w.row({std::string(1, l.phase), std::to_string(l.step), format_double(l.budget), format_double(l.ce),
                   format_double(l.budget_term), format_double(l.imitation_term), format_double(l.tau), l.config});
        save_combined(path("router.ckpt"), *params, *router, meta);
    });

    // Separately trained maximal model from the same initialization.
    run("reference", [&] {
        auto ref = ElasticParams<T>::random(spec, stage_seed(cfg.seed, "init"));
        std::vector<StepLog> logs;
        const long steps = cfg.reference_steps > 0 ? cfg.reference_steps : cfg.stage0.steps + cfg.curriculum.total_steps;
        train_maximal(ref, data.train, steps, cfg.stage0.train,
                      stage_seed(cfg.seed, "reference"), [&](const StepLog& l) { logs.push_back(l); });
        write_step_log(path("reference_log.csv"), logs);
        const auto full = SubmodelConfig::maximal(spec);
        const auto m_ref = evaluate(build_submodel(ref, full), data.val);
        const auto m_net = evaluate(build_submodel(*params, full), data.val);
        CsvWriter w(path("reference.csv"), {"model", "accuracy", "mean_ce", "macs"});
        w.row({"reference_maximal", format_double(m_ref.accuracy), format_double(m_ref.mean_ce),
               std::to_string(m_ref.macs)});
        w.row({"supernet_maximal", format_double(m_net.accuracy), format_double(m_net.mean_ce),
               std::to_string(m_net.macs)});
    });

    run("eval", [&] {
        const auto rows = evaluate_budgets(*params, *router, cfg.router, cfg.budgets, data.val);
        write_budget_csv(path("budget_eval.csv"), rows);
    });

    result.budgets = read_budget_csv(path("budget_eval.csv"));
    result.reference_accuracy = read_csv(path("reference.csv")).number(0, "accuracy");
    result.manifest = write_manifest(dir.string());
    return result;
}

}  // namespace elastic
