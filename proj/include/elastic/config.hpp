// SPDX-License-Identifier: Apache-2.0
//
// Run configuration for the command-line driver, stored as JSON. Unknown
// keys are rejected so that typos surface as configuration errors.
#pragma once

#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "elastic/curriculum.hpp"
#include "elastic/dataset.hpp"
#include "elastic/pareto.hpp"
#include "elastic/router.hpp"

namespace elastic {

struct DataConfig {
    std::string kind = "blobs";  ///< "blobs" or "idx"
    BlobSpec blobs;
    IdxSpec idx;
};

struct StageTraining {
    long steps = 0;
    TrainSettings train;
};

struct RunConfig {
    std::string output_dir = "run";
    std::uint64_t seed = 1;
    BackboneSpec backbone;
    DataConfig data;
    StageTraining stage0;
    std::size_t importance_samples = 512;
    CurriculumSchedule curriculum;
    TrainSettings stage1;
    SearchSettings search;
    RouterSettings router;
    long reference_steps = 0;  ///< 0: stage0 steps plus curriculum steps
    std::vector<double> budgets;

    /// Desk-scale defaults: the toy backbone on four-class blobs.
    static RunConfig desk_default() {
        RunConfig c;
        auto& b = c.backbone;
        b.layers = 4;
        b.embed_max = 64;
        b.d_head = 8;
        b.heads_max = 8;
        b.ratio_max = 4.0;
        b.ratio_step = 0.5;
        b.tokens = 5;
        b.num_classes = 4;
        b.embed_min = 16;
        b.heads_min = 2;
        b.ratio_min = 0.5;
        b.input_dim = 8;

        c.data.blobs.classes = 4;
        c.data.blobs.clusters = 8;
        c.data.blobs.train_samples = 16384;
        c.data.blobs.val_samples = 2048;
        c.data.blobs.tokens = 4;
        c.data.blobs.features = 8;
        c.data.blobs.noise = 1.5;
        c.data.blobs.separation = 1.0;
        c.data.blobs.seed = 7;

        c.stage0.steps = 300;
        c.stage0.train.batch_size = 32;
        c.stage0.train.optimizer.lr = 2e-3;
        c.stage0.train.optimizer.warmup_steps = 30;

        c.curriculum = {6000, {400, 800, 1200, 1600, 2000, 2400}, {1, 1, 0.5, 0.5, 0.5, 0}, 1, 8, {1, 1, 0, 0, 0, 0}};
        c.stage1.batch_size = 32;
        c.stage1.optimizer.lr = 3e-3;
        c.stage1.optimizer.warmup_steps = 30;

        c.search.population = 32;
        c.search.generations = 40;
        c.search.eval_batch = 256;

        c.router.phase_a_steps = 1000;
        c.router.phase_b_steps = 1000;
        c.router.backbone.lr = 1e-5;
        c.router.lambda1 = 500;
        c.reference_steps = 3000;
        c.budgets = {0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
        return c;
    }

    std::size_t train_samples() const { return data.kind == "blobs" ? static_cast<std::size_t>(data.blobs.train_samples) : 0; }

    /// Field-level and cross-field checks. IDX sizes are only known after
    /// loading, so their width checks happen in the driver.
    void validate() const {
        if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
        if (reference_steps < 0) throw ConfigError("reference.steps must be non-negative");
        backbone.validate();
        if (data.kind == "blobs") {
            data.blobs.validate();
            if (data.blobs.tokens != backbone.patch_tokens())
                throw ConfigError("data.blobs.tokens (" + std::to_string(data.blobs.tokens) +
                                  ") must equal backbone.tokens - 1 (" + std::to_string(backbone.patch_tokens()) + ")");
            if (data.blobs.features != backbone.input_dim)
                throw ConfigError("data.blobs.features must equal backbone.input_dim");
            if (data.blobs.classes != backbone.num_classes)
                throw ConfigError("data.blobs.classes must equal backbone.num_classes");
        } else if (data.kind == "idx") {
            if (data.idx.images.empty() || data.idx.labels.empty())
                throw ConfigError("data.idx needs both images and labels paths");
            if (data.idx.patch <= 0) throw ConfigError("data.idx.patch must be positive");
            if (!(data.idx.val_fraction > 0 && data.idx.val_fraction < 1))
                throw ConfigError("data.idx.val_fraction must lie in (0, 1)");
            if (backbone.input_dim != data.idx.patch * data.idx.patch)
                throw ConfigError("backbone.input_dim must equal data.idx.patch squared");
        } else {
            throw ConfigError("data.kind must be 'blobs' or 'idx', got '" + data.kind + "'");
        }
        if (stage0.steps < 0) throw ConfigError("stage0.steps must be non-negative");
        for (const auto* t : {&stage0.train, &stage1}) {
            if (t->batch_size == 0) throw ConfigError("training batch_size must be positive");
            t->optimizer.validate();
        }
        if (importance_samples == 0) throw ConfigError("importance.samples must be positive");
        curriculum.validate(backbone);
        search.validate();
        router.validate();
        if (data.kind == "blobs") {
            if (importance_samples > train_samples())
                throw ConfigError("importance.samples exceeds the training split");
            if (static_cast<std::size_t>(search.eval_batch) > train_samples())
                throw ConfigError("search.eval_batch exceeds the training split");
        }
        if (budgets.empty()) throw ConfigError("eval.budgets must not be empty");
        for (double m : budgets)
            if (!(m >= 0 && m <= 1)) throw ConfigError("eval.budgets entries must lie in [0, 1], got " + std::to_string(m));
    }
};

namespace detail {

using nlohmann::json;

/// Reads keys of one JSON object, rejecting any key not consumed.
class ObjectReader {
   public:
    ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j.is_object()) throw ConfigError(path_ + " must be an object");
    }
    /// Throws on the first key that no get() or sub() asked for.
    void finish() const {
        for (const auto& [k, v] : j_.items())
            if (!seen_.count(k)) throw ConfigError("unknown key " + path_ + "." + k);
    }

    template <typename V>
    void get(const char* key, V& out) {
        seen_.insert(key);
        if (!j_.contains(key)) return;
        try {
            out = j_.at(key).get<V>();
        } catch (const json::exception&) {
            throw ConfigError(path_ + "." + key + " has the wrong type");
        }
    }
    const json* sub(const char* key) {
        seen_.insert(key);
        return j_.contains(key) ? &j_.at(key) : nullptr;
    }

   private:
    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

inline void read_optimizer(const json* j, const std::string& path, OptimizerSettings& o) {
    if (!j) return;
    ObjectReader r(*j, path);
    r.get("lr", o.lr);
    r.get("beta1", o.beta1);
    r.get("beta2", o.beta2);
    r.get("eps", o.eps);
    r.get("weight_decay", o.weight_decay);
    r.get("warmup_steps", o.warmup_steps);
    r.finish();
}

inline json write_optimizer(const OptimizerSettings& o) {
    return {{"lr", o.lr}, {"beta1", o.beta1}, {"beta2", o.beta2}, {"eps", o.eps},
            {"weight_decay", o.weight_decay}, {"warmup_steps", o.warmup_steps}};
}

}  // namespace detail

inline nlohmann::json to_json(const RunConfig& c) {
    using detail::write_optimizer;
    const auto& b = c.backbone;
    const auto& s = c.search;
    const auto& r = c.router;
    return {
        {"output_dir", c.output_dir},
        {"seed", c.seed},
        {"backbone",
         {{"layers", b.layers}, {"embed_max", b.embed_max}, {"d_head", b.d_head}, {"heads_max", b.heads_max},
          {"ratio_max", b.ratio_max}, {"ratio_step", b.ratio_step}, {"tokens", b.tokens},
          {"num_classes", b.num_classes}, {"embed_min", b.embed_min}, {"heads_min", b.heads_min},
          {"ratio_min", b.ratio_min}, {"input_dim", b.input_dim}}},
        {"data",
         {{"kind", c.data.kind},
          {"blobs",
           {{"classes", c.data.blobs.classes}, {"clusters", c.data.blobs.clusters}, {"train_samples", c.data.blobs.train_samples},
            {"val_samples", c.data.blobs.val_samples}, {"tokens", c.data.blobs.tokens},
            {"features", c.data.blobs.features}, {"noise", c.data.blobs.noise},
            {"separation", c.data.blobs.separation}, {"seed", c.data.blobs.seed}}},
          {"idx",
           {{"images", c.data.idx.images}, {"labels", c.data.idx.labels}, {"patch", c.data.idx.patch},
            {"val_fraction", c.data.idx.val_fraction}}}}},
        {"stage0",
         {{"steps", c.stage0.steps}, {"batch_size", c.stage0.train.batch_size},
          {"optimizer", write_optimizer(c.stage0.train.optimizer)}}},
        {"importance", {{"samples", c.importance_samples}}},
        {"curriculum",
         {{"steps", c.curriculum.total_steps}, {"expansion_steps", c.curriculum.expansion_steps},
          {"delta_r", c.curriculum.delta_r}, {"delta_h", c.curriculum.delta_h}, {"delta_e", c.curriculum.delta_e},
          {"delta_n", c.curriculum.delta_n}, {"batch_size", c.stage1.batch_size},
          {"optimizer", write_optimizer(c.stage1.optimizer)}}},
        {"search",
         {{"population", s.population}, {"crossover_p", s.crossover_p}, {"mutation_p", s.mutation_p},
          {"generations", s.generations}, {"partitions", s.partitions}, {"min_gap", s.min_gap},
          {"eval_batch", s.eval_batch}}},
        {"router",
         {{"hidden", r.hidden}, {"tau_start", r.tau_start}, {"tau_end", r.tau_end}, {"delta", r.delta},
          {"lambda1", r.lambda1}, {"lambda2", r.lambda2}, {"phase_a_steps", r.phase_a_steps},
          {"phase_b_steps", r.phase_b_steps}, {"lr_multiplier", r.lr_multiplier}, {"batch_size", r.batch_size},
          {"optimizer", write_optimizer(r.backbone)}}},
        {"reference", {{"steps", c.reference_steps}}},
        {"eval", {{"budgets", c.budgets}}},
        {"log_every", c.stage1.log_every},
    };
}

/// Parses a configuration over the desk defaults; absent keys keep their
/// default values. Runs full validation.
inline RunConfig config_from_json(const nlohmann::json& j) {
    using detail::ObjectReader;
    RunConfig c = RunConfig::desk_default();
    {
        ObjectReader top(j, "config");
        top.get("output_dir", c.output_dir);
        top.get("seed", c.seed);
        long log_every = c.stage1.log_every;
        top.get("log_every", log_every);
        if (log_every <= 0) throw ConfigError("log_every must be positive");
        c.stage0.train.log_every = c.stage1.log_every = c.router.log_every = log_every;
        if (const auto* b = top.sub("backbone")) {
            ObjectReader r(*b, "backbone");
            auto& s = c.backbone;
            r.get("layers", s.layers);
            r.get("embed_max", s.embed_max);
            r.get("d_head", s.d_head);
            r.get("heads_max", s.heads_max);
            r.get("ratio_max", s.ratio_max);
            r.get("ratio_step", s.ratio_step);
            r.get("tokens", s.tokens);
            r.get("num_classes", s.num_classes);
            r.get("embed_min", s.embed_min);
            r.get("heads_min", s.heads_min);
            r.get("ratio_min", s.ratio_min);
            r.get("input_dim", s.input_dim);
            r.finish();
        }
        if (const auto* d = top.sub("data")) {
            ObjectReader r(*d, "data");
            r.get("kind", c.data.kind);
            if (const auto* bl = r.sub("blobs")) {
                ObjectReader rb(*bl, "data.blobs");
                auto& s = c.data.blobs;
                rb.get("classes", s.classes);
                rb.get("clusters", s.clusters);
                rb.get("train_samples", s.train_samples);
                rb.get("val_samples", s.val_samples);
                rb.get("tokens", s.tokens);
                rb.get("features", s.features);
                rb.get("noise", s.noise);
                rb.get("separation", s.separation);
                rb.get("seed", s.seed);
                rb.finish();
            }
            if (const auto* ix = r.sub("idx")) {
                ObjectReader ri(*ix, "data.idx");
                ri.get("images", c.data.idx.images);
                ri.get("labels", c.data.idx.labels);
                ri.get("patch", c.data.idx.patch);
                ri.get("val_fraction", c.data.idx.val_fraction);
                ri.finish();
            }
            r.finish();
        }
        if (const auto* s0 = top.sub("stage0")) {
            ObjectReader r(*s0, "stage0");
            r.get("steps", c.stage0.steps);
            r.get("batch_size", c.stage0.train.batch_size);
            detail::read_optimizer(r.sub("optimizer"), "stage0.optimizer", c.stage0.train.optimizer);
            r.finish();
        }
        if (const auto* im = top.sub("importance")) {
            ObjectReader r(*im, "importance");
            r.get("samples", c.importance_samples);
            r.finish();
        }
        if (const auto* cu = top.sub("curriculum")) {
            ObjectReader r(*cu, "curriculum");
            r.get("steps", c.curriculum.total_steps);
            r.get("expansion_steps", c.curriculum.expansion_steps);
            r.get("delta_r", c.curriculum.delta_r);
            r.get("delta_h", c.curriculum.delta_h);
            r.get("delta_e", c.curriculum.delta_e);
            r.get("delta_n", c.curriculum.delta_n);
            r.get("batch_size", c.stage1.batch_size);
            detail::read_optimizer(r.sub("optimizer"), "curriculum.optimizer", c.stage1.optimizer);
            r.finish();
        }
        if (const auto* rf = top.sub("reference")) {
            ObjectReader r(*rf, "reference");
            r.get("steps", c.reference_steps);
            r.finish();
        }
        if (const auto* se = top.sub("search")) {
            ObjectReader r(*se, "search");
            auto& s = c.search;
            r.get("population", s.population);
            r.get("crossover_p", s.crossover_p);
            r.get("mutation_p", s.mutation_p);
            r.get("generations", s.generations);
            r.get("partitions", s.partitions);
            r.get("min_gap", s.min_gap);
            r.get("eval_batch", s.eval_batch);
            r.finish();
        }
        if (const auto* ro = top.sub("router")) {
            ObjectReader r(*ro, "router");
            auto& s = c.router;
            r.get("hidden", s.hidden);
            r.get("tau_start", s.tau_start);
            r.get("tau_end", s.tau_end);
            r.get("delta", s.delta);
            r.get("lambda1", s.lambda1);
            r.get("lambda2", s.lambda2);
            r.get("phase_a_steps", s.phase_a_steps);
            r.get("phase_b_steps", s.phase_b_steps);
            r.get("lr_multiplier", s.lr_multiplier);
            r.get("batch_size", s.batch_size);
            detail::read_optimizer(r.sub("optimizer"), "router.optimizer", s.backbone);
            r.finish();
        }
        if (const auto* ev = top.sub("eval")) {
            ObjectReader r(*ev, "eval");
            r.get("budgets", c.budgets);
            r.finish();
        }
        top.finish();
    }
    c.validate();
    return c;
}

inline RunConfig parse_config(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    return config_from_json(j);
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

inline std::string dump_config(const RunConfig& c) { return to_json(c).dump(2) + "\n"; }

}  // namespace elastic
