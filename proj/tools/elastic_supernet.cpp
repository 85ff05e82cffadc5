// SPDX-License-Identifier: Apache-2.0
//
// elastic-supernet {rearrange|adapt|search|train-router|eval|pipeline}
#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <sstream>
#include <string>

#include "elastic/elastic.hpp"

namespace {

using namespace elastic;

struct Options {
    std::string config_path;
    std::uint64_t seed = 0;
    bool seed_set = false;
    std::string resume;
    std::string ck_in, ck_out;
    std::string front;
    std::string out_dir;
    std::string budgets;
    std::string csv_out;
};

RunConfig resolve_config(const Options& o) {
    RunConfig cfg = o.config_path.empty() ? RunConfig::desk_default() : load_config(o.config_path);
    if (o.seed_set) cfg.seed = o.seed;
    if (!o.out_dir.empty()) cfg.output_dir = o.out_dir;
    cfg.validate();
    return cfg;
}

std::vector<double> parse_budgets(const std::string& text) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            out.push_back(std::stod(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw ConfigError("--budgets: '" + item + "' is not a number");
        }
        if (!(out.back() >= 0 && out.back() <= 1)) throw ConfigError("--budgets entries must lie in [0, 1]");
    }
    if (out.empty()) throw ConfigError("--budgets is empty");
    return out;
}

void require(const std::string& value, const char* flag) {
    if (value.empty()) throw ConfigError(std::string(flag) + " is required");
}

template <typename T>
ElasticParams<T> load_supernet(const std::string& path, const RunConfig& cfg) {
    const auto ck = load_checkpoint(path);
    if (!(ck.spec == cfg.backbone)) throw ConfigError(path + " was written for a different backbone than the config");
    return params_from_checkpoint<T>(ck);
}

void log_line(const std::string& m) { std::cerr << m << '\n'; }

template <typename T>
int run(const std::string& cmd, const Options& o) {
    const auto cfg = resolve_config(o);
    const std::map<std::string, std::string> meta{{"seed", std::to_string(cfg.seed)}};

    if (cmd == "pipeline") {
        auto c = cfg;
        if (!o.resume.empty()) c.output_dir = o.resume;
        PipelineOptions po;
        po.resume = !o.resume.empty();
        po.log = log_line;
        const auto res = run_pipeline<T>(c, po);
        for (const auto& r : res.budgets)
            std::cout << "M_t=" << r.m_t << " macs_norm=" << r.macs_norm << " accuracy=" << r.accuracy << '\n';
        std::cout << "reference maximal accuracy=" << res.reference_accuracy << '\n';
        return 0;
    }

    require(o.ck_in, "--checkpoint-in");
    const auto data = load_dataset<T>(cfg);

    if (cmd == "rearrange") {
        require(o.ck_out, "--checkpoint-out");
        auto params = load_supernet<T>(o.ck_in, cfg);
        const auto report = score_importance(params, data.train, cfg.importance_samples);
        const auto rec = rearrange(params, report);
        write_permutation_audit(std::cout, rec);
        save_params(o.ck_out, params, meta);
    } else if (cmd == "adapt") {
        require(o.ck_out, "--checkpoint-out");
        auto params = load_supernet<T>(o.ck_in, cfg);
        stage1_train(params, cfg.curriculum, data.train, cfg.stage1, stage_seed(cfg.seed, "stage1"),
                     [](const StepLog& l) { log_line("step " + std::to_string(l.step) + " " + l.config + " loss " + format_double(l.loss)); });
        save_params(o.ck_out, params, meta);
    } else if (cmd == "search") {
        auto params = load_supernet<T>(o.ck_in, cfg);
        const auto eval_set = first_n(data.train, static_cast<std::size_t>(cfg.search.eval_batch));
        const auto res = evolve(cfg.backbone, cfg.search, loss_fitness(params, eval_set), stage_seed(cfg.seed, "search"),
                                [](const GenerationRecord& g) {
                                    log_line("generation " + std::to_string(g.generation) + " front " +
                                             std::to_string(g.front.size()));
                                });
        for (const auto& w : res.warnings) log_line("warning: " + w);
        fs::create_directories(cfg.output_dir);
        write_archive_csv((fs::path(cfg.output_dir) / "archive.csv").string(), res.archive);
        write_archive_csv((fs::path(cfg.output_dir) / "front.csv").string(), res.front);
        write_history_csv((fs::path(cfg.output_dir) / "search_history.csv").string(), res.history);
    } else if (cmd == "train-router") {
        require(o.ck_out, "--checkpoint-out");
        require(o.front, "--front");
        auto params = load_supernet<T>(o.ck_in, cfg);
        const GateLayout layout(cfg.backbone);
        const auto front = read_archive_csv(o.front, layout);
        auto router = RouterParams<T>::random(cfg.router.hidden, layout.size(), stage_seed(cfg.seed, "router-init"));
        stage2_train(params, router, front, data.train, cfg.router, stage_seed(cfg.seed, "router"),
                     [](const RouterStepLog& l) {
                         log_line(std::string("phase ") + l.phase + " step " + std::to_string(l.step) + " ce " +
                                  format_double(l.ce) + " budget " + format_double(l.budget_term));
                     });
        save_combined(o.ck_out, params, router, meta);
    } else if (cmd == "eval") {
        const auto ck = load_checkpoint(o.ck_in);
        if (!(ck.spec == cfg.backbone)) throw ConfigError(o.ck_in + " was written for a different backbone");
        auto params = params_from_checkpoint<T>(ck);
        auto router = router_from_checkpoint<T>(ck);
        const auto budgets = o.budgets.empty() ? cfg.budgets : parse_budgets(o.budgets);
        const auto rows = evaluate_budgets(params, router, cfg.router, budgets, data.val);
        if (o.csv_out.empty()) {
            std::cout << "M_t,realized_macs,macs_norm,accuracy,genome-hex\n";
            for (const auto& r : rows)
                std::cout << format_double(r.m_t) << ',' << r.realized_macs << ',' << format_double(r.macs_norm) << ','
                          << format_double(r.accuracy) << ',' << r.genome_hex << '\n';
        } else {
            write_budget_csv(o.csv_out, rows);
        }
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Elastic supernet training, search and routing"};
    app.require_subcommand(0, 1);
    Options o;
    bool dump = false;
    app.add_flag("--dump-default-config", dump, "Print the default configuration as JSON and exit");

    const char* names[] = {"rearrange", "adapt", "search", "train-router", "eval", "pipeline"};
    const char* help[] = {"Sort supernet units by importance", "Run curriculum elastic adaptation",
                          "Run the Pareto search and write archive CSVs", "Train the budget router",
                          "Evaluate routed submodels over a budget grid", "Run every stage end to end"};
    for (int i = 0; i < 6; ++i) {
        auto* sub = app.add_subcommand(names[i], help[i]);
        sub->add_option("--config", o.config_path, "JSON configuration file")->check(CLI::ExistingFile);
        sub->add_option_function<std::uint64_t>("--seed", [&](const std::uint64_t& s) {
            o.seed = s;
            o.seed_set = true;
        }, "Run seed");
        const std::string name = names[i];
        if (name == "pipeline") {
            sub->add_option("--resume", o.resume, "Output directory of an interrupted run");
        } else {
            sub->add_option("--checkpoint-in", o.ck_in, "Input checkpoint");
        }
        if (name == "rearrange" || name == "adapt" || name == "train-router")
            sub->add_option("--checkpoint-out", o.ck_out, "Output checkpoint");
        if (name == "train-router") sub->add_option("--front", o.front, "Front-0 CSV from the search");
        if (name == "search") sub->add_option("--out-dir", o.out_dir, "Directory for the search CSVs");
        if (name == "eval") {
            sub->add_option("--budgets", o.budgets, "Comma-separated normalized MACs budgets");
            sub->add_option("--csv-out", o.csv_out, "Write the CSV here instead of stdout");
        }
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return static_cast<int>(ExitCode::kConfig);
    }

    try {
        if (dump) {
            std::cout << dump_config(RunConfig::desk_default());
            return 0;
        }
        if (app.get_subcommands().empty()) {
            std::cerr << app.help();
            return static_cast<int>(ExitCode::kConfig);
        }
        const std::string cmd = app.get_subcommands().front()->get_name();
        const char* env = std::getenv("ELASTIC_SUPERNET_PRECISION");
        const std::string precision = env ? env : "f64";
        if (precision == "f64") return run<double>(cmd, o);
        if (precision == "f32") return run<float>(cmd, o);
        throw ConfigError("ELASTIC_SUPERNET_PRECISION must be f32 or f64, got '" + precision + "'");
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return static_cast<int>(e.code());
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return static_cast<int>(ExitCode::kData);
    }
}
