#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "cdrec/collab.hpp"
#include "cdrec/config.hpp"
#include "cdrec/corpus.hpp"
#include "cdrec/harness.hpp"
#include "cdrec/sampler.hpp"

namespace fs = std::filesystem;
using namespace cdrec;

namespace {

struct Overrides {
    std::string config_file;
    std::map<std::string, std::string> values;
};

void add_config_options(CLI::App* cmd, Overrides& o) {
    cmd->add_option("--config", o.config_file, "JSON file of flat configuration keys");
    for (const auto& key : RunConfig::keys()) {
        cmd->add_option("--" + key, o.values[key], "configuration key " + key);
    }
}

// Defaults, then the base document, then the data root from the environment,
// then the config file, then explicit flags.
RunConfig resolve(const CLI::App* cmd, const Overrides& o, const nlohmann::json* base = nullptr) {
    RunConfig cfg = base != nullptr ? RunConfig::from_json(*base) : RunConfig{};
    if (const char* root = std::getenv("CDREC_DATA_ROOT"); root != nullptr && *root != '\0') {
        cfg.data_root = root;
    }
    if (!o.config_file.empty()) {
        std::ifstream in(o.config_file);
        if (!in) {
            throw ConfigError("cannot open configuration file " + o.config_file);
        }
        const auto j = nlohmann::json::parse(in);
        if (!j.is_object()) {
            throw ConfigError("configuration must be a JSON object");
        }
        for (const auto& [k, v] : j.items()) {
            cfg.set_json(k, v);
        }
    }
    for (const auto& [key, value] : o.values) {
        if (cmd->count("--" + key) > 0) {
            cfg.set(key, value);
        }
    }
    return cfg;
}

std::ofstream open_out(const fs::path& path) {
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    std::ofstream out(path);
    if (!out) {
        throw Error("cannot write " + path.string());
    }
    return out;
}

void write_text(const std::string& path, const std::string& text) {
    if (path.empty() || path == "-") {
        std::cout << text;
        return;
    }
    auto out = open_out(path);
    out << text;
}

fs::path checkpoint_or_default(const std::string& given, const RunConfig& cfg) {
    return given.empty() ? fs::path(cfg.out_dir) / "final.ckpt" : fs::path(given);
}

Checkpoint load_with_config(const fs::path& path, const CLI::App* cmd, const Overrides& o, RunConfig& cfg) {
    auto ckpt = load_checkpoint(path);
    const nlohmann::json* base = ckpt.metadata.contains("config") ? &ckpt.metadata["config"] : nullptr;
    cfg = resolve(cmd, o, base);
    return ckpt;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Popularity-aware continuous-time discrete diffusion recommender"};
    app.require_subcommand(1);

    Overrides o_prepare, o_embed, o_train, o_rec, o_eval, o_sweep, o_trace;

    auto* prepare = app.add_subcommand("prepare", "ingest a rating log and write a chronological split");
    add_config_options(prepare, o_prepare);

    auto* embed = app.add_subcommand("embed", "load or train the collaborative embedding tables");
    add_config_options(embed, o_embed);
    std::string embed_output;
    embed->add_option("--output", embed_output, "embedding file to write (default <out.dir>/embeddings.txt)");

    auto* train = app.add_subcommand("train", "train the denoiser");
    add_config_options(train, o_train);

    auto* rec = app.add_subcommand("recommend", "emit top-k recommendations as JSON lines");
    add_config_options(rec, o_rec);
    std::string rec_ckpt;
    std::string rec_output;
    int rec_k = 10;
    rec->add_option("--checkpoint", rec_ckpt, "checkpoint (default <out.dir>/final.ckpt)");
    rec->add_option("--k", rec_k, "list length")->check(CLI::PositiveNumber);
    rec->add_option("--output", rec_output, "output file (default stdout)");

    auto* eval = app.add_subcommand("eval", "full-ranking evaluation with reference scorers");
    add_config_options(eval, o_eval);
    std::string eval_ckpt;
    std::string eval_output;
    std::string eval_timing;
    eval->add_option("--checkpoint", eval_ckpt, "checkpoint (default <out.dir>/final.ckpt)");
    eval->add_option("--output", eval_output, "metrics JSON (default stdout)");
    eval->add_option("--timing", eval_timing, "also write sampling time versus steps as CSV");

    auto* sweep_cmd = app.add_subcommand("sweep", "train and evaluate over a grid of configuration values");
    add_config_options(sweep_cmd, o_sweep);
    std::vector<std::string> grid_specs;
    std::string sweep_output;
    sweep_cmd->add_option("--grid", grid_specs, "key=v1,v2,... (repeatable)")->required();
    sweep_cmd->add_option("--output", sweep_output, "CSV file (default stdout)");

    auto* trace = app.add_subcommand("trace", "forward-diffusion trajectory of one user as CSV");
    add_config_options(trace, o_trace);
    int trace_user = 0;
    int trace_steps = 61;
    std::string trace_output;
    trace->add_option("--user", trace_user, "dense user id");
    trace->add_option("--steps", trace_steps, "time points in [0, T]")->check(CLI::Range(2, 100000));
    trace->add_option("--output", trace_output, "CSV file (default stdout)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*prepare) {
            const auto cfg = resolve(prepare, o_prepare);
            if (cfg.data_input.empty()) {
                throw ConfigError("data.input is required");
            }
            const auto log = load_interactions(cfg.input_path(), cfg.data_threshold);
            const auto split = split_chronological(log);
            write_split(cfg.split_dir, split);
            std::cout << nlohmann::json(nlohmann::json{{"split_dir", cfg.split_dir},
                                                       {"n_users", log.n_users},
                                                       {"n_items", log.n_items},
                                                       {"n_train", split.train.events.size()},
                                                       {"n_val", split.validation.events.size()},
                                                       {"n_test", split.test.events.size()}})
                             .dump()
                      << '\n';
        } else if (*embed) {
            const auto cfg = resolve(embed, o_embed);
            const auto split = read_split(cfg.split_dir);
            const auto bundle = obtain_embeddings(cfg, split.train);
            const fs::path out = embed_output.empty() ? fs::path(cfg.out_dir) / "embeddings.txt" : fs::path(embed_output);
            if (out.has_parent_path()) {
                fs::create_directories(out.parent_path());
            }
            save_embeddings(out, bundle);
            std::cout << out.string() << '\n';
        } else if (*train) {
            const auto cfg = resolve(train, o_train);
            const auto split = read_split(cfg.split_dir);
            const auto bundle = obtain_embeddings(cfg, split.train);
            fs::create_directories(cfg.out_dir);
            open_out(fs::path(cfg.out_dir) / "config.json") << cfg.to_json().dump(2) << '\n';
            auto log = open_out(fs::path(cfg.out_dir) / "train_log.jsonl");
            const auto run = run_training(cfg, split, bundle, &log, fs::path(cfg.out_dir));
            std::cout << nlohmann::json{{"best_epoch", run.result.best_epoch},
                                        {"epochs_run", run.result.history.size()},
                                        {"checkpoint", (fs::path(cfg.out_dir) / "final.ckpt").string()}}
                             .dump()
                      << '\n';
        } else if (*rec) {
            RunConfig cfg = resolve(rec, o_rec);
            const auto ckpt = load_with_config(checkpoint_or_default(rec_ckpt, cfg), rec, o_rec, cfg);
            const auto split = read_split(cfg.split_dir);
            const auto data = EvalData::build(split, static_cast<std::size_t>(ckpt.params.config().seq_len));
            const auto sched = cfg.noise_schedule();
            const auto plan = cfg.sampling_plan();
            const Rng base(cfg.sample_seed);
            std::ostringstream out;
            for (const auto& seq : data.sequences) {
                Rng rng = base.split(static_cast<std::uint64_t>(seq.user));
                const auto generated = sample(seq, ckpt.params, data.popularity, plan, sched, rng);
                const auto r = recommend(seq.user, generated.state.items, ckpt.params, rec_k,
                                         data.train_items[static_cast<std::size_t>(seq.user)], cfg.score);
                out << nlohmann::json{{"user", r.user}, {"items", r.items}, {"scores", r.scores}}.dump() << '\n';
            }
            write_text(rec_output, out.str());
        } else if (*eval) {
            RunConfig cfg = resolve(eval, o_eval);
            const auto ckpt = load_with_config(checkpoint_or_default(eval_ckpt, cfg), eval, o_eval, cfg);
            const auto split = read_split(cfg.split_dir);
            const auto data = EvalData::build(split, static_cast<std::size_t>(ckpt.params.config().seq_len));
            const auto sched = cfg.noise_schedule();
            const auto target = cfg.eval_split == "validation" ? Target::Validation : Target::Test;
            const auto plan = cfg.sampling_plan();
            nlohmann::json result{
                {"cdrec", evaluate(ckpt.params, data, plan, sched, cfg.eval, target).to_json()},
                {"most_popular",
                 evaluate_ranker(data, most_popular_ranker(data), cfg.eval, target, "most_popular").to_json()},
                {"random", evaluate_ranker(data, random_ranker(data.n_items), cfg.eval, target, "random").to_json()},
                {"sampling_steps", plan.steps},
                {"split", cfg.eval_split}};
            write_text(eval_output, result.dump(2) + "\n");
            if (!eval_timing.empty()) {
                const std::vector<int> steps{1, 3, 5, 10, 30, 50, 100};
                auto rows = time_sampling(ckpt.params, data, sched, steps, cfg.sample_seed);
                const std::vector<int> lengths{5, 10, 20, 40, 80};
                const auto by_length = time_sequence_length(ckpt.params.config(), lengths, 200, cfg.sample_seed);
                rows.insert(rows.end(), by_length.begin(), by_length.end());
                auto out = open_out(eval_timing);
                write_timing_csv(out, rows);
            }
        } else if (*sweep_cmd) {
            const auto cfg = resolve(sweep_cmd, o_sweep);
            SweepGrid grid;
            for (const auto& spec : grid_specs) {
                const auto eq = spec.find('=');
                if (eq == std::string::npos) {
                    throw ConfigError("grid entry must look like key=v1,v2: " + spec);
                }
                std::vector<std::string> values;
                std::stringstream in(spec.substr(eq + 1));
                std::string v;
                while (std::getline(in, v, ',')) {
                    values.push_back(v);
                }
                grid.emplace_back(spec.substr(0, eq), values);
            }
            const auto split = read_split(cfg.split_dir);
            const auto bundle = obtain_embeddings(cfg, split.train);
            const auto rows = sweep(cfg, grid, split, bundle);
            std::ostringstream out;
            write_sweep_csv(out, grid, rows, cfg.eval.ks);
            write_text(sweep_output, out.str());
        } else if (*trace) {
            const auto cfg = resolve(trace, o_trace);
            const auto split = read_split(cfg.split_dir);
            const auto data = EvalData::build(split, static_cast<std::size_t>(cfg.seq_len));
            const auto* seq = data.sequence(trace_user);
            if (seq == nullptr) {
                throw Error(fmt::format("user {} has no training sequence", trace_user));
            }
            Rng rng = Rng(cfg.sample_seed).split(static_cast<std::uint64_t>(trace_user));
            const auto rows = trace_forward(*seq, data.popularity, cfg.noise_schedule(), trace_steps, rng);
            if (trace_output.empty() || trace_output == "-") {
                write_trace_csv(std::cout, rows);
            } else {
                write_trace_csv(fs::path(trace_output), rows);
            }
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
