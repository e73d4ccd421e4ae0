#include "cdrec/harness.hpp"

#include <algorithm>
#include <chrono>
#include <ostream>

#include <fmt/format.h>

#include "cdrec/metrics.hpp"

namespace cdrec {

namespace {

std::vector<std::vector<ItemId>> items_per_user(const InteractionLog& log, int n_users) {
    std::vector<std::vector<ItemId>> out(static_cast<std::size_t>(n_users));
    for (const auto& e : log.events) {
        out[static_cast<std::size_t>(e.user)].push_back(e.item);
    }
    for (auto& s : out) {
        std::sort(s.begin(), s.end());
        s.erase(std::unique(s.begin(), s.end()), s.end());
    }
    return out;
}

double seconds_since(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

}  // namespace

nlohmann::json MetricsReport::to_json() const {
    nlohmann::json recall_j = nlohmann::json::object();
    nlohmann::json ndcg_j = nlohmann::json::object();
    for (const auto& [k, v] : recall) {
        recall_j[std::to_string(k)] = v;
    }
    for (const auto& [k, v] : ndcg) {
        ndcg_j[std::to_string(k)] = v;
    }
    return nlohmann::json{{"model", model},
                          {"recall", recall_j},
                          {"ndcg", ndcg_j},
                          {"n_users_evaluated", n_users_evaluated},
                          {"seeds", seeds},
                          {"mean_over_runs", mean_over_runs}};
}

EvalData EvalData::build(const SplitBundle& split, std::size_t seq_len) {
    EvalData d;
    const int n_users = split.train.n_users;
    d.n_items = split.train.n_items;
    d.sequences = build_sequences(split.train, seq_len);
    d.sequence_of.assign(static_cast<std::size_t>(n_users), -1);
    for (std::size_t i = 0; i < d.sequences.size(); ++i) {
        d.sequence_of[static_cast<std::size_t>(d.sequences[i].user)] = static_cast<int>(i);
    }
    d.popularity = cdrec::popularity(split.train);
    d.train_items = items_per_user(split.train, n_users);
    d.validation_items = items_per_user(split.validation, n_users);
    d.test_items = items_per_user(split.test, n_users);
    return d;
}

const UserSequence* EvalData::sequence(UserId u) const {
    if (u < 0 || static_cast<std::size_t>(u) >= sequence_of.size() || sequence_of[static_cast<std::size_t>(u)] < 0) {
        return nullptr;
    }
    return &sequences[static_cast<std::size_t>(sequence_of[static_cast<std::size_t>(u)])];
}

Ranker cdrec_ranker(const DenoiserParams& params, const EvalData& data, const SamplingPlan& plan,
                    const NoiseSchedule& sched, ScoreFunction score) {
    return [&params, &data, plan, sched, score](UserId u, int k, std::span<const ItemId> exclusions, Rng& rng) {
        const auto* seq = data.sequence(u);
        if (seq == nullptr) {
            return std::vector<ItemId>{};
        }
        const auto generated = sample(*seq, params, data.popularity, plan, sched, rng);
        return recommend(u, generated.state.items, params, k, exclusions, score).items;
    };
}

Ranker most_popular_ranker(const EvalData& data) {
    RowVector scores(data.n_items);
    for (ItemId v = 0; v < data.n_items; ++v) {
        scores(v) = data.popularity[v];
    }
    return [scores](UserId u, int k, std::span<const ItemId> exclusions, Rng&) {
        return top_k(u, scores, k, exclusions).items;
    };
}

Ranker random_ranker(int n_items) {
    return [n_items](UserId u, int k, std::span<const ItemId> exclusions, Rng& rng) {
        RowVector scores(n_items);
        for (ItemId v = 0; v < n_items; ++v) {
            scores(v) = rng.uniform();
        }
        return top_k(u, scores, k, exclusions).items;
    };
}

MetricsReport evaluate_ranker(const EvalData& data, const Ranker& ranker, const EvalOptions& options, Target target,
                              const std::string& model) {
    if (options.ks.empty() || options.runs < 1) {
        throw std::invalid_argument("evaluation needs at least one K and one run");
    }
    const int max_k = *std::max_element(options.ks.begin(), options.ks.end());
    const auto& relevant_sets = target == Target::Test ? data.test_items : data.validation_items;

    MetricsReport report;
    report.model = model;
    report.mean_over_runs = options.runs > 1;
    for (int k : options.ks) {
        report.recall[k] = 0.0;
        report.ndcg[k] = 0.0;
    }
    std::vector<ItemId> exclusions;
    for (int run = 0; run < options.runs; ++run) {
        const std::uint64_t seed = options.seed + static_cast<std::uint64_t>(run);
        report.seeds.push_back(seed);
        const Rng run_rng(seed);
        std::map<int, double> recall_sum;
        std::map<int, double> ndcg_sum;
        int users = 0;
        for (std::size_t u = 0; u < relevant_sets.size(); ++u) {
            const auto& relevant = relevant_sets[u];
            const auto user = static_cast<UserId>(u);
            if (relevant.empty() || data.sequence(user) == nullptr) {
                continue;
            }
            exclusions = data.train_items[u];
            if (target == Target::Test && options.exclude_validation) {
                exclusions.insert(exclusions.end(), data.validation_items[u].begin(), data.validation_items[u].end());
                std::sort(exclusions.begin(), exclusions.end());
            }
            Rng rng = run_rng.split(u);
            const auto ranked = ranker(user, max_k, exclusions, rng);
            for (int k : options.ks) {
                recall_sum[k] += recall_at_k(ranked, relevant, k);
                ndcg_sum[k] += ndcg_at_k(ranked, relevant, k);
            }
            ++users;
        }
        report.n_users_evaluated = users;
        for (int k : options.ks) {
            report.recall[k] += users > 0 ? recall_sum[k] / users : 0.0;
            report.ndcg[k] += users > 0 ? ndcg_sum[k] / users : 0.0;
        }
    }
    for (int k : options.ks) {
        report.recall[k] /= options.runs;
        report.ndcg[k] /= options.runs;
    }
    return report;
}

MetricsReport evaluate(const DenoiserParams& params, const EvalData& data, const SamplingPlan& plan,
                       const NoiseSchedule& sched, const EvalOptions& options, Target target) {
    return evaluate_ranker(data, cdrec_ranker(params, data, plan, sched), options, target, "cdrec");
}

EmbeddingBundle obtain_embeddings(const RunConfig& config, const InteractionLog& train) {
    if (!config.embed_path.empty()) {
        return load_embeddings(config.embed_path, train.n_users, train.n_items);
    }
    Rng rng(config.embed_seed);
    return train_fallback_mf(train, config.mf, rng);
}

nlohmann::json epoch_log_json(const EpochLog& entry) {
    nlohmann::json j{{"epoch", entry.epoch},
                     {"con", entry.loss.con},
                     {"diff", entry.loss.diff},
                     {"cl", entry.loss.cl},
                     {"total", entry.loss.total},
                     {"val_recall10", nullptr},
                     {"val_ndcg10", nullptr},
                     {"wall_seconds", entry.wall_seconds}};
    if (entry.validation) {
        j["val_recall10"] = entry.validation->recall10;
        j["val_ndcg10"] = entry.validation->ndcg10;
    }
    return j;
}

TrainingRun run_training(const RunConfig& config, const SplitBundle& split, const EmbeddingBundle& embeddings,
                         std::ostream* log, const std::optional<std::filesystem::path>& checkpoint_dir) {
    const auto& train = split.train;
    if (embeddings.users.rows() != train.n_users || embeddings.items.rows() != train.n_items) {
        throw DimensionError(fmt::format("embeddings are {}x{} users / {}x{} items, corpus has {} users and {} items",
                                         embeddings.users.rows(), embeddings.users.cols(), embeddings.items.rows(),
                                         embeddings.items.cols(), train.n_users, train.n_items));
    }
    const auto dcfg = config.denoiser_config(train.n_users, train.n_items, embeddings.dim());
    const auto sched = config.noise_schedule();
    Rng init_rng = Rng(config.train.seed).split(0xC0FFEE);
    auto init = DenoiserParams::initialize(dcfg, embeddings.users, embeddings.items, init_rng);

    const auto data = TrainingData::from_train(train, static_cast<std::size_t>(config.seq_len));
    const auto eval_data = EvalData::build(split, static_cast<std::size_t>(config.seq_len));
    const auto val_plan = config.sampling_plan(config.val_steps);

    TrainHooks hooks;
    if (!split.validation.events.empty()) {
        hooks.validate = [&](const DenoiserParams& params) {
            EvalOptions opts;
            opts.ks = {10};
            opts.seed = config.sample_seed;
            const auto r = evaluate_ranker(eval_data, cdrec_ranker(params, eval_data, val_plan, sched, config.score),
                                           opts, Target::Validation);
            return ValidationScore{r.recall.at(10), r.ndcg.at(10)};
        };
    }
    const nlohmann::json meta_config = config.to_json();
    if (checkpoint_dir) {
        std::filesystem::create_directories(*checkpoint_dir);
    }
    hooks.on_epoch = [&](const EpochLog& entry, const DenoiserParams& params, bool is_best) {
        if (log != nullptr) {
            *log << epoch_log_json(entry).dump() << '\n';
            log->flush();
        }
        if (!checkpoint_dir) {
            return;
        }
        const nlohmann::json meta{{"config", meta_config}, {"epoch", entry.epoch}};
        if (is_best) {
            save_checkpoint(*checkpoint_dir / "best.ckpt", params, meta);
        }
        if (config.checkpoint_every > 0 && (entry.epoch + 1) % config.checkpoint_every == 0) {
            save_checkpoint(*checkpoint_dir / fmt::format("epoch_{:04d}.ckpt", entry.epoch + 1), params, meta);
        }
    };

    TrainingRun run{train_model(data, std::move(init), sched, config.train, hooks), dcfg};
    if (checkpoint_dir) {
        save_checkpoint(*checkpoint_dir / "final.ckpt", run.result.params,
                        nlohmann::json{{"config", meta_config}, {"epoch", run.result.best_epoch}});
    }
    return run;
}

std::vector<SweepRow> sweep(const RunConfig& base, const SweepGrid& grid, const SplitBundle& split,
                            const EmbeddingBundle& embeddings) {
    if (grid.empty()) {
        throw std::invalid_argument("sweep grid is empty");
    }
    for (const auto& [key, values] : grid) {
        if (values.empty()) {
            throw std::invalid_argument(fmt::format("sweep key {} has no values", key));
        }
        (void)base.get(key);  // rejects unknown keys up front
    }
    std::map<std::string, DenoiserParams> trained;
    const auto eval_data = EvalData::build(split, static_cast<std::size_t>(base.seq_len));
    std::vector<SweepRow> rows;
    std::vector<std::size_t> index(grid.size(), 0);
    while (true) {
        SweepRow row;
        RunConfig cfg = base;
        try {
            for (std::size_t g = 0; g < grid.size(); ++g) {
                row.point.emplace_back(grid[g].first, grid[g].second[index[g]]);
                cfg.set(grid[g].first, grid[g].second[index[g]]);
            }
            auto train_key = cfg.to_json();
            for (auto it = train_key.begin(); it != train_key.end();) {
                it = it.key().starts_with("sample.") || it.key().starts_with("eval.") ? train_key.erase(it) : ++it;
            }
            const auto key = train_key.dump();
            auto found = trained.find(key);
            if (found == trained.end()) {
                const auto run = run_training(cfg, split, embeddings);
                found = trained.emplace(key, run.result.params).first;
            }
            const auto target = cfg.eval_split == "validation" ? Target::Validation : Target::Test;
            row.metrics = evaluate(found->second, eval_data, cfg.sampling_plan(), cfg.noise_schedule(), cfg.eval,
                                   target);
        } catch (const std::exception& e) {
            row.error = e.what();
            log::warn(fmt::format("sweep point failed: {}", e.what()));
        }
        rows.push_back(std::move(row));

        std::size_t g = grid.size();
        while (g > 0) {
            --g;
            if (++index[g] < grid[g].second.size()) {
                break;
            }
            index[g] = 0;
            if (g == 0) {
                return rows;
            }
        }
    }
}

void write_sweep_csv(std::ostream& out, const SweepGrid& grid, std::span<const SweepRow> rows,
                     std::span<const int> ks) {
    for (const auto& [key, _] : grid) {
        out << key << ',';
    }
    for (int k : ks) {
        out << fmt::format("recall@{},ndcg@{},", k, k);
    }
    out << "n_users,error\n";
    for (const auto& row : rows) {
        for (const auto& [_, value] : row.point) {
            out << value << ',';
        }
        for (int k : ks) {
            if (row.metrics && row.metrics->recall.contains(k)) {
                out << fmt::format("{},{},", row.metrics->recall.at(k), row.metrics->ndcg.at(k));
            } else {
                out << ",,";
            }
        }
        std::string error = row.error;
        std::replace(error.begin(), error.end(), ',', ';');
        std::replace(error.begin(), error.end(), '\n', ' ');
        out << (row.metrics ? std::to_string(row.metrics->n_users_evaluated) : "") << ',' << error << '\n';
    }
}

std::vector<TimingRow> time_sampling(const DenoiserParams& params, const EvalData& data, const NoiseSchedule& sched,
                                     std::span<const int> steps, std::uint64_t seed, int max_users) {
    std::vector<TimingRow> rows;
    const auto n = max_users < 0 ? data.sequences.size()
                                 : std::min(data.sequences.size(), static_cast<std::size_t>(max_users));
    for (int s : steps) {
        SamplingPlan plan{s, sched.horizon, seed};
        TimingRow row{"sample", s, static_cast<int>(params.config().seq_len), static_cast<int>(n), 0, 0.0};
        const Rng base(seed);
        const auto start = std::chrono::steady_clock::now();
        for (std::size_t i = 0; i < n; ++i) {
            Rng rng = base.split(i);
            row.denoiser_calls += sample(data.sequences[i], params, data.popularity, plan, sched, rng).denoiser_calls;
        }
        row.seconds = seconds_since(start);
        rows.push_back(row);
    }
    return rows;
}

std::vector<TimingRow> time_sequence_length(const DenoiserConfig& base, std::span<const int> lengths, int users,
                                            std::uint64_t seed) {
    std::vector<TimingRow> rows;
    for (int l : lengths) {
        DenoiserConfig cfg = base;
        cfg.seq_len = l;
        Rng rng(seed);
        Matrix p(cfg.n_users, cfg.dim);
        Matrix q(cfg.n_items, cfg.dim);
        for (Matrix* m : {&p, &q}) {
            for (Eigen::Index i = 0; i < m->size(); ++i) {
                m->data()[i] = rng.normal();
            }
        }
        const auto params = DenoiserParams::initialize(cfg, p, q, rng);
        std::vector<ItemId> items(static_cast<std::size_t>(l));
        TimingRow row{"denoise", 1, l, users, 0, 0.0};
        const auto start = std::chrono::steady_clock::now();
        for (int u = 0; u < users; ++u) {
            for (auto& v : items) {
                v = rng.uniform() < 0.5 ? kMask : static_cast<ItemId>(rng.below(static_cast<std::uint64_t>(cfg.n_items)));
            }
            (void)consistency_apply(params, items, cfg.horizon / 2, u % cfg.n_users);
            ++row.denoiser_calls;
        }
        row.seconds = seconds_since(start);
        rows.push_back(row);
    }
    return rows;
}

void write_timing_csv(std::ostream& out, std::span<const TimingRow> rows) {
    out << "phase,steps,seq_len,users,denoiser_calls,seconds\n";
    for (const auto& r : rows) {
        out << fmt::format("{},{},{},{},{},{}\n", r.phase, r.steps, r.seq_len, r.users, r.denoiser_calls, r.seconds);
    }
}

}  // namespace cdrec
