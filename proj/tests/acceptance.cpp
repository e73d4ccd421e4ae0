// Acceptance checks: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "cdrec/harness.hpp"
#include "cdrec/metrics.hpp"
#include "cdrec/synthetic.hpp"
#include "gradcheck.hpp"
#include "support.hpp"

using namespace cdrec;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

std::vector<ItemId> random_sequence(Rng& rng, int length, int n_items, int max_pad) {
    std::vector<ItemId> x(static_cast<std::size_t>(length), kPad);
    const int pads = static_cast<int>(rng.below(static_cast<std::uint64_t>(max_pad + 1)));
    for (int i = pads; i < length; ++i) {
        x[static_cast<std::size_t>(i)] = static_cast<ItemId>(rng.below(static_cast<std::uint64_t>(n_items)));
    }
    return x;
}

std::vector<double> random_deviations(Rng& rng, const std::vector<ItemId>& x) {
    std::vector<double> d(x.size(), 0.0);
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (is_item(x[i])) {
            d[i] = rng.uniform(-1.0, 1.0);
        }
    }
    return d;
}

Outcome kernel_oracle() {
    const auto start = Clock::now();
    Rng rng(1);
    auto sched = NoiseSchedule::with_horizon(60.0);
    sched.mode = KernelMode::MatrixExponential;
    double worst = 0.0;
    for (int k = 3; k <= 6; ++k) {
        const Eigen::MatrixXd rate = testing::absorbing_rate(k);
        for (int draw = 0; draw < 100; ++draw) {
            const double t = rng.uniform(0.0, sched.horizon);
            const double dev = rng.uniform(-1.0, 1.0);
            const double beta = cumulative_beta(t, dev, sched);
            const Eigen::MatrixXd kernel = testing::expm_pade(beta * rate);
            for (int j = 0; j + 1 < k; ++j) {
                const auto row = transition_kernel_row(static_cast<ItemId>(j), t, dev, sched);
                worst = std::max(worst, std::abs(row.keep - kernel(j, j)));
                worst = std::max(worst, std::abs(row.to_mask - kernel(k - 1, j)));
                worst = std::max(worst, std::abs(mask_probability(t, dev, sched) - kernel(k - 1, j)));
                for (int i = 0; i + 1 < k; ++i) {
                    if (i != j) {
                        worst = std::max(worst, std::abs(kernel(i, j)));
                    }
                }
            }
            const auto absorbed = transition_kernel_row(kMask, t, dev, sched);
            worst = std::max(worst, std::abs(absorbed.to_mask - kernel(k - 1, k - 1)));
        }
    }
    const double elapsed = seconds_since(start);
    return {worst < 1e-8 && elapsed < 1.0, fmt::format("max abs error {:.3g}, {:.3f} s", worst, elapsed)};
}

Outcome schedule_ordering() {
    const auto start = Clock::now();
    Rng rng(2);
    const auto sched = NoiseSchedule::with_horizon(60.0);
    int violations = 0;
    for (int draw = 0; draw < 10000; ++draw) {
        const double t = rng.uniform(0.0, sched.horizon);
        double hi = rng.uniform(-1.0, 1.0);
        double lo = rng.uniform(-1.0, 1.0);
        if (hi == lo) {
            continue;
        }
        if (hi < lo) {
            std::swap(hi, lo);
        }
        violations += cumulative_beta(t, hi, sched) <= cumulative_beta(t, lo, sched) ? 0 : 1;
    }
    const double elapsed = seconds_since(start);
    return {violations == 0 && elapsed < 1.0, fmt::format("{} violations in 10000 triples, {:.3f} s", violations, elapsed)};
}

Outcome terminal_convergence() {
    const auto start = Clock::now();
    Rng rng(3);
    const auto sched = NoiseSchedule::with_horizon(60.0);
    std::size_t slots = 0;
    std::size_t masked = 0;
    bool pads_kept = true;
    for (int draw = 0; draw < 10000; ++draw) {
        const auto x = random_sequence(rng, 20, 100, 10);
        const auto dev = random_deviations(rng, x);
        const auto out = forward_sample(x, sched.horizon, dev, sched, rng);
        for (std::size_t i = 0; i < x.size(); ++i) {
            if (is_item(x[i])) {
                ++slots;
                masked += out.items[i] == kMask ? 1 : 0;
            } else {
                pads_kept = pads_kept && out.items[i] == kPad;
            }
        }
    }
    const double elapsed = seconds_since(start);
    return {masked == slots && pads_kept && elapsed < 5.0,
            fmt::format("{}/{} non-pad slots masked at t = T, {:.3f} s", masked, slots, elapsed)};
}

Outcome kernel_fidelity() {
    Rng rng(4);
    const auto sched = NoiseSchedule::with_horizon(60.0);
    const auto x = random_sequence(rng, 20, 100, 0);
    const auto dev = random_deviations(rng, x);
    double worst_pooled = 0.0;
    double worst_slot = 0.0;
    for (int k = 1; k <= 10; ++k) {
        const double t = sched.horizon * k / 11.0;
        std::vector<int> counts(x.size(), 0);
        const int draws = 10000;
        for (int draw = 0; draw < draws; ++draw) {
            const auto out = forward_sample(x, t, dev, sched, rng);
            for (std::size_t i = 0; i < x.size(); ++i) {
                counts[i] += out.items[i] == kMask ? 1 : 0;
            }
        }
        double empirical = 0.0;
        double predicted = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double p = mask_probability(t, dev[i], sched);
            const double f = static_cast<double>(counts[i]) / draws;
            empirical += f;
            predicted += p;
            worst_slot = std::max(worst_slot, std::abs(f - p));
        }
        const double n = static_cast<double>(x.size());
        worst_pooled = std::max(worst_pooled, std::abs(empirical / n - predicted / n));
    }
    return {worst_pooled <= 0.01,
            fmt::format("max |frequency - probability| {:.4f} pooled over slots, {:.4f} worst single slot",
                        worst_pooled, worst_slot)};
}

Outcome consistency_boundary() {
    Rng rng(5);
    std::size_t mismatches = 0;
    for (double eps : {0.0, 0.5}) {
        auto cfg = testing::small_config(4, 30, 8, 1, 20);
        cfg.epsilon = eps;
        const auto params = testing::random_params(cfg, 5);
        for (int draw = 0; draw < 500; ++draw) {
            auto x = random_sequence(rng, 20, 30, 8);
            for (auto& v : x) {
                if (is_item(v) && rng.uniform() < 0.3) {
                    v = kMask;
                }
            }
            const auto user = static_cast<UserId>(rng.below(4));
            const auto out = consistency_apply(params, x, eps, user);
            mismatches += out.decoded.items == x ? 0 : 1;
            for (std::size_t i = 0; i < x.size(); ++i) {
                if (is_item(x[i]) && out.distribution.probs(static_cast<Eigen::Index>(i), x[i]) != 1.0) {
                    ++mismatches;
                }
            }
        }
    }
    return {mismatches == 0, fmt::format("{} mismatches over 1000 random states", mismatches)};
}

Outcome gradient_correctness() {
    const auto start = Clock::now();
    const auto cfg = testing::small_config(3, 12, 8, 1, 4);
    TrainConfig tcfg;
    tcfg.lambda2 = 0.5;
    const auto check = testing::check_joint_gradient(cfg, tcfg, 6);
    const double elapsed = seconds_since(start);
    return {check.fraction() >= 0.99 && elapsed < 120.0,
            fmt::format("{}/{} entries within 1e-4 ({:.2f}%), worst {:.2g}, {:.1f} s", check.within, check.entries,
                        100.0 * check.fraction(), check.worst, elapsed)};
}

Outcome loss_identities() {
    Rng rng(7);
    TrainConfig tcfg;
    double recon = 0.0;
    for (int draw = 0; draw < 1000; ++draw) {
        const double con = rng.uniform(0.0, 10.0);
        const double diff = rng.uniform(0.0, 10.0);
        const double cl = rng.uniform(0.0, 10.0);
        tcfg.lambda1 = rng.uniform();
        tcfg.lambda2 = rng.uniform();
        const auto l = joint_loss(con, diff, cl, tcfg);
        recon = std::max(recon, std::abs(l.total - (tcfg.lambda1 * con + (1.0 - tcfg.lambda1) * diff + tcfg.lambda2 * cl)));
    }

    // Breakdown reported by the training objective against its own graph value.
    const auto cfg = testing::small_config(5, 20, 8, 1, 6);
    const auto params = testing::random_params(cfg, 8);
    const auto sched = NoiseSchedule::with_horizon(60.0);
    tcfg = TrainConfig{};
    std::vector<TrainingExample> batch;
    for (UserId u = 0; u < 5; ++u) {
        UserSequence seq{u, random_sequence(rng, 6, 20, 2), {}};
        for (ItemId v : seq.items) {
            seq.pad_mask.push_back(v == kPad);
        }
        batch.push_back(prepare_example(seq, random_deviations(rng, seq.items), {}, sched, tcfg, params, rng));
    }
    ag::Graph graph(false);
    const auto res = batch_objective(graph, params, nullptr, batch, tcfg);
    recon = std::max(recon, std::abs(res.loss.total - joint_loss(res.loss.con, res.loss.diff, res.loss.cl, tcfg).total));
    recon = std::max(recon, std::abs(res.loss.total - graph.scalar(res.total)));

    double kl = 0.0;
    double ce = 0.0;
    for (int m : {2, 7, 100, 1682}) {
        Matrix logits = testing::random_table(10, m, rng, 3.0);
        const PositionDistribution d{ag::softmax_rows(logits), std::vector<bool>(10, true)};
        kl = std::max(kl, std::abs(consistency_loss(d, d)));
        const PositionDistribution uniform{Matrix::Constant(10, m, 1.0 / m), std::vector<bool>(10, true)};
        const auto x0 = random_sequence(rng, 10, m, 0);
        ce = std::max(ce, std::abs(diffusion_loss(uniform, x0) - std::log(static_cast<double>(m))));
    }
    return {recon <= 1e-9 && kl <= 1e-9 && ce <= 1e-9,
            fmt::format("reconstruction error {:.2g}, KL(p||p) {:.2g}, |CE(uniform) - ln m| {:.2g}", recon, kl, ce)};
}

Outcome pair_invariant() {
    Rng rng(8);
    const auto sched = NoiseSchedule::with_horizon(60.0);
    const double dt = 10.0;
    int violations = 0;
    for (int draw = 0; draw < 10000; ++draw) {
        const auto x0 = random_sequence(rng, 20, 50, 6);
        const auto dev = random_deviations(rng, x0);
        const double t = rng.uniform(dt, sched.horizon);
        const auto x_t = forward_sample(x0, t, dev, sched, rng);
        std::vector<double> probs(x0.size());
        for (std::size_t i = 0; i < x0.size(); ++i) {
            probs[i] = mask_probability(t, dev[i], sched);
        }
        const auto one = pair_one_step_recovery(x_t, x0, probs).state;
        const auto euler = pair_pseudo_euler(x_t, x0, t, dt, sched, dev, rng);
        for (const auto* out : {&one, &euler}) {
            for (std::size_t i = 0; i < x0.size(); ++i) {
                const bool newly_masked = x_t.items[i] != kMask && out->items[i] == kMask;
                const bool altered = out->items[i] != kMask && out->items[i] != x0[i];
                violations += newly_masked || altered ? 1 : 0;
            }
        }
    }
    return {violations == 0, fmt::format("{} violations over 10000 applications of each method", violations)};
}

// Shared model trained on the two-block synthetic corpus.
struct OverfitModel {
    BlockCorpusSpec spec;
    SplitBundle split;
    RunConfig cfg;
    DenoiserParams params;
    std::optional<EvalData> data;
    int epochs_run = 0;
    double train_seconds = 0.0;
};

OverfitModel& overfit_model() {
    static std::optional<OverfitModel> model;
    if (!model) {
        model.emplace();
        auto& m = *model;
        m.split = split_chronological(make_block_corpus(m.spec));
        m.cfg.mf.dim = 32;
        m.cfg.seq_len = 20;
        m.cfg.train.batch_size = 10;
        m.cfg.train.learning_rate = 3e-3;
        m.cfg.train.epochs = 200;
        // No validation rounds: the final parameters are the overfit model.
        m.cfg.train.eval_every = m.cfg.train.epochs + 1;
        m.cfg.train.seed = 9;
        const auto start = Clock::now();
        const auto emb = obtain_embeddings(m.cfg, m.split.train);
        const auto run = run_training(m.cfg, m.split, emb);
        m.train_seconds = seconds_since(start);
        m.params = run.result.params;
        m.epochs_run = static_cast<int>(run.result.history.size());
        m.data = EvalData::build(m.split, static_cast<std::size_t>(m.cfg.seq_len));
    }
    return *model;
}

double recall10(const OverfitModel& m, int steps) {
    EvalOptions opts = m.cfg.eval;
    opts.ks = {10};
    return evaluate(m.params, *m.data, m.cfg.sampling_plan(steps), m.cfg.noise_schedule(), opts).recall.at(10);
}

Outcome overfit_oracle() {
    auto& m = overfit_model();
    const auto sched = m.cfg.noise_schedule();
    Rng rng(10);
    std::size_t masked = 0;
    std::size_t recovered = 0;
    for (int round = 0; round < 20; ++round) {
        for (const auto& seq : m.data->sequences) {
            const double t = sched.epsilon + (sched.horizon - sched.epsilon) * (1.0 - rng.uniform());
            const auto dev = popularity_deviation(seq, m.data->popularity);
            const auto noisy = forward_sample(seq, t, dev, sched, rng);
            const auto out = consistency_apply(m.params, noisy.items, t, seq.user);
            for (std::size_t i = 0; i < seq.items.size(); ++i) {
                if (noisy.items[i] == kMask) {
                    ++masked;
                    recovered += out.decoded.items[i] == seq.items[i] ? 1 : 0;
                }
            }
        }
    }
    const double accuracy = static_cast<double>(recovered) / static_cast<double>(masked);
    EvalOptions opts = m.cfg.eval;
    opts.ks = {10};
    const double cdrec = recall10(m, 1);
    const double popular = evaluate_ranker(*m.data, most_popular_ranker(*m.data), opts, Target::Test, "most_popular")
                               .recall.at(10);
    const bool ratio_ok = cdrec >= 3.0 * popular && cdrec > 0.0;
    return {accuracy >= 0.8 && ratio_ok && m.epochs_run <= 200 && m.train_seconds < 300.0,
            fmt::format("recovery accuracy {:.3f} over {} masked slots; one-step Recall@10 {:.4f} vs MostPopular "
                        "{:.4f}; {} epochs in {:.1f} s",
                        accuracy, masked, cdrec, popular, m.epochs_run, m.train_seconds)};
}

Outcome real_data_smoke(const fs::path& data_root) {
    const auto start = Clock::now();
    const auto input = data_root / "ml-100k" / "u.data";
    if (!fs::exists(input)) {
        return {false, fmt::format("{} not found; run tools/fetch_movielens.py", input.string())};
    }
    const auto split = split_chronological(load_interactions(input));
    RunConfig cfg;
    cfg.train.batch_size = 128;
    cfg.train.epochs = 40;
    cfg.train.patience = 8;
    cfg.train.seed = 42;
    const auto emb = obtain_embeddings(cfg, split.train);
    const auto run = run_training(cfg, split, emb);
    const auto data = EvalData::build(split, static_cast<std::size_t>(cfg.seq_len));
    const auto sched = cfg.noise_schedule();
    EvalOptions opts = cfg.eval;
    opts.ks = {10};

    // Step count chosen on the validation split, then reported once on test.
    int best_steps = 1;
    double best_val = -1.0;
    std::string val_detail;
    for (int steps : {1, 3, 10, 30}) {
        const double r = evaluate(run.result.params, data, cfg.sampling_plan(steps), sched, opts, Target::Validation)
                             .recall.at(10);
        val_detail += fmt::format(" N={}:{:.4f}", steps, r);
        if (r > best_val) {
            best_val = r;
            best_steps = steps;
        }
    }
    const double cdrec = evaluate(run.result.params, data, cfg.sampling_plan(best_steps), sched, opts).recall.at(10);
    const double popular = evaluate_ranker(data, most_popular_ranker(data), opts, Target::Test, "most_popular")
                               .recall.at(10);
    const double elapsed = seconds_since(start);
    return {cdrec >= 1.2 * popular && elapsed < 1800.0,
            fmt::format("test Recall@10 {:.4f} (N={}) vs MostPopular {:.4f}, ratio {:.3f}; validation{}; {} epochs, "
                        "{:.0f} s",
                        cdrec, best_steps, popular, cdrec / popular, val_detail, run.result.history.size(), elapsed)};
}

Outcome sampling_steps() {
    auto& m = overfit_model();
    const auto sched = m.cfg.noise_schedule();
    const std::vector<int> grid{1, 3, 10, 30};
    bool calls_ok = true;
    Rng rng(11);
    for (int n : grid) {
        for (const auto& seq : m.data->sequences) {
            calls_ok = calls_ok && sample(seq, m.params, m.data->popularity, m.cfg.sampling_plan(n), sched, rng)
                                           .denoiser_calls == n;
        }
    }
    std::map<int, double> best;
    for (int rep = 0; rep < 5; ++rep) {
        for (const auto& row : time_sampling(m.params, *m.data, sched, grid, 12, 50)) {
            best[row.steps] = best.contains(row.steps) ? std::min(best[row.steps], row.seconds) : row.seconds;
        }
    }
    bool linear = true;
    std::string timing;
    for (int n : grid) {
        const double ratio = best[n] / (n * best[1]);
        linear = linear && ratio >= 1.0 / 1.5 && ratio <= 1.5;
        timing += fmt::format(" N={}:{:.4f}s", n, best[n]);
    }
    const double one = recall10(m, 1);
    const double ten = recall10(m, 10);
    return {calls_ok && linear && ten >= one - 0.02,
            fmt::format("calls == N: {}; times{}; Recall@10 N=10 {:.4f} vs N=1 {:.4f}", calls_ok ? "yes" : "no",
                        timing, ten, one)};
}

Outcome case_study() {
    BlockCorpusSpec spec;
    const auto split = split_chronological(make_block_corpus(spec));
    const auto sequences = build_sequences(split.train, 20);
    const auto pop = popularity(split.train);
    const auto sched = NoiseSchedule::with_horizon(60.0);
    Rng rng(13);
    std::vector<double> deviation;
    std::vector<double> mean_time;
    int trajectories = 0;
    for (const auto& seq : sequences) {
        std::map<std::size_t, std::pair<double, double>> per_slot;  // position -> (deviation, summed time)
        const int repeats = 1000 / static_cast<int>(sequences.size());
        for (int r = 0; r < repeats; ++r) {
            ++trajectories;
            std::set<std::size_t> done;
            for (const auto& row : trace_forward(seq, pop, sched, 61, rng)) {
                if (row.masked && !done.contains(row.position)) {
                    done.insert(row.position);
                    auto& slot = per_slot[row.position];
                    slot.first = row.deviation;
                    slot.second += row.t;
                }
            }
        }
        for (const auto& [_, slot] : per_slot) {
            deviation.push_back(slot.first);
            mean_time.push_back(slot.second / repeats);
        }
    }
    const double rho = testing::spearman(deviation, mean_time);
    return {rho > 0.3 && trajectories >= 1000,
            fmt::format("Spearman(I, mean masking time) {:.3f} over {} slots, {} trajectories", rho, deviation.size(),
                        trajectories)};
}

int run_cli(const std::string& args, const fs::path& log) {
    const std::string cmd = fmt::format("\"{}\" {} >> \"{}\" 2>&1", CDREC_CLI_PATH, args, log.string());
    return std::system(cmd.c_str());
}

std::string slurp(const fs::path& path) {
    std::ifstream in(path);
    std::stringstream s;
    s << in.rdbuf();
    return s.str();
}

Outcome determinism() {
    const auto dir = testing::scratch_dir("acceptance_determinism");
    BlockCorpusSpec spec;
    spec.users = 20;
    write_events(dir / "events.tsv", make_block_corpus(spec));
    const auto log = dir / "cli.log";
    std::vector<std::string> metrics;
    for (const char* name : {"a", "b"}) {
        const auto run = dir / name;
        const std::string common = fmt::format(
            "--data.split_dir \"{}\" --out.dir \"{}\" --embed.dim 16 --embed.epochs 5 --train.epochs 3 "
            "--train.batch_size 8 --denoiser.layers 1 --sample.steps 3 --eval.runs 2",
            (run / "split").string(), run.string());
        int rc = run_cli(fmt::format("prepare {} --data.input \"{}\"", common, (dir / "events.tsv").string()), log);
        rc = rc != 0 ? rc : run_cli("train " + common, log);
        rc = rc != 0 ? rc : run_cli(fmt::format("eval {} --output \"{}\"", common, (run / "metrics.json").string()), log);
        if (rc != 0) {
            return {false, fmt::format("CLI exited with status {}, see {}", rc, log.string())};
        }
        metrics.push_back(slurp(run / "metrics.json"));
    }
    const bool same = !metrics[0].empty() && metrics[0] == metrics[1];
    return {same, fmt::format("metrics JSON {} across two train + eval runs ({} bytes)",
                              same ? "identical" : "differs", metrics[0].size())};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance checks"};
    std::string data_root = std::getenv("CDREC_DATA_ROOT") != nullptr ? std::getenv("CDREC_DATA_ROOT") : "data";
    std::vector<int> only;
    std::string report_path;
    app.add_option("--data-root", data_root, "directory holding ml-100k/u.data");
    app.add_option("--report", report_path, "also write the result lines to this file");
    app.add_option("--only", only, "run only these criteria");
    CLI11_PARSE(app, argc, argv);

    log::set_warning_sink([](const std::string&) {});

    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"kernel oracle equivalence", kernel_oracle},
        {"schedule ordering", schedule_ordering},
        {"terminal convergence", terminal_convergence},
        {"Monte-Carlo kernel fidelity", kernel_fidelity},
        {"consistency boundary", consistency_boundary},
        {"gradient correctness", gradient_correctness},
        {"loss identities", loss_identities},
        {"pair-construction invariant", pair_invariant},
        {"overfit oracle", overfit_oracle},
        {"real-data smoke", [&data_root] { return real_data_smoke(data_root); }},
        {"sampling-step behavior", sampling_steps},
        {"case-study property", case_study},
        {"determinism", determinism},
    };
    std::ofstream report;
    if (!report_path.empty()) {
        report.open(report_path);
    }
    int failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i) + 1;
        if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) {
            continue;
        }
        Outcome out;
        try {
            out = criteria[i].second();
        } catch (const std::exception& e) {
            out = {false, fmt::format("exception: {}", e.what())};
        }
        failures += out.pass ? 0 : 1;
        const auto line = fmt::format("{} {:2d} {}: {}", out.pass ? "PASS" : "FAIL", id, criteria[i].first, out.detail);
        std::cout << line << std::endl;
        if (report) {
            report << line << std::endl;
        }
    }
    return failures == 0 ? 0 : 1;
}
