#include "cdrec/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <fmt/format.h>
#include <fmt/ranges.h>

namespace cdrec {

namespace {

constexpr double kProbFloor = 1e-12;

double cosine(const RowVector& a, const RowVector& b) {
    const double na = a.norm();
    const double nb = b.norm();
    if (na == 0.0 || nb == 0.0) {
        return 0.0;
    }
    return a.dot(b) / (na * nb);
}

std::vector<ItemId> sample_negatives(std::span<const ItemId> interacted_sorted, int n_items, int count, Rng& rng) {
    std::vector<ItemId> out;
    if (static_cast<int>(interacted_sorted.size()) >= n_items) {
        return out;
    }
    out.reserve(static_cast<std::size_t>(count));
    while (static_cast<int>(out.size()) < count) {
        const auto v = static_cast<ItemId>(rng.below(static_cast<std::uint64_t>(n_items)));
        if (!std::binary_search(interacted_sorted.begin(), interacted_sorted.end(), v)) {
            out.push_back(v);
        }
    }
    return out;
}

}  // namespace

std::string to_string(PairMethod method) { return method == PairMethod::OneStep ? "one_step" : "pseudo_euler"; }

PairMethod pair_method_from_string(const std::string& name) {
    if (name == "one_step") {
        return PairMethod::OneStep;
    }
    if (name == "pseudo_euler") {
        return PairMethod::PseudoEuler;
    }
    throw std::invalid_argument("unknown pair method '" + name + "' (expected one_step or pseudo_euler)");
}

void TrainConfig::validate() const {
    if (!(lambda1 >= 0.0 && lambda1 <= 1.0)) {
        throw std::invalid_argument("lambda1 must lie in [0, 1]");
    }
    if (!(lambda2 >= 0.0)) {
        throw std::invalid_argument("lambda2 must be >= 0");
    }
    if (!(mu_ema >= 0.0 && mu_ema <= 1.0)) {
        throw std::invalid_argument("mu_ema must lie in [0, 1]");
    }
    if (!(tau_cl > 0.0)) {
        throw std::invalid_argument("tau_cl must be > 0");
    }
    if (neg_count < 1) {
        throw std::invalid_argument("neg_count must be >= 1");
    }
    if (!(dt > 0.0)) {
        throw std::invalid_argument("dt must be > 0");
    }
    if (!(learning_rate > 0.0) || batch_size < 1 || epochs < 0 || patience < 1 || eval_every < 1) {
        throw std::invalid_argument("invalid optimizer settings");
    }
}

double consistency_loss(const PositionDistribution& out_t, const PositionDistribution& out_prev, double gamma) {
    double total = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < out_t.active.size(); ++i) {
        if (!out_t.active[i]) {
            continue;
        }
        const auto r = static_cast<Eigen::Index>(i);
        double kl = 0.0;
        for (Eigen::Index j = 0; j < out_t.probs.cols(); ++j) {
            const double q = out_prev.probs(r, j);
            if (q > 0.0) {
                kl += q * (std::log(std::max(q, kProbFloor)) - std::log(std::max(out_t.probs(r, j), kProbFloor)));
            }
        }
        total += kl;
        ++n;
    }
    return n == 0 ? 0.0 : gamma * total / static_cast<double>(n);
}

double diffusion_loss(const PositionDistribution& out_t, std::span<const ItemId> x0) {
    double total = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < x0.size(); ++i) {
        if (!out_t.active[i] || !is_item(x0[i])) {
            continue;
        }
        total -= std::log(std::max(out_t.probs(static_cast<Eigen::Index>(i), x0[i]), kProbFloor));
        ++n;
    }
    return n == 0 ? 0.0 : total / static_cast<double>(n);
}

double contrastive_loss(std::span<const ItemId> generated, UserId user, const Matrix& user_table,
                        const Matrix& item_table, std::span<const ItemId> negatives, double tau) {
    RowVector e = RowVector::Zero(item_table.cols());
    std::size_t n = 0;
    for (ItemId v : generated) {
        if (is_item(v)) {
            e += item_table.row(v);
            ++n;
        }
    }
    if (n == 0) {
        log::warn("contrastive_loss: empty generated set, skipping");
        return 0.0;
    }
    e /= static_cast<double>(n);
    std::vector<double> logits;
    logits.push_back(cosine(e, user_table.row(user)) / tau);
    for (ItemId v : negatives) {
        logits.push_back(cosine(e, item_table.row(v)) / tau);
    }
    const double mx = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (double z : logits) {
        sum += std::exp(z - mx);
    }
    return -(logits.front() - mx - std::log(sum));
}

LossBreakdown joint_loss(double con, double diff, double cl, const TrainConfig& cfg) {
    return LossBreakdown{con, diff, cl, cfg.lambda1 * con + (1.0 - cfg.lambda1) * diff + cfg.lambda2 * cl};
}

void ema_update(DenoiserParams& target, const DenoiserParams& online, double mu) {
    if (!target.same_shape(online)) {
        throw std::invalid_argument("ema_update: shape mismatch");
    }
    for (std::size_t i = 0; i < target.tensor_count(); ++i) {
        target.tensor(i) = mu * target.tensor(i) + (1.0 - mu) * online.tensor(i);
    }
}

Adam::Adam(const DenoiserParams& shape, double learning_rate, double beta1, double beta2, double eps)
    : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps), m_(shape.zeros_like()), v_(shape.zeros_like()) {}

void Adam::step(DenoiserParams& params, const DenoiserParams& grads) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.tensor_count(); ++i) {
        auto& m = m_.tensor(i);
        auto& v = v_.tensor(i);
        const auto& g = grads.tensor(i);
        m = beta1_ * m + (1.0 - beta1_) * g;
        v = beta2_ * v + (1.0 - beta2_) * g.cwiseProduct(g);
        params.tensor(i).array() -= lr_ * (m.array() / c1) / ((v.array() / c2).sqrt() + eps_);
    }
}

TrainingExample prepare_example(const UserSequence& seq, std::span<const double> deviations,
                                std::span<const ItemId> interacted_sorted, const NoiseSchedule& sched,
                                const TrainConfig& cfg, const DenoiserParams& ema, Rng& rng) {
    TrainingExample ex;
    ex.user = seq.user;
    ex.x0 = seq.items;
    ex.active.resize(seq.items.size());
    for (std::size_t i = 0; i < seq.items.size(); ++i) {
        ex.active[i] = !seq.pad_mask[i];
    }
    const double t_n = sched.epsilon + (sched.horizon - sched.epsilon) * (1.0 - rng.uniform());
    ex.noisy = forward_sample(seq, t_n, deviations, sched, rng);
    const double t_prev = t_n - cfg.dt;
    const auto n_items = ema.config().n_items;

    if (t_prev <= sched.epsilon) {
        // Nothing has been absorbed before eps: the pair is the clean sequence.
        ex.previous = DiffusionState{seq.items, sched.epsilon};
        ex.target = Matrix::Zero(static_cast<Eigen::Index>(seq.items.size()), n_items);
        for (std::size_t i = 0; i < seq.items.size(); ++i) {
            if (ex.active[i]) {
                ex.target(static_cast<Eigen::Index>(i), seq.items[i]) = 1.0;
            }
        }
    } else {
        if (cfg.pair_method == PairMethod::OneStep) {
            std::vector<double> probs(seq.items.size(), 1.0);
            for (std::size_t i = 0; i < probs.size(); ++i) {
                if (ex.active[i]) {
                    probs[i] = mask_probability(t_n, deviations[i], sched);
                }
            }
            ex.previous = pair_one_step_recovery(ex.noisy, seq.items, probs).state;
            ex.previous.t = t_prev;
        } else {
            ex.previous = pair_pseudo_euler(ex.noisy, seq.items, t_n, cfg.dt, sched, deviations, rng);
        }
        ex.target = consistency_apply(ema, ex.previous.items, t_prev, seq.user).distribution.probs;
    }
    ex.negatives = sample_negatives(interacted_sorted, n_items, cfg.neg_count, rng);
    return ex;
}

ObjectiveResult batch_objective(ag::Graph& graph, const DenoiserParams& params, DenoiserParams* grads,
                                std::span<const TrainingExample> batch, const TrainConfig& cfg) {
    if (batch.empty()) {
        throw std::invalid_argument("batch_objective: empty batch");
    }
    DenoiserGraph model(graph, params, grads);
    std::vector<ag::Var> con_terms;
    std::vector<ag::Var> diff_terms;
    std::vector<ag::Var> cl_terms;
    double cl_value = 0.0;

    for (const auto& ex : batch) {
        const auto logits = model.logits(ex.noisy.items, ex.user, ex.noisy.t);
        const auto n_active = static_cast<double>(std::count(ex.active.begin(), ex.active.end(), true));
        std::vector<double> weights(ex.active.size(), 0.0);
        std::vector<int> targets(ex.active.size(), 0);
        std::vector<ItemId> generated;
        const Matrix& z = graph.value(logits);
        for (std::size_t i = 0; i < ex.active.size(); ++i) {
            if (!ex.active[i]) {
                continue;
            }
            weights[i] = 1.0 / n_active;
            targets[i] = ex.x0[i];
            Eigen::Index best = 0;
            z.row(static_cast<Eigen::Index>(i)).maxCoeff(&best);
            generated.push_back(static_cast<ItemId>(best));
        }
        con_terms.push_back(graph.scale(graph.kl_rows(logits, ex.target, weights), cfg.gamma));
        diff_terms.push_back(graph.cross_entropy_rows(logits, targets, weights));

        if (generated.empty()) {
            log::warn("batch_objective: empty generated set, contrastive term skipped");
            continue;
        }
        if (cfg.lambda2 == 0.0) {
            cl_value += contrastive_loss(generated, ex.user, params.user_table(), params.item_table(), ex.negatives,
                                         cfg.tau_cl);
            continue;
        }
        std::vector<int> gen_rows(generated.begin(), generated.end());
        auto e_u = graph.mean_rows(model.gather(DenoiserParams::kItemTable, gen_rows));
        const int u = ex.user;
        std::vector<ag::Var> candidates{model.gather(DenoiserParams::kUserTable, std::span<const int>(&u, 1))};
        if (!ex.negatives.empty()) {
            std::vector<int> neg_rows(ex.negatives.begin(), ex.negatives.end());
            candidates.push_back(model.gather(DenoiserParams::kItemTable, neg_rows));
        }
        auto sims = graph.matmul_nt(graph.normalize_rows(e_u), graph.normalize_rows(graph.concat_rows(candidates)));
        const int positive = 0;
        const double one = 1.0;
        cl_terms.push_back(graph.cross_entropy_rows(graph.scale(sims, 1.0 / cfg.tau_cl),
                                                    std::span<const int>(&positive, 1),
                                                    std::span<const double>(&one, 1)));
    }

    const double inv_b = 1.0 / static_cast<double>(batch.size());
    auto mean_of = [&](const std::vector<ag::Var>& terms) {
        return graph.scale(graph.mean_rows(graph.concat_rows(terms)), static_cast<double>(terms.size()) * inv_b);
    };
    auto con = mean_of(con_terms);
    auto diff = mean_of(diff_terms);
    auto total = graph.add(graph.scale(con, cfg.lambda1), graph.scale(diff, 1.0 - cfg.lambda1));
    double cl = cl_value * inv_b;
    if (!cl_terms.empty()) {
        auto cl_var = mean_of(cl_terms);
        cl += graph.scalar(cl_var);
        total = graph.add(total, graph.scale(cl_var, cfg.lambda2));
    }
    return ObjectiveResult{joint_loss(graph.scalar(con), graph.scalar(diff), cl, cfg), total};
}

TrainingData TrainingData::from_train(const InteractionLog& train, std::size_t seq_len) {
    TrainingData data;
    data.sequences = build_sequences(train, seq_len);
    data.popularity = cdrec::popularity(train);
    data.interacted.assign(static_cast<std::size_t>(train.n_users), {});
    for (const auto& e : train.events) {
        data.interacted[static_cast<std::size_t>(e.user)].push_back(e.item);
    }
    for (auto& s : data.interacted) {
        std::sort(s.begin(), s.end());
        s.erase(std::unique(s.begin(), s.end()), s.end());
    }
    return data;
}

namespace {

std::string describe_batch(std::span<const TrainingExample> batch, const LossBreakdown& loss) {
    std::ostringstream out;
    out << fmt::format("non-finite loss (con={}, diff={}, cl={}, total={}); batch:", loss.con, loss.diff, loss.cl,
                       loss.total);
    for (const auto& ex : batch) {
        out << fmt::format("\n  user={} t={} noisy=[{}] previous_t={}", ex.user, ex.noisy.t,
                           fmt::join(ex.noisy.items, ","), ex.previous.t);
    }
    return out.str();
}

}  // namespace

TrainResult train_model(const TrainingData& data, DenoiserParams init, const NoiseSchedule& sched, const TrainConfig& cfg,
                  const TrainHooks& hooks) {
    cfg.validate();
    sched.validate();
    if (data.sequences.empty()) {
        throw EmptyDatasetError("no training sequences");
    }
    std::vector<std::vector<double>> deviations;
    deviations.reserve(data.sequences.size());
    for (const auto& seq : data.sequences) {
        deviations.push_back(popularity_deviation(seq, data.popularity));
    }

    TrainResult result{std::move(init), DenoiserParams(), {}, -1};
    DenoiserParams& params = result.params;
    result.ema = params;
    DenoiserParams grads = params.zeros_like();
    Adam optimizer(params, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    const Rng master(cfg.seed);

    std::optional<DenoiserParams> best;
    double best_recall = -1.0;
    int rounds_without_gain = 0;
    std::vector<std::size_t> order(data.sequences.size());

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto started = std::chrono::steady_clock::now();
        Rng epoch_rng = master.split(static_cast<std::uint64_t>(epoch));
        std::iota(order.begin(), order.end(), std::size_t{0});
        epoch_rng.shuffle(order);

        LossBreakdown epoch_loss;
        std::size_t batch_index = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            Rng batch_rng = epoch_rng.split(++batch_index);
            std::vector<TrainingExample> batch;
            batch.reserve(end - start);
            for (std::size_t k = start; k < end; ++k) {
                const auto& seq = data.sequences[order[k]];
                batch.push_back(prepare_example(seq, deviations[order[k]],
                                                data.interacted[static_cast<std::size_t>(seq.user)], sched, cfg,
                                                result.ema, batch_rng));
            }
            ag::Graph graph(true);
            grads.set_zero();
            const auto objective = batch_objective(graph, params, &grads, batch, cfg);
            const auto& loss = objective.loss;
            if (!std::isfinite(loss.total) || !std::isfinite(graph.scalar(objective.total))) {
                throw TrainingError(describe_batch(batch, loss));
            }
            graph.backward(objective.total);
            optimizer.step(params, grads);
            ema_update(result.ema, params, cfg.mu_ema);

            const double w = static_cast<double>(end - start) / static_cast<double>(order.size());
            epoch_loss.con += w * loss.con;
            epoch_loss.diff += w * loss.diff;
            epoch_loss.cl += w * loss.cl;
        }
        epoch_loss = joint_loss(epoch_loss.con, epoch_loss.diff, epoch_loss.cl, cfg);

        EpochLog entry{epoch, epoch_loss, std::nullopt, 0.0};
        bool is_best = false;
        bool stop = false;
        if (hooks.validate && (epoch + 1) % cfg.eval_every == 0) {
            entry.validation = hooks.validate(params);
            if (entry.validation->recall10 > best_recall) {
                best_recall = entry.validation->recall10;
                best = params;
                result.best_epoch = epoch;
                rounds_without_gain = 0;
                is_best = true;
            } else if (++rounds_without_gain >= cfg.patience) {
                stop = true;
            }
        }
        entry.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
        result.history.push_back(entry);
        if (hooks.on_epoch) {
            hooks.on_epoch(entry, params, is_best);
        }
        if (stop) {
            break;
        }
    }
    if (best) {
        result.params = std::move(*best);
    } else if (!result.history.empty()) {
        result.best_epoch = result.history.back().epoch;
    }
    return result;
}

}  // namespace cdrec
