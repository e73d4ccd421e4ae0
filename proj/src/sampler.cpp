#include "cdrec/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>
#include <unordered_map>

#include <fmt/format.h>

namespace cdrec {

std::vector<double> SamplingPlan::grid() const {
    validate();
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(steps));
    for (int n = steps; n >= 1; --n) {
        out.push_back(n == steps ? horizon : horizon * n / steps);
    }
    return out;
}

void SamplingPlan::validate() const {
    if (steps < 1) {
        throw std::invalid_argument("sampling needs at least one step");
    }
    if (!(horizon > 0.0)) {
        throw std::invalid_argument("sampling horizon must be positive");
    }
}

SampleResult sample(const UserSequence& seq, const DenoiserParams& params, const PopularityTable& pop,
                    const SamplingPlan& plan, const NoiseSchedule& sched, Rng& rng) {
    const auto grid = plan.grid();
    std::unordered_map<ItemId, double> history;
    if (seq.real_count() > 0) {
        const auto dev = popularity_deviation(seq, pop);
        for (std::size_t i = 0; i < seq.items.size(); ++i) {
            if (is_item(seq.items[i])) {
                history[seq.items[i]] = dev[i];
            }
        }
    }

    std::vector<ItemId> start(seq.items.size());
    for (std::size_t i = 0; i < start.size(); ++i) {
        start[i] = seq.pad_mask[i] ? kPad : kMask;
    }
    SampleResult result;
    result.state = consistency_apply(params, start, grid.front(), seq.user).decoded;
    result.denoiser_calls = 1;

    std::vector<double> deviations(seq.items.size(), 0.0);
    for (std::size_t n = 1; n < grid.size(); ++n) {
        const auto& x = result.state.items;
        for (std::size_t i = 0; i < x.size(); ++i) {
            const auto it = is_item(x[i]) ? history.find(x[i]) : history.end();
            deviations[i] = it == history.end() ? 0.0 : it->second;
        }
        const auto noisy = forward_sample(x, grid[n], deviations, sched, rng);
        result.state = consistency_apply(params, noisy.items, grid[n], seq.user).decoded;
        ++result.denoiser_calls;
    }
    return result;
}

Recommendation top_k(UserId user, const RowVector& scores, int k, std::span<const ItemId> exclusions) {
    std::vector<ItemId> candidates;
    candidates.reserve(static_cast<std::size_t>(scores.size()));
    for (ItemId v = 0; v < static_cast<ItemId>(scores.size()); ++v) {
        if (!std::binary_search(exclusions.begin(), exclusions.end(), v)) {
            candidates.push_back(v);
        }
    }
    const auto take = std::min<std::size_t>(static_cast<std::size_t>(std::max(k, 0)), candidates.size());
    auto better = [&scores](ItemId a, ItemId b) { return scores(a) > scores(b) || (scores(a) == scores(b) && a < b); };
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(take), candidates.end(),
                      better);
    Recommendation rec;
    rec.user = user;
    rec.items.assign(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(take));
    for (ItemId v : rec.items) {
        rec.scores.push_back(scores(v));
    }
    return rec;
}

Recommendation recommend(UserId user, std::span<const ItemId> generated, const DenoiserParams& params, int k,
                         std::span<const ItemId> exclusions, ScoreFunction score) {
    const Matrix& q = params.item_table();
    RowVector e = RowVector::Zero(q.cols());
    std::size_t n = 0;
    for (ItemId v : generated) {
        if (is_item(v)) {
            e += q.row(v);
            ++n;
        }
    }
    if (n == 0) {
        log::warn(fmt::format("user {}: no generated items, scoring with the user embedding", user));
        e = params.user_table().row(user);
    } else {
        e /= static_cast<double>(n);
    }
    RowVector scores = e * q.transpose();
    if (score == ScoreFunction::Cosine) {
        const double en = e.norm();
        for (Eigen::Index v = 0; v < q.rows(); ++v) {
            const double denom = en * q.row(v).norm();
            scores(v) = denom > 0.0 ? scores(v) / denom : 0.0;
        }
    }
    return top_k(user, scores, k, exclusions);
}

std::vector<TraceRow> trace_forward(const UserSequence& seq, const PopularityTable& pop, const NoiseSchedule& sched,
                                    int steps, Rng& rng) {
    if (steps < 2) {
        throw std::invalid_argument("trace needs at least two time points");
    }
    const auto dev = popularity_deviation(seq, pop);
    std::vector<double> u(seq.items.size());
    for (std::size_t i = 0; i < u.size(); ++i) {
        u[i] = seq.pad_mask[i] ? 1.0 : rng.uniform();
    }
    std::vector<double> running(seq.items.size(), 0.0);
    std::vector<TraceRow> rows;
    for (int k = 0; k < steps; ++k) {
        const double t = k == steps - 1 ? sched.horizon : sched.horizon * k / (steps - 1);
        for (std::size_t i = 0; i < seq.items.size(); ++i) {
            if (seq.pad_mask[i]) {
                continue;
            }
            running[i] = std::max(running[i], mask_probability(t, dev[i], sched));
            rows.push_back(TraceRow{t, i, seq.items[i], dev[i], cumulative_beta(t, dev[i], sched), u[i] < running[i]});
        }
    }
    return rows;
}

void write_trace_csv(std::ostream& out, std::span<const TraceRow> rows) {
    out << "t,position,item_id,I,beta_bar,masked\n";
    for (const auto& r : rows) {
        out << fmt::format("{},{},{},{},{},{}\n", r.t, r.position, r.item, r.deviation, r.beta_bar, r.masked ? 1 : 0);
    }
}

void write_trace_csv(const std::filesystem::path& path, std::span<const TraceRow> rows) {
    std::ofstream out(path);
    if (!out) {
        throw Error(fmt::format("cannot write {}", path.string()));
    }
    write_trace_csv(out, rows);
}

}  // namespace cdrec
