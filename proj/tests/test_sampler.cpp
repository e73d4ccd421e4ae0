#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>
#include <sstream>

#include "cdrec/sampler.hpp"
#include "support.hpp"

using namespace cdrec;

namespace {

UserSequence seq_of(UserId u, std::vector<ItemId> items) {
    std::vector<bool> pad(items.size());
    for (std::size_t i = 0; i < items.size(); ++i) {
        pad[i] = items[i] == kPad;
    }
    return UserSequence{u, std::move(items), std::move(pad)};
}

}  // namespace

TEST_CASE("sampling plan grid") {
    SamplingPlan plan{3, 60.0, 0};
    CHECK(plan.grid() == std::vector<double>{60.0, 40.0, 20.0});
    CHECK(SamplingPlan{1, 60.0, 0}.grid() == std::vector<double>{60.0});
    const auto g = SamplingPlan{30, 60.0, 0}.grid();
    CHECK(g.front() == 60.0);
    CHECK(std::is_sorted(g.rbegin(), g.rend()));
    CHECK_THROWS(SamplingPlan{0, 60.0, 0}.validate());
}

TEST_CASE("denoiser calls equal the step count") {
    const auto cfg = testing::small_config(2, 10, 8, 1, 6);
    const auto params = testing::random_params(cfg, 1);
    const auto seq = seq_of(1, {kPad, kPad, 1, 2, 3, 4});
    PopularityTable pop{std::vector<double>{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0}};
    const auto sched = NoiseSchedule::with_horizon(60.0);
    for (int n : {1, 3, 10}) {
        Rng rng(2);
        const auto r = sample(seq, params, pop, SamplingPlan{n, 60.0, 0}, sched, rng);
        CHECK(r.denoiser_calls == n);
        CHECK(r.state.items.size() == 6);
        CHECK(r.state.items[0] == kPad);
        CHECK(r.state.items[1] == kPad);
        for (std::size_t i = 2; i < 6; ++i) {
            CHECK(is_item(r.state.items[i]));
        }
        Rng again(2);
        CHECK(sample(seq, params, pop, SamplingPlan{n, 60.0, 0}, sched, again).state.items == r.state.items);
    }
}

TEST_CASE("top k ordering, exclusions and ties") {
    RowVector s(4);
    s << 0.9, 0.1, 0.5, 0.3;
    auto r = top_k(0, s, 2, {});
    CHECK(r.items == std::vector<ItemId>{0, 2});
    CHECK(r.scores == std::vector<double>{0.9, 0.5});
    const std::vector<ItemId> excl{0};
    r = top_k(0, s, 2, excl);
    CHECK(r.items == std::vector<ItemId>{2, 3});
    RowVector tied = RowVector::Constant(5, 0.2);
    CHECK(top_k(0, tied, 3, {}).items == std::vector<ItemId>{0, 1, 2});
    CHECK(top_k(0, s, 10, excl).items.size() == 3);
}

TEST_CASE("recommend with one generated item uses its row") {
    const auto cfg = testing::small_config(2, 6, 4, 1, 3);
    auto params = testing::random_params(cfg, 3);
    const std::vector<ItemId> generated{kMask, 4, kPad};
    const auto r = recommend(0, generated, params, 6, {});
    CHECK(r.items.front() == 4);
    CHECK(r.scores.front() == doctest::Approx(1.0));
    CHECK(std::is_sorted(r.scores.rbegin(), r.scores.rend()));
    std::set<ItemId> distinct(r.items.begin(), r.items.end());
    CHECK(distinct.size() == r.items.size());
    const std::vector<ItemId> excl{4};
    CHECK(recommend(0, generated, params, 6, excl).items.size() == 5);
}

TEST_CASE("empty generated set falls back to the user embedding") {
    const auto cfg = testing::small_config(2, 6, 4, 1, 3);
    auto params = testing::random_params(cfg, 4);
    params.item_table().row(2) = params.user_table().row(1) * 3.0;
    int warnings = 0;
    auto previous = log::set_warning_sink([&](const std::string&) { ++warnings; });
    const auto r = recommend(1, std::vector<ItemId>{kMask, kPad}, params, 1, {});
    log::set_warning_sink(previous);
    CHECK(warnings == 1);
    CHECK(r.items == std::vector<ItemId>{2});
}

TEST_CASE("dot scoring ranks by inner product") {
    const auto cfg = testing::small_config(1, 3, 2, 1, 2);
    auto params = DenoiserParams::shaped(cfg);
    params.item_table() << 1.0, 0.0, 3.0, 0.1, 0.0, 1.0;
    const auto r = recommend(0, std::vector<ItemId>{0, 0}, params, 3, {}, ScoreFunction::Dot);
    CHECK(r.items == std::vector<ItemId>{1, 0, 2});
    const auto c = recommend(0, std::vector<ItemId>{0, 0}, params, 3, {}, ScoreFunction::Cosine);
    CHECK(c.items == std::vector<ItemId>{0, 1, 2});
}

TEST_CASE("trace ends fully masked and never unmasks") {
    const auto seq = seq_of(0, {kPad, 0, 1, 2, 3});
    PopularityTable pop{{1.0, 0.6, 0.3, 0.1}};
    Rng rng(5);
    const auto sched = NoiseSchedule::with_horizon(60.0);
    const auto rows = trace_forward(seq, pop, sched, 13, rng);
    REQUIRE(rows.size() == 13 * 4);
    for (std::size_t i = rows.size() - 4; i < rows.size(); ++i) {
        CHECK(rows[i].masked);
        CHECK(rows[i].t == 60.0);
    }
    for (std::size_t i = 4; i < rows.size(); ++i) {
        if (rows[i - 4].masked) {
            CHECK(rows[i].masked);
        }
    }
    CHECK_FALSE(rows.front().masked);
    std::ostringstream csv;
    write_trace_csv(csv, rows);
    CHECK(csv.str().rfind("t,position,item_id,I,beta_bar,masked\n", 0) == 0);
}

TEST_CASE("single trajectories do not follow popularity strictly") {
    // Four slots ordered by popularity; over many runs some trajectory masks a
    // more popular slot first.
    const auto seq = seq_of(0, {0, 1, 2, 3});
    PopularityTable pop{{1.0, 0.7, 0.4, 0.1}};
    const auto sched = NoiseSchedule::with_horizon(60.0);
    Rng rng(6);
    bool out_of_order = false;
    for (int run = 0; run < 50 && !out_of_order; ++run) {
        const auto rows = trace_forward(seq, pop, sched, 61, rng);
        std::vector<double> first(4, 61.0);
        for (const auto& r : rows) {
            if (r.masked && first[r.position] > r.t) {
                first[r.position] = r.t;
            }
        }
        out_of_order = first[0] < first[3];
    }
    CHECK(out_of_order);
}
