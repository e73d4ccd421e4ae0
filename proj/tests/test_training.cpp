#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cdrec/synthetic.hpp"
#include "cdrec/training.hpp"
#include "gradcheck.hpp"
#include "support.hpp"

using namespace cdrec;

namespace {

PositionDistribution rows(const Matrix& probs) {
    return PositionDistribution{probs, std::vector<bool>(static_cast<std::size_t>(probs.rows()), true)};
}

Matrix uniform(int r, int m) { return Matrix::Constant(r, m, 1.0 / m); }

UserSequence sequence_of(UserId u, std::vector<ItemId> items) {
    std::vector<bool> pad(items.size());
    for (std::size_t i = 0; i < items.size(); ++i) {
        pad[i] = items[i] == kPad;
    }
    return UserSequence{u, std::move(items), std::move(pad)};
}

}  // namespace

TEST_CASE("consistency loss") {
    Rng rng(1);
    const Matrix p = ag::softmax_rows(testing::random_table(3, 6, rng));
    CHECK(consistency_loss(rows(p), rows(p)) == doctest::Approx(0.0).epsilon(1e-12));
    Matrix one_hot = Matrix::Zero(1, 10);
    one_hot(0, 4) = 1.0;
    CHECK(consistency_loss(rows(uniform(1, 10)), rows(one_hot)) == doctest::Approx(std::log(10.0)));
    const Matrix q = ag::softmax_rows(testing::random_table(3, 6, rng));
    const double base = consistency_loss(rows(p), rows(q), 1.0);
    CHECK(consistency_loss(rows(p), rows(q), 2.0) == doctest::Approx(2.0 * base));
    CHECK(base >= 0.0);
    Matrix with_zero = Matrix::Zero(1, 2);
    with_zero(0, 0) = 1.0;
    Matrix target(1, 2);
    target << 0.5, 0.5;
    CHECK(std::isfinite(consistency_loss(rows(with_zero), rows(target))));
}

TEST_CASE("diffusion loss") {
    Matrix perfect = Matrix::Zero(2, 3);
    perfect(0, 1) = 1.0;
    perfect(1, 2) = 1.0;
    CHECK(diffusion_loss(rows(perfect), std::vector<ItemId>{1, 2}) == 0.0);
    const std::vector<ItemId> x0(20, 7);
    CHECK(diffusion_loss(rows(uniform(20, 100)), x0) == doctest::Approx(std::log(100.0)).epsilon(1e-12));
    auto padded = rows(uniform(2, 4));
    padded.active[0] = false;
    CHECK(diffusion_loss(padded, std::vector<ItemId>{kPad, 1}) == doctest::Approx(std::log(4.0)));
}

TEST_CASE("contrastive loss") {
    Matrix p(1, 2);
    p << 1.0, 0.0;
    Matrix q(3, 2);
    q << 1.0, 0.0, 0.0, 1.0, 0.0, -1.0;
    const std::vector<ItemId> generated{0};
    const std::vector<ItemId> negatives{1, 2};
    CHECK(contrastive_loss(generated, 0, p, q, negatives, 1.0) ==
          doctest::Approx(-std::log(std::exp(1.0) / (std::exp(1.0) + 2.0))));
    Matrix same = Matrix::Constant(3, 2, 1.0);
    CHECK(contrastive_loss(generated, 0, Matrix::Constant(1, 2, 1.0), same, negatives, 0.2) ==
          doctest::Approx(std::log(3.0)));
    CHECK(contrastive_loss(generated, 0, p, q, negatives, 1e9) == doctest::Approx(std::log(3.0)));
    int warnings = 0;
    auto previous = log::set_warning_sink([&](const std::string&) { ++warnings; });
    CHECK(contrastive_loss(std::vector<ItemId>{kMask}, 0, p, q, negatives, 1.0) == 0.0);
    log::set_warning_sink(previous);
    CHECK(warnings == 1);
}

TEST_CASE("joint loss") {
    TrainConfig cfg;
    const auto l = joint_loss(1.0, 2.0, 0.5, cfg);
    CHECK(l.total == doctest::Approx(1.605).epsilon(1e-12));
    cfg.lambda1 = 1.0;
    cfg.lambda2 = 0.0;
    CHECK(joint_loss(3.0, 2.0, 0.5, cfg).total == 3.0);
}

TEST_CASE("ema update") {
    const auto cfg = testing::small_config(2, 5, 4, 1, 3);
    auto target = DenoiserParams::shaped(cfg);
    auto online = target.zeros_like();
    for (std::size_t i = 0; i < target.tensor_count(); ++i) {
        target.tensor(i).setConstant(1.0);
    }
    auto same = target;
    ema_update(same, online, 1.0);
    CHECK(same.tensor(0)(0, 0) == 1.0);
    auto copy = target;
    ema_update(copy, online, 0.0);
    CHECK(copy.tensor(0)(0, 0) == 0.0);
    ema_update(target, online, 0.9);
    CHECK(target.tensor(0)(0, 0) == doctest::Approx(0.9));
}

TEST_CASE("adam takes a bias-corrected first step of size lr") {
    const auto cfg = testing::small_config(2, 5, 4, 1, 3);
    auto params = DenoiserParams::shaped(cfg);
    auto grads = params.zeros_like();
    grads.tensor(0)(0, 0) = 3.0;
    grads.tensor(0)(0, 1) = -0.5;
    Adam adam(params, 0.01);
    adam.step(params, grads);
    CHECK(params.tensor(0)(0, 0) == doctest::Approx(-0.01).epsilon(1e-6));
    CHECK(params.tensor(0)(0, 1) == doctest::Approx(0.01).epsilon(1e-6));
    CHECK(params.tensor(0)(1, 1) == 0.0);
    CHECK(adam.steps() == 1);
}

TEST_CASE("prepare example") {
    const auto cfg = testing::small_config(2, 10, 8, 1, 5);
    const auto ema = testing::random_params(cfg, 3);
    const auto seq = sequence_of(1, {kPad, 2, 4, 6, 8});
    const std::vector<double> dev{NAN, 0.1, -0.1, 0.2, -0.2};
    const std::vector<ItemId> seen{2, 4, 6, 8};
    const auto sched = NoiseSchedule::with_horizon(60.0);
    Rng rng(4);
    TrainConfig tcfg;
    int boundary = 0;
    for (int i = 0; i < 300; ++i) {
        tcfg.pair_method = i % 2 == 0 ? PairMethod::OneStep : PairMethod::PseudoEuler;
        const auto ex = prepare_example(seq, dev, seen, sched, tcfg, ema, rng);
        CHECK(ex.noisy.t > 0.0);
        CHECK(ex.noisy.t <= 60.0);
        CHECK(ex.previous.t == doctest::Approx(std::max(ex.noisy.t - tcfg.dt, 0.0)));
        CHECK(ex.negatives.size() == 16);
        for (ItemId v : ex.negatives) {
            CHECK_FALSE(std::binary_search(seen.begin(), seen.end(), v));
        }
        for (std::size_t k = 0; k < 5; ++k) {
            if (ex.noisy.items[k] != kMask) {
                CHECK(ex.previous.items[k] == ex.noisy.items[k]);
            }
        }
        if (ex.noisy.t <= tcfg.dt) {
            ++boundary;
            CHECK(ex.previous.items == seq.items);
            CHECK(ex.target(1, 2) == 1.0);
        } else {
            const auto expected = consistency_apply(ema, ex.previous.items, ex.previous.t, 1).distribution.probs;
            CHECK((ex.target - expected).norm() < 1e-12);
        }
    }
    CHECK(boundary > 0);
}

TEST_CASE("objective breakdown reconstructs the total") {
    const auto cfg = testing::small_config(3, 12, 8, 1, 4);
    TrainConfig tcfg;
    const auto params = testing::random_params(cfg, 5);
    const auto sched = NoiseSchedule::with_horizon(60.0);
    Rng rng(6);
    std::vector<TrainingExample> batch;
    PopularityTable pop{std::vector<double>(12, 0.5)};
    for (UserId u = 0; u < 3; ++u) {
        const auto seq = sequence_of(u, {kPad, 1 + u, 3 + u, 5 + u});
        batch.push_back(prepare_example(seq, popularity_deviation(seq, pop), {}, sched, tcfg, params, rng));
    }
    ag::Graph g(false);
    const auto res = batch_objective(g, params, nullptr, batch, tcfg);
    CHECK(std::abs(res.loss.total - g.scalar(res.total)) < 1e-9);
    CHECK(std::abs(res.loss.total - joint_loss(res.loss.con, res.loss.diff, res.loss.cl, tcfg).total) < 1e-12);
    CHECK(res.loss.con >= 0.0);
    CHECK(res.loss.diff >= 0.0);
    CHECK(res.loss.cl >= 0.0);
}

TEST_CASE("zero contrastive weight leaves gradients untouched by negatives") {
    const auto cfg = testing::small_config(2, 12, 8, 1, 4);
    TrainConfig tcfg;
    tcfg.lambda2 = 0.0;
    const auto params = testing::random_params(cfg, 7);
    const auto sched = NoiseSchedule::with_horizon(60.0);
    Rng rng(8);
    PopularityTable pop{std::vector<double>(12, 0.5)};
    std::vector<TrainingExample> batch;
    for (UserId u = 0; u < 2; ++u) {
        const auto seq = sequence_of(u, {1, 2, 3, 4});
        batch.push_back(prepare_example(seq, popularity_deviation(seq, pop), {}, sched, tcfg, params, rng));
    }
    auto grad_with = [&](std::vector<TrainingExample> b) {
        auto grads = params.zeros_like();
        ag::Graph g;
        g.backward(batch_objective(g, params, &grads, b, tcfg).total);
        return grads;
    };
    const auto a = grad_with(batch);
    auto other = batch;
    for (auto& ex : other) {
        for (auto& v : ex.negatives) {
            v = (v + 5) % 12;
        }
    }
    const auto b = grad_with(other);
    for (std::size_t i = 0; i < a.tensor_count(); ++i) {
        CHECK(a.tensor(i) == b.tensor(i));
    }
    CHECK(a.user_table().isZero() == false);
}

TEST_CASE("joint gradient matches finite differences on a small instance") {
    auto cfg = testing::small_config(2, 6, 4, 1, 3, 20.0);
    TrainConfig tcfg;
    tcfg.dt = 3.0;
    tcfg.lambda2 = 0.5;
    tcfg.neg_count = 3;
    const auto check = testing::check_joint_gradient(cfg, tcfg, 11);
    CHECK(check.fraction() >= 0.99);
}

TEST_CASE("training is deterministic and lowers the loss") {
    BlockCorpusSpec spec;
    spec.users = 12;
    const auto log = make_block_corpus(spec);
    const auto split = split_chronological(log);
    const auto data = TrainingData::from_train(split.train, 20);
    const auto cfg = testing::small_config(log.n_users, log.n_items, 16, 1, 20);
    Rng rng(9);
    const auto init = DenoiserParams::initialize(cfg, testing::random_table(log.n_users, 16, rng, 0.3),
                                                 testing::random_table(log.n_items, 16, rng, 0.3), rng);
    TrainConfig tcfg;
    tcfg.batch_size = 4;
    tcfg.epochs = 15;
    tcfg.learning_rate = 3e-3;
    const auto sched = NoiseSchedule::with_horizon(60.0);
    const auto a = train_model(data, init, sched, tcfg);
    const auto b = train_model(data, init, sched, tcfg);
    REQUIRE(a.history.size() == 15);
    for (std::size_t e = 0; e < a.history.size(); ++e) {
        CHECK(a.history[e].loss.total == b.history[e].loss.total);
    }
    CHECK(a.history.back().loss.total < a.history.front().loss.total);
    for (std::size_t i = 0; i < a.params.tensor_count(); ++i) {
        CHECK(a.params.tensor(i) == b.params.tensor(i));
    }
}

TEST_CASE("early stopping keeps the best validation parameters") {
    BlockCorpusSpec spec;
    spec.users = 6;
    const auto log = make_block_corpus(spec);
    const auto data = TrainingData::from_train(split_chronological(log).train, 20);
    const auto cfg = testing::small_config(log.n_users, log.n_items, 8, 1, 20);
    const auto init = testing::random_params(cfg, 10, 0.1);
    TrainConfig tcfg;
    tcfg.batch_size = 6;
    tcfg.epochs = 50;
    tcfg.patience = 3;
    const std::vector<double> scores{0.1, 0.3, 0.2, 0.25, 0.3, 0.1, 0.9};
    int calls = 0;
    std::vector<int> best_epochs;
    TrainHooks hooks;
    hooks.validate = [&](const DenoiserParams&) {
        return ValidationScore{scores[static_cast<std::size_t>(calls++)], 0.0};
    };
    hooks.on_epoch = [&](const EpochLog& e, const DenoiserParams&, bool best) {
        if (best) {
            best_epochs.push_back(e.epoch);
        }
    };
    const auto res = train_model(data, init, NoiseSchedule::with_horizon(60.0), tcfg, hooks);
    CHECK(res.history.size() == 5);
    CHECK(res.best_epoch == 1);
    CHECK(best_epochs == std::vector<int>{0, 1});
}

TEST_CASE("non-finite loss aborts training") {
    BlockCorpusSpec spec;
    spec.users = 4;
    const auto log = make_block_corpus(spec);
    const auto data = TrainingData::from_train(split_chronological(log).train, 20);
    const auto cfg = testing::small_config(log.n_users, log.n_items, 8, 1, 20);
    auto init = testing::random_params(cfg, 12);
    init.item_table()(0, 0) = NAN;
    TrainConfig tcfg;
    tcfg.epochs = 1;
    CHECK_THROWS_AS(train_model(data, init, NoiseSchedule::with_horizon(60.0), tcfg), TrainingError);
}

TEST_CASE("config validation and pair method names") {
    TrainConfig cfg;
    cfg.lambda1 = 1.5;
    CHECK_THROWS(cfg.validate());
    cfg = TrainConfig{};
    cfg.dt = 0.0;
    CHECK_THROWS(cfg.validate());
    CHECK(pair_method_from_string("one_step") == PairMethod::OneStep);
    CHECK_THROWS(pair_method_from_string("euler"));
}
