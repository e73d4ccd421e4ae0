#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cdrec/corpus.hpp"
#include "cdrec/denoiser.hpp"
#include "cdrec/rng.hpp"
#include "cdrec/schedule.hpp"

namespace cdrec {

enum class PairMethod { OneStep, PseudoEuler };

std::string to_string(PairMethod method);
PairMethod pair_method_from_string(const std::string& name);

struct TrainConfig {
    double lambda1 = 0.4;
    double lambda2 = 0.01;
    double mu_ema = 0.99;
    double tau_cl = 0.2;
    int neg_count = 16;
    PairMethod pair_method = PairMethod::PseudoEuler;
    double dt = 10.0;
    double gamma = 1.0;  // constant weight of the consistency term
    double learning_rate = 1e-3;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    int batch_size = 1024;
    int epochs = 100;
    int patience = 10;       // validation rounds without improvement before stopping
    int eval_every = 1;      // epochs between validation rounds
    std::uint64_t seed = 42;

    void validate() const;
};

struct LossBreakdown {
    double con = 0.0;
    double diff = 0.0;
    double cl = 0.0;
    double total = 0.0;
};

// Mean over active slots of KL(out_prev || out_t), times gamma. Probabilities
// are floored at 1e-12 before the logarithm.
double consistency_loss(const PositionDistribution& out_t, const PositionDistribution& out_prev, double gamma = 1.0);

// Mean over active slots of -log p_i(x0_i).
double diffusion_loss(const PositionDistribution& out_t, std::span<const ItemId> x0);

// InfoNCE with e_u = mean of Q over the generated items, p_u as the positive and
// the negatives' Q rows, similarity exp(cos / tau). An empty generated set
// contributes 0 and emits a warning.
double contrastive_loss(std::span<const ItemId> generated, UserId user, const Matrix& user_table,
                        const Matrix& item_table, std::span<const ItemId> negatives, double tau);

LossBreakdown joint_loss(double con, double diff, double cl, const TrainConfig& cfg);

// target <- mu * target + (1 - mu) * online, elementwise.
void ema_update(DenoiserParams& target, const DenoiserParams& online, double mu);

class Adam {
public:
    Adam(const DenoiserParams& shape, double learning_rate, double beta1 = 0.9, double beta2 = 0.999,
         double eps = 1e-8);

    void step(DenoiserParams& params, const DenoiserParams& grads);
    long steps() const { return t_; }

private:
    double lr_;
    double beta1_;
    double beta2_;
    double eps_;
    long t_ = 0;
    DenoiserParams m_;
    DenoiserParams v_;
};

// Everything the objective needs for one training sequence, fixed before the
// gradient pass so the loss is a deterministic function of the parameters.
struct TrainingExample {
    UserId user = 0;
    std::vector<ItemId> x0;
    std::vector<bool> active;
    DiffusionState noisy;     // x_{t_n}
    DiffusionState previous;  // the paired, less noisy state at t_{n-1}
    Matrix target;            // EMA prediction at t_{n-1}, gradient-blocked
    std::vector<ItemId> negatives;
};

// Samples t_n in (eps, T], corrupts x0, builds the pair with the configured
// method and evaluates the EMA target. When t_n - dt falls at or below eps
// the pair is the clean sequence and the target is its one-hot encoding.
TrainingExample prepare_example(const UserSequence& seq, std::span<const double> deviations,
                                std::span<const ItemId> interacted_sorted, const NoiseSchedule& sched,
                                const TrainConfig& cfg, const DenoiserParams& ema, Rng& rng);

struct ObjectiveResult {
    LossBreakdown loss;
    ag::Var total;
};

// Joint objective averaged over the batch; gradients land in grads when the
// graph tracks them.
ObjectiveResult batch_objective(ag::Graph& graph, const DenoiserParams& params, DenoiserParams* grads,
                                std::span<const TrainingExample> batch, const TrainConfig& cfg);

struct ValidationScore {
    double recall10 = 0.0;
    double ndcg10 = 0.0;
};

struct EpochLog {
    int epoch = 0;
    LossBreakdown loss;
    std::optional<ValidationScore> validation;
    double wall_seconds = 0.0;
};

struct TrainingData {
    std::vector<UserSequence> sequences;
    PopularityTable popularity;
    // Sorted distinct train items per user, indexed by user id.
    std::vector<std::vector<ItemId>> interacted;

    static TrainingData from_train(const InteractionLog& train, std::size_t seq_len);
};

struct TrainHooks {
    std::function<ValidationScore(const DenoiserParams&)> validate;
    std::function<void(const EpochLog&, const DenoiserParams&, bool is_best)> on_epoch;
};

struct TrainResult {
    DenoiserParams params;  // best-validation parameters, or the last ones without validation
    DenoiserParams ema;
    std::vector<EpochLog> history;
    int best_epoch = -1;
};

class TrainingError : public Error {
public:
    using Error::Error;
};

// Joint optimization with Adam and an EMA target network. Deterministic for a
// fixed seed. Throws TrainingError on a non-finite loss.
TrainResult train_model(const TrainingData& data, DenoiserParams init, const NoiseSchedule& sched, const TrainConfig& cfg,
                  const TrainHooks& hooks = {});

}  // namespace cdrec
