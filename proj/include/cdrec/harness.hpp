#pragma once

#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "cdrec/collab.hpp"
#include "cdrec/config.hpp"
#include "cdrec/corpus.hpp"
#include "cdrec/denoiser.hpp"
#include "cdrec/sampler.hpp"
#include "cdrec/training.hpp"

namespace cdrec {

struct MetricsReport {
    std::string model;
    std::map<int, double> recall;
    std::map<int, double> ndcg;
    int n_users_evaluated = 0;
    std::vector<std::uint64_t> seeds;
    bool mean_over_runs = false;

    nlohmann::json to_json() const;
};

// Per-user views of a split shared by every scorer.
struct EvalData {
    std::vector<UserSequence> sequences;
    std::vector<int> sequence_of;  // user -> index into sequences, -1 when absent
    PopularityTable popularity;
    std::vector<std::vector<ItemId>> train_items;  // sorted, distinct
    std::vector<std::vector<ItemId>> validation_items;
    std::vector<std::vector<ItemId>> test_items;
    int n_items = 0;

    static EvalData build(const SplitBundle& split, std::size_t seq_len);
    const UserSequence* sequence(UserId u) const;
};

enum class Target { Validation, Test };

// Returns up to k ranked items for a user, never any of the sorted exclusions.
using Ranker = std::function<std::vector<ItemId>(UserId user, int k, std::span<const ItemId> exclusions, Rng& rng)>;

Ranker cdrec_ranker(const DenoiserParams& params, const EvalData& data, const SamplingPlan& plan,
                    const NoiseSchedule& sched, ScoreFunction score = ScoreFunction::Cosine);
Ranker most_popular_ranker(const EvalData& data);
Ranker random_ranker(int n_items);

// Full ranking over all items with the user's train items excluded. Users
// without relevant items in the target split, or without a train sequence,
// are skipped. Each run r uses seed options.seed + r; per-user streams are
// split from it so results do not depend on evaluation order.
MetricsReport evaluate_ranker(const EvalData& data, const Ranker& ranker, const EvalOptions& options,
                              Target target = Target::Test, const std::string& model = "cdrec");

MetricsReport evaluate(const DenoiserParams& params, const EvalData& data, const SamplingPlan& plan,
                       const NoiseSchedule& sched, const EvalOptions& options, Target target = Target::Test);

// Loads config.embed_path when set, otherwise trains the MF fallback.
EmbeddingBundle obtain_embeddings(const RunConfig& config, const InteractionLog& train);

struct TrainingRun {
    TrainResult result;
    DenoiserConfig denoiser;
};

// Initializes the denoiser from the embeddings and trains with validation-based
// early stopping. Writes one JSON line per epoch to log when given, and
// checkpoints into checkpoint_dir when given.
TrainingRun run_training(const RunConfig& config, const SplitBundle& split, const EmbeddingBundle& embeddings,
                         std::ostream* log = nullptr, const std::optional<std::filesystem::path>& checkpoint_dir = {});

nlohmann::json epoch_log_json(const EpochLog& entry);

struct SweepRow {
    std::vector<std::pair<std::string, std::string>> point;
    std::optional<MetricsReport> metrics;
    std::string error;
};

using SweepGrid = std::vector<std::pair<std::string, std::vector<std::string>>>;

// Cartesian product over the grid. Points that differ only in sample.* or
// eval.* keys reuse one trained model. Failures are recorded per row.
std::vector<SweepRow> sweep(const RunConfig& base, const SweepGrid& grid, const SplitBundle& split,
                            const EmbeddingBundle& embeddings);
void write_sweep_csv(std::ostream& out, const SweepGrid& grid, std::span<const SweepRow> rows,
                     std::span<const int> ks);

struct TimingRow {
    std::string phase;
    int steps = 0;
    int seq_len = 0;
    int users = 0;
    long denoiser_calls = 0;
    double seconds = 0.0;
};

// Wall time of sampling every user with each step count.
std::vector<TimingRow> time_sampling(const DenoiserParams& params, const EvalData& data, const NoiseSchedule& sched,
                                     std::span<const int> steps, std::uint64_t seed, int max_users = -1);
// Wall time of one denoiser pass per user at each sequence length, with
// freshly initialized parameters of the same width.
std::vector<TimingRow> time_sequence_length(const DenoiserConfig& base, std::span<const int> lengths, int users,
                                            std::uint64_t seed);
void write_timing_csv(std::ostream& out, std::span<const TimingRow> rows);

}  // namespace cdrec
