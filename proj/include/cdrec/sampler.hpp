#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <vector>

#include "cdrec/corpus.hpp"
#include "cdrec/denoiser.hpp"
#include "cdrec/rng.hpp"
#include "cdrec/schedule.hpp"

namespace cdrec {

struct SamplingPlan {
    int steps = 30;  // N
    double horizon = 60.0;
    std::uint64_t seed = 0;

    // Uniform descending grid T*n/N for n = N..1.
    std::vector<double> grid() const;
    void validate() const;
};

struct SampleResult {
    DiffusionState state;
    int denoiser_calls = 0;
};

// Multistep generation for one user. Starts from all-MASK at T (padded slots
// follow the user's training sequence), decodes, then for each remaining grid
// time re-noises the decoded sequence and decodes again. Re-noising uses the
// popularity deviation an item has in the user's history and 0 for any other item.
SampleResult sample(const UserSequence& seq, const DenoiserParams& params, const PopularityTable& pop,
                    const SamplingPlan& plan, const NoiseSchedule& sched, Rng& rng);

enum class ScoreFunction { Cosine, Dot };

struct Recommendation {
    UserId user = 0;
    std::vector<ItemId> items;
    std::vector<double> scores;
};

// Top k of the scores with excluded items removed; higher score first, lower id
// on ties. exclusions must be sorted.
Recommendation top_k(UserId user, const RowVector& scores, int k, std::span<const ItemId> exclusions);

// Scores every item against the mean Q row of the generated items. Masked and
// padded slots are dropped; an empty generated set falls back to p_u.
Recommendation recommend(UserId user, std::span<const ItemId> generated, const DenoiserParams& params, int k,
                         std::span<const ItemId> exclusions, ScoreFunction score = ScoreFunction::Cosine);

struct TraceRow {
    double t = 0.0;
    std::size_t position = 0;
    ItemId item = kPad;
    double deviation = 0.0;
    double beta_bar = 0.0;
    bool masked = false;
};

// One forward trajectory over `steps` evenly spaced times in [0, T]. Each slot
// draws a single uniform u and is masked from the first time u falls below the
// running maximum of its masking probability, so a masked slot stays masked.
// Padded slots are omitted.
std::vector<TraceRow> trace_forward(const UserSequence& seq, const PopularityTable& pop, const NoiseSchedule& sched,
                                    int steps, Rng& rng);

void write_trace_csv(std::ostream& out, std::span<const TraceRow> rows);
void write_trace_csv(const std::filesystem::path& path, std::span<const TraceRow> rows);

}  // namespace cdrec
