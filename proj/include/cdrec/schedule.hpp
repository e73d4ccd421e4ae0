#pragma once

#include <span>
#include <string>
#include <vector>

#include "cdrec/corpus.hpp"
#include "cdrec/rng.hpp"
#include "cdrec/types.hpp"

namespace cdrec {

// How the cumulative schedule value is turned into a masking probability.
enum class KernelMode {
    // The schedule value is the masking probability itself.
    DirectProbability,
    // The schedule value is an integrated rate: p = 1 - exp(-beta_bar), the
    // closed form of exp(beta_bar * R) for the absorbing base rate R.
    MatrixExponential,
};

std::string to_string(KernelMode mode);
KernelMode kernel_mode_from_string(const std::string& name);

// Popularity-aware absorbing schedule
//   beta_bar(t) = t/T - omega * exp(-(t - T/2)^2 / (2 sigma^2)) * I(v)
// clamped to [0, 1] and forced to exactly 1 at t = T.
struct NoiseSchedule {
    double horizon = 60.0;  // T
    double omega = 0.5;
    double sigma = 6.0;
    KernelMode mode = KernelMode::DirectProbability;
    double epsilon = 0.0;

    // sigma = T / 10.
    static NoiseSchedule with_horizon(double horizon, double omega = 0.5);

    // Throws std::invalid_argument when a field is out of range.
    void validate() const;
};

// The state of a diffused sequence at time t. Slots hold an item id, kMask or kPad.
struct DiffusionState {
    std::vector<ItemId> items;
    double t = 0.0;

    std::size_t masked_count() const;
};

// Outgoing probabilities of one kernel row. The chain can only stay or move
// to the absorbing state.
struct KernelRow {
    double keep = 1.0;
    double to_mask = 0.0;
};

// Gaussian bump exp(-(t - T/2)^2 / (2 sigma^2)).
double deviation_bump(double t, const NoiseSchedule& sched);

// beta_bar(t) before clamping and terminal forcing.
double raw_cumulative_beta(double t, double deviation, const NoiseSchedule& sched);

double cumulative_beta(double t, double deviation, const NoiseSchedule& sched);

// Masking probability for a given schedule value. Does not apply terminal forcing.
double mask_probability_from_beta(double beta_bar, KernelMode mode);

// Probability that an item is masked at time t; exactly 1 at t >= T in every mode.
double mask_probability(double t, double deviation, const NoiseSchedule& sched);

KernelRow transition_kernel_row(ItemId state, double t, double deviation, const NoiseSchedule& sched);

// Deviation values are indexed by slot and ignored on padded slots.
DiffusionState forward_sample(std::span<const ItemId> x0, double t, std::span<const double> deviations,
                              const NoiseSchedule& sched, Rng& rng);
DiffusionState forward_sample(const UserSequence& x0, double t, std::span<const double> deviations,
                              const NoiseSchedule& sched, Rng& rng);

struct RecoveryResult {
    DiffusionState state;
    bool recovered = false;
    std::size_t position = 0;  // valid when recovered
};

// Restores the masked slot with the lowest masking probability (lowest index on
// ties) to its x0 item. The returned state keeps x_t's time.
RecoveryResult pair_one_step_recovery(const DiffusionState& x_t, std::span<const ItemId> x0,
                                      std::span<const double> probs);

// Pseudo-Euler reverse step over dt: a masked slot with B = beta_bar(t_n)
// stays masked with probability B * (1 - dt / T) and otherwise returns to its
// x0 item; unmasked slots are kept. The returned state has time t_n - dt.
DiffusionState pair_pseudo_euler(const DiffusionState& x_t, std::span<const ItemId> x0, double t_n, double dt,
                                 const NoiseSchedule& sched, std::span<const double> deviations, Rng& rng);

}  // namespace cdrec
