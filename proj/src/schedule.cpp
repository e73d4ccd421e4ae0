#include "cdrec/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace cdrec {

std::string to_string(KernelMode mode) {
    return mode == KernelMode::DirectProbability ? "direct" : "matrix_exp";
}

KernelMode kernel_mode_from_string(const std::string& name) {
    if (name == "direct") {
        return KernelMode::DirectProbability;
    }
    if (name == "matrix_exp") {
        return KernelMode::MatrixExponential;
    }
    throw std::invalid_argument("unknown kernel mode '" + name + "' (expected direct or matrix_exp)");
}

NoiseSchedule NoiseSchedule::with_horizon(double horizon, double omega) {
    NoiseSchedule s;
    s.horizon = horizon;
    s.omega = omega;
    s.sigma = horizon / 10.0;
    return s;
}

void NoiseSchedule::validate() const {
    if (!(horizon > 0.0)) {
        throw std::invalid_argument("schedule horizon T must be positive");
    }
    if (!(omega >= 0.0)) {
        throw std::invalid_argument("schedule omega must be >= 0");
    }
    if (!(sigma > 0.0)) {
        throw std::invalid_argument("schedule sigma must be > 0");
    }
    if (!(epsilon >= 0.0) || !(epsilon < horizon)) {
        throw std::invalid_argument("schedule epsilon must lie in [0, T)");
    }
}

std::size_t DiffusionState::masked_count() const {
    return static_cast<std::size_t>(std::count(items.begin(), items.end(), kMask));
}

double deviation_bump(double t, const NoiseSchedule& sched) {
    const double centered = t - sched.horizon / 2.0;
    return std::exp(-(centered * centered) / (2.0 * sched.sigma * sched.sigma));
}

double raw_cumulative_beta(double t, double deviation, const NoiseSchedule& sched) {
    return t / sched.horizon - sched.omega * deviation_bump(t, sched) * deviation;
}

double cumulative_beta(double t, double deviation, const NoiseSchedule& sched) {
    if (t >= sched.horizon) {
        return 1.0;
    }
    return std::clamp(raw_cumulative_beta(t, deviation, sched), 0.0, 1.0);
}

double mask_probability_from_beta(double beta_bar, KernelMode mode) {
    if (mode == KernelMode::DirectProbability) {
        return beta_bar;
    }
    // -expm1 keeps full precision for small beta_bar.
    return -std::expm1(-beta_bar);
}

double mask_probability(double t, double deviation, const NoiseSchedule& sched) {
    if (t >= sched.horizon) {
        return 1.0;
    }
    return mask_probability_from_beta(cumulative_beta(t, deviation, sched), sched.mode);
}

KernelRow transition_kernel_row(ItemId state, double t, double deviation, const NoiseSchedule& sched) {
    if (state == kMask) {
        return KernelRow{0.0, 1.0};
    }
    if (!is_item(state)) {
        throw std::invalid_argument("transition_kernel_row: state must be an item or MASK");
    }
    const double p = mask_probability(t, deviation, sched);
    return KernelRow{1.0 - p, p};
}

DiffusionState forward_sample(std::span<const ItemId> x0, double t, std::span<const double> deviations,
                              const NoiseSchedule& sched, Rng& rng) {
    if (deviations.size() != x0.size()) {
        throw std::invalid_argument("forward_sample: deviations must align with the sequence");
    }
    DiffusionState out{std::vector<ItemId>(x0.begin(), x0.end()), t};
    for (std::size_t i = 0; i < x0.size(); ++i) {
        if (x0[i] == kPad || x0[i] == kMask) {
            continue;
        }
        const double p = mask_probability(t, deviations[i], sched);
        // Always draw so the stream position does not depend on p.
        const double u = rng.uniform();
        if (u < p) {
            out.items[i] = kMask;
        }
    }
    return out;
}

DiffusionState forward_sample(const UserSequence& x0, double t, std::span<const double> deviations,
                              const NoiseSchedule& sched, Rng& rng) {
    return forward_sample(std::span<const ItemId>(x0.items), t, deviations, sched, rng);
}

RecoveryResult pair_one_step_recovery(const DiffusionState& x_t, std::span<const ItemId> x0,
                                      std::span<const double> probs) {
    if (x0.size() != x_t.items.size() || probs.size() != x_t.items.size()) {
        throw std::invalid_argument("pair_one_step_recovery: length mismatch");
    }
    RecoveryResult out{x_t, false, 0};
    double best = 0.0;
    for (std::size_t i = 0; i < x_t.items.size(); ++i) {
        if (x_t.items[i] != kMask) {
            continue;
        }
        if (!out.recovered || probs[i] < best) {
            best = probs[i];
            out.position = i;
            out.recovered = true;
        }
    }
    if (out.recovered) {
        out.state.items[out.position] = x0[out.position];
    }
    return out;
}

DiffusionState pair_pseudo_euler(const DiffusionState& x_t, std::span<const ItemId> x0, double t_n, double dt,
                                 const NoiseSchedule& sched, std::span<const double> deviations, Rng& rng) {
    if (!(dt > 0.0)) {
        throw std::invalid_argument("pair_pseudo_euler: dt must be positive");
    }
    if (x0.size() != x_t.items.size() || deviations.size() != x_t.items.size()) {
        throw std::invalid_argument("pair_pseudo_euler: length mismatch");
    }
    DiffusionState out{x_t.items, t_n - dt};
    const double keep_scale = 1.0 - dt / sched.horizon;
    for (std::size_t i = 0; i < out.items.size(); ++i) {
        if (out.items[i] != kMask) {
            continue;
        }
        const double stay_masked = cumulative_beta(t_n, deviations[i], sched) * keep_scale;
        if (rng.uniform() >= stay_masked) {
            out.items[i] = x0[i];
        }
    }
    return out;
}

}  // namespace cdrec
