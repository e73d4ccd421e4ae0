#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cdrec/autograd.hpp"
#include "cdrec/rng.hpp"
#include "cdrec/schedule.hpp"
#include "cdrec/types.hpp"

namespace cdrec {

struct DenoiserConfig {
    int n_users = 0;
    int n_items = 0;
    int dim = 64;
    int layers = 2;
    int heads = 2;
    int seq_len = 20;
    int ff_mult = 4;
    double horizon = 60.0;  // time table covers the integer grid 0..floor(T)
    double epsilon = 0.0;
    double proj_temperature = 0.1;
    double init_scale = 0.02;

    int time_steps() const;
    void validate() const;
};

void to_json(nlohmann::json& j, const DenoiserConfig& c);
void from_json(const nlohmann::json& j, DenoiserConfig& c);

// Trainable state of the denoiser: a flat list of named tensors so that
// optimizers, EMA, checkpoints and gradient checks can treat it generically.
class DenoiserParams {
public:
    // Fixed tensor slots; per-layer tensors follow at layer_base(layer).
    enum Slot : std::size_t {
        kItemTable = 0,  // Q, n_items x d
        kUserTable,      // P, n_users x d
        kMaskEmbedding,
        kPadEmbedding,
        kTimeTable,
        kPositionTable,
        kFinalGamma,
        kFinalBeta,
        kFixedSlots
    };
    enum LayerSlot : std::size_t {
        kLn1Gamma = 0,
        kLn1Beta,
        kWq,
        kBq,
        kWk,
        kBk,
        kWv,
        kBv,
        kWo,
        kBo,
        kLn2Gamma,
        kLn2Beta,
        kW1,
        kB1,
        kW2,
        kB2,
        kLayerSlots
    };

    DenoiserParams() = default;

    // All tensors allocated with their final shapes and zero values.
    static DenoiserParams shaped(const DenoiserConfig& config);

    // Random init of everything except the embedding tables, which are copied.
    static DenoiserParams initialize(const DenoiserConfig& config, const Matrix& user_table, const Matrix& item_table,
                                     Rng& rng);

    // Same shapes, all zero.
    DenoiserParams zeros_like() const;

    const DenoiserConfig& config() const { return config_; }
    std::size_t tensor_count() const { return tensors_.size(); }
    Matrix& tensor(std::size_t i) { return tensors_[i]; }
    const Matrix& tensor(std::size_t i) const { return tensors_[i]; }
    const std::string& name(std::size_t i) const { return names_[i]; }
    static std::size_t layer_base(int layer) { return kFixedSlots + static_cast<std::size_t>(layer) * kLayerSlots; }

    Matrix& item_table() { return tensors_[kItemTable]; }
    const Matrix& item_table() const { return tensors_[kItemTable]; }
    Matrix& user_table() { return tensors_[kUserTable]; }
    const Matrix& user_table() const { return tensors_[kUserTable]; }
    Matrix& time_table() { return tensors_[kTimeTable]; }
    const Matrix& time_table() const { return tensors_[kTimeTable]; }

    std::size_t parameter_count() const;
    bool all_finite() const;
    bool same_shape(const DenoiserParams& other) const;
    void set_zero();

private:
    void add(std::string name, Matrix value);

    DenoiserConfig config_;
    std::vector<Matrix> tensors_;
    std::vector<std::string> names_;
};

// Per-slot categorical distributions over items. Padded slots are inactive;
// their rows carry no meaning.
struct PositionDistribution {
    Matrix probs;  // l x m
    std::vector<bool> active;
};

struct ConsistencyOutput {
    PositionDistribution distribution;
    DiffusionState decoded;  // argmax per active slot; padded slots unchanged
};

int quantize_time(double t, const DenoiserConfig& config);

// Graph construction for the denoiser. Whole-tensor leaves are created once
// per graph, so several sequences can share them (the item table in particular).
class DenoiserGraph {
public:
    // grads may be null, in which case no gradient is recorded for parameters.
    DenoiserGraph(ag::Graph& graph, const DenoiserParams& params, DenoiserParams* grads);

    ag::Graph& graph() { return graph_; }
    const DenoiserParams& params() const { return params_; }

    ag::Var leaf(std::size_t slot);
    ag::Var gather(std::size_t slot, std::span<const int> rows);

    // Encoder output, (l + 1) x d: the user slot followed by one row per position.
    ag::Var encode(std::span<const ItemId> items, UserId user, double t);

    // Cosine logits over items for the position rows of an encoding, l x m.
    ag::Var project(ag::Var encoded);

    ag::Var logits(std::span<const ItemId> items, UserId user, double t) { return project(encode(items, user, t)); }

private:
    ag::Var attention(ag::Var x, std::size_t base);

    ag::Graph& graph_;
    const DenoiserParams& params_;
    DenoiserParams* grads_;
    std::vector<std::optional<ag::Var>> leaves_;
    std::optional<ag::Var> unit_items_;
};

// Encoder output as a plain matrix, (l + 1) x d. Throws std::out_of_range for
// an unknown user.
Matrix encode(const DenoiserParams& params, std::span<const ItemId> items, UserId user, double t);

// softmax(cos(encoded_i, Q_v) / temperature) per row. Zero rows give uniform
// distributions and emit a warning.
PositionDistribution project_items(const Matrix& encoded_positions, const Matrix& item_table, double temperature);

// f(x, t): identity at t <= epsilon (one-hot rows for items, uniform rows for
// masked slots), otherwise the encoder followed by the cosine projection.
ConsistencyOutput consistency_apply(const DenoiserParams& params, std::span<const ItemId> items, double t, UserId user);

DiffusionState decode_argmax(const PositionDistribution& dist, std::span<const ItemId> items, double t);

// Versioned binary checkpoint holding the config, every tensor and an
// arbitrary metadata document. Doubles are stored bit-for-bit.
void save_checkpoint(const std::filesystem::path& path, const DenoiserParams& params,
                     const nlohmann::json& metadata = nlohmann::json::object());

struct Checkpoint {
    DenoiserParams params;
    nlohmann::json metadata;
};

Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace cdrec
