#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cdrec/collab.hpp"
#include "cdrec/denoiser.hpp"
#include "cdrec/sampler.hpp"
#include "cdrec/schedule.hpp"
#include "cdrec/training.hpp"

namespace cdrec {

class ConfigError : public Error {
public:
    using Error::Error;
};

struct EvalOptions {
    std::vector<int> ks{5, 10};
    int runs = 1;
    bool exclude_validation = false;  // also drop validation items from test-time candidates
    std::uint64_t seed = 0;
};

// Every tunable of a run under flat namespaced keys such as "train.lambda1".
// Unknown keys are rejected.
struct RunConfig {
    std::string data_root;
    std::string data_input;
    double data_threshold = 3.0;
    std::string split_dir = "split";

    std::string embed_path;  // external table; empty means train the MF fallback
    MfConfig mf;
    std::uint64_t embed_seed = 7;

    NoiseSchedule schedule;
    double sigma = 0.0;  // 0 means T / 10

    int layers = 2;
    int heads = 2;
    int seq_len = 20;
    int ff_mult = 4;
    double proj_temperature = 0.1;
    double init_scale = 0.02;

    TrainConfig train;
    int checkpoint_every = 0;  // 0 writes only the best and final checkpoints
    int val_steps = 1;         // sampling steps used by validation during training

    int sample_steps = 30;
    std::uint64_t sample_seed = 0;
    ScoreFunction score = ScoreFunction::Cosine;

    EvalOptions eval;
    std::string eval_split = "test";

    std::string out_dir = "runs";

    static const std::vector<std::string>& keys();

    void set(const std::string& key, const std::string& value);
    void set_json(const std::string& key, const nlohmann::json& value);
    nlohmann::json get(const std::string& key) const;

    // Flat object {key: value} over all keys.
    nlohmann::json to_json() const;
    static RunConfig from_json(const nlohmann::json& flat);
    static RunConfig load(const std::filesystem::path& path);

    NoiseSchedule noise_schedule() const;
    DenoiserConfig denoiser_config(int n_users, int n_items, int dim) const;
    SamplingPlan sampling_plan(int steps = -1) const;
    // data_input resolved against data_root when relative.
    std::filesystem::path input_path() const;
};

}  // namespace cdrec
