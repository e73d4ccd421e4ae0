#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "cdrec/corpus.hpp"
#include "cdrec/rng.hpp"
#include "cdrec/types.hpp"

namespace cdrec {

enum class EmbeddingSource { Loaded, FallbackMF };

// Pre-trained user (P) and item (Q) tables used to initialize the denoiser.
struct EmbeddingBundle {
    Matrix users;  // n x d
    Matrix items;  // m x d
    EmbeddingSource source = EmbeddingSource::Loaded;

    int dim() const { return static_cast<int>(items.cols()); }
};

struct MfConfig {
    int dim = 64;
    int epochs = 30;
    double learning_rate = 0.01;
    double regularization = 1e-4;
    double init_scale = 0.1;
};

// Text format: a "n m d" header, then n rows of P and m rows of Q, each with
// d space-separated reals. Expected sizes of -1 are not checked.
EmbeddingBundle load_embeddings(const std::filesystem::path& path, int expected_users = -1, int expected_items = -1);

// Shortest round-trip decimal formatting, independent of the global locale.
void save_embeddings(const std::filesystem::path& path, const EmbeddingBundle& bundle);

struct MfEpochLoss {
    int epoch = 0;
    double mean_loss = 0.0;  // mean of -log sigmoid(x_uij) over the epoch's steps
};

// Bayesian personalized ranking: each step samples (u, v+, v-) and ascends
// log sigmoid(p_u . q_v+ - p_u . q_v-). One epoch is |train| steps.
EmbeddingBundle train_fallback_mf(const InteractionLog& train, const MfConfig& config, Rng& rng,
                                  std::vector<MfEpochLoss>* history = nullptr);

}  // namespace cdrec
