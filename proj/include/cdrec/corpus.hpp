#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cdrec/types.hpp"

namespace cdrec {

struct Interaction {
    UserId user = 0;
    ItemId item = 0;
    double rating = 0.0;
    std::int64_t timestamp = 0;

    friend bool operator==(const Interaction&, const Interaction&) = default;
};

// Implicit-feedback events with dense ids in [0, n_users) x [0, n_items).
struct InteractionLog {
    std::vector<Interaction> events;
    std::int32_t n_users = 0;
    std::int32_t n_items = 0;
    // Original ids from the source file, indexed by dense id. May be empty
    // for logs built in memory.
    std::vector<std::int64_t> raw_user_ids;
    std::vector<std::int64_t> raw_item_ids;

    // Events grouped per user, each group in chronological order (stable on ties).
    std::vector<std::vector<Interaction>> by_user() const;
};

struct SplitBundle {
    InteractionLog train;
    InteractionLog validation;
    InteractionLog test;
};

struct SplitRatios {
    double train = 8.0;
    double validation = 1.0;
    double test = 1.0;
};

struct UserSequence {
    UserId user = 0;
    std::vector<ItemId> items;  // length l; kPad on padded slots
    std::vector<bool> pad_mask;  // true where padded

    std::size_t length() const { return items.size(); }
    std::size_t real_count() const;
};

// pop(v) = count(v) / max_w count(w) over the train split.
struct PopularityTable {
    std::vector<double> pop;

    double operator[](ItemId v) const { return pop[static_cast<std::size_t>(v)]; }
    std::size_t size() const { return pop.size(); }
};

struct DatasetStats {
    std::int32_t n_users = 0;
    std::int32_t n_items = 0;
    std::size_t n_train = 0;
    std::size_t n_val = 0;
    std::size_t n_test = 0;
};

// Reads "user item rating timestamp" rows separated by tabs or commas.
// Keeps rows with rating >= threshold, drops exact duplicates and re-indexes
// users and items densely by first appearance among the kept rows.
InteractionLog load_interactions(const std::filesystem::path& path, double threshold = 3.0);

// Same as load_interactions but over an in-memory list of raw rows.
InteractionLog index_interactions(const std::vector<Interaction>& raw_rows, double threshold = 3.0);

// Per-user chronological split. With k events: floor(k*train) go to train,
// round(k*validation) to validation, the remainder to test. Users with fewer
// than three events go entirely to train.
SplitBundle split_chronological(const InteractionLog& log, const SplitRatios& ratios = {});

// Most recent l train items per user, oldest first, left-padded with kPad.
// Users without train events are skipped.
std::vector<UserSequence> build_sequences(const InteractionLog& train, std::size_t length);

PopularityTable popularity(const InteractionLog& train);

// I(v_i) = pop(v_i) - mean of pop over the non-padded slots. Padded slots
// carry NaN. Throws on an all-padding sequence.
std::vector<double> popularity_deviation(const UserSequence& seq, const PopularityTable& pop);

DatasetStats dataset_stats(const SplitBundle& split);

// One event per line, tab separated: user, item, rating, timestamp (dense ids).
void write_events(const std::filesystem::path& path, const InteractionLog& log);

// Writes train.tsv, validation.tsv, test.tsv, stats.json and the dense-to-raw
// id maps users.tsv / items.tsv into dir.
void write_split(const std::filesystem::path& dir, const SplitBundle& split);

// Reloads a directory written by write_split with identical dense ids.
SplitBundle read_split(const std::filesystem::path& dir);

}  // namespace cdrec
