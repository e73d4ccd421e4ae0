#pragma once

#include <cstdint>

#include "cdrec/corpus.hpp"

namespace cdrec {

// Users alternate between disjoint item blocks. Within a block the first
// head_items are consumed by every member; the rest are tail items. A user's
// history holds every head, train_tails random tails and repeats of those up
// to train_events, then held_out fresh tails that the chronological split
// routes to validation and test.
struct BlockCorpusSpec {
    int users = 50;
    int blocks = 2;
    int items_per_block = 15;
    int head_items = 6;
    int train_tails = 3;
    int train_events = 16;
    int held_out = 4;
    std::uint64_t seed = 11;
};

InteractionLog make_block_corpus(const BlockCorpusSpec& spec);

// Block of an item under the spec's layout.
inline int block_of(ItemId item, const BlockCorpusSpec& spec) { return item / spec.items_per_block; }

}  // namespace cdrec
