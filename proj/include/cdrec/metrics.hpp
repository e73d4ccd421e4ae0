#pragma once

#include <span>

#include "cdrec/types.hpp"

namespace cdrec {

// Both take the ranked list and the distinct relevant items. An empty relevant
// set is rejected with std::invalid_argument; callers skip such users.
double recall_at_k(std::span<const ItemId> ranked, std::span<const ItemId> relevant, int k);
double ndcg_at_k(std::span<const ItemId> ranked, std::span<const ItemId> relevant, int k);

}  // namespace cdrec
