#include "cdrec/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace cdrec {

namespace {

void check(std::span<const ItemId> relevant, int k) {
    if (relevant.empty()) {
        throw std::invalid_argument("relevant set is empty");
    }
    if (k < 1) {
        throw std::invalid_argument("k must be >= 1");
    }
}

bool contains(std::span<const ItemId> set, ItemId v) { return std::find(set.begin(), set.end(), v) != set.end(); }

}  // namespace

double recall_at_k(std::span<const ItemId> ranked, std::span<const ItemId> relevant, int k) {
    check(relevant, k);
    const auto depth = std::min(ranked.size(), static_cast<std::size_t>(k));
    std::size_t hits = 0;
    for (std::size_t r = 0; r < depth; ++r) {
        hits += contains(relevant, ranked[r]) ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(relevant.size());
}

double ndcg_at_k(std::span<const ItemId> ranked, std::span<const ItemId> relevant, int k) {
    check(relevant, k);
    const auto depth = std::min(ranked.size(), static_cast<std::size_t>(k));
    double dcg = 0.0;
    for (std::size_t r = 0; r < depth; ++r) {
        if (contains(relevant, ranked[r])) {
            dcg += 1.0 / std::log2(static_cast<double>(r) + 2.0);
        }
    }
    double idcg = 0.0;
    const auto ideal = std::min(relevant.size(), static_cast<std::size_t>(k));
    for (std::size_t r = 0; r < ideal; ++r) {
        idcg += 1.0 / std::log2(static_cast<double>(r) + 2.0);
    }
    return dcg / idcg;
}

}  // namespace cdrec
