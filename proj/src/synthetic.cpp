#include "cdrec/synthetic.hpp"

#include <stdexcept>

#include "cdrec/rng.hpp"

namespace cdrec {

InteractionLog make_block_corpus(const BlockCorpusSpec& spec) {
    const int tails = spec.items_per_block - spec.head_items;
    if (spec.users < 1 || spec.blocks < 1 || spec.head_items < 0 || spec.train_tails + spec.held_out > tails ||
        spec.train_events < spec.head_items + spec.train_tails) {
        throw std::invalid_argument("inconsistent block corpus spec");
    }
    Rng rng(spec.seed);
    InteractionLog log;
    log.n_users = spec.users;
    log.n_items = spec.blocks * spec.items_per_block;
    for (int u = 0; u < spec.users; ++u) {
        const int offset = (u % spec.blocks) * spec.items_per_block;
        std::vector<ItemId> tail(static_cast<std::size_t>(tails));
        for (int i = 0; i < tails; ++i) {
            tail[static_cast<std::size_t>(i)] = offset + spec.head_items + i;
        }
        rng.shuffle(tail);

        std::vector<ItemId> distinct;
        for (int i = 0; i < spec.head_items; ++i) {
            distinct.push_back(offset + i);
        }
        distinct.insert(distinct.end(), tail.begin(), tail.begin() + spec.train_tails);
        std::vector<ItemId> history = distinct;
        while (static_cast<int>(history.size()) < spec.train_events) {
            history.push_back(distinct[rng.below(distinct.size())]);
        }
        rng.shuffle(history);
        history.insert(history.end(), tail.begin() + spec.train_tails,
                       tail.begin() + spec.train_tails + spec.held_out);

        std::int64_t ts = 1;
        for (ItemId v : history) {
            log.events.push_back(Interaction{u, v, 5.0, ts++});
        }
    }
    return log;
}

}  // namespace cdrec
