#include "cdrec/collab.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include <fmt/format.h>

namespace cdrec {

namespace {

Matrix read_rows(std::istream& in, int rows, int dim, const std::string& what, std::size_t& line_no,
                 const std::string& path) {
    Matrix m(rows, dim);
    std::string line;
    for (int r = 0; r < rows; ++r) {
        if (!std::getline(in, line)) {
            throw DimensionError(fmt::format("{}: expected {} {} rows, found {}", path, rows, what, r));
        }
        ++line_no;
        const char* p = line.data();
        const char* end = line.data() + line.size();
        for (int c = 0; c < dim; ++c) {
            while (p < end && (*p == ' ' || *p == '\t')) {
                ++p;
            }
            double v = 0.0;
            auto [next, ec] = std::from_chars(p, end, v);
            if (ec != std::errc()) {
                throw ParseError(path, line_no, fmt::format("expected {} values in {} row", dim, what));
            }
            if (!std::isfinite(v)) {
                throw ParseError(path, line_no, "non-finite embedding entry");
            }
            m(r, c) = v;
            p = next;
        }
        while (p < end && (*p == ' ' || *p == '\t' || *p == '\r')) {
            ++p;
        }
        if (p != end) {
            throw DimensionError(fmt::format("{}:{}: more than {} values in {} row", path, line_no, dim, what));
        }
    }
    return m;
}

double log1p_exp_neg(double x) {
    // -log sigmoid(x), stable for both signs.
    return x > 0.0 ? std::log1p(std::exp(-x)) : -x + std::log1p(std::exp(x));
}

}  // namespace

EmbeddingBundle load_embeddings(const std::filesystem::path& path, int expected_users, int expected_items) {
    std::ifstream in(path);
    if (!in) {
        throw Error(fmt::format("cannot open embedding file {}", path.string()));
    }
    std::string header;
    if (!std::getline(in, header)) {
        throw ParseError(path.string(), 1, "missing header");
    }
    std::istringstream hs(header);
    hs.imbue(std::locale::classic());
    int n = 0;
    int m = 0;
    int d = 0;
    if (!(hs >> n >> m >> d) || n < 0 || m < 0 || d <= 0) {
        throw ParseError(path.string(), 1, "header must be 'n m d' with d > 0");
    }
    if (expected_users >= 0 && n != expected_users) {
        throw DimensionError(fmt::format("{}: expected {} users, found {}", path.string(), expected_users, n));
    }
    if (expected_items >= 0 && m != expected_items) {
        throw DimensionError(fmt::format("{}: expected {} items, found {}", path.string(), expected_items, m));
    }
    std::size_t line_no = 1;
    EmbeddingBundle out;
    out.users = read_rows(in, n, d, "user", line_no, path.string());
    out.items = read_rows(in, m, d, "item", line_no, path.string());
    out.source = EmbeddingSource::Loaded;
    return out;
}

void save_embeddings(const std::filesystem::path& path, const EmbeddingBundle& bundle) {
    std::ofstream out(path);
    if (!out) {
        throw Error(fmt::format("cannot write embedding file {}", path.string()));
    }
    out << fmt::format("{} {} {}\n", bundle.users.rows(), bundle.items.rows(), bundle.items.cols());
    for (const Matrix* m : {&bundle.users, &bundle.items}) {
        for (Eigen::Index r = 0; r < m->rows(); ++r) {
            std::string line;
            for (Eigen::Index c = 0; c < m->cols(); ++c) {
                if (c > 0) {
                    line += ' ';
                }
                line += fmt::format("{}", (*m)(r, c));
            }
            out << line << '\n';
        }
    }
}

EmbeddingBundle train_fallback_mf(const InteractionLog& train, const MfConfig& config, Rng& rng,
                                  std::vector<MfEpochLoss>* history) {
    if (config.dim <= 0) {
        throw std::invalid_argument("MF dimension must be positive");
    }
    if (train.events.empty()) {
        throw EmptyDatasetError("MF needs a nonempty train split");
    }
    const auto n = static_cast<Eigen::Index>(train.n_users);
    const auto m = static_cast<Eigen::Index>(train.n_items);
    EmbeddingBundle out;
    out.source = EmbeddingSource::FallbackMF;
    out.users.resize(n, config.dim);
    out.items.resize(m, config.dim);
    for (Matrix* t : {&out.users, &out.items}) {
        for (Eigen::Index i = 0; i < t->size(); ++i) {
            t->data()[i] = config.init_scale * rng.normal();
        }
    }

    std::vector<std::vector<ItemId>> seen(static_cast<std::size_t>(n));
    for (const auto& e : train.events) {
        seen[static_cast<std::size_t>(e.user)].push_back(e.item);
    }
    for (auto& s : seen) {
        std::sort(s.begin(), s.end());
        s.erase(std::unique(s.begin(), s.end()), s.end());
    }
    auto interacted = [&seen](UserId u, ItemId v) {
        const auto& s = seen[static_cast<std::size_t>(u)];
        return std::binary_search(s.begin(), s.end(), v);
    };

    const std::size_t steps = train.events.size();
    RowVector diff(config.dim);
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        double loss_sum = 0.0;
        std::size_t counted = 0;
        for (std::size_t s = 0; s < steps; ++s) {
            const auto& e = train.events[rng.below(steps)];
            if (seen[static_cast<std::size_t>(e.user)].size() >= static_cast<std::size_t>(m)) {
                continue;  // no negative exists for this user
            }
            ItemId neg = static_cast<ItemId>(rng.below(static_cast<std::uint64_t>(m)));
            while (interacted(e.user, neg)) {
                neg = static_cast<ItemId>(rng.below(static_cast<std::uint64_t>(m)));
            }
            auto p = out.users.row(e.user);
            auto qi = out.items.row(e.item);
            auto qj = out.items.row(neg);
            diff = qi - qj;
            const double x = p.dot(diff);
            loss_sum += log1p_exp_neg(x);
            ++counted;
            const double g = 1.0 / (1.0 + std::exp(x));  // sigmoid(-x)
            const RowVector p_old = p;
            p += config.learning_rate * (g * diff - config.regularization * p_old);
            qi += config.learning_rate * (g * p_old - config.regularization * qi);
            qj += config.learning_rate * (-g * p_old - config.regularization * qj);
        }
        if (history != nullptr) {
            history->push_back(MfEpochLoss{epoch, counted > 0 ? loss_sum / static_cast<double>(counted) : 0.0});
        }
    }
    return out;
}

}  // namespace cdrec
