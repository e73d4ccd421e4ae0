#include "cdrec/corpus.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <string_view>
#include <unordered_map>
#include <unordered_set>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

namespace cdrec {

namespace {

std::vector<std::string_view> split_fields(std::string_view line) {
    std::vector<std::string_view> out;
    std::string_view sep = ",";
    if (line.find('\t') != std::string_view::npos) {
        sep = "\t";
    } else if (line.find("::") != std::string_view::npos) {
        sep = "::";
    }
    std::size_t start = 0;
    while (true) {
        const std::size_t pos = line.find(sep, start);
        out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
        if (pos == std::string_view::npos) {
            break;
        }
        start = pos + sep.size();
    }
    return out;
}

std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\r')) {
        s.remove_prefix(1);
    }
    while (!s.empty() && (s.back() == ' ' || s.back() == '\r')) {
        s.remove_suffix(1);
    }
    return s;
}

template <typename T>
bool parse_number(std::string_view s, T& out) {
    s = trim(s);
    const auto* end = s.data() + s.size();
    auto [ptr, ec] = std::from_chars(s.data(), end, out);
    return ec == std::errc() && ptr == end;
}

bool parse_timestamp(std::string_view s, std::int64_t& out) {
    if (parse_number(s, out)) {
        return true;
    }
    // Some exports store timestamps as "881250949.0".
    double d = 0.0;
    if (parse_number(s, d) && std::isfinite(d) && d == std::floor(d)) {
        out = static_cast<std::int64_t>(d);
        return true;
    }
    return false;
}

struct Indexer {
    std::unordered_map<std::int64_t, std::int32_t> index;
    std::vector<std::int64_t> raw;

    std::int32_t get(std::int64_t id) {
        auto [it, inserted] = index.try_emplace(id, static_cast<std::int32_t>(raw.size()));
        if (inserted) {
            raw.push_back(id);
        }
        return it->second;
    }
};

struct EventHash {
    std::size_t operator()(const Interaction& e) const {
        std::size_t h = std::hash<std::int64_t>()(e.timestamp);
        h ^= std::hash<std::int32_t>()(e.user) + 0x9e3779b9 + (h << 6) + (h >> 2);
        h ^= std::hash<std::int32_t>()(e.item) + 0x9e3779b9 + (h << 6) + (h >> 2);
        h ^= std::hash<double>()(e.rating) + 0x9e3779b9 + (h << 6) + (h >> 2);
        return h;
    }
};

InteractionLog empty_like(const InteractionLog& log) {
    InteractionLog out;
    out.n_users = log.n_users;
    out.n_items = log.n_items;
    out.raw_user_ids = log.raw_user_ids;
    out.raw_item_ids = log.raw_item_ids;
    return out;
}

}  // namespace

std::vector<std::vector<Interaction>> InteractionLog::by_user() const {
    std::vector<std::vector<Interaction>> groups(static_cast<std::size_t>(n_users));
    for (const auto& e : events) {
        groups[static_cast<std::size_t>(e.user)].push_back(e);
    }
    for (auto& g : groups) {
        std::stable_sort(g.begin(), g.end(),
                         [](const Interaction& a, const Interaction& b) { return a.timestamp < b.timestamp; });
    }
    return groups;
}

std::size_t UserSequence::real_count() const {
    return static_cast<std::size_t>(std::count(pad_mask.begin(), pad_mask.end(), false));
}

InteractionLog index_interactions(const std::vector<Interaction>& raw_rows, double threshold) {
    Indexer users;
    Indexer items;
    InteractionLog log;
    std::unordered_set<Interaction, EventHash> seen;
    for (const auto& row : raw_rows) {
        if (row.rating < threshold) {
            continue;
        }
        if (!seen.insert(row).second) {
            continue;
        }
        Interaction e = row;
        e.user = users.get(row.user);
        e.item = items.get(row.item);
        log.events.push_back(e);
    }
    if (log.events.empty()) {
        throw EmptyDatasetError(fmt::format("no interactions with rating >= {}", threshold));
    }
    log.n_users = static_cast<std::int32_t>(users.raw.size());
    log.n_items = static_cast<std::int32_t>(items.raw.size());
    log.raw_user_ids = std::move(users.raw);
    log.raw_item_ids = std::move(items.raw);
    return log;
}

InteractionLog load_interactions(const std::filesystem::path& path, double threshold) {
    std::ifstream in(path);
    if (!in) {
        throw Error(fmt::format("cannot open {}", path.string()));
    }
    std::vector<Interaction> rows;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string_view view = trim(line);
        if (view.empty() || view.front() == '#') {
            continue;
        }
        const auto fields = split_fields(view);
        if (fields.size() < 4) {
            throw ParseError(path.string(), line_no, fmt::format("expected 4 fields, found {}", fields.size()));
        }
        std::int64_t user = 0;
        std::int64_t item = 0;
        Interaction row;
        if (!parse_number(fields[0], user)) {
            throw ParseError(path.string(), line_no, "bad user id");
        }
        if (!parse_number(fields[1], item)) {
            throw ParseError(path.string(), line_no, "bad item id");
        }
        if (!parse_number(fields[2], row.rating) || !std::isfinite(row.rating)) {
            throw ParseError(path.string(), line_no, "bad rating");
        }
        if (!parse_timestamp(fields[3], row.timestamp)) {
            throw ParseError(path.string(), line_no, "bad timestamp");
        }
        if (user < std::numeric_limits<std::int32_t>::min() || user > std::numeric_limits<std::int32_t>::max() ||
            item < std::numeric_limits<std::int32_t>::min() || item > std::numeric_limits<std::int32_t>::max()) {
            throw ParseError(path.string(), line_no, "id out of range");
        }
        row.user = static_cast<UserId>(user);
        row.item = static_cast<ItemId>(item);
        rows.push_back(row);
    }
    return index_interactions(rows, threshold);
}

SplitBundle split_chronological(const InteractionLog& log, const SplitRatios& ratios) {
    if (!(ratios.train > 0.0) || !(ratios.validation > 0.0) || !(ratios.test > 0.0)) {
        throw std::invalid_argument("split ratios must be positive");
    }
    if (log.events.empty()) {
        throw EmptyDatasetError("cannot split an empty log");
    }
    const double total = ratios.train + ratios.validation + ratios.test;
    const double train_frac = ratios.train / total;
    const double val_frac = ratios.validation / total;

    SplitBundle out{empty_like(log), empty_like(log), empty_like(log)};
    for (const auto& events : log.by_user()) {
        const std::size_t k = events.size();
        std::size_t n_train = k;
        std::size_t n_val = 0;
        if (k >= 3) {
            // Small epsilon keeps exact products such as 0.8 * 10 from flooring to 7.
            n_train = static_cast<std::size_t>(std::floor(train_frac * static_cast<double>(k) + 1e-9));
            n_val = static_cast<std::size_t>(std::llround(val_frac * static_cast<double>(k)));
            n_train = std::max<std::size_t>(n_train, 1);
            n_val = std::min(n_val, k - n_train);
        }
        for (std::size_t i = 0; i < k; ++i) {
            if (i < n_train) {
                out.train.events.push_back(events[i]);
            } else if (i < n_train + n_val) {
                out.validation.events.push_back(events[i]);
            } else {
                out.test.events.push_back(events[i]);
            }
        }
    }
    return out;
}

std::vector<UserSequence> build_sequences(const InteractionLog& train, std::size_t length) {
    if (length == 0) {
        throw std::invalid_argument("sequence length must be at least 1");
    }
    std::vector<UserSequence> out;
    const auto groups = train.by_user();
    std::size_t skipped = 0;
    for (std::size_t u = 0; u < groups.size(); ++u) {
        const auto& events = groups[u];
        if (events.empty()) {
            ++skipped;
            continue;
        }
        UserSequence seq;
        seq.user = static_cast<UserId>(u);
        seq.items.assign(length, kPad);
        seq.pad_mask.assign(length, true);
        const std::size_t take = std::min(length, events.size());
        const std::size_t first = events.size() - take;
        const std::size_t offset = length - take;
        for (std::size_t i = 0; i < take; ++i) {
            seq.items[offset + i] = events[first + i].item;
            seq.pad_mask[offset + i] = false;
        }
        out.push_back(std::move(seq));
    }
    if (skipped > 0) {
        log::warn(fmt::format("build_sequences: {} users without train events excluded", skipped));
    }
    return out;
}

PopularityTable popularity(const InteractionLog& train) {
    if (train.events.empty()) {
        throw EmptyDatasetError("popularity needs a nonempty train split");
    }
    std::vector<double> counts(static_cast<std::size_t>(train.n_items), 0.0);
    for (const auto& e : train.events) {
        counts[static_cast<std::size_t>(e.item)] += 1.0;
    }
    const double max_count = *std::max_element(counts.begin(), counts.end());
    for (auto& c : counts) {
        c /= max_count;
    }
    return PopularityTable{std::move(counts)};
}

std::vector<double> popularity_deviation(const UserSequence& seq, const PopularityTable& pop) {
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < seq.items.size(); ++i) {
        if (!seq.pad_mask[i]) {
            sum += pop[seq.items[i]];
            ++n;
        }
    }
    if (n == 0) {
        throw std::invalid_argument("popularity_deviation: sequence is all padding");
    }
    const double mean = sum / static_cast<double>(n);
    std::vector<double> out(seq.items.size(), std::numeric_limits<double>::quiet_NaN());
    for (std::size_t i = 0; i < seq.items.size(); ++i) {
        if (!seq.pad_mask[i]) {
            out[i] = pop[seq.items[i]] - mean;
        }
    }
    return out;
}

DatasetStats dataset_stats(const SplitBundle& split) {
    return DatasetStats{split.train.n_users, split.train.n_items, split.train.events.size(),
                        split.validation.events.size(), split.test.events.size()};
}

void write_events(const std::filesystem::path& path, const InteractionLog& log) {
    std::ofstream out(path);
    if (!out) {
        throw Error(fmt::format("cannot write {}", path.string()));
    }
    for (const auto& e : log.events) {
        out << fmt::format("{}\t{}\t{}\t{}\n", e.user, e.item, e.rating, e.timestamp);
    }
}

namespace {

void write_id_map(const std::filesystem::path& path, const std::vector<std::int64_t>& raw) {
    std::ofstream out(path);
    for (std::size_t i = 0; i < raw.size(); ++i) {
        out << i << '\t' << raw[i] << '\n';
    }
}

std::vector<std::int64_t> read_id_map(const std::filesystem::path& path) {
    std::vector<std::int64_t> raw;
    std::ifstream in(path);
    std::int64_t dense = 0;
    std::int64_t id = 0;
    while (in >> dense >> id) {
        raw.push_back(id);
    }
    return raw;
}

InteractionLog read_dense(const std::filesystem::path& path, std::int32_t n_users, std::int32_t n_items) {
    std::ifstream in(path);
    if (!in) {
        throw Error(fmt::format("cannot open {}", path.string()));
    }
    InteractionLog log;
    log.n_users = n_users;
    log.n_items = n_items;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) {
            continue;
        }
        const auto fields = split_fields(trim(line));
        Interaction e;
        if (fields.size() < 4 || !parse_number(fields[0], e.user) || !parse_number(fields[1], e.item) ||
            !parse_number(fields[2], e.rating) || !parse_timestamp(fields[3], e.timestamp)) {
            throw ParseError(path.string(), line_no, "malformed split row");
        }
        if (e.user < 0 || e.user >= n_users || e.item < 0 || e.item >= n_items) {
            throw ParseError(path.string(), line_no, "dense id out of range");
        }
        log.events.push_back(e);
    }
    return log;
}

}  // namespace

void write_split(const std::filesystem::path& dir, const SplitBundle& split) {
    std::filesystem::create_directories(dir);
    write_events(dir / "train.tsv", split.train);
    write_events(dir / "validation.tsv", split.validation);
    write_events(dir / "test.tsv", split.test);
    write_id_map(dir / "users.tsv", split.train.raw_user_ids);
    write_id_map(dir / "items.tsv", split.train.raw_item_ids);
    const auto stats = dataset_stats(split);
    nlohmann::json j = {{"n_users", stats.n_users}, {"n_items", stats.n_items}, {"n_train", stats.n_train},
                        {"n_val", stats.n_val},     {"n_test", stats.n_test}};
    std::ofstream(dir / "stats.json") << j.dump(2) << '\n';
}

SplitBundle read_split(const std::filesystem::path& dir) {
    std::ifstream in(dir / "stats.json");
    if (!in) {
        throw Error(fmt::format("no stats.json in {}", dir.string()));
    }
    const auto j = nlohmann::json::parse(in);
    const auto n_users = j.at("n_users").get<std::int32_t>();
    const auto n_items = j.at("n_items").get<std::int32_t>();
    SplitBundle out{read_dense(dir / "train.tsv", n_users, n_items),
                    read_dense(dir / "validation.tsv", n_users, n_items), read_dense(dir / "test.tsv", n_users, n_items)};
    const auto users = read_id_map(dir / "users.tsv");
    const auto items = read_id_map(dir / "items.tsv");
    for (auto* log : {&out.train, &out.validation, &out.test}) {
        log->raw_user_ids = users;
        log->raw_item_ids = items;
    }
    return out;
}

}  // namespace cdrec
