#include "cdrec/denoiser.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <fmt/format.h>

namespace cdrec {

int DenoiserConfig::time_steps() const { return static_cast<int>(std::floor(horizon)) + 1; }

void DenoiserConfig::validate() const {
    if (n_users <= 0 || n_items <= 0) {
        throw std::invalid_argument("denoiser needs at least one user and one item");
    }
    if (dim <= 0 || layers < 0 || heads <= 0 || seq_len <= 0 || ff_mult <= 0) {
        throw std::invalid_argument("denoiser dimensions must be positive");
    }
    if (dim % heads != 0) {
        throw std::invalid_argument(fmt::format("dim {} is not divisible by heads {}", dim, heads));
    }
    if (!(horizon > 0.0) || !(proj_temperature > 0.0)) {
        throw std::invalid_argument("denoiser horizon and projection temperature must be positive");
    }
}

void to_json(nlohmann::json& j, const DenoiserConfig& c) {
    j = nlohmann::json{{"n_users", c.n_users},   {"n_items", c.n_items},       {"dim", c.dim},
                       {"layers", c.layers},     {"heads", c.heads},           {"seq_len", c.seq_len},
                       {"ff_mult", c.ff_mult},   {"horizon", c.horizon},       {"epsilon", c.epsilon},
                       {"proj_temperature", c.proj_temperature}, {"init_scale", c.init_scale}};
}

void from_json(const nlohmann::json& j, DenoiserConfig& c) {
    j.at("n_users").get_to(c.n_users);
    j.at("n_items").get_to(c.n_items);
    j.at("dim").get_to(c.dim);
    j.at("layers").get_to(c.layers);
    j.at("heads").get_to(c.heads);
    j.at("seq_len").get_to(c.seq_len);
    j.at("ff_mult").get_to(c.ff_mult);
    j.at("horizon").get_to(c.horizon);
    j.at("epsilon").get_to(c.epsilon);
    j.at("proj_temperature").get_to(c.proj_temperature);
    j.at("init_scale").get_to(c.init_scale);
}

void DenoiserParams::add(std::string name, Matrix value) {
    names_.push_back(std::move(name));
    tensors_.push_back(std::move(value));
}

DenoiserParams DenoiserParams::shaped(const DenoiserConfig& config) {
    config.validate();
    DenoiserParams p;
    p.config_ = config;
    const int d = config.dim;
    const int ff = config.dim * config.ff_mult;
    p.add("item_table", Matrix::Zero(config.n_items, d));
    p.add("user_table", Matrix::Zero(config.n_users, d));
    p.add("mask_embedding", Matrix::Zero(1, d));
    p.add("pad_embedding", Matrix::Zero(1, d));
    p.add("time_table", Matrix::Zero(config.time_steps(), d));
    p.add("position_table", Matrix::Zero(config.seq_len, d));
    p.add("final_ln.gamma", Matrix::Ones(1, d));
    p.add("final_ln.beta", Matrix::Zero(1, d));
    for (int l = 0; l < config.layers; ++l) {
        const std::string pre = fmt::format("layer{}.", l);
        p.add(pre + "ln1.gamma", Matrix::Ones(1, d));
        p.add(pre + "ln1.beta", Matrix::Zero(1, d));
        for (const char* w : {"wq", "wk", "wv", "wo"}) {
            p.add(pre + w, Matrix::Zero(d, d));
            p.add(pre + "b" + std::string(w + 1), Matrix::Zero(1, d));
        }
        p.add(pre + "ln2.gamma", Matrix::Ones(1, d));
        p.add(pre + "ln2.beta", Matrix::Zero(1, d));
        p.add(pre + "w1", Matrix::Zero(d, ff));
        p.add(pre + "b1", Matrix::Zero(1, ff));
        p.add(pre + "w2", Matrix::Zero(ff, d));
        p.add(pre + "b2", Matrix::Zero(1, d));
    }
    return p;
}

DenoiserParams DenoiserParams::initialize(const DenoiserConfig& config, const Matrix& user_table,
                                          const Matrix& item_table, Rng& rng) {
    DenoiserParams p = shaped(config);
    if (user_table.rows() != config.n_users || user_table.cols() != config.dim) {
        throw DimensionError(fmt::format("user table is {}x{}, expected {}x{}", user_table.rows(), user_table.cols(),
                                         config.n_users, config.dim));
    }
    if (item_table.rows() != config.n_items || item_table.cols() != config.dim) {
        throw DimensionError(fmt::format("item table is {}x{}, expected {}x{}", item_table.rows(), item_table.cols(),
                                         config.n_items, config.dim));
    }
    p.tensors_[kItemTable] = item_table;
    p.tensors_[kUserTable] = user_table;
    auto fill = [&rng](Matrix& m, double stddev) {
        for (Eigen::Index i = 0; i < m.size(); ++i) {
            m.data()[i] = stddev * rng.normal();
        }
    };
    fill(p.tensors_[kMaskEmbedding], config.init_scale);
    fill(p.tensors_[kPadEmbedding], config.init_scale);
    fill(p.tensors_[kTimeTable], config.init_scale);
    fill(p.tensors_[kPositionTable], config.init_scale);
    for (int l = 0; l < config.layers; ++l) {
        const std::size_t base = layer_base(l);
        for (std::size_t slot : {kWq, kWk, kWv, kWo, kW1, kW2}) {
            Matrix& w = p.tensors_[base + slot];
            fill(w, std::sqrt(2.0 / static_cast<double>(w.rows() + w.cols())));
        }
    }
    return p;
}

DenoiserParams DenoiserParams::zeros_like() const {
    DenoiserParams p = *this;
    p.set_zero();
    return p;
}

void DenoiserParams::set_zero() {
    for (auto& t : tensors_) {
        t.setZero();
    }
}

std::size_t DenoiserParams::parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) {
        n += static_cast<std::size_t>(t.size());
    }
    return n;
}

bool DenoiserParams::all_finite() const {
    for (const auto& t : tensors_) {
        if (!t.allFinite()) {
            return false;
        }
    }
    return true;
}

bool DenoiserParams::same_shape(const DenoiserParams& other) const {
    if (tensors_.size() != other.tensors_.size()) {
        return false;
    }
    for (std::size_t i = 0; i < tensors_.size(); ++i) {
        if (tensors_[i].rows() != other.tensors_[i].rows() || tensors_[i].cols() != other.tensors_[i].cols()) {
            return false;
        }
    }
    return true;
}

int quantize_time(double t, const DenoiserConfig& config) {
    const long q = std::lround(t);
    return static_cast<int>(std::clamp<long>(q, 0, config.time_steps() - 1));
}

DenoiserGraph::DenoiserGraph(ag::Graph& graph, const DenoiserParams& params, DenoiserParams* grads)
    : graph_(graph), params_(params), grads_(graph.tracking() ? grads : nullptr), leaves_(params.tensor_count()) {
    if (grads_ != nullptr && !grads_->same_shape(params)) {
        throw std::invalid_argument("gradient buffer does not match parameter shapes");
    }
}

ag::Var DenoiserGraph::leaf(std::size_t slot) {
    if (!leaves_[slot]) {
        leaves_[slot] = graph_.parameter(params_.tensor(slot), grads_ ? &grads_->tensor(slot) : nullptr);
    }
    return *leaves_[slot];
}

ag::Var DenoiserGraph::gather(std::size_t slot, std::span<const int> rows) {
    return graph_.gather_rows(params_.tensor(slot), grads_ ? &grads_->tensor(slot) : nullptr, rows);
}

ag::Var DenoiserGraph::attention(ag::Var x, std::size_t base) {
    using P = DenoiserParams;
    const auto& cfg = params_.config();
    const int head_dim = cfg.dim / cfg.heads;
    auto q = graph_.add_row_broadcast(graph_.matmul(x, leaf(base + P::kWq)), leaf(base + P::kBq));
    auto k = graph_.add_row_broadcast(graph_.matmul(x, leaf(base + P::kWk)), leaf(base + P::kBk));
    auto v = graph_.add_row_broadcast(graph_.matmul(x, leaf(base + P::kWv)), leaf(base + P::kBv));
    std::vector<ag::Var> heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
    for (int h = 0; h < cfg.heads; ++h) {
        auto qh = graph_.slice_cols(q, h * head_dim, head_dim);
        auto kh = graph_.slice_cols(k, h * head_dim, head_dim);
        auto vh = graph_.slice_cols(v, h * head_dim, head_dim);
        auto weights = graph_.softmax_rows(graph_.scale(graph_.matmul_nt(qh, kh), inv_sqrt));
        heads.push_back(graph_.matmul(weights, vh));
    }
    auto merged = cfg.heads == 1 ? heads.front() : graph_.concat_cols(heads);
    return graph_.add_row_broadcast(graph_.matmul(merged, leaf(base + P::kWo)), leaf(base + P::kBo));
}

ag::Var DenoiserGraph::encode(std::span<const ItemId> items, UserId user, double t) {
    using P = DenoiserParams;
    const auto& cfg = params_.config();
    if (user < 0 || user >= cfg.n_users) {
        throw std::out_of_range(fmt::format("unknown user id {}", user));
    }
    if (static_cast<int>(items.size()) != cfg.seq_len) {
        throw std::invalid_argument(fmt::format("sequence length {} does not match model length {}", items.size(),
                                                cfg.seq_len));
    }
    std::vector<ag::Var> rows;
    rows.reserve(items.size() + 1);
    const int u = user;
    rows.push_back(gather(P::kUserTable, std::span<const int>(&u, 1)));
    const int zero = 0;
    for (ItemId v : items) {
        if (is_item(v)) {
            if (v >= cfg.n_items) {
                throw std::out_of_range(fmt::format("unknown item id {}", v));
            }
            rows.push_back(gather(P::kItemTable, std::span<const int>(&v, 1)));
        } else if (v == kMask) {
            rows.push_back(gather(P::kMaskEmbedding, std::span<const int>(&zero, 1)));
        } else {
            rows.push_back(gather(P::kPadEmbedding, std::span<const int>(&zero, 1)));
        }
    }
    auto x = graph_.concat_rows(rows);

    std::vector<int> positions(items.size());
    for (std::size_t i = 0; i < positions.size(); ++i) {
        positions[i] = static_cast<int>(i);
    }
    auto pos = graph_.concat_rows({graph_.constant(Matrix::Zero(1, cfg.dim)), gather(P::kPositionTable, positions)});
    x = graph_.add(x, pos);

    const int t_index = quantize_time(t, cfg);
    auto time = gather(P::kTimeTable, std::span<const int>(&t_index, 1));

    for (int l = 0; l < cfg.layers; ++l) {
        const std::size_t base = P::layer_base(l);
        // The time embedding joins the user slot at the input of every layer.
        x = graph_.add_to_row(x, time, 0);
        auto h = graph_.layer_norm(x, leaf(base + P::kLn1Gamma), leaf(base + P::kLn1Beta));
        x = graph_.add(x, attention(h, base));
        auto h2 = graph_.layer_norm(x, leaf(base + P::kLn2Gamma), leaf(base + P::kLn2Beta));
        auto ff = graph_.gelu(graph_.add_row_broadcast(graph_.matmul(h2, leaf(base + P::kW1)), leaf(base + P::kB1)));
        ff = graph_.add_row_broadcast(graph_.matmul(ff, leaf(base + P::kW2)), leaf(base + P::kB2));
        x = graph_.add(x, ff);
    }
    if (cfg.layers == 0) {
        x = graph_.add_to_row(x, time, 0);
    }
    return graph_.layer_norm(x, leaf(P::kFinalGamma), leaf(P::kFinalBeta));
}

ag::Var DenoiserGraph::project(ag::Var encoded) {
    const auto& cfg = params_.config();
    auto positions = graph_.slice_rows(encoded, 1, cfg.seq_len);
    const Eigen::VectorXd norms = graph_.value(positions).rowwise().norm();
    if ((norms.array() < 1e-12).any()) {
        log::warn("project: zero-norm encoder output, using uniform logits for that position");
    }
    auto unit = graph_.normalize_rows(positions);
    if (!unit_items_) {
        unit_items_ = graph_.normalize_rows(leaf(DenoiserParams::kItemTable));
    }
    return graph_.scale(graph_.matmul_nt(unit, *unit_items_), 1.0 / cfg.proj_temperature);
}

Matrix encode(const DenoiserParams& params, std::span<const ItemId> items, UserId user, double t) {
    ag::Graph graph(false);
    DenoiserGraph model(graph, params, nullptr);
    return graph.value(model.encode(items, user, t));
}

PositionDistribution project_items(const Matrix& encoded_positions, const Matrix& item_table, double temperature) {
    if (encoded_positions.cols() != item_table.cols()) {
        throw DimensionError("project_items: embedding width mismatch");
    }
    Matrix items = item_table;
    for (Eigen::Index v = 0; v < items.rows(); ++v) {
        const double n = items.row(v).norm();
        items.row(v) = n > 0.0 ? RowVector(items.row(v) / n) : RowVector::Zero(items.cols());
    }
    Matrix logits(encoded_positions.rows(), item_table.rows());
    for (Eigen::Index i = 0; i < encoded_positions.rows(); ++i) {
        const double n = encoded_positions.row(i).norm();
        if (n < 1e-12) {
            log::warn("project_items: zero-norm encoder output, using uniform logits");
            logits.row(i).setZero();
            continue;
        }
        logits.row(i) = (items * encoded_positions.row(i).transpose()).transpose() / (n * temperature);
    }
    return PositionDistribution{ag::softmax_rows(logits), std::vector<bool>(static_cast<std::size_t>(logits.rows()), true)};
}

DiffusionState decode_argmax(const PositionDistribution& dist, std::span<const ItemId> items, double t) {
    DiffusionState out{std::vector<ItemId>(items.begin(), items.end()), t};
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (!dist.active[i]) {
            continue;
        }
        Eigen::Index best = 0;
        dist.probs.row(static_cast<Eigen::Index>(i)).maxCoeff(&best);
        out.items[i] = static_cast<ItemId>(best);
    }
    return out;
}

ConsistencyOutput consistency_apply(const DenoiserParams& params, std::span<const ItemId> items, double t, UserId user) {
    const auto& cfg = params.config();
    if (user < 0 || user >= cfg.n_users) {
        throw std::out_of_range(fmt::format("unknown user id {}", user));
    }
    std::vector<bool> active(items.size());
    for (std::size_t i = 0; i < items.size(); ++i) {
        active[i] = items[i] != kPad;
    }
    if (t <= cfg.epsilon) {
        Matrix probs = Matrix::Zero(static_cast<Eigen::Index>(items.size()), cfg.n_items);
        for (std::size_t i = 0; i < items.size(); ++i) {
            if (is_item(items[i])) {
                probs(static_cast<Eigen::Index>(i), items[i]) = 1.0;
            } else {
                probs.row(static_cast<Eigen::Index>(i)).setConstant(1.0 / cfg.n_items);
            }
        }
        return ConsistencyOutput{PositionDistribution{std::move(probs), std::move(active)},
                                 DiffusionState{std::vector<ItemId>(items.begin(), items.end()), t}};
    }
    ag::Graph graph(false);
    DenoiserGraph model(graph, params, nullptr);
    PositionDistribution dist{ag::softmax_rows(graph.value(model.logits(items, user, t))), std::move(active)};
    auto decoded = decode_argmax(dist, items, t);
    return ConsistencyOutput{std::move(dist), std::move(decoded)};
}

namespace {

constexpr char kMagic[8] = {'C', 'D', 'R', 'E', 'C', 'C', 'K', 'P'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void write_pod(std::ostream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) {
        throw Error("checkpoint truncated");
    }
    return v;
}

void write_string(std::ostream& out, const std::string& s) {
    write_pod<std::uint64_t>(out, s.size());
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& in) {
    const auto n = read_pod<std::uint64_t>(in);
    std::string s(n, '\0');
    in.read(s.data(), static_cast<std::streamsize>(n));
    if (!in) {
        throw Error("checkpoint truncated");
    }
    return s;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const DenoiserParams& params, const nlohmann::json& metadata) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw Error(fmt::format("cannot write checkpoint {}", path.string()));
    }
    out.write(kMagic, sizeof(kMagic));
    write_pod(out, kCheckpointVersion);
    write_string(out, nlohmann::json(params.config()).dump());
    write_string(out, metadata.dump());
    write_pod<std::uint64_t>(out, params.tensor_count());
    for (std::size_t i = 0; i < params.tensor_count(); ++i) {
        const Matrix& t = params.tensor(i);
        write_string(out, params.name(i));
        write_pod<std::int64_t>(out, t.rows());
        write_pod<std::int64_t>(out, t.cols());
        out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    }
    if (!out) {
        throw Error(fmt::format("failed writing checkpoint {}", path.string()));
    }
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw Error(fmt::format("cannot open checkpoint {}", path.string()));
    }
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw Error(fmt::format("{} is not a checkpoint", path.string()));
    }
    const auto version = read_pod<std::uint32_t>(in);
    if (version != kCheckpointVersion) {
        throw Error(fmt::format("unsupported checkpoint version {}", version));
    }
    const auto config = nlohmann::json::parse(read_string(in)).get<DenoiserConfig>();
    Checkpoint ck{DenoiserParams::shaped(config), nlohmann::json::parse(read_string(in))};
    const auto count = read_pod<std::uint64_t>(in);
    if (count != ck.params.tensor_count()) {
        throw Error("checkpoint tensor count does not match its config");
    }
    for (std::size_t i = 0; i < count; ++i) {
        const auto name = read_string(in);
        const auto rows = read_pod<std::int64_t>(in);
        const auto cols = read_pod<std::int64_t>(in);
        Matrix& t = ck.params.tensor(i);
        if (name != ck.params.name(i) || rows != t.rows() || cols != t.cols()) {
            throw Error(fmt::format("checkpoint tensor {} does not match the expected layout", name));
        }
        in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
        if (!in) {
            throw Error("checkpoint truncated");
        }
    }
    return ck;
}

}  // namespace cdrec
