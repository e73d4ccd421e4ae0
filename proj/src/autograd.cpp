#include "cdrec/autograd.hpp"

#include <cmath>
#include <stdexcept>

namespace cdrec::ag {

namespace {

constexpr double kGeluScale = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluCubic = 0.044715;

}  // namespace

Matrix log_softmax_rows(const Matrix& logits) {
    Matrix out(logits.rows(), logits.cols());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const double mx = logits.row(i).maxCoeff();
        const double lse = mx + std::log((logits.row(i).array() - mx).exp().sum());
        out.row(i) = logits.row(i).array() - lse;
    }
    return out;
}

Matrix softmax_rows(const Matrix& logits) {
    Matrix out(logits.rows(), logits.cols());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const double mx = logits.row(i).maxCoeff();
        out.row(i) = (logits.row(i).array() - mx).exp();
        out.row(i) /= out.row(i).sum();
    }
    return out;
}

Var Graph::push(Matrix value, std::function<void(Graph&, std::size_t)> backward) {
    nodes_.push_back(Node{std::move(value), Matrix(), track_ ? std::move(backward) : nullptr});
    return Var{nodes_.size() - 1};
}

void Graph::accumulate(std::size_t id, const Matrix& g) {
    auto& node = nodes_[id];
    if (node.grad.size() == 0) {
        node.grad = g;
    } else {
        node.grad += g;
    }
}

Var Graph::constant(Matrix value) { return push(std::move(value)); }

Var Graph::parameter(const Matrix& value, Matrix* grad) {
    if (grad == nullptr) {
        return push(value);
    }
    return push(value, [grad](Graph& g, std::size_t self) { *grad += g.nodes_[self].grad; });
}

Var Graph::gather_rows(const Matrix& table, Matrix* grad, std::span<const int> rows) {
    Matrix out(static_cast<Eigen::Index>(rows.size()), table.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] < 0 || rows[i] >= table.rows()) {
            throw std::out_of_range("gather_rows: row index out of range");
        }
        out.row(static_cast<Eigen::Index>(i)) = table.row(rows[i]);
    }
    if (grad == nullptr) {
        return push(std::move(out));
    }
    std::vector<int> idx(rows.begin(), rows.end());
    return push(std::move(out), [grad, idx = std::move(idx)](Graph& g, std::size_t self) {
        const auto& up = g.nodes_[self].grad;
        for (std::size_t i = 0; i < idx.size(); ++i) {
            grad->row(idx[i]) += up.row(static_cast<Eigen::Index>(i));
        }
    });
}

Var Graph::matmul(Var a, Var b) {
    Matrix out = value(a) * value(b);
    return push(std::move(out), [a, b](Graph& g, std::size_t self) {
        const auto& up = g.nodes_[self].grad;
        g.accumulate(a.id, up * g.value(b).transpose());
        g.accumulate(b.id, g.value(a).transpose() * up);
    });
}

Var Graph::matmul_nt(Var a, Var b) {
    Matrix out = value(a) * value(b).transpose();
    return push(std::move(out), [a, b](Graph& g, std::size_t self) {
        const auto& up = g.nodes_[self].grad;
        g.accumulate(a.id, up * g.value(b));
        g.accumulate(b.id, up.transpose() * g.value(a));
    });
}

Var Graph::add(Var a, Var b) {
    if (value(a).rows() != value(b).rows() || value(a).cols() != value(b).cols()) {
        throw std::invalid_argument("add: shape mismatch");
    }
    Matrix out = value(a) + value(b);
    return push(std::move(out), [a, b](Graph& g, std::size_t self) {
        const Matrix up = g.nodes_[self].grad;
        g.accumulate(a.id, up);
        g.accumulate(b.id, up);
    });
}

Var Graph::add_row_broadcast(Var a, Var row) {
    Matrix out = value(a);
    out.rowwise() += value(row).row(0);
    return push(std::move(out), [a, row](Graph& g, std::size_t self) {
        const Matrix up = g.nodes_[self].grad;
        g.accumulate(a.id, up);
        g.accumulate(row.id, up.colwise().sum());
    });
}

Var Graph::add_to_row(Var a, Var row, int r) {
    Matrix out = value(a);
    out.row(r) += value(row).row(0);
    return push(std::move(out), [a, row, r](Graph& g, std::size_t self) {
        const Matrix up = g.nodes_[self].grad;
        g.accumulate(a.id, up);
        g.accumulate(row.id, up.row(r));
    });
}

Var Graph::scale(Var a, double s) {
    Matrix out = value(a) * s;
    return push(std::move(out), [a, s](Graph& g, std::size_t self) { g.accumulate(a.id, g.nodes_[self].grad * s); });
}

Var Graph::layer_norm(Var x, Var gamma, Var beta, double eps) {
    const Matrix& in = value(x);
    const Eigen::Index cols = in.cols();
    Matrix xhat(in.rows(), cols);
    Eigen::VectorXd inv_std(in.rows());
    for (Eigen::Index i = 0; i < in.rows(); ++i) {
        const double mean = in.row(i).mean();
        const double var = (in.row(i).array() - mean).square().mean();
        inv_std(i) = 1.0 / std::sqrt(var + eps);
        xhat.row(i) = (in.row(i).array() - mean) * inv_std(i);
    }
    Matrix out = xhat.array().rowwise() * value(gamma).row(0).array();
    out.rowwise() += value(beta).row(0);
    return push(std::move(out), [x, gamma, beta, xhat, inv_std, cols](Graph& g, std::size_t self) {
        const Matrix& up = g.nodes_[self].grad;
        g.accumulate(gamma.id, (up.array() * xhat.array()).colwise().sum().matrix());
        g.accumulate(beta.id, up.colwise().sum());
        Matrix dxhat = up.array().rowwise() * g.value(gamma).row(0).array();
        Matrix dx(dxhat.rows(), cols);
        for (Eigen::Index i = 0; i < dxhat.rows(); ++i) {
            const double mean_d = dxhat.row(i).mean();
            const double mean_dx = (dxhat.row(i).array() * xhat.row(i).array()).mean();
            dx.row(i) = (dxhat.row(i).array() - mean_d - xhat.row(i).array() * mean_dx) * inv_std(i);
        }
        g.accumulate(x.id, dx);
    });
}

Var Graph::gelu(Var x) {
    const Matrix& in = value(x);
    Matrix out(in.rows(), in.cols());
    Matrix deriv(in.rows(), in.cols());
    for (Eigen::Index i = 0; i < in.size(); ++i) {
        const double v = in.data()[i];
        const double inner = kGeluScale * (v + kGeluCubic * v * v * v);
        const double th = std::tanh(inner);
        out.data()[i] = 0.5 * v * (1.0 + th);
        deriv.data()[i] =
            0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * kGeluScale * (1.0 + 3.0 * kGeluCubic * v * v);
    }
    return push(std::move(out), [x, deriv](Graph& g, std::size_t self) {
        g.accumulate(x.id, (g.nodes_[self].grad.array() * deriv.array()).matrix());
    });
}

Var Graph::softmax_rows(Var x) {
    Matrix out = ag::softmax_rows(value(x));
    return push(std::move(out), [x](Graph& g, std::size_t self) {
        const Matrix& y = g.nodes_[self].value;
        const Matrix& up = g.nodes_[self].grad;
        const Eigen::VectorXd dots = (up.array() * y.array()).rowwise().sum();
        Matrix dx = y.array() * (up.colwise() - dots).array();
        g.accumulate(x.id, dx);
    });
}

Var Graph::normalize_rows(Var x, double eps) {
    const Matrix& in = value(x);
    Matrix out = Matrix::Zero(in.rows(), in.cols());
    Eigen::VectorXd norms = in.rowwise().norm();
    for (Eigen::Index i = 0; i < in.rows(); ++i) {
        if (!(norms(i) < eps)) {
            out.row(i) = in.row(i) / norms(i);
        }
    }
    return push(std::move(out), [x, norms, eps](Graph& g, std::size_t self) {
        const Matrix& y = g.nodes_[self].value;
        const Matrix& up = g.nodes_[self].grad;
        Matrix dx = Matrix::Zero(y.rows(), y.cols());
        for (Eigen::Index i = 0; i < y.rows(); ++i) {
            if (!(norms(i) < eps)) {
                const double d = y.row(i).dot(up.row(i));
                dx.row(i) = (up.row(i) - d * y.row(i)) / norms(i);
            }
        }
        g.accumulate(x.id, dx);
    });
}

Var Graph::mean_rows(Var x) {
    const Matrix& in = value(x);
    const auto n = static_cast<double>(in.rows());
    Matrix out = in.colwise().sum() / n;
    const Eigen::Index rows = in.rows();
    return push(std::move(out), [x, rows, n](Graph& g, std::size_t self) {
        Matrix dx = g.nodes_[self].grad.replicate(rows, 1) / n;
        g.accumulate(x.id, dx);
    });
}

Var Graph::slice_rows(Var x, int start, int count) {
    Matrix out = value(x).middleRows(start, count);
    return push(std::move(out), [x, start, count](Graph& g, std::size_t self) {
        Matrix dx = Matrix::Zero(g.value(x).rows(), g.value(x).cols());
        dx.middleRows(start, count) = g.nodes_[self].grad;
        g.accumulate(x.id, dx);
    });
}

Var Graph::slice_cols(Var x, int start, int count) {
    Matrix out = value(x).middleCols(start, count);
    return push(std::move(out), [x, start, count](Graph& g, std::size_t self) {
        Matrix dx = Matrix::Zero(g.value(x).rows(), g.value(x).cols());
        dx.middleCols(start, count) = g.nodes_[self].grad;
        g.accumulate(x.id, dx);
    });
}

Var Graph::concat_rows(const std::vector<Var>& parts) {
    Eigen::Index rows = 0;
    const Eigen::Index cols = value(parts.front()).cols();
    for (auto p : parts) {
        if (value(p).cols() != cols) {
            throw std::invalid_argument("concat_rows: column mismatch");
        }
        rows += value(p).rows();
    }
    Matrix out(rows, cols);
    Eigen::Index at = 0;
    for (auto p : parts) {
        out.middleRows(at, value(p).rows()) = value(p);
        at += value(p).rows();
    }
    return push(std::move(out), [parts](Graph& g, std::size_t self) {
        const Matrix up = g.nodes_[self].grad;
        Eigen::Index pos = 0;
        for (auto p : parts) {
            const Eigen::Index r = g.value(p).rows();
            g.accumulate(p.id, up.middleRows(pos, r));
            pos += r;
        }
    });
}

Var Graph::concat_cols(const std::vector<Var>& parts) {
    const Eigen::Index rows = value(parts.front()).rows();
    Eigen::Index cols = 0;
    for (auto p : parts) {
        if (value(p).rows() != rows) {
            throw std::invalid_argument("concat_cols: row mismatch");
        }
        cols += value(p).cols();
    }
    Matrix out(rows, cols);
    Eigen::Index at = 0;
    for (auto p : parts) {
        out.middleCols(at, value(p).cols()) = value(p);
        at += value(p).cols();
    }
    return push(std::move(out), [parts](Graph& g, std::size_t self) {
        const Matrix up = g.nodes_[self].grad;
        Eigen::Index pos = 0;
        for (auto p : parts) {
            const Eigen::Index c = g.value(p).cols();
            g.accumulate(p.id, up.middleCols(pos, c));
            pos += c;
        }
    });
}

Var Graph::cross_entropy_rows(Var logits, std::span<const int> targets, std::span<const double> weights) {
    const Matrix& z = value(logits);
    if (static_cast<Eigen::Index>(targets.size()) != z.rows() || weights.size() != targets.size()) {
        throw std::invalid_argument("cross_entropy_rows: length mismatch");
    }
    const Matrix logp = log_softmax_rows(z);
    double loss = 0.0;
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
        if (weights[static_cast<std::size_t>(i)] != 0.0) {
            loss -= weights[static_cast<std::size_t>(i)] * logp(i, targets[static_cast<std::size_t>(i)]);
        }
    }
    Matrix out(1, 1);
    out(0, 0) = loss;
    std::vector<int> t(targets.begin(), targets.end());
    std::vector<double> w(weights.begin(), weights.end());
    return push(std::move(out), [logits, logp, t = std::move(t), w = std::move(w)](Graph& g, std::size_t self) {
        const double up = g.nodes_[self].grad(0, 0);
        Matrix dz = logp.array().exp();
        for (Eigen::Index i = 0; i < dz.rows(); ++i) {
            const double wi = w[static_cast<std::size_t>(i)];
            if (wi == 0.0) {
                dz.row(i).setZero();
                continue;
            }
            dz(i, t[static_cast<std::size_t>(i)]) -= 1.0;
            dz.row(i) *= wi * up;
        }
        g.accumulate(logits.id, dz);
    });
}

Var Graph::kl_rows(Var logits, const Matrix& target, std::span<const double> weights) {
    const Matrix& z = value(logits);
    if (target.rows() != z.rows() || target.cols() != z.cols() || static_cast<Eigen::Index>(weights.size()) != z.rows()) {
        throw std::invalid_argument("kl_rows: shape mismatch");
    }
    const Matrix logp = log_softmax_rows(z);
    double loss = 0.0;
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
        const double wi = weights[static_cast<std::size_t>(i)];
        if (wi == 0.0) {
            continue;
        }
        double row = 0.0;
        for (Eigen::Index j = 0; j < z.cols(); ++j) {
            const double q = target(i, j);
            if (q > 0.0) {
                row += q * (std::log(q) - logp(i, j));
            }
        }
        loss += wi * row;
    }
    Matrix out(1, 1);
    out(0, 0) = loss;
    std::vector<double> w(weights.begin(), weights.end());
    return push(std::move(out), [logits, logp, target, w = std::move(w)](Graph& g, std::size_t self) {
        const double up = g.nodes_[self].grad(0, 0);
        Matrix dz(logp.rows(), logp.cols());
        for (Eigen::Index i = 0; i < dz.rows(); ++i) {
            const double mass = target.row(i).sum();
            dz.row(i) = (logp.row(i).array().exp() * mass - target.row(i).array()) * (w[static_cast<std::size_t>(i)] * up);
        }
        g.accumulate(logits.id, dz);
    });
}

void Graph::backward(Var loss) {
    if (!track_) {
        throw std::logic_error("backward on a graph without gradient tracking");
    }
    if (value(loss).size() != 1) {
        throw std::invalid_argument("backward: loss must be a scalar");
    }
    nodes_[loss.id].grad = Matrix::Ones(1, 1);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
        auto& node = nodes_[i];
        if (node.backward && node.grad.size() > 0) {
            node.backward(*this, i);
        }
    }
}

}  // namespace cdrec::ag
