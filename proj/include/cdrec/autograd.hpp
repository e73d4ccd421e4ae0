#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "cdrec/types.hpp"

// Minimal reverse-mode differentiation over dense row-major matrices.
//
// A Graph records every operation as a node. Leaves that belong to a model
// are bound to an external gradient buffer; backward() pushes the seed
// gradient through the tape in reverse creation order and accumulates into
// those buffers. A graph built with tracking disabled only computes values.
namespace cdrec::ag {

struct Var {
    std::size_t id = 0;
};

class Graph {
public:
    explicit Graph(bool track_gradients = true) : track_(track_gradients) {}

    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    bool tracking() const { return track_; }

    const Matrix& value(Var v) const { return nodes_[v.id].value; }
    double scalar(Var v) const { return nodes_[v.id].value(0, 0); }
    std::size_t size() const { return nodes_.size(); }

    Var constant(Matrix value);

    // Whole-tensor leaf. grad may be null (no gradient wanted).
    Var parameter(const Matrix& value, Matrix* grad);

    // Selected rows of a table (rows may repeat); gradients scatter-add back.
    Var gather_rows(const Matrix& table, Matrix* grad, std::span<const int> rows);

    Var matmul(Var a, Var b);     // a * b
    Var matmul_nt(Var a, Var b);  // a * b^T
    Var add(Var a, Var b);
    Var add_row_broadcast(Var a, Var row);  // a + 1 * row
    Var add_to_row(Var a, Var row, int r);  // a with row r incremented by row
    Var scale(Var a, double s);

    Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
    Var gelu(Var x);
    Var softmax_rows(Var x);

    // x / ||x|| per row; rows with norm below eps map to zero with zero gradient.
    Var normalize_rows(Var x, double eps = 1e-12);
    Var mean_rows(Var x);  // 1 x cols

    Var slice_rows(Var x, int start, int count);
    Var slice_cols(Var x, int start, int count);
    Var concat_rows(const std::vector<Var>& parts);
    Var concat_cols(const std::vector<Var>& parts);

    // sum_i w_i * -log softmax(logits_i)[target_i]; a 1x1 node.
    Var cross_entropy_rows(Var logits, std::span<const int> targets, std::span<const double> weights);

    // sum_i w_i * KL(target_i || softmax(logits_i)); target rows are constants.
    Var kl_rows(Var logits, const Matrix& target, std::span<const double> weights);

    // Seeds d(loss)/d(loss) = 1 and runs the tape backwards. loss must be 1x1.
    void backward(Var loss);

private:
    struct Node {
        Matrix value;
        Matrix grad;
        std::function<void(Graph&, std::size_t)> backward;
    };

    Var push(Matrix value, std::function<void(Graph&, std::size_t)> backward = {});
    void accumulate(std::size_t id, const Matrix& g);
    bool has_grad(std::size_t id) const { return nodes_[id].grad.size() > 0; }

    bool track_;
    std::vector<Node> nodes_;
};

// Row-wise log-softmax, shared by the graph ops and plain loss evaluation.
Matrix log_softmax_rows(const Matrix& logits);
Matrix softmax_rows(const Matrix& logits);

}  // namespace cdrec::ag
