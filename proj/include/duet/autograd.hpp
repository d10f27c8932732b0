#pragma once

// Minimal reverse-mode differentiation over dense row-major matrices.
// Every op builds a node holding its value and a closure that pushes the
// node's gradient into its inputs. Graph construction is skipped while a
// NoGradGuard is alive on the current thread.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include <Eigen/Core>

namespace duet::ag {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;

    Matrix& grad_buffer();
};

class Var {
  public:
    Var() = default;
    explicit Var(Matrix value, bool requires_grad = false);
    static Var scalar(double v);

    bool defined() const { return node_ != nullptr; }
    const Matrix& value() const { return node_->value; }
    Matrix& mutable_value() { return node_->value; }
    /// Empty until a backward pass reaches this node.
    const Matrix& grad() const { return node_->grad; }
    Matrix& mutable_grad() { return node_->grad_buffer(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    void zero_grad();
    Eigen::Index rows() const { return node_->value.rows(); }
    Eigen::Index cols() const { return node_->value.cols(); }
    double item() const;

    const std::shared_ptr<Node>& node() const { return node_; }
    /// Independent leaf with a copy of the value.
    Var clone() const;

  private:
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}
    std::shared_ptr<Node> node_;
    friend Var make_result(Matrix value, std::vector<Var> inputs, std::function<void(Node&)> backward);
};

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
  public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool previous_;
};
bool grad_enabled();

Var make_result(Matrix value, std::vector<Var> inputs, std::function<void(Node&)> backward);

/// Seeds d(loss)/d(loss) = 1 and propagates through the graph.
void backward(const Var& loss);

Var constant(Matrix value);
Var stop_gradient(const Var& x);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
/// a (n x m) + row (1 x m) broadcast over rows.
Var add_row(const Var& a, const Var& row);
Var matmul(const Var& a, const Var& b);
/// x W^T (+ bias row); W is out x in.
Var linear(const Var& x, const Var& weight, const Var* bias = nullptr);
/// As linear, one matrix-vector product per row: a row's result does not depend
/// on how many other rows are in the batch.
Var linear_rowwise(const Var& x, const Var& weight, const Var* bias = nullptr);

Var relu(const Var& x);
Var gelu(const Var& x);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);

/// Rows of `table` selected by ids.
Var embedding(const Var& table, std::span<const std::int32_t> ids);
/// Columns of `a` selected by ids, returned as rows (ids.size() x a.rows()).
Var gather_cols(const Var& a, std::span<const std::int32_t> ids);

/// Multi-head scaled dot-product attention with a causal mask. q, k, v are T x width.
Var causal_attention(const Var& q, const Var& k, const Var& v, int heads);

Var log_softmax(const Var& logits);
/// Mean of -logp[i, targets[i]] over rows where mask[i] is set.
Var masked_nll(const Var& logp, std::span<const std::int32_t> targets, std::span<const std::uint8_t> mask);

Var mse(const Var& a, const Var& b);
Var sum_all(const Var& x);

/// Reinterprets the row-major data with a new shape of equal size.
Var reshape(const Var& x, Eigen::Index rows, Eigen::Index cols);
Var slice_cols(const Var& x, Eigen::Index begin, Eigen::Index count);
Var concat_cols(const std::vector<Var>& parts);

/// 1-D convolution lowering: output row t holds input rows [t*stride - pad, t*stride - pad + kernel)
/// concatenated (zeros outside the range).
Var im2col(const Var& x, int kernel, int stride, int pad);
/// Nearest-neighbour repeat of each row `factor` times.
Var upsample_rows(const Var& x, int factor);

/// out[n] = sum_d books[d or 0][codes[n][d]]; `codes` is n x depth row-major.
Var gather_sum(const std::vector<Var>& books, std::span<const std::int32_t> codes, int depth);

}  // namespace duet::ag
