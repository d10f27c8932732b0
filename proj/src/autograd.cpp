#include "duet/autograd.hpp"

#include <cmath>
#include <limits>
#include <unordered_set>

#include "duet/errors.hpp"

namespace duet::ag {

namespace {

thread_local bool g_grad_enabled = true;

void require_same_shape(const Var& a, const Var& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ValidationError(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                              std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                              std::to_string(b.cols()) + ")");
    }
}

Node& in(Node& self, std::size_t i) { return *self.inputs[i]; }

}  // namespace

Matrix& Node::grad_buffer() {
    if (grad.rows() != value.rows() || grad.cols() != value.cols()) grad = Matrix::Zero(value.rows(), value.cols());
    return grad;
}

Var::Var(Matrix value, bool requires_grad) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
}

Var Var::scalar(double v) {
    Matrix m(1, 1);
    m(0, 0) = v;
    return Var(std::move(m));
}

void Var::zero_grad() {
    if (node_) node_->grad.resize(0, 0);
}

double Var::item() const {
    if (rows() != 1 || cols() != 1) throw ValidationError("item() requires a 1x1 value");
    return node_->value(0, 0);
}

Var Var::clone() const { return Var(node_->value, node_->requires_grad); }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

Var make_result(Matrix value, std::vector<Var> inputs, std::function<void(Node&)> backward) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    bool any = false;
    if (g_grad_enabled) {
        for (const auto& v : inputs) any = any || v.requires_grad();
    }
    if (any) {
        node->requires_grad = true;
        node->inputs.reserve(inputs.size());
        for (auto& v : inputs) node->inputs.push_back(v.node_);
        node->backward = std::move(backward);
    }
    return Var(std::move(node));
}

void backward(const Var& loss) {
    if (!loss.requires_grad()) return;
    // Iterative post-order DFS yields a topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    visited.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node* child = node->inputs[next++].get();
            if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    Node& root = *loss.node();
    root.grad_buffer().setOnes();
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward && n->grad.size() > 0) n->backward(*n);
    }
}

Var constant(Matrix value) { return Var(std::move(value), false); }

Var stop_gradient(const Var& x) { return Var(x.value(), false); }

Var add(const Var& a, const Var& b) {
    require_same_shape(a, b, "add");
    return make_result(a.value() + b.value(), {a, b}, [](Node& self) {
        if (in(self, 0).requires_grad) in(self, 0).grad_buffer() += self.grad;
        if (in(self, 1).requires_grad) in(self, 1).grad_buffer() += self.grad;
    });
}

Var sub(const Var& a, const Var& b) {
    require_same_shape(a, b, "sub");
    return make_result(a.value() - b.value(), {a, b}, [](Node& self) {
        if (in(self, 0).requires_grad) in(self, 0).grad_buffer() += self.grad;
        if (in(self, 1).requires_grad) in(self, 1).grad_buffer() -= self.grad;
    });
}

Var mul(const Var& a, const Var& b) {
    require_same_shape(a, b, "mul");
    return make_result(a.value().cwiseProduct(b.value()), {a, b}, [](Node& self) {
        Node& x = in(self, 0);
        Node& y = in(self, 1);
        if (x.requires_grad) x.grad_buffer() += self.grad.cwiseProduct(y.value);
        if (y.requires_grad) y.grad_buffer() += self.grad.cwiseProduct(x.value);
    });
}

Var scale(const Var& a, double s) {
    return make_result(a.value() * s, {a}, [s](Node& self) { in(self, 0).grad_buffer() += self.grad * s; });
}

Var add_row(const Var& a, const Var& row) {
    if (row.rows() != 1 || row.cols() != a.cols()) throw ValidationError("add_row: row shape mismatch");
    Matrix out = a.value();
    out.rowwise() += row.value().row(0);
    return make_result(std::move(out), {a, row}, [](Node& self) {
        if (in(self, 0).requires_grad) in(self, 0).grad_buffer() += self.grad;
        if (in(self, 1).requires_grad) in(self, 1).grad_buffer() += self.grad.colwise().sum();
    });
}

Var matmul(const Var& a, const Var& b) {
    if (a.cols() != b.rows()) throw ValidationError("matmul: inner dimension mismatch");
    Matrix out = a.value() * b.value();
    return make_result(std::move(out), {a, b}, [](Node& self) {
        Node& x = in(self, 0);
        Node& y = in(self, 1);
        if (x.requires_grad) x.grad_buffer().noalias() += self.grad * y.value.transpose();
        if (y.requires_grad) y.grad_buffer().noalias() += x.value.transpose() * self.grad;
    });
}

namespace {

Var linear_impl(const Var& x, const Var& weight, const Var* bias, bool rowwise) {
    if (x.cols() != weight.cols()) {
        throw ValidationError("linear: input width " + std::to_string(x.cols()) + " does not match weight " +
                              std::to_string(weight.rows()) + "x" + std::to_string(weight.cols()));
    }
    Matrix out(x.rows(), weight.rows());
    if (rowwise) {
        for (Eigen::Index r = 0; r < x.rows(); ++r) out.row(r).noalias() = x.value().row(r) * weight.value().transpose();
    } else {
        out.noalias() = x.value() * weight.value().transpose();
    }
    std::vector<Var> inputs{x, weight};
    if (bias) {
        if (bias->rows() != 1 || bias->cols() != weight.rows()) throw ValidationError("linear: bias shape mismatch");
        out.rowwise() += bias->value().row(0);
        inputs.push_back(*bias);
    }
    return make_result(std::move(out), std::move(inputs), [](Node& self) {
        Node& xn = in(self, 0);
        Node& wn = in(self, 1);
        if (xn.requires_grad) xn.grad_buffer().noalias() += self.grad * wn.value;
        if (wn.requires_grad) wn.grad_buffer().noalias() += self.grad.transpose() * xn.value;
        if (self.inputs.size() > 2 && in(self, 2).requires_grad) {
            in(self, 2).grad_buffer() += self.grad.colwise().sum();
        }
    });
}

}  // namespace

Var linear(const Var& x, const Var& weight, const Var* bias) { return linear_impl(x, weight, bias, false); }

Var linear_rowwise(const Var& x, const Var& weight, const Var* bias) { return linear_impl(x, weight, bias, true); }

Var relu(const Var& x) {
    return make_result(x.value().cwiseMax(0.0), {x}, [](Node& self) {
        Node& xn = in(self, 0);
        xn.grad_buffer() += (xn.value.array() > 0.0).select(self.grad, 0.0);
    });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Var gelu(const Var& x) {
    const auto& xv = x.value();
    Matrix out(xv.rows(), xv.cols());
    for (Eigen::Index i = 0; i < xv.size(); ++i) {
        const double v = xv.data()[i];
        out.data()[i] = 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
    }
    return make_result(std::move(out), {x}, [](Node& self) {
        Node& xn = in(self, 0);
        Matrix& g = xn.grad_buffer();
        for (Eigen::Index i = 0; i < xn.value.size(); ++i) {
            const double v = xn.value.data()[i];
            const double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
            const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
            g.data()[i] += self.grad.data()[i] * d;
        }
    });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
    const auto& xv = x.value();
    const Eigen::Index n = xv.rows(), d = xv.cols();
    if (gamma.rows() != 1 || gamma.cols() != d || beta.rows() != 1 || beta.cols() != d) {
        throw ValidationError("layer_norm: parameter shape mismatch");
    }
    Matrix xhat(n, d);
    Eigen::VectorXd inv_std(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double mu = xv.row(i).mean();
        const double var = (xv.row(i).array() - mu).square().mean();
        inv_std(i) = 1.0 / std::sqrt(var + eps);
        xhat.row(i) = (xv.row(i).array() - mu) * inv_std(i);
    }
    Matrix out = xhat.array().rowwise() * gamma.value().row(0).array();
    out.rowwise() += beta.value().row(0);
    return make_result(std::move(out), {x, gamma, beta}, [xhat, inv_std](Node& self) {
        Node& xn = in(self, 0);
        Node& gn = in(self, 1);
        Node& bn = in(self, 2);
        if (gn.requires_grad) gn.grad_buffer() += self.grad.cwiseProduct(xhat).colwise().sum();
        if (bn.requires_grad) bn.grad_buffer() += self.grad.colwise().sum();
        if (xn.requires_grad) {
            Matrix dxhat = self.grad.array().rowwise() * gn.value.row(0).array();
            Matrix& g = xn.grad_buffer();
            const double inv_d = 1.0 / static_cast<double>(xhat.cols());
            for (Eigen::Index i = 0; i < xhat.rows(); ++i) {
                const double m1 = dxhat.row(i).sum() * inv_d;
                const double m2 = dxhat.row(i).dot(xhat.row(i)) * inv_d;
                g.row(i).array() += inv_std(i) * (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2);
            }
        }
    });
}

Var embedding(const Var& table, std::span<const std::int32_t> ids) {
    const auto& tv = table.value();
    Matrix out(static_cast<Eigen::Index>(ids.size()), tv.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= tv.rows()) throw ValidationError("embedding: id out of range");
        out.row(static_cast<Eigen::Index>(i)) = tv.row(ids[i]);
    }
    std::vector<std::int32_t> idv(ids.begin(), ids.end());
    return make_result(std::move(out), {table}, [idv = std::move(idv)](Node& self) {
        Matrix& g = in(self, 0).grad_buffer();
        for (std::size_t i = 0; i < idv.size(); ++i) g.row(idv[i]) += self.grad.row(static_cast<Eigen::Index>(i));
    });
}

Var gather_cols(const Var& a, std::span<const std::int32_t> ids) {
    const auto& av = a.value();
    Matrix out(static_cast<Eigen::Index>(ids.size()), av.rows());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= av.cols()) throw ValidationError("gather_cols: id out of range");
        out.row(static_cast<Eigen::Index>(i)) = av.col(ids[i]).transpose();
    }
    std::vector<std::int32_t> idv(ids.begin(), ids.end());
    return make_result(std::move(out), {a}, [idv = std::move(idv)](Node& self) {
        Matrix& g = in(self, 0).grad_buffer();
        for (std::size_t i = 0; i < idv.size(); ++i) {
            g.col(idv[i]) += self.grad.row(static_cast<Eigen::Index>(i)).transpose();
        }
    });
}

Var causal_attention(const Var& q, const Var& k, const Var& v, int heads) {
    require_same_shape(q, k, "causal_attention");
    require_same_shape(q, v, "causal_attention");
    const Eigen::Index t_len = q.rows(), width = q.cols();
    if (heads <= 0 || width % heads != 0) throw ValidationError("causal_attention: width not divisible by heads");
    const Eigen::Index hd = width / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
    const auto& qv = q.value();
    const auto& kv = k.value();
    const auto& vv = v.value();

    // probs[h] row i holds weights over keys 0..i; entries above the diagonal stay zero.
    auto probs = std::make_shared<std::vector<Matrix>>(heads, Matrix::Zero(t_len, t_len));
    Matrix out = Matrix::Zero(t_len, width);
    Eigen::VectorXd scores;
    for (int h = 0; h < heads; ++h) {
        const auto qh = qv.middleCols(h * hd, hd);
        const auto kh = kv.middleCols(h * hd, hd);
        const auto vh = vv.middleCols(h * hd, hd);
        Matrix& p = (*probs)[h];
        for (Eigen::Index i = 0; i < t_len; ++i) {
            scores.noalias() = kh.topRows(i + 1) * qh.row(i).transpose();
            scores *= inv_sqrt;
            const double mx = scores.maxCoeff();
            scores = (scores.array() - mx).exp();
            scores /= scores.sum();
            p.row(i).head(i + 1) = scores.transpose();
            out.row(i).segment(h * hd, hd).noalias() = scores.transpose() * vh.topRows(i + 1);
        }
    }
    return make_result(std::move(out), {q, k, v}, [probs, heads, hd, inv_sqrt](Node& self) {
        Node& qn = in(self, 0);
        Node& kn = in(self, 1);
        Node& vn = in(self, 2);
        const Eigen::Index t_len = self.value.rows();
        Matrix dq = Matrix::Zero(t_len, self.value.cols());
        Matrix dk = Matrix::Zero(t_len, self.value.cols());
        Matrix dv = Matrix::Zero(t_len, self.value.cols());
        Eigen::RowVectorXd dp, ds;
        for (int h = 0; h < heads; ++h) {
            const auto qh = qn.value.middleCols(h * hd, hd);
            const auto kh = kn.value.middleCols(h * hd, hd);
            const auto vh = vn.value.middleCols(h * hd, hd);
            const Matrix& p = (*probs)[h];
            for (Eigen::Index i = 0; i < t_len; ++i) {
                const auto g = self.grad.row(i).segment(h * hd, hd);
                const auto pi = p.row(i).head(i + 1);
                dv.middleCols(h * hd, hd).topRows(i + 1).noalias() += pi.transpose() * g;
                dp.noalias() = g * vh.topRows(i + 1).transpose();
                const double dot = dp.dot(pi);
                ds = pi.array() * (dp.array() - dot);
                ds *= inv_sqrt;
                dq.row(i).segment(h * hd, hd).noalias() += ds * kh.topRows(i + 1);
                dk.middleCols(h * hd, hd).topRows(i + 1).noalias() += ds.transpose() * qh.row(i);
            }
        }
        if (qn.requires_grad) qn.grad_buffer() += dq;
        if (kn.requires_grad) kn.grad_buffer() += dk;
        if (vn.requires_grad) vn.grad_buffer() += dv;
    });
}

Var log_softmax(const Var& logits) {
    const auto& x = logits.value();
    Matrix out(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const double mx = x.row(i).maxCoeff();
        const double lse = mx + std::log((x.row(i).array() - mx).exp().sum());
        out.row(i) = x.row(i).array() - lse;
    }
    return make_result(std::move(out), {logits}, [](Node& self) {
        Matrix& g = in(self, 0).grad_buffer();
        for (Eigen::Index i = 0; i < self.value.rows(); ++i) {
            const double s = self.grad.row(i).sum();
            g.row(i).array() += self.grad.row(i).array() - self.value.row(i).array().exp() * s;
        }
    });
}

Var masked_nll(const Var& logp, std::span<const std::int32_t> targets, std::span<const std::uint8_t> mask) {
    const auto& lp = logp.value();
    if (static_cast<Eigen::Index>(targets.size()) != lp.rows() || mask.size() != targets.size()) {
        throw ValidationError("masked_nll: targets and mask must match the number of positions");
    }
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        if (!mask[i]) continue;
        if (targets[i] < 0 || targets[i] >= lp.cols()) throw ValidationError("masked_nll: target out of range");
        total -= lp(static_cast<Eigen::Index>(i), targets[i]);
        ++count;
    }
    if (count == 0) throw ValidationError("masked_nll: empty loss mask");
    Matrix out(1, 1);
    out(0, 0) = total / static_cast<double>(count);
    std::vector<std::int32_t> tv(targets.begin(), targets.end());
    std::vector<std::uint8_t> mv(mask.begin(), mask.end());
    return make_result(std::move(out), {logp}, [tv = std::move(tv), mv = std::move(mv), count](Node& self) {
        Matrix& g = in(self, 0).grad_buffer();
        const double w = self.grad(0, 0) / static_cast<double>(count);
        for (std::size_t i = 0; i < tv.size(); ++i) {
            if (mv[i]) g(static_cast<Eigen::Index>(i), tv[i]) -= w;
        }
    });
}

Var mse(const Var& a, const Var& b) {
    require_same_shape(a, b, "mse");
    Matrix diff = a.value() - b.value();
    const double n = static_cast<double>(diff.size());
    Matrix out(1, 1);
    out(0, 0) = diff.squaredNorm() / n;
    return make_result(std::move(out), {a, b}, [diff = std::move(diff), n](Node& self) {
        const double w = 2.0 * self.grad(0, 0) / n;
        if (in(self, 0).requires_grad) in(self, 0).grad_buffer() += w * diff;
        if (in(self, 1).requires_grad) in(self, 1).grad_buffer() -= w * diff;
    });
}

Var sum_all(const Var& x) {
    Matrix out(1, 1);
    out(0, 0) = x.value().sum();
    return make_result(std::move(out), {x}, [](Node& self) { in(self, 0).grad_buffer().array() += self.grad(0, 0); });
}

Var reshape(const Var& x, Eigen::Index rows, Eigen::Index cols) {
    if (rows * cols != x.value().size()) throw ValidationError("reshape: size mismatch");
    Matrix out = Eigen::Map<const Matrix>(x.value().data(), rows, cols);
    return make_result(std::move(out), {x}, [](Node& self) {
        Node& xn = in(self, 0);
        Matrix& g = xn.grad_buffer();
        g += Eigen::Map<const Matrix>(self.grad.data(), g.rows(), g.cols());
    });
}

Var slice_cols(const Var& x, Eigen::Index begin, Eigen::Index count) {
    if (begin < 0 || count < 0 || begin + count > x.cols()) throw ValidationError("slice_cols: range out of bounds");
    Matrix out = x.value().middleCols(begin, count);
    return make_result(std::move(out), {x}, [begin, count](Node& self) {
        in(self, 0).grad_buffer().middleCols(begin, count) += self.grad;
    });
}

Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw ValidationError("concat_cols: no inputs");
    Eigen::Index total = 0;
    for (const auto& p : parts) {
        if (p.rows() != parts.front().rows()) throw ValidationError("concat_cols: row count mismatch");
        total += p.cols();
    }
    Matrix out(parts.front().rows(), total);
    Eigen::Index off = 0;
    for (const auto& p : parts) {
        out.middleCols(off, p.cols()) = p.value();
        off += p.cols();
    }
    return make_result(std::move(out), parts, [](Node& self) {
        Eigen::Index off = 0;
        for (auto& input : self.inputs) {
            const Eigen::Index c = input->value.cols();
            if (input->requires_grad) input->grad_buffer() += self.grad.middleCols(off, c);
            off += c;
        }
    });
}

Var im2col(const Var& x, int kernel, int stride, int pad) {
    const auto& xv = x.value();
    const Eigen::Index t_in = xv.rows(), c = xv.cols();
    const Eigen::Index t_out = (t_in + 2 * pad - kernel) / stride + 1;
    if (kernel <= 0 || stride <= 0 || pad < 0 || t_out <= 0) throw LengthError("im2col: input too short for kernel");
    Matrix out = Matrix::Zero(t_out, kernel * c);
    for (Eigen::Index t = 0; t < t_out; ++t) {
        for (int kk = 0; kk < kernel; ++kk) {
            const Eigen::Index src = t * stride - pad + kk;
            if (src >= 0 && src < t_in) out.row(t).segment(kk * c, c) = xv.row(src);
        }
    }
    return make_result(std::move(out), {x}, [kernel, stride, pad](Node& self) {
        Node& xn = in(self, 0);
        Matrix& g = xn.grad_buffer();
        const Eigen::Index t_in = xn.value.rows(), c = xn.value.cols();
        for (Eigen::Index t = 0; t < self.value.rows(); ++t) {
            for (int kk = 0; kk < kernel; ++kk) {
                const Eigen::Index src = t * stride - pad + kk;
                if (src >= 0 && src < t_in) g.row(src) += self.grad.row(t).segment(kk * c, c);
            }
        }
    });
}

Var upsample_rows(const Var& x, int factor) {
    if (factor < 1) throw ValidationError("upsample_rows: factor must be >= 1");
    const auto& xv = x.value();
    Matrix out(xv.rows() * factor, xv.cols());
    for (Eigen::Index t = 0; t < xv.rows(); ++t) {
        for (int f = 0; f < factor; ++f) out.row(t * factor + f) = xv.row(t);
    }
    return make_result(std::move(out), {x}, [factor](Node& self) {
        Matrix& g = in(self, 0).grad_buffer();
        for (Eigen::Index t = 0; t < g.rows(); ++t) {
            for (int f = 0; f < factor; ++f) g.row(t) += self.grad.row(t * factor + f);
        }
    });
}

Var gather_sum(const std::vector<Var>& books, std::span<const std::int32_t> codes, int depth) {
    if (books.empty() || depth <= 0 || codes.size() % static_cast<std::size_t>(depth) != 0) {
        throw ValidationError("gather_sum: inconsistent codes");
    }
    const bool shared = books.size() == 1;
    if (!shared && static_cast<int>(books.size()) != depth) throw ValidationError("gather_sum: book count mismatch");
    const Eigen::Index n = static_cast<Eigen::Index>(codes.size()) / depth;
    const Eigen::Index dim = books.front().cols();
    Matrix out = Matrix::Zero(n, dim);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (int d = 0; d < depth; ++d) {
            const auto& book = books[shared ? 0 : d].value();
            const std::int32_t c = codes[static_cast<std::size_t>(i * depth + d)];
            if (c < 0 || c >= book.rows()) throw ValidationError("gather_sum: code out of range");
            out.row(i) += book.row(c);
        }
    }
    std::vector<std::int32_t> cv(codes.begin(), codes.end());
    return make_result(std::move(out), books, [cv = std::move(cv), depth, shared](Node& self) {
        const Eigen::Index n = self.value.rows();
        for (Eigen::Index i = 0; i < n; ++i) {
            for (int d = 0; d < depth; ++d) {
                Node& book = in(self, shared ? 0 : static_cast<std::size_t>(d));
                if (!book.requires_grad) continue;
                book.grad_buffer().row(cv[static_cast<std::size_t>(i * depth + d)]) += self.grad.row(i);
            }
        }
    });
}

}  // namespace duet::ag
