#pragma once
// Minimal reverse-mode differentiation over dense row-major matrices.
// Only the operations the denoiser needs are provided.

#include <Eigen/Dense>

#include <cmath>
#include <deque>
#include <functional>
#include <utility>
#include <vector>

namespace abloop::ad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class Tape;

struct Var {
    int id = -1;
};

class Tape {
public:
    Var leaf(Matrix value) { return push(std::move(value), nullptr); }

    const Matrix& value(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }

    // Gradient accumulated so far; zero-sized when nothing flowed into v.
    const Matrix& grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].grad; }

    void seed(Var v, const Matrix& g) { accumulate(v.id, g); }

    // Runs all recorded backward closures in reverse order.
    void backward() {
        for (int id = static_cast<int>(nodes_.size()) - 1; id >= 0; --id) {
            auto& n = nodes_[static_cast<std::size_t>(id)];
            if (n.backward && n.grad.size() > 0) n.backward(*this, n.grad);
        }
    }

    std::size_t size() const { return nodes_.size(); }

    // ----- operations

    Var matmul(Var a, Var b) {
        Matrix out = value(a) * value(b);
        return push(std::move(out), [a, b](Tape& t, const Matrix& g) {
            t.accumulate(a.id, g * t.value(b).transpose());
            t.accumulate(b.id, t.value(a).transpose() * g);
        });
    }

    // Adds a 1 x n row to every row of a.
    Var add_row(Var a, Var row) {
        Matrix out = value(a).rowwise() + value(row).row(0);
        return push(std::move(out), [a, row](Tape& t, const Matrix& g) {
            t.accumulate(a.id, g);
            t.accumulate(row.id, g.colwise().sum());
        });
    }

    Var add(Var a, Var b) {
        Matrix out = value(a) + value(b);
        return push(std::move(out), [a, b](Tape& t, const Matrix& g) {
            t.accumulate(a.id, g);
            t.accumulate(b.id, g);
        });
    }

    Var silu(Var a) {
        const Matrix& x = value(a);
        Matrix sig = (1.0 + (-x.array()).exp()).inverse().matrix();
        Matrix out = (x.array() * sig.array()).matrix();
        return push(std::move(out), [a, sig = std::move(sig)](Tape& t, const Matrix& g) {
            const Matrix& x = t.value(a);
            Matrix d = (sig.array() * (1.0 + x.array() * (1.0 - sig.array()))).matrix();
            t.accumulate(a.id, (g.array() * d.array()).matrix());
        });
    }

    // Row-wise normalization to zero mean and unit variance (no affine part).
    Var layer_norm(Var a, double eps = 1e-5) {
        const Matrix& x = value(a);
        const auto cols = static_cast<double>(x.cols());
        Eigen::VectorXd mean = x.rowwise().mean();
        Matrix centered = x.colwise() - mean;
        Eigen::VectorXd inv_std =
            ((centered.array().square().rowwise().sum() / cols) + eps).sqrt().inverse().matrix();
        Matrix out = centered.array().colwise() * inv_std.array();
        Matrix y = out;
        return push(std::move(out), [a, y = std::move(y), inv_std = std::move(inv_std), cols](Tape& t, const Matrix& g) {
            Eigen::VectorXd g_mean = g.rowwise().mean();
            Eigen::VectorXd gy_mean = (g.array() * y.array()).rowwise().sum().matrix() / cols;
            Matrix d = g.colwise() - g_mean;
            d -= (y.array().colwise() * gy_mean.array()).matrix();
            d = d.array().colwise() * inv_std.array();
            t.accumulate(a.id, d);
        });
    }

    Var gather_rows(Var a, std::vector<int> idx) {
        const Matrix& x = value(a);
        Matrix out(static_cast<Eigen::Index>(idx.size()), x.cols());
        for (std::size_t k = 0; k < idx.size(); ++k) out.row(static_cast<Eigen::Index>(k)) = x.row(idx[k]);
        return push(std::move(out), [a, idx = std::move(idx)](Tape& t, const Matrix& g) {
            Matrix d = Matrix::Zero(t.value(a).rows(), t.value(a).cols());
            for (std::size_t k = 0; k < idx.size(); ++k) d.row(idx[k]) += g.row(static_cast<Eigen::Index>(k));
            t.accumulate(a.id, d);
        });
    }

    // out[r] = mean of rows k with seg[k] == r; empty segments stay zero.
    Var segment_mean(Var a, std::vector<int> seg, int rows) {
        const Matrix& x = value(a);
        Matrix out = Matrix::Zero(rows, x.cols());
        std::vector<double> inv(static_cast<std::size_t>(rows), 0.0);
        for (int s : seg) inv[static_cast<std::size_t>(s)] += 1.0;
        for (auto& c : inv) c = c > 0.0 ? 1.0 / c : 0.0;
        for (std::size_t k = 0; k < seg.size(); ++k)
            out.row(seg[k]) += x.row(static_cast<Eigen::Index>(k)) * inv[static_cast<std::size_t>(seg[k])];
        return push(std::move(out), [a, seg = std::move(seg), inv = std::move(inv)](Tape& t, const Matrix& g) {
            Matrix d(static_cast<Eigen::Index>(seg.size()), g.cols());
            for (std::size_t k = 0; k < seg.size(); ++k)
                d.row(static_cast<Eigen::Index>(k)) = g.row(seg[k]) * inv[static_cast<std::size_t>(seg[k])];
            t.accumulate(a.id, d);
        });
    }

    Var concat_cols(Var a, Var b) {
        const Matrix& x = value(a);
        const Matrix& y = value(b);
        Matrix out(x.rows(), x.cols() + y.cols());
        out << x, y;
        const auto split = x.cols();
        return push(std::move(out), [a, b, split](Tape& t, const Matrix& g) {
            t.accumulate(a.id, g.leftCols(split));
            t.accumulate(b.id, g.rightCols(g.cols() - split));
        });
    }

private:
    struct Node {
        Matrix value;
        Matrix grad;
        std::function<void(Tape&, const Matrix&)> backward;
    };

    Var push(Matrix value, std::function<void(Tape&, const Matrix&)> backward) {
        nodes_.push_back({std::move(value), Matrix(), std::move(backward)});
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    template <typename Derived>
    void accumulate(int id, const Eigen::MatrixBase<Derived>& g) {
        auto& n = nodes_[static_cast<std::size_t>(id)];
        if (n.grad.size() == 0) n.grad = g;
        else n.grad += g;
    }

    std::deque<Node> nodes_;
};

}  // namespace abloop::ad
