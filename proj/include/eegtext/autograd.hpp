// Tape-based reverse-mode differentiation over 2-D matrices.
//
// A Tape records one forward evaluation. Every op appends a node holding its
// value and a closure that pushes the node's gradient into its parents.
// Parameters live outside the tape; their gradients are accumulated into
// Parameter::grad when backward() reaches the node that read them, so several
// tapes (one per training sequence) can contribute to one batch gradient.

#pragma once

#include "eegtext/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace eegtext {

template <typename T>
struct Parameter {
    std::string name;
    Matrix<T> value;
    Matrix<T> grad;

    Parameter() = default;
    Parameter(std::string n, Matrix<T> v) : name(std::move(n)), value(std::move(v)), grad(value.rows, value.cols) {}

    void zero_grad() {
        if (!grad.same_shape(value)) grad = Matrix<T>(value.rows, value.cols);
        grad.fill(T(0));
    }
};

/// Handle to a node on a Tape.
struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

template <typename T>
class Tape {
  public:
    Tape() { nodes_.reserve(256); }

    Var constant(Matrix<T> value) { return push(std::move(value), false, {}); }

    /// A differentiable input that is not a parameter (used to take gradients
    /// with respect to intermediate quantities such as latents).
    Var leaf(Matrix<T> value) { return push(std::move(value), true, {}); }

    Var param(Parameter<T>& p) {
        Var v = push(p.value, true, {});
        nodes_[v.id].param = &p;
        return v;
    }

    const Matrix<T>& value(Var v) const { return nodes_.at(v.id).value; }
    const Matrix<T>& grad(Var v) const { return nodes_.at(v.id).grad; }
    T scalar(Var v) const {
        const auto& m = value(v);
        if (m.size() != 1) throw std::invalid_argument("Tape::scalar: node is not 1x1");
        return m.data[0];
    }
    size_t size() const { return nodes_.size(); }

    /// Seeds d(out)/d(out) = 1 and propagates to every node that requires a
    /// gradient. Parameter gradients are accumulated (not overwritten).
    void backward(Var out) {
        Node& o = nodes_.at(out.id);
        if (o.value.size() != 1) throw std::invalid_argument("Tape::backward: output must be a scalar");
        o.grad = Matrix<T>(1, 1, T(1));
        for (int i = out.id; i >= 0; --i) {
            Node& n = nodes_[i];
            if (!n.requires_grad || n.grad.empty()) continue;
            if (n.backward) n.backward(*this, i);
            Node& after = nodes_[i];
            if (after.param) {
                Parameter<T>& p = *after.param;
                if (!p.grad.same_shape(p.value)) p.grad = Matrix<T>(p.value.rows, p.value.cols);
                as_eigen(p.grad) += as_eigen(after.grad);
            }
        }
    }

    // ---- elementwise and linear algebra ---------------------------------

    Var matmul(Var a, Var b) {
        const auto& A = value(a);
        const auto& B = value(b);
        if (A.cols != B.rows)
            throw std::invalid_argument("matmul: " + shape_str(A.rows, A.cols) + " x " + shape_str(B.rows, B.cols));
        Matrix<T> out(A.rows, B.cols);
        as_eigen(out).noalias() = as_eigen(A) * as_eigen(B);
        return push(std::move(out), any_grad(a, b), [a, b](Tape& t, int self) {
            const auto& g = t.nodes_[self].grad;
            if (t.needs(a)) as_eigen(t.accum(a)).noalias() += as_eigen(g) * as_eigen(t.value(b)).transpose();
            if (t.needs(b)) as_eigen(t.accum(b)).noalias() += as_eigen(t.value(a)).transpose() * as_eigen(g);
        });
    }

    /// a * b^T
    Var matmul_nt(Var a, Var b) {
        const auto& A = value(a);
        const auto& B = value(b);
        if (A.cols != B.cols)
            throw std::invalid_argument("matmul_nt: " + shape_str(A.rows, A.cols) + " x " + shape_str(B.rows, B.cols) +
                                        "^T");
        Matrix<T> out(A.rows, B.rows);
        as_eigen(out).noalias() = as_eigen(A) * as_eigen(B).transpose();
        return push(std::move(out), any_grad(a, b), [a, b](Tape& t, int self) {
            const auto& g = t.nodes_[self].grad;
            if (t.needs(a)) as_eigen(t.accum(a)).noalias() += as_eigen(g) * as_eigen(t.value(b));
            if (t.needs(b)) as_eigen(t.accum(b)).noalias() += as_eigen(g).transpose() * as_eigen(t.value(a));
        });
    }

    Var add(Var a, Var b) {
        require_same_shape(value(a), value(b), "add");
        Matrix<T> out = value(a);
        as_eigen(out) += as_eigen(value(b));
        return push(std::move(out), any_grad(a, b), [a, b](Tape& t, int self) {
            const auto& g = t.nodes_[self].grad;
            if (t.needs(a)) as_eigen(t.accum(a)) += as_eigen(g);
            if (t.needs(b)) as_eigen(t.accum(b)) += as_eigen(g);
        });
    }

    Var sub(Var a, Var b) {
        require_same_shape(value(a), value(b), "sub");
        Matrix<T> out = value(a);
        as_eigen(out) -= as_eigen(value(b));
        return push(std::move(out), any_grad(a, b), [a, b](Tape& t, int self) {
            const auto& g = t.nodes_[self].grad;
            if (t.needs(a)) as_eigen(t.accum(a)) += as_eigen(g);
            if (t.needs(b)) as_eigen(t.accum(b)) -= as_eigen(g);
        });
    }

    /// Adds a 1 x cols row vector to every row of a.
    Var add_row(Var a, Var row) {
        const auto& A = value(a);
        const auto& R = value(row);
        if (R.rows != 1 || R.cols != A.cols) throw std::invalid_argument("add_row: row vector shape mismatch");
        Matrix<T> out = A;
        as_eigen(out).rowwise() += as_eigen(R).row(0);
        return push(std::move(out), any_grad(a, row), [a, row](Tape& t, int self) {
            const auto& g = t.nodes_[self].grad;
            if (t.needs(a)) as_eigen(t.accum(a)) += as_eigen(g);
            if (t.needs(row)) as_eigen(t.accum(row)) += as_eigen(g).colwise().sum();
        });
    }

    Var scale(Var a, T s) {
        Matrix<T> out = value(a);
        as_eigen(out) *= s;
        return push(std::move(out), needs(a), [a, s](Tape& t, int self) {
            as_eigen(t.accum(a)) += s * as_eigen(t.nodes_[self].grad);
        });
    }

    Var relu(Var a) {
        Matrix<T> out = value(a);
        for (auto& v : out.data) v = v > T(0) ? v : T(0);
        return push(std::move(out), needs(a), [a](Tape& t, int self) {
            const auto& g = t.nodes_[self].grad;
            const auto& x = t.value(a);
            auto& ga = t.accum(a);
            for (size_t i = 0; i < g.size(); ++i)
                if (x.data[i] > T(0)) ga.data[i] += g.data[i];
        });
    }

    /// tanh approximation of GELU.
    Var gelu(Var a) {
        const auto& x = value(a);
        Matrix<T> out(x.rows, x.cols);
        for (size_t i = 0; i < x.size(); ++i) {
            const T v = x.data[i];
            out.data[i] = T(0.5) * v * (T(1) + std::tanh(gelu_k * (v + T(0.044715) * v * v * v)));
        }
        return push(std::move(out), needs(a), [a](Tape& t, int self) {
            const auto& g = t.nodes_[self].grad;
            const auto& xv = t.value(a);
            auto& ga = t.accum(a);
            for (size_t i = 0; i < g.size(); ++i) {
                const T v = xv.data[i];
                const T u = gelu_k * (v + T(0.044715) * v * v * v);
                const T th = std::tanh(u);
                const T du = gelu_k * (T(1) + T(3) * T(0.044715) * v * v);
                ga.data[i] += g.data[i] * (T(0.5) * (T(1) + th) + T(0.5) * v * (T(1) - th * th) * du);
            }
        });
    }

    /// Row-wise layer normalization followed by an affine map with 1 x cols
    /// gain and bias.
    Var layer_norm(Var a, Var gain, Var bias, T eps = T(1e-5)) {
        const auto& X = value(a);
        const int n = X.cols;
        if (value(gain).cols != n || value(bias).cols != n) throw std::invalid_argument("layer_norm: affine shape");
        Matrix<T> normed(X.rows, n);
        std::vector<T> inv_std(X.rows);
        for (int r = 0; r < X.rows; ++r) {
            auto x = X.row(r);
            T mean = std::accumulate(x.begin(), x.end(), T(0)) / T(n);
            T var = 0;
            for (T v : x) var += (v - mean) * (v - mean);
            var /= T(n);
            inv_std[r] = T(1) / std::sqrt(var + eps);
            for (int c = 0; c < n; ++c) normed(r, c) = (x[c] - mean) * inv_std[r];
        }
        Matrix<T> out(X.rows, n);
        const auto& G = value(gain);
        const auto& B = value(bias);
        for (int r = 0; r < X.rows; ++r)
            for (int c = 0; c < n; ++c) out(r, c) = normed(r, c) * G.data[c] + B.data[c];
        const bool rg = needs(a) || needs(gain) || needs(bias);
        return push(std::move(out), rg,
                    [a, gain, bias, normed = std::move(normed), inv_std = std::move(inv_std)](Tape& t, int self) {
                        const auto& g = t.nodes_[self].grad;
                        const int rows = g.rows, cols = g.cols;
                        if (t.needs(gain)) {
                            auto& gg = t.accum(gain);
                            for (int r = 0; r < rows; ++r)
                                for (int c = 0; c < cols; ++c) gg.data[c] += g(r, c) * normed(r, c);
                        }
                        if (t.needs(bias)) {
                            auto& gb = t.accum(bias);
                            for (int r = 0; r < rows; ++r)
                                for (int c = 0; c < cols; ++c) gb.data[c] += g(r, c);
                        }
                        if (t.needs(a)) {
                            const auto& G = t.value(gain);
                            auto& ga = t.accum(a);
                            std::vector<T> dy(cols);
                            for (int r = 0; r < rows; ++r) {
                                T mean_dy = 0, mean_dyy = 0;
                                for (int c = 0; c < cols; ++c) {
                                    dy[c] = g(r, c) * G.data[c];
                                    mean_dy += dy[c];
                                    mean_dyy += dy[c] * normed(r, c);
                                }
                                mean_dy /= T(cols);
                                mean_dyy /= T(cols);
                                for (int c = 0; c < cols; ++c)
                                    ga(r, c) += inv_std[r] * (dy[c] - mean_dy - normed(r, c) * mean_dyy);
                            }
                        }
                    });
    }

    /// Row-wise softmax. `allowed` (rows*cols, optional) marks entries that may
    /// receive probability mass; disallowed entries get exactly 0.
    Var softmax_rows(Var a, const std::vector<char>* allowed = nullptr) {
        const auto& X = value(a);
        if (allowed && allowed->size() != X.size()) throw std::invalid_argument("softmax_rows: mask size");
        Matrix<T> P(X.rows, X.cols);
        for (int r = 0; r < X.rows; ++r) {
            T mx = -std::numeric_limits<T>::infinity();
            for (int c = 0; c < X.cols; ++c)
                if (!allowed || (*allowed)[static_cast<size_t>(r) * X.cols + c]) mx = std::max(mx, X(r, c));
            T sum = 0;
            for (int c = 0; c < X.cols; ++c) {
                const bool ok = !allowed || (*allowed)[static_cast<size_t>(r) * X.cols + c];
                P(r, c) = ok ? std::exp(X(r, c) - mx) : T(0);
                sum += P(r, c);
            }
            for (int c = 0; c < X.cols; ++c) P(r, c) /= sum;
        }
        return push(std::move(P), needs(a), [a](Tape& t, int self) {
            const auto& g = t.nodes_[self].grad;
            const auto& p = t.nodes_[self].value;
            auto& ga = t.accum(a);
            for (int r = 0; r < g.rows; ++r) {
                T dot = 0;
                for (int c = 0; c < g.cols; ++c) dot += g(r, c) * p(r, c);
                for (int c = 0; c < g.cols; ++c) ga(r, c) += p(r, c) * (g(r, c) - dot);
            }
        });
    }

    // ---- indexing and reshaping ----------------------------------------

    /// out[i] = table[ids[i]]
    Var gather_rows(Var table, std::vector<int> ids) {
        const auto& Tb = value(table);
        Matrix<T> out(static_cast<int>(ids.size()), Tb.cols);
        for (size_t i = 0; i < ids.size(); ++i) {
            if (ids[i] < 0 || ids[i] >= Tb.rows) throw std::out_of_range("gather_rows: index out of range");
            std::copy_n(Tb.row(ids[i]).begin(), Tb.cols, out.row(static_cast<int>(i)).begin());
        }
        return push(std::move(out), needs(table), [table, ids = std::move(ids)](Tape& t, int self) {
            const auto& g = t.nodes_[self].grad;
            auto& gt = t.accum(table);
            for (size_t i = 0; i < ids.size(); ++i) {
                auto src = g.row(static_cast<int>(i));
                auto dst = gt.row(ids[i]);
                for (int c = 0; c < g.cols; ++c) dst[c] += src[c];
            }
        });
    }

    Var slice_rows(Var a, int begin, int end) {
        const auto& A = value(a);
        if (begin < 0 || end > A.rows || begin > end) throw std::out_of_range("slice_rows");
        Matrix<T> out(end - begin, A.cols);
        std::copy(A.data.begin() + static_cast<size_t>(begin) * A.cols, A.data.begin() + static_cast<size_t>(end) * A.cols,
                  out.data.begin());
        return push(std::move(out), needs(a), [a, begin](Tape& t, int self) {
            const auto& g = t.nodes_[self].grad;
            auto& ga = t.accum(a);
            for (size_t i = 0; i < g.size(); ++i) ga.data[static_cast<size_t>(begin) * ga.cols + i] += g.data[i];
        });
    }

    Var slice_cols(Var a, int begin, int end) {
        const auto& A = value(a);
        if (begin < 0 || end > A.cols || begin > end) throw std::out_of_range("slice_cols");
        Matrix<T> out(A.rows, end - begin);
        for (int r = 0; r < A.rows; ++r)
            for (int c = begin; c < end; ++c) out(r, c - begin) = A(r, c);
        return push(std::move(out), needs(a), [a, begin](Tape& t, int self) {
            const auto& g = t.nodes_[self].grad;
            auto& ga = t.accum(a);
            for (int r = 0; r < g.rows; ++r)
                for (int c = 0; c < g.cols; ++c) ga(r, c + begin) += g(r, c);
        });
    }

    Var concat_rows(const std::vector<Var>& parts) {
        if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
        const int cols = value(parts[0]).cols;
        int rows = 0;
        bool rg = false;
        for (Var p : parts) {
            if (value(p).cols != cols) throw std::invalid_argument("concat_rows: column mismatch");
            rows += value(p).rows;
            rg = rg || needs(p);
        }
        Matrix<T> out(rows, cols);
        size_t off = 0;
        for (Var p : parts) {
            std::copy(value(p).data.begin(), value(p).data.end(), out.data.begin() + off);
            off += value(p).size();
        }
        return push(std::move(out), rg, [parts](Tape& t, int self) {
            const auto& g = t.nodes_[self].grad;
            size_t off = 0;
            for (Var p : parts) {
                const size_t n = t.value(p).size();
                if (t.needs(p)) {
                    auto& gp = t.accum(p);
                    for (size_t i = 0; i < n; ++i) gp.data[i] += g.data[off + i];
                }
                off += n;
            }
        });
    }

    Var concat_cols(const std::vector<Var>& parts) {
        if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
        const int rows = value(parts[0]).rows;
        int cols = 0;
        bool rg = false;
        for (Var p : parts) {
            if (value(p).rows != rows) throw std::invalid_argument("concat_cols: row mismatch");
            cols += value(p).cols;
            rg = rg || needs(p);
        }
        Matrix<T> out(rows, cols);
        int off = 0;
        for (Var p : parts) {
            const auto& P = value(p);
            for (int r = 0; r < rows; ++r)
                for (int c = 0; c < P.cols; ++c) out(r, off + c) = P(r, c);
            off += P.cols;
        }
        return push(std::move(out), rg, [parts](Tape& t, int self) {
            const auto& g = t.nodes_[self].grad;
            int off = 0;
            for (Var p : parts) {
                const int pc = t.value(p).cols;
                if (t.needs(p)) {
                    auto& gp = t.accum(p);
                    for (int r = 0; r < g.rows; ++r)
                        for (int c = 0; c < pc; ++c) gp(r, c) += g(r, off + c);
                }
                off += pc;
            }
        });
    }

    /// Unfolds an (L x C) sequence into (out_len x kernel*C) windows with
    /// zero padding; window t starts at input row t*stride - pad_left.
    Var im2col(Var a, int kernel, int stride, int pad_left, int out_len) {
        const auto& X = value(a);
        const int C = X.cols;
        Matrix<T> out(out_len, kernel * C);
        for (int t = 0; t < out_len; ++t)
            for (int j = 0; j < kernel; ++j) {
                const int src = t * stride + j - pad_left;
                if (src < 0 || src >= X.rows) continue;
                for (int c = 0; c < C; ++c) out(t, j * C + c) = X(src, c);
            }
        return push(std::move(out), needs(a), [a, kernel, stride, pad_left](Tape& t, int self) {
            const auto& g = t.nodes_[self].grad;
            auto& ga = t.accum(a);
            const int C = ga.cols;
            for (int tt = 0; tt < g.rows; ++tt)
                for (int j = 0; j < kernel; ++j) {
                    const int src = tt * stride + j - pad_left;
                    if (src < 0 || src >= ga.rows) continue;
                    for (int c = 0; c < C; ++c) ga(src, c) += g(tt, j * C + c);
                }
        });
    }

    /// Inverse layout of im2col: overlap-adds (in_len x kernel*C) columns into
    /// an (out_len x C) sequence; column block j of row t lands on output row
    /// t*stride + j - pad_left, rows outside [0, out_len) are dropped.
    Var col2im(Var a, int kernel, int stride, int pad_left, int out_len) {
        const auto& X = value(a);
        if (X.cols % kernel != 0) throw std::invalid_argument("col2im: columns not divisible by kernel");
        const int C = X.cols / kernel;
        Matrix<T> out(out_len, C);
        for (int t = 0; t < X.rows; ++t)
            for (int j = 0; j < kernel; ++j) {
                const int dst = t * stride + j - pad_left;
                if (dst < 0 || dst >= out_len) continue;
                for (int c = 0; c < C; ++c) out(dst, c) += X(t, j * C + c);
            }
        return push(std::move(out), needs(a), [a, kernel, stride, pad_left, C](Tape& t, int self) {
            const auto& g = t.nodes_[self].grad;
            auto& ga = t.accum(a);
            for (int tt = 0; tt < ga.rows; ++tt)
                for (int j = 0; j < kernel; ++j) {
                    const int dst = tt * stride + j - pad_left;
                    if (dst < 0 || dst >= g.rows) continue;
                    for (int c = 0; c < C; ++c) ga(tt, j * C + c) += g(dst, c);
                }
        });
    }

    // ---- gradient routing ------------------------------------------------

    /// Stop-gradient: same value, no gradient flows back.
    Var detach(Var a) { return constant(value(a)); }

    /// Forward value is `replacement` (bit-exact); the backward pass hands the
    /// incoming gradient to `a` unchanged, as if the output were a + const.
    Var straight_through(Var a, const Matrix<T>& replacement) {
        require_same_shape(value(a), replacement, "straight_through");
        return push(replacement, needs(a), [a](Tape& t, int self) {
            as_eigen(t.accum(a)) += as_eigen(t.nodes_[self].grad);
        });
    }

    // ---- reductions and losses ---------------------------------------------

    /// Mean squared error over all entries, as a 1x1 node.
    Var mse(Var a, Var b) {
        require_same_shape(value(a), value(b), "mse");
        const auto& A = value(a);
        const auto& B = value(b);
        const T n = static_cast<T>(A.size());
        T acc = 0;
        for (size_t i = 0; i < A.size(); ++i) acc += (A.data[i] - B.data[i]) * (A.data[i] - B.data[i]);
        return push(Matrix<T>(1, 1, acc / n), any_grad(a, b), [a, b, n](Tape& t, int self) {
            const T g = t.nodes_[self].grad.data[0] * T(2) / n;
            const auto& A = t.value(a);
            const auto& B = t.value(b);
            if (t.needs(a)) {
                auto& ga = t.accum(a);
                for (size_t i = 0; i < A.size(); ++i) ga.data[i] += g * (A.data[i] - B.data[i]);
            }
            if (t.needs(b)) {
                auto& gb = t.accum(b);
                for (size_t i = 0; i < A.size(); ++i) gb.data[i] -= g * (A.data[i] - B.data[i]);
            }
        });
    }

    /// sum_i weight[i] * CE(softmax(logits[i]), targets[i]). Rows with zero
    /// weight are skipped entirely.
    Var cross_entropy(Var logits, std::vector<int> targets, std::vector<T> weights) {
        const auto& L = value(logits);
        if (static_cast<int>(targets.size()) != L.rows || weights.size() != targets.size())
            throw std::invalid_argument("cross_entropy: targets/weights length must equal logits rows");
        Matrix<T> probs(L.rows, L.cols);
        T total = 0;
        for (int r = 0; r < L.rows; ++r) {
            if (weights[r] == T(0)) continue;
            if (targets[r] < 0 || targets[r] >= L.cols) throw std::out_of_range("cross_entropy: target out of range");
            auto x = L.row(r);
            const T mx = *std::max_element(x.begin(), x.end());
            T sum = 0;
            for (int c = 0; c < L.cols; ++c) sum += std::exp(x[c] - mx);
            const T lse = mx + std::log(sum);
            for (int c = 0; c < L.cols; ++c) probs(r, c) = std::exp(x[c] - lse);
            total += weights[r] * (lse - x[targets[r]]);
        }
        return push(Matrix<T>(1, 1, total), needs(logits),
                    [logits, targets = std::move(targets), weights = std::move(weights),
                     probs = std::move(probs)](Tape& t, int self) {
                        const T g = t.nodes_[self].grad.data[0];
                        auto& gl = t.accum(logits);
                        for (int r = 0; r < gl.rows; ++r) {
                            if (weights[r] == T(0)) continue;
                            const T w = g * weights[r];
                            for (int c = 0; c < gl.cols; ++c) gl(r, c) += w * probs(r, c);
                            gl(r, targets[r]) -= w;
                        }
                    });
    }

    /// sum_i coeffs[i] * parts[i] for 1x1 nodes.
    Var weighted_sum(const std::vector<Var>& parts, const std::vector<T>& coeffs) {
        if (parts.size() != coeffs.size()) throw std::invalid_argument("weighted_sum: size mismatch");
        T acc = 0;
        bool rg = false;
        for (size_t i = 0; i < parts.size(); ++i) {
            acc += coeffs[i] * scalar(parts[i]);
            rg = rg || needs(parts[i]);
        }
        return push(Matrix<T>(1, 1, acc), rg, [parts, coeffs](Tape& t, int self) {
            const T g = t.nodes_[self].grad.data[0];
            for (size_t i = 0; i < parts.size(); ++i)
                if (t.needs(parts[i])) t.accum(parts[i]).data[0] += g * coeffs[i];
        });
    }

  private:
    using Backward = std::function<void(Tape&, int)>;

    struct Node {
        Matrix<T> value;
        Matrix<T> grad;
        bool requires_grad = false;
        Parameter<T>* param = nullptr;
        Backward backward;
    };

    static constexpr T gelu_k = T(0.7978845608028654);

    Var push(Matrix<T> value, bool requires_grad, Backward fn) {
        Node n;
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        if (requires_grad) n.backward = std::move(fn);
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    bool needs(Var v) const { return nodes_[v.id].requires_grad; }
    bool any_grad(Var a, Var b) const { return needs(a) || needs(b); }

    Matrix<T>& accum(Var v) {
        Node& n = nodes_[v.id];
        if (n.grad.empty() && !n.value.empty()) n.grad = Matrix<T>(n.value.rows, n.value.cols);
        return n.grad;
    }

    std::vector<Node> nodes_;
};

}  // namespace eegtext
