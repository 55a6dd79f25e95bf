#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <utility>
#include <vector>

#include "indigo/kernels.hpp"
#include "indigo/params.hpp"
#include "indigo/tensor.hpp"

namespace indigo {

/// One softmax attention matrix captured during a forward pass.
template <typename T>
struct AttnRecord {
    int layer = 0;
    int head = 0;
    Tensor<T> probs; // row-stochastic
};

/// Reverse-mode tape. Creation order is topological order; backward() runs
/// the recorded closures in reverse and flushes parameter gradients into a
/// GradSink. Values of parameter nodes alias the ParamStore (no copies).
template <typename T>
class Tape {
public:
    using Id = int;

    explicit Tape(const ParamStore<T>* store = nullptr) : store_(store) {}

    Id constant(Tensor<T> v) { return push(std::move(v), false); }

    /// Non-parameter leaf whose gradient we want to inspect.
    Id input(Tensor<T> v) { return push(std::move(v), true); }

    Id param(int param_id) {
        Node n;
        n.external = &store_->value(param_id);
        n.param = param_id;
        n.needs_grad = store_->trainable(param_id);
        nodes_.push_back(std::move(n));
        return static_cast<Id>(nodes_.size() - 1);
    }

    Id param(const std::string& name) { return param(store_->require(name)); }

    const Tensor<T>& val(Id id) const {
        const Node& n = nodes_.at(id);
        return n.external ? *n.external : n.owned;
    }

    bool needs_grad(Id id) const { return nodes_.at(id).needs_grad; }

    /// Gradient buffer, allocated (zeroed) on first touch.
    Tensor<T>& grad(Id id) {
        Node& n = nodes_.at(id);
        if (!n.grad_live) {
            n.grad = Tensor<T>(val(id).shape);
            n.grad_live = true;
        }
        return n.grad;
    }

    bool grad_live(Id id) const { return nodes_.at(id).grad_live; }

    void backward(Id loss, T seed = T(1), GradSink<T>* sink = nullptr) {
        if (val(loss).numel() != 1) throw std::invalid_argument("backward: loss must be scalar");
        grad(loss).data[0] += seed;
        for (Id i = loss; i >= 0; --i) {
            Node& n = nodes_[i];
            if (n.grad_live && n.back) n.back(*this, i);
        }
        if (sink) {
            for (std::size_t i = 0; i < nodes_.size(); ++i) {
                const Node& n = nodes_[i];
                if (n.param >= 0 && n.grad_live && store_->trainable(n.param))
                    sink->accumulate(n.param, *store_, n.grad);
            }
        }
    }

    const ParamStore<T>* store() const { return store_; }

    std::size_t size() const { return nodes_.size(); }

    /// When set, tagged softmax ops append their attention matrices here.
    std::vector<AttnRecord<T>>* attn_capture = nullptr;

    // --- used by op implementations ---
    using BackFn = std::function<void(Tape&, Id)>;

    Id push(Tensor<T> value, bool needs, BackFn back = nullptr) {
        Node n;
        n.owned = std::move(value);
        n.needs_grad = needs;
        n.back = std::move(back);
        nodes_.push_back(std::move(n));
        return static_cast<Id>(nodes_.size() - 1);
    }

private:
    struct Node {
        Tensor<T> owned;
        const Tensor<T>* external = nullptr;
        Tensor<T> grad;
        BackFn back;
        int param = -1;
        bool needs_grad = false;
        bool grad_live = false;
    };

    const ParamStore<T>* store_;
    std::vector<Node> nodes_;
};

namespace ops {

template <typename T>
using Id = typename Tape<T>::Id;

// out = a * b, shapes (m x k)(k x n)
template <typename T>
Id<T> matmul(Tape<T>& t, Id<T> a, Id<T> b) {
    const Tensor<T>& av = t.val(a);
    const Tensor<T>& bv = t.val(b);
    if (av.cols() != bv.rows()) throw std::invalid_argument("matmul: inner dims disagree");
    const int m = av.rows(), k = av.cols(), n = bv.cols();
    Tensor<T> out({m, n});
    kernels::matmul(av.data.data(), bv.data.data(), out.data.data(), m, k, n);
    const bool need = t.needs_grad(a) || t.needs_grad(b);
    return t.push(std::move(out), need, [a, b, m, k, n](Tape<T>& tp, Id<T> self) {
        const Tensor<T>& g = tp.grad(self);
        if (tp.needs_grad(a))
            kernels::matmul_nt(g.data.data(), tp.val(b).data.data(), tp.grad(a).data.data(), m, n, k, true);
        if (tp.needs_grad(b))
            kernels::matmul_tn(tp.val(a).data.data(), g.data.data(), tp.grad(b).data.data(), k, m, n, true);
    });
}

// out = a * b^T, shapes (m x k)(n x k)
template <typename T>
Id<T> matmul_nt(Tape<T>& t, Id<T> a, Id<T> b) {
    const Tensor<T>& av = t.val(a);
    const Tensor<T>& bv = t.val(b);
    if (av.cols() != bv.cols()) throw std::invalid_argument("matmul_nt: inner dims disagree");
    const int m = av.rows(), k = av.cols(), n = bv.rows();
    Tensor<T> out({m, n});
    kernels::matmul_nt(av.data.data(), bv.data.data(), out.data.data(), m, k, n);
    const bool need = t.needs_grad(a) || t.needs_grad(b);
    return t.push(std::move(out), need, [a, b, m, k, n](Tape<T>& tp, Id<T> self) {
        const Tensor<T>& g = tp.grad(self);
        if (tp.needs_grad(a))
            kernels::matmul(g.data.data(), tp.val(b).data.data(), tp.grad(a).data.data(), m, n, k, true);
        if (tp.needs_grad(b))
            kernels::matmul_tn(g.data.data(), tp.val(a).data.data(), tp.grad(b).data.data(), n, m, k, true);
    });
}

// out = x * w + bias (bias broadcast over rows); w is (in x out), bias (1 x out)
template <typename T>
Id<T> linear(Tape<T>& t, Id<T> x, Id<T> w, Id<T> bias) {
    const Tensor<T>& xv = t.val(x);
    const Tensor<T>& wv = t.val(w);
    const Tensor<T>& bv = t.val(bias);
    if (xv.cols() != wv.rows() || bv.numel() != wv.cols())
        throw std::invalid_argument("linear: shape mismatch");
    const int m = xv.rows(), k = xv.cols(), n = wv.cols();
    Tensor<T> out({m, n});
    kernels::matmul(xv.data.data(), wv.data.data(), out.data.data(), m, k, n);
    for (int i = 0; i < m; ++i) {
        T* oi = out.row(i);
        for (int j = 0; j < n; ++j) oi[j] += bv.data[j];
    }
    const bool need = t.needs_grad(x) || t.needs_grad(w) || t.needs_grad(bias);
    return t.push(std::move(out), need, [x, w, bias, m, k, n](Tape<T>& tp, Id<T> self) {
        const Tensor<T>& g = tp.grad(self);
        if (tp.needs_grad(x))
            kernels::matmul_nt(g.data.data(), tp.val(w).data.data(), tp.grad(x).data.data(), m, n, k, true);
        if (tp.needs_grad(w))
            kernels::matmul_tn(tp.val(x).data.data(), g.data.data(), tp.grad(w).data.data(), k, m, n, true);
        if (tp.needs_grad(bias)) {
            Tensor<T>& gb = tp.grad(bias);
            for (int i = 0; i < m; ++i) {
                const T* gi = g.row(i);
                for (int j = 0; j < n; ++j) gb.data[j] += gi[j];
            }
        }
    });
}

// out = sum_i weights[i] * inputs[i]; all inputs share a shape.
template <typename T>
Id<T> weighted_sum(Tape<T>& t, const std::vector<Id<T>>& inputs, const std::vector<T>& weights) {
    if (inputs.empty() || inputs.size() != weights.size())
        throw std::invalid_argument("weighted_sum: bad arity");
    Tensor<T> out(t.val(inputs[0]).shape);
    bool need = false;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        const Tensor<T>& v = t.val(inputs[i]);
        if (!v.same_shape(out)) throw std::invalid_argument("weighted_sum: shape mismatch");
        for (long j = 0; j < out.numel(); ++j) out.data[j] += weights[i] * v.data[j];
        need = need || t.needs_grad(inputs[i]);
    }
    return t.push(std::move(out), need, [inputs, weights](Tape<T>& tp, Id<T> self) {
        const Tensor<T>& g = tp.grad(self);
        for (std::size_t i = 0; i < inputs.size(); ++i) {
            if (!tp.needs_grad(inputs[i])) continue;
            Tensor<T>& gi = tp.grad(inputs[i]);
            for (long j = 0; j < g.numel(); ++j) gi.data[j] += weights[i] * g.data[j];
        }
    });
}

template <typename T>
Id<T> add(Tape<T>& t, Id<T> a, Id<T> b) {
    return weighted_sum(t, {a, b}, {T(1), T(1)});
}

template <typename T>
Id<T> scale(Tape<T>& t, Id<T> a, T c) {
    return weighted_sum(t, {a}, {c});
}

// out = x / s where s is a positive scalar node (e.g. a temperature).
template <typename T>
Id<T> div_by_scalar(Tape<T>& t, Id<T> x, Id<T> s) {
    const Tensor<T>& xv = t.val(x);
    const Tensor<T>& sv = t.val(s);
    if (sv.numel() != 1) throw std::invalid_argument("div_by_scalar: divisor must be scalar");
    const T inv = T(1) / sv.data[0];
    Tensor<T> out = xv;
    for (auto& v : out.data) v *= inv;
    const bool need = t.needs_grad(x) || t.needs_grad(s);
    return t.push(std::move(out), need, [x, s](Tape<T>& tp, Id<T> self) {
        const Tensor<T>& g = tp.grad(self);
        const T sval = tp.val(s).data[0];
        if (tp.needs_grad(x)) {
            Tensor<T>& gx = tp.grad(x);
            for (long i = 0; i < g.numel(); ++i) gx.data[i] += g.data[i] / sval;
        }
        if (tp.needs_grad(s)) {
            const Tensor<T>& xv2 = tp.val(x);
            T acc = T(0);
            for (long i = 0; i < g.numel(); ++i) acc += g.data[i] * xv2.data[i];
            tp.grad(s).data[0] -= acc / (sval * sval);
        }
    });
}

template <typename T>
Id<T> layernorm(Tape<T>& t, Id<T> x, Id<T> scale_p, Id<T> shift_p, T eps) {
    const Tensor<T>& xv = t.val(x);
    const int rows = xv.rows(), cols = xv.cols();
    if (t.val(scale_p).numel() != cols || t.val(shift_p).numel() != cols)
        throw std::invalid_argument("layernorm: scale/shift length mismatch");
    Tensor<T> out({rows, cols});
    auto xhat = std::make_shared<Tensor<T>>(std::vector<int>{rows, cols});
    auto inv_sigma = std::make_shared<Tensor<T>>(std::vector<int>{rows});
    kernels::layernorm_rows(xv.data.data(), t.val(scale_p).data.data(), t.val(shift_p).data.data(),
                            out.data.data(), xhat->data.data(), inv_sigma->data.data(), rows, cols, eps);
    const bool need = t.needs_grad(x) || t.needs_grad(scale_p) || t.needs_grad(shift_p);
    return t.push(std::move(out), need,
                  [x, scale_p, shift_p, xhat, inv_sigma, rows, cols](Tape<T>& tp, Id<T> self) {
        const Tensor<T>& g = tp.grad(self);
        const Tensor<T>& sc = tp.val(scale_p);
        if (tp.needs_grad(scale_p)) {
            Tensor<T>& gs = tp.grad(scale_p);
            for (int i = 0; i < rows; ++i)
                for (int j = 0; j < cols; ++j) gs.data[j] += g(i, j) * (*xhat)(i, j);
        }
        if (tp.needs_grad(shift_p)) {
            Tensor<T>& gb = tp.grad(shift_p);
            for (int i = 0; i < rows; ++i)
                for (int j = 0; j < cols; ++j) gb.data[j] += g(i, j);
        }
        if (tp.needs_grad(x)) {
            Tensor<T>& gx = tp.grad(x);
            for (int i = 0; i < rows; ++i) {
                T mean_gs = T(0), mean_gsx = T(0);
                for (int j = 0; j < cols; ++j) {
                    const T gs = g(i, j) * sc.data[j];
                    mean_gs += gs;
                    mean_gsx += gs * (*xhat)(i, j);
                }
                mean_gs /= T(cols);
                mean_gsx /= T(cols);
                const T inv = inv_sigma->data[i];
                for (int j = 0; j < cols; ++j) {
                    const T gs = g(i, j) * sc.data[j];
                    gx(i, j) += (gs - mean_gs - (*xhat)(i, j) * mean_gsx) * inv;
                }
            }
        }
    });
}

template <typename T>
Id<T> gelu(Tape<T>& t, Id<T> x) {
    const Tensor<T>& xv = t.val(x);
    Tensor<T> out(xv.shape);
    kernels::gelu(xv.data.data(), out.data.data(), xv.numel());
    return t.push(std::move(out), t.needs_grad(x), [x](Tape<T>& tp, Id<T> self) {
        if (!tp.needs_grad(x)) return;
        const Tensor<T>& g = tp.grad(self);
        const Tensor<T>& xv2 = tp.val(x);
        kernels::gelu_backward(xv2.data.data(), g.data.data(), tp.grad(x).data.data(), xv2.numel(), true);
    });
}

// Row-wise softmax. When (layer, head) is tagged and the tape has an
// attention capture list, the probabilities are recorded for export.
template <typename T>
Id<T> softmax_rows(Tape<T>& t, Id<T> x, int layer = -1, int head = -1) {
    Tensor<T> out = t.val(x);
    kernels::softmax_rows(out.data.data(), out.rows(), out.cols());
    if (layer >= 0 && t.attn_capture) t.attn_capture->push_back({layer, head, out});
    const int rows = out.rows(), cols = out.cols();
    return t.push(std::move(out), t.needs_grad(x), [x, rows, cols](Tape<T>& tp, Id<T> self) {
        if (!tp.needs_grad(x)) return;
        const Tensor<T>& g = tp.grad(self);
        const Tensor<T>& p = tp.val(self);
        Tensor<T>& gx = tp.grad(x);
        for (int i = 0; i < rows; ++i) {
            T dot = T(0);
            for (int j = 0; j < cols; ++j) dot += g(i, j) * p(i, j);
            for (int j = 0; j < cols; ++j) gx(i, j) += p(i, j) * (g(i, j) - dot);
        }
    });
}

template <typename T>
Id<T> slice_rows(Tape<T>& t, Id<T> x, int r0, int r1) {
    const Tensor<T>& xv = t.val(x);
    if (r0 < 0 || r1 <= r0 || r1 > xv.rows()) throw std::invalid_argument("slice_rows: bad range");
    const int cols = xv.cols();
    Tensor<T> out({r1 - r0, cols});
    for (int i = r0; i < r1; ++i)
        for (int j = 0; j < cols; ++j) out(i - r0, j) = xv(i, j);
    return t.push(std::move(out), t.needs_grad(x), [x, r0, r1, cols](Tape<T>& tp, Id<T> self) {
        if (!tp.needs_grad(x)) return;
        const Tensor<T>& g = tp.grad(self);
        Tensor<T>& gx = tp.grad(x);
        for (int i = r0; i < r1; ++i)
            for (int j = 0; j < cols; ++j) gx(i, j) += g(i - r0, j);
    });
}

template <typename T>
Id<T> slice_cols(Tape<T>& t, Id<T> x, int c0, int c1) {
    const Tensor<T>& xv = t.val(x);
    if (c0 < 0 || c1 <= c0 || c1 > xv.cols()) throw std::invalid_argument("slice_cols: bad range");
    const int rows = xv.rows();
    Tensor<T> out({rows, c1 - c0});
    for (int i = 0; i < rows; ++i)
        for (int j = c0; j < c1; ++j) out(i, j - c0) = xv(i, j);
    return t.push(std::move(out), t.needs_grad(x), [x, c0, c1, rows](Tape<T>& tp, Id<T> self) {
        if (!tp.needs_grad(x)) return;
        const Tensor<T>& g = tp.grad(self);
        Tensor<T>& gx = tp.grad(x);
        for (int i = 0; i < rows; ++i)
            for (int j = c0; j < c1; ++j) gx(i, j) += g(i, j - c0);
    });
}

template <typename T>
Id<T> concat_rows(Tape<T>& t, const std::vector<Id<T>>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
    const int cols = t.val(parts[0]).cols();
    int rows = 0;
    bool need = false;
    for (auto p : parts) {
        if (t.val(p).cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
        rows += t.val(p).rows();
        need = need || t.needs_grad(p);
    }
    Tensor<T> out({rows, cols});
    int r = 0;
    for (auto p : parts) {
        const Tensor<T>& v = t.val(p);
        for (int i = 0; i < v.rows(); ++i, ++r)
            for (int j = 0; j < cols; ++j) out(r, j) = v(i, j);
    }
    return t.push(std::move(out), need, [parts, cols](Tape<T>& tp, Id<T> self) {
        const Tensor<T>& g = tp.grad(self);
        int r = 0;
        for (auto p : parts) {
            const int pr = tp.val(p).rows();
            if (tp.needs_grad(p)) {
                Tensor<T>& gp = tp.grad(p);
                for (int i = 0; i < pr; ++i)
                    for (int j = 0; j < cols; ++j) gp(i, j) += g(r + i, j);
            }
            r += pr;
        }
    });
}

template <typename T>
Id<T> concat_cols(Tape<T>& t, const std::vector<Id<T>>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
    const int rows = t.val(parts[0]).rows();
    int cols = 0;
    bool need = false;
    for (auto p : parts) {
        if (t.val(p).rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
        cols += t.val(p).cols();
        need = need || t.needs_grad(p);
    }
    Tensor<T> out({rows, cols});
    int c = 0;
    for (auto p : parts) {
        const Tensor<T>& v = t.val(p);
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < v.cols(); ++j) out(i, c + j) = v(i, j);
        c += v.cols();
    }
    return t.push(std::move(out), need, [parts, rows](Tape<T>& tp, Id<T> self) {
        const Tensor<T>& g = tp.grad(self);
        int c = 0;
        for (auto p : parts) {
            const int pc = tp.val(p).cols();
            if (tp.needs_grad(p)) {
                Tensor<T>& gp = tp.grad(p);
                for (int i = 0; i < rows; ++i)
                    for (int j = 0; j < pc; ++j) gp(i, j) += g(i, c + j);
            }
            c += pc;
        }
    });
}

template <typename T>
Id<T> mean_rows(Tape<T>& t, Id<T> x) {
    const Tensor<T>& xv = t.val(x);
    const int rows = xv.rows(), cols = xv.cols();
    Tensor<T> out({1, cols});
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) out.data[j] += xv(i, j);
    for (int j = 0; j < cols; ++j) out.data[j] /= T(rows);
    return t.push(std::move(out), t.needs_grad(x), [x, rows, cols](Tape<T>& tp, Id<T> self) {
        if (!tp.needs_grad(x)) return;
        const Tensor<T>& g = tp.grad(self);
        Tensor<T>& gx = tp.grad(x);
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < cols; ++j) gx(i, j) += g.data[j] / T(rows);
    });
}

// Rows normalized to unit L2 norm. Errors out on a zero row: callers rely
// on this to reject degenerate embeddings rather than emitting NaN.
template <typename T>
Id<T> l2_normalize_rows(Tape<T>& t, Id<T> x) {
    const Tensor<T>& xv = t.val(x);
    const int rows = xv.rows(), cols = xv.cols();
    Tensor<T> out({rows, cols});
    auto inv_norm = std::make_shared<Tensor<T>>(std::vector<int>{rows});
    for (int i = 0; i < rows; ++i) {
        T sq = T(0);
        for (int j = 0; j < cols; ++j) sq += xv(i, j) * xv(i, j);
        const T norm = std::sqrt(sq);
        if (!(norm > T(1e-30))) throw std::runtime_error("l2_normalize: zero-norm row");
        inv_norm->data[i] = T(1) / norm;
        for (int j = 0; j < cols; ++j) out(i, j) = xv(i, j) * inv_norm->data[i];
    }
    return t.push(std::move(out), t.needs_grad(x), [x, inv_norm, rows, cols](Tape<T>& tp, Id<T> self) {
        if (!tp.needs_grad(x)) return;
        const Tensor<T>& g = tp.grad(self);
        const Tensor<T>& z = tp.val(self);
        Tensor<T>& gx = tp.grad(x);
        for (int i = 0; i < rows; ++i) {
            T dot = T(0);
            for (int j = 0; j < cols; ++j) dot += g(i, j) * z(i, j);
            for (int j = 0; j < cols; ++j) gx(i, j) += (g(i, j) - z(i, j) * dot) * inv_norm->data[i];
        }
    });
}

// -log softmax(logits)[target]; logits are a 1 x C row.
template <typename T>
Id<T> cross_entropy(Tape<T>& t, Id<T> logits, int target) {
    const Tensor<T>& lv = t.val(logits);
    if (lv.rows() != 1) throw std::invalid_argument("cross_entropy: logits must be one row");
    const int c = lv.cols();
    if (c < 1 || target < 0 || target >= c) throw std::invalid_argument("cross_entropy: target out of range");
    T mx = lv.data[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, lv.data[j]);
    T sum = T(0);
    for (int j = 0; j < c; ++j) sum += std::exp(lv.data[j] - mx);
    Tensor<T> out({1});
    out.data[0] = mx + std::log(sum) - lv.data[target];
    return t.push(std::move(out), t.needs_grad(logits), [logits, target, c](Tape<T>& tp, Id<T> self) {
        if (!tp.needs_grad(logits)) return;
        const T g = tp.grad(self).data[0];
        const Tensor<T>& lv2 = tp.val(logits);
        T mx2 = lv2.data[0];
        for (int j = 1; j < c; ++j) mx2 = std::max(mx2, lv2.data[j]);
        T sum2 = T(0);
        for (int j = 0; j < c; ++j) sum2 += std::exp(lv2.data[j] - mx2);
        Tensor<T>& gl = tp.grad(logits);
        for (int j = 0; j < c; ++j) {
            const T p = std::exp(lv2.data[j] - mx2) / sum2;
            gl.data[j] += g * (p - (j == target ? T(1) : T(0)));
        }
    });
}

// temp^2 * KL(teacher || softmax(logits / temp)); teacher is a fixed
// probability row. Gradient w.r.t. logits is temp * (softmax - teacher).
template <typename T>
Id<T> kl_to_teacher(Tape<T>& t, Id<T> logits, Tensor<T> teacher_probs, T temp) {
    const Tensor<T>& lv = t.val(logits);
    if (lv.rows() != 1 || teacher_probs.numel() != lv.cols())
        throw std::invalid_argument("kl_to_teacher: shape mismatch");
    const int c = lv.cols();
    auto teacher = std::make_shared<Tensor<T>>(std::move(teacher_probs));
    T mx = lv.data[0] / temp;
    for (int j = 1; j < c; ++j) mx = std::max(mx, lv.data[j] / temp);
    T sum = T(0);
    for (int j = 0; j < c; ++j) sum += std::exp(lv.data[j] / temp - mx);
    const T lse = mx + std::log(sum);
    T kl = T(0);
    for (int j = 0; j < c; ++j) {
        const T p = teacher->data[j];
        if (p > T(0)) kl += p * (std::log(p) - (lv.data[j] / temp - lse));
    }
    Tensor<T> out({1});
    out.data[0] = temp * temp * kl;
    return t.push(std::move(out), t.needs_grad(logits), [logits, teacher, temp, c](Tape<T>& tp, Id<T> self) {
        if (!tp.needs_grad(logits)) return;
        const T g = tp.grad(self).data[0];
        const Tensor<T>& lv2 = tp.val(logits);
        T mx2 = lv2.data[0] / temp;
        for (int j = 1; j < c; ++j) mx2 = std::max(mx2, lv2.data[j] / temp);
        T sum2 = T(0);
        for (int j = 0; j < c; ++j) sum2 += std::exp(lv2.data[j] / temp - mx2);
        Tensor<T>& gl = tp.grad(logits);
        for (int j = 0; j < c; ++j) {
            const T q = std::exp(lv2.data[j] / temp - mx2) / sum2;
            gl.data[j] += g * temp * (q - teacher->data[j]);
        }
    });
}

// Scalar inner product with a fixed tensor. Used for gradient probes and
// for reducing matrix outputs to a checkable scalar.
template <typename T>
Id<T> inner(Tape<T>& t, Id<T> x, Tensor<T> weights) {
    const Tensor<T>& xv = t.val(x);
    if (!xv.same_shape(weights)) throw std::invalid_argument("inner: shape mismatch");
    auto w = std::make_shared<Tensor<T>>(std::move(weights));
    Tensor<T> out({1});
    for (long i = 0; i < xv.numel(); ++i) out.data[0] += xv.data[i] * w->data[i];
    return t.push(std::move(out), t.needs_grad(x), [x, w](Tape<T>& tp, Id<T> self) {
        if (!tp.needs_grad(x)) return;
        const T g = tp.grad(self).data[0];
        Tensor<T>& gx = tp.grad(x);
        for (long i = 0; i < gx.numel(); ++i) gx.data[i] += g * w->data[i];
    });
}

// Gather rows of an embedding table by token id.
template <typename T>
Id<T> embed_rows(Tape<T>& t, Id<T> table, const std::vector<int>& ids) {
    const Tensor<T>& tv = t.val(table);
    if (ids.empty()) throw std::invalid_argument("embed_rows: empty id sequence");
    const int cols = tv.cols();
    Tensor<T> out({static_cast<int>(ids.size()), cols});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= tv.rows())
            throw std::invalid_argument("embed_rows: unknown token id " + std::to_string(ids[i]));
        for (int j = 0; j < cols; ++j) out(static_cast<int>(i), j) = tv(ids[i], j);
    }
    return t.push(std::move(out), t.needs_grad(table), [table, ids, cols](Tape<T>& tp, Id<T> self) {
        if (!tp.needs_grad(table)) return;
        const Tensor<T>& g = tp.grad(self);
        Tensor<T>& gt = tp.grad(table);
        for (std::size_t i = 0; i < ids.size(); ++i)
            for (int j = 0; j < cols; ++j) gt(ids[i], j) += g(static_cast<int>(i), j);
    });
}

} // namespace ops
} // namespace indigo
