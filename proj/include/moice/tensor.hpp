#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "moice/errors.hpp"

namespace moice {

struct Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

// Dense row-major tensor of 64-bit floats. `grad` is allocated (and kept the
// same length as `data`) exactly when requires_grad is set.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;

    std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }

    int rows() const { return shape.empty() ? 1 : shape[0]; }
    int cols() const { return shape.size() < 2 ? static_cast<int>(size()) / rows() : shape[1]; }

    double& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols() + c]; }
    double at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols() + c]; }

    const double* row(int r) const { return data.data() + static_cast<std::size_t>(r) * cols(); }
    double* row(int r) { return data.data() + static_cast<std::size_t>(r) * cols(); }
    double* grow(int r) { return grad.data() + static_cast<std::size_t>(r) * cols(); }

    void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }

    static std::int64_t count(const std::vector<int>& shape) {
        std::int64_t n = 1;
        for (int s : shape) {
            if (s <= 0) throw ShapeError("non-positive dimension " + std::to_string(s));
            n *= s;
        }
        return n;
    }

    static TensorPtr zeros(std::vector<int> shape, bool requires_grad = false) {
        auto t = std::make_shared<Tensor>();
        t->shape = std::move(shape);
        t->data.assign(static_cast<std::size_t>(count(t->shape)), 0.0);
        t->requires_grad = requires_grad;
        if (requires_grad) t->grad.assign(t->data.size(), 0.0);
        return t;
    }

    static TensorPtr from(std::vector<double> data, std::vector<int> shape, bool requires_grad = false) {
        if (static_cast<std::int64_t>(data.size()) != count(shape))
            throw ShapeError("data length does not match shape product");
        auto t = std::make_shared<Tensor>();
        t->shape = std::move(shape);
        t->data = std::move(data);
        t->requires_grad = requires_grad;
        if (requires_grad) t->grad.assign(t->data.size(), 0.0);
        return t;
    }

    static TensorPtr vec(std::vector<double> v, bool requires_grad = false) {
        const int n = static_cast<int>(v.size());
        return from(std::move(v), {n}, requires_grad);
    }

    static TensorPtr scalar(double v, bool requires_grad = false) {
        return from({v}, {1}, requires_grad);
    }
};

// Reverse-mode tape. Ops record closures in evaluation order; backward()
// seeds the root with 1 and replays them once, in reverse. The tape does not
// own tensors: closures hold shared_ptrs, so dropping user references before
// backward is safe. Single-threaded by contract.
class Tape {
public:
    void record(std::function<void()> op) { ops_.push_back(std::move(op)); }

    void backward(const TensorPtr& root) {
        if (!root->requires_grad)
            throw StateError("backward() from a value that records no gradient");
        if (root->size() != 1)
            throw ShapeError("backward() root must be a scalar");
        root->grad[0] += 1.0;
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
        ops_.clear();
    }

    std::size_t size() const { return ops_.size(); }
    void clear() { ops_.clear(); }

private:
    std::vector<std::function<void()>> ops_;
};

namespace detail {

// C[M x N] += A[M x K] * B[K x N], all row-major. The i-k-j order keeps the
// inner loop streaming over rows of B and C.
inline void mm_accum(const double* A, const double* B, double* C, int M, int K, int N) {
    for (int i = 0; i < M; ++i) {
        const double* a = A + static_cast<std::size_t>(i) * K;
        double* c = C + static_cast<std::size_t>(i) * N;
        for (int k = 0; k < K; ++k) {
            const double av = a[k];
            if (av == 0.0) continue;
            const double* b = B + static_cast<std::size_t>(k) * N;
            for (int j = 0; j < N; ++j) c[j] += av * b[j];
        }
    }
}

// C[M x N] += A[M x K] * B[N x K]^T  (rows dotted with rows). Four output
// columns at a time keeps four independent accumulator chains in flight.
inline void mm_nt_accum(const double* A, const double* B, double* C, int M, int K, int N) {
    for (int i = 0; i < M; ++i) {
        const double* a = A + static_cast<std::size_t>(i) * K;
        double* c = C + static_cast<std::size_t>(i) * N;
        int j = 0;
        for (; j + 8 <= N; j += 8) {
            const double* b0 = B + static_cast<std::size_t>(j) * K;
            const double* b1 = b0 + K;
            const double* b2 = b1 + K;
            const double* b3 = b2 + K;
            const double* b4 = b3 + K;
            const double* b5 = b4 + K;
            const double* b6 = b5 + K;
            const double* b7 = b6 + K;
            double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
            double s4 = 0.0, s5 = 0.0, s6 = 0.0, s7 = 0.0;
            for (int k = 0; k < K; ++k) {
                const double av = a[k];
                s0 += av * b0[k];
                s1 += av * b1[k];
                s2 += av * b2[k];
                s3 += av * b3[k];
                s4 += av * b4[k];
                s5 += av * b5[k];
                s6 += av * b6[k];
                s7 += av * b7[k];
            }
            c[j] += s0;
            c[j + 1] += s1;
            c[j + 2] += s2;
            c[j + 3] += s3;
            c[j + 4] += s4;
            c[j + 5] += s5;
            c[j + 6] += s6;
            c[j + 7] += s7;
        }
        for (; j < N; ++j) {
            const double* b = B + static_cast<std::size_t>(j) * K;
            double s = 0.0;
            for (int k = 0; k < K; ++k) s += a[k] * b[k];
            c[j] += s;
        }
    }
}

// C[K x N] += A[M x K]^T * B[M x N]
inline void mm_tn_accum(const double* A, const double* B, double* C, int M, int K, int N) {
    for (int i = 0; i < M; ++i) {
        const double* a = A + static_cast<std::size_t>(i) * K;
        const double* b = B + static_cast<std::size_t>(i) * N;
        for (int k = 0; k < K; ++k) {
            const double av = a[k];
            if (av == 0.0) continue;
            double* c = C + static_cast<std::size_t>(k) * N;
            for (int j = 0; j < N; ++j) c[j] += av * b[j];
        }
    }
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline void require_2d(const TensorPtr& t, const char* what) {
    if (t->shape.size() != 2) throw ShapeError(std::string(what) + " must be 2-D");
}

inline bool track(const Tape* tape, std::initializer_list<const TensorPtr*> inputs) {
    if (!tape) return false;
    for (const TensorPtr* p : inputs)
        if ((*p)->requires_grad) return true;
    return false;
}

inline TensorPtr make_out(std::vector<int> shape, bool tracked) {
    return Tensor::zeros(std::move(shape), tracked);
}

} // namespace detail

// ---------------------------------------------------------------------------
// Core differentiable ops. Each takes an optional tape; passing nullptr (or
// only constant inputs) yields a pure forward computation.
// ---------------------------------------------------------------------------

inline TensorPtr matmul(Tape* tape, const TensorPtr& a, const TensorPtr& b) {
    detail::require_2d(a, "matmul lhs");
    detail::require_2d(b, "matmul rhs");
    const int M = a->shape[0], K = a->shape[1], N = b->shape[1];
    if (b->shape[0] != K)
        throw ShapeError("matmul inner dimensions " + std::to_string(K) + " vs " + std::to_string(b->shape[0]));
    const bool tracked = detail::track(tape, {&a, &b});
    auto out = detail::make_out({M, N}, tracked);
    detail::mm_accum(a->data.data(), b->data.data(), out->data.data(), M, K, N);
    if (tracked) {
        tape->record([a, b, out, M, K, N] {
            if (a->requires_grad) detail::mm_nt_accum(out->grad.data(), b->data.data(), a->grad.data(), M, N, K);
            if (b->requires_grad) detail::mm_tn_accum(a->data.data(), out->grad.data(), b->grad.data(), M, K, N);
        });
    }
    return out;
}

// a[M x K] * b[N x K]^T -> [M x N]
inline TensorPtr matmul_nt(Tape* tape, const TensorPtr& a, const TensorPtr& b) {
    detail::require_2d(a, "matmul_nt lhs");
    detail::require_2d(b, "matmul_nt rhs");
    const int M = a->shape[0], K = a->shape[1], N = b->shape[0];
    if (b->shape[1] != K)
        throw ShapeError("matmul_nt inner dimensions " + std::to_string(K) + " vs " + std::to_string(b->shape[1]));
    const bool tracked = detail::track(tape, {&a, &b});
    auto out = detail::make_out({M, N}, tracked);
    detail::mm_nt_accum(a->data.data(), b->data.data(), out->data.data(), M, K, N);
    if (tracked) {
        tape->record([a, b, out, M, K, N] {
            if (a->requires_grad) detail::mm_accum(out->grad.data(), b->data.data(), a->grad.data(), M, N, K);
            if (b->requires_grad) detail::mm_tn_accum(out->grad.data(), a->data.data(), b->grad.data(), M, N, K);
        });
    }
    return out;
}

inline TensorPtr add(Tape* tape, const TensorPtr& a, const TensorPtr& b) {
    if (a->shape != b->shape) throw ShapeError("add operands differ in shape");
    const bool tracked = detail::track(tape, {&a, &b});
    auto out = detail::make_out(a->shape, tracked);
    for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = a->data[i] + b->data[i];
    if (tracked) {
        tape->record([a, b, out] {
            if (a->requires_grad)
                for (std::size_t i = 0; i < out->grad.size(); ++i) a->grad[i] += out->grad[i];
            if (b->requires_grad)
                for (std::size_t i = 0; i < out->grad.size(); ++i) b->grad[i] += out->grad[i];
        });
    }
    return out;
}

inline TensorPtr scale(Tape* tape, const TensorPtr& a, double c) {
    const bool tracked = detail::track(tape, {&a});
    auto out = detail::make_out(a->shape, tracked);
    for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = c * a->data[i];
    if (tracked) {
        tape->record([a, out, c] {
            for (std::size_t i = 0; i < out->grad.size(); ++i) a->grad[i] += c * out->grad[i];
        });
    }
    return out;
}

inline TensorPtr mul(Tape* tape, const TensorPtr& a, const TensorPtr& b) {
    if (a->shape != b->shape) throw ShapeError("mul operands differ in shape");
    const bool tracked = detail::track(tape, {&a, &b});
    auto out = detail::make_out(a->shape, tracked);
    for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = a->data[i] * b->data[i];
    if (tracked) {
        tape->record([a, b, out] {
            if (a->requires_grad)
                for (std::size_t i = 0; i < out->grad.size(); ++i) a->grad[i] += b->data[i] * out->grad[i];
            if (b->requires_grad)
                for (std::size_t i = 0; i < out->grad.size(); ++i) b->grad[i] += a->data[i] * out->grad[i];
        });
    }
    return out;
}

// x * sigmoid(x), elementwise
inline TensorPtr silu(Tape* tape, const TensorPtr& x) {
    const bool tracked = detail::track(tape, {&x});
    auto out = detail::make_out(x->shape, tracked);
    for (std::size_t i = 0; i < out->data.size(); ++i) {
        const double v = x->data[i];
        out->data[i] = v * detail::sigmoid(v);
    }
    if (tracked) {
        tape->record([x, out] {
            for (std::size_t i = 0; i < out->grad.size(); ++i) {
                const double s = detail::sigmoid(x->data[i]);
                x->grad[i] += (s + x->data[i] * s * (1.0 - s)) * out->grad[i];
            }
        });
    }
    return out;
}

namespace detail {

inline void softmax_inplace(const double* x, double* y, int n) {
    double mx = x[0];
    for (int i = 1; i < n; ++i) mx = std::max(mx, x[i]);
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
        y[i] = std::exp(x[i] - mx);
        sum += y[i];
    }
    const double inv = 1.0 / sum;
    for (int i = 0; i < n; ++i) y[i] *= inv;
}

// dx_i += y_i * (dy_i - sum_j dy_j y_j)
inline void softmax_backward_row(const double* y, const double* dy, double* dx, int n) {
    double dot = 0.0;
    for (int i = 0; i < n; ++i) dot += dy[i] * y[i];
    for (int i = 0; i < n; ++i) dx[i] += y[i] * (dy[i] - dot);
}

} // namespace detail

// Max-subtracted softmax over a vector.
inline TensorPtr softmax_stable(Tape* tape, const TensorPtr& x) {
    if (x->size() == 0) throw ShapeError("softmax of empty vector");
    if (x->shape.size() != 1) throw ShapeError("softmax_stable expects a 1-D tensor");
    const int n = static_cast<int>(x->size());
    const bool tracked = detail::track(tape, {&x});
    auto out = detail::make_out(x->shape, tracked);
    detail::softmax_inplace(x->data.data(), out->data.data(), n);
    if (tracked) {
        tape->record([x, out, n] {
            detail::softmax_backward_row(out->data.data(), out->grad.data(), x->grad.data(), n);
        });
    }
    return out;
}

// Row-wise softmax of a 2-D tensor.
inline TensorPtr softmax_rows(Tape* tape, const TensorPtr& x) {
    detail::require_2d(x, "softmax_rows input");
    const int R = x->shape[0], C = x->shape[1];
    const bool tracked = detail::track(tape, {&x});
    auto out = detail::make_out(x->shape, tracked);
    for (int r = 0; r < R; ++r) detail::softmax_inplace(x->row(r), out->row(r), C);
    if (tracked) {
        tape->record([x, out, R, C] {
            for (int r = 0; r < R; ++r)
                detail::softmax_backward_row(out->row(r), out->grow(r), x->grow(r), C);
        });
    }
    return out;
}

// Mean negative log-likelihood over positions: (1/T) sum_t -log softmax(logits_t)[target_t].
// Computed through log-sum-exp so extreme logits stay finite.
inline TensorPtr cross_entropy(Tape* tape, const TensorPtr& logits, const std::vector<int>& targets) {
    detail::require_2d(logits, "cross_entropy logits");
    const int T = logits->shape[0], V = logits->shape[1];
    if (static_cast<int>(targets.size()) != T)
        throw ShapeError("cross_entropy targets length " + std::to_string(targets.size()) +
                         " vs positions " + std::to_string(T));
    for (int t = 0; t < T; ++t)
        if (targets[t] < 0 || targets[t] >= V)
            throw IndexError("cross_entropy target " + std::to_string(targets[t]) + " outside [0," +
                             std::to_string(V) + ")");
    const bool tracked = detail::track(tape, {&logits});
    auto out = detail::make_out({1}, tracked);
    // cache softmax rows for the backward pass
    auto probs = std::make_shared<std::vector<double>>(logits->data.size());
    double loss = 0.0;
    for (int t = 0; t < T; ++t) {
        const double* x = logits->row(t);
        double* p = probs->data() + static_cast<std::size_t>(t) * V;
        double mx = x[0];
        for (int v = 1; v < V; ++v) mx = std::max(mx, x[v]);
        double sum = 0.0;
        for (int v = 0; v < V; ++v) {
            p[v] = std::exp(x[v] - mx);
            sum += p[v];
        }
        const double inv = 1.0 / sum;
        for (int v = 0; v < V; ++v) p[v] *= inv;
        loss += std::log(sum) + mx - x[targets[t]];
    }
    out->data[0] = loss / T;
    if (tracked) {
        auto tgts = std::make_shared<std::vector<int>>(targets);
        tape->record([logits, out, probs, tgts, T, V] {
            const double g = out->grad[0] / T;
            for (int t = 0; t < T; ++t) {
                double* dl = logits->grow(t);
                const double* p = probs->data() + static_cast<std::size_t>(t) * V;
                for (int v = 0; v < V; ++v) dl[v] += g * p[v];
                dl[(*tgts)[t]] -= g;
            }
        });
    }
    return out;
}

// y = gain * x / rms(x), row-wise.
inline TensorPtr rmsnorm_rows(Tape* tape, const TensorPtr& x, const TensorPtr& gain, double eps = 1e-5) {
    detail::require_2d(x, "rmsnorm input");
    const int R = x->shape[0], C = x->shape[1];
    if (gain->size() != C) throw ShapeError("rmsnorm gain length mismatch");
    const bool tracked = detail::track(tape, {&x, &gain});
    auto out = detail::make_out(x->shape, tracked);
    auto inv = std::make_shared<std::vector<double>>(R);
    for (int r = 0; r < R; ++r) {
        const double* xr = x->row(r);
        double ss = 0.0;
        for (int c = 0; c < C; ++c) ss += xr[c] * xr[c];
        const double iv = 1.0 / std::sqrt(ss / C + eps);
        (*inv)[r] = iv;
        double* yr = out->row(r);
        for (int c = 0; c < C; ++c) yr[c] = gain->data[c] * xr[c] * iv;
    }
    if (tracked) {
        tape->record([x, gain, out, inv, R, C] {
            for (int r = 0; r < R; ++r) {
                const double* xr = x->row(r);
                const double* dy = out->grow(r);
                const double iv = (*inv)[r];
                if (x->requires_grad) {
                    double dot = 0.0;
                    for (int c = 0; c < C; ++c) dot += dy[c] * gain->data[c] * xr[c];
                    double* dx = x->grow(r);
                    const double k = iv * iv * iv * dot / C;
                    for (int c = 0; c < C; ++c) dx[c] += iv * gain->data[c] * dy[c] - k * xr[c];
                }
                if (gain->requires_grad)
                    for (int c = 0; c < C; ++c) gain->grad[c] += xr[c] * iv * dy[c];
            }
        });
    }
    return out;
}

inline TensorPtr embedding_rows(Tape* tape, const TensorPtr& table, const std::vector<int>& tokens) {
    detail::require_2d(table, "embedding table");
    const int V = table->shape[0], D = table->shape[1];
    const int T = static_cast<int>(tokens.size());
    for (int t : tokens)
        if (t < 0 || t >= V) throw IndexError("token " + std::to_string(t) + " outside vocab");
    const bool tracked = detail::track(tape, {&table});
    auto out = detail::make_out({T, D}, tracked);
    for (int t = 0; t < T; ++t)
        std::copy_n(table->row(tokens[t]), D, out->row(t));
    if (tracked) {
        auto toks = std::make_shared<std::vector<int>>(tokens);
        tape->record([table, out, toks, T, D] {
            for (int t = 0; t < T; ++t) {
                double* dst = table->grow((*toks)[t]);
                const double* src = out->grow(t);
                for (int c = 0; c < D; ++c) dst[c] += src[c];
            }
        });
    }
    return out;
}

inline TensorPtr row_slice(Tape* tape, const TensorPtr& x, int r0, int nrows) {
    detail::require_2d(x, "row_slice input");
    const int R = x->shape[0], C = x->shape[1];
    if (r0 < 0 || nrows <= 0 || r0 + nrows > R) throw ShapeError("row_slice out of range");
    const bool tracked = detail::track(tape, {&x});
    auto out = detail::make_out({nrows, C}, tracked);
    std::copy_n(x->row(r0), static_cast<std::size_t>(nrows) * C, out->data.data());
    if (tracked) {
        tape->record([x, out, r0, nrows, C] {
            for (int r = 0; r < nrows; ++r) {
                double* dst = x->grow(r0 + r);
                const double* src = out->grow(r);
                for (int c = 0; c < C; ++c) dst[c] += src[c];
            }
        });
    }
    return out;
}

inline TensorPtr col_slice(Tape* tape, const TensorPtr& x, int c0, int ncols) {
    detail::require_2d(x, "col_slice input");
    const int R = x->shape[0], C = x->shape[1];
    if (c0 < 0 || ncols <= 0 || c0 + ncols > C) throw ShapeError("col_slice out of range");
    const bool tracked = detail::track(tape, {&x});
    auto out = detail::make_out({R, ncols}, tracked);
    for (int r = 0; r < R; ++r) std::copy_n(x->row(r) + c0, ncols, out->row(r));
    if (tracked) {
        tape->record([x, out, c0, ncols, R] {
            for (int r = 0; r < R; ++r) {
                double* dst = x->grow(r) + c0;
                const double* src = out->grow(r);
                for (int c = 0; c < ncols; ++c) dst[c] += src[c];
            }
        });
    }
    return out;
}

inline TensorPtr col_concat(Tape* tape, std::span<const TensorPtr> parts) {
    if (parts.empty()) throw ShapeError("col_concat of nothing");
    const int R = parts[0]->shape[0];
    int C = 0;
    bool tracked = false;
    for (const auto& p : parts) {
        detail::require_2d(p, "col_concat part");
        if (p->shape[0] != R) throw ShapeError("col_concat row mismatch");
        C += p->shape[1];
        tracked = tracked || (tape && p->requires_grad);
    }
    auto out = detail::make_out({R, C}, tracked);
    int off = 0;
    for (const auto& p : parts) {
        const int w = p->shape[1];
        for (int r = 0; r < R; ++r) std::copy_n(p->row(r), w, out->row(r) + off);
        off += w;
    }
    if (tracked) {
        std::vector<TensorPtr> held(parts.begin(), parts.end());
        tape->record([held = std::move(held), out, R] {
            int off = 0;
            for (const auto& p : held) {
                const int w = p->shape[1];
                if (p->requires_grad)
                    for (int r = 0; r < R; ++r) {
                        const double* src = out->grow(r) + off;
                        double* dst = p->grow(r);
                        for (int c = 0; c < w; ++c) dst[c] += src[c];
                    }
                off += w;
            }
        });
    }
    return out;
}

// out = sum_j w[j] * x[j]; the weights are constants. Used for the aux loss
// where the frequency vector is detached.
inline TensorPtr weighted_sum(Tape* tape, const TensorPtr& x, const std::vector<double>& w) {
    if (static_cast<std::size_t>(x->size()) != w.size())
        throw ShapeError("weighted_sum length mismatch");
    const bool tracked = detail::track(tape, {&x});
    auto out = detail::make_out({1}, tracked);
    double s = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * x->data[i];
    out->data[0] = s;
    if (tracked) {
        auto wc = std::make_shared<std::vector<double>>(w);
        tape->record([x, out, wc] {
            for (std::size_t i = 0; i < wc->size(); ++i) x->grad[i] += (*wc)[i] * out->grad[0];
        });
    }
    return out;
}

// Central-difference gradient oracle: (f(x+eps e_i) - f(x-eps e_i)) / (2 eps).
inline TensorPtr finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double eps) {
    if (eps <= 0.0) throw InputError("finite_diff_grad eps must be positive");
    auto g = Tensor::zeros(x.shape);
    Tensor probe = x;
    for (std::size_t i = 0; i < probe.data.size(); ++i) {
        const double orig = probe.data[i];
        probe.data[i] = orig + eps;
        const double fp = f(probe);
        probe.data[i] = orig - eps;
        const double fm = f(probe);
        probe.data[i] = orig;
        g->data[i] = (fp - fm) / (2.0 * eps);
    }
    return g;
}

} // namespace moice
