#pragma once

// Differentiable primitives. Every op validates shapes up front, computes its
// forward value eagerly, and registers a backward closure when any input
// requires a gradient. No implicit broadcasting: use tile_rows() explicitly.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "dtdn/tensor.hpp"

namespace dtdn {

namespace detail {

// Gradient buffer of parent i, or nullptr when it is not tracked.
inline double* parent_grad(Node& n, std::size_t i) {
    auto& p = n.parents[i];
    return p->requires_grad ? p->grad.data() : nullptr;
}

inline const std::vector<double>& parent_data(Node& n, std::size_t i) { return n.parents[i]->data; }

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
}

inline void require_rank(const Tensor& a, std::size_t r, const char* op) {
    if (a.rank() != r)
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                         to_string(a.shape()));
}

template <class Fwd, class Dfdx>
Tensor unary(const char* name, const Tensor& a, Fwd f, Dfdx dfdx) {
    std::vector<double> out(a.size());
    auto x = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
    return Tensor::from_op(name, a.shape(), std::move(out), {a}, [dfdx](Node& n) {
        double* ga = parent_grad(n, 0);
        if (!ga) return;
        const auto& x = parent_data(n, 0);
        for (std::size_t i = 0; i < n.grad.size(); ++i) ga[i] += n.grad[i] * dfdx(x[i], n.data[i]);
    });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_rank(a, 2, "matmul");
    detail::require_rank(b, 2, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k)
        throw ShapeError("matmul: inner dimensions disagree " + to_string(a.shape()) + " x " +
                         to_string(b.shape()));
    std::vector<double> out(m * n, 0.0);
    auto A = a.data();
    auto B = b.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = A[i * k + p];
            if (aip == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] += aip * B[p * n + j];
        }
    return Tensor::from_op("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& nd) {
        const auto& A = detail::parent_data(nd, 0);
        const auto& B = detail::parent_data(nd, 1);
        const auto& G = nd.grad;
        if (double* ga = detail::parent_grad(nd, 0)) {
            // dA = G * B^T
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < n; ++j) s += G[i * n + j] * B[p * n + j];
                    ga[i * k + p] += s;
                }
        }
        if (double* gb = detail::parent_grad(nd, 1)) {
            // dB = A^T * G
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    const double aip = A[i * k + p];
                    if (aip == 0.0) continue;
                    for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * G[i * n + j];
                }
        }
    });
}

/// Repeats a length-n vector into a rows x n matrix.
inline Tensor tile_rows(const Tensor& v, std::size_t rows) {
    detail::require_rank(v, 1, "tile_rows");
    const std::size_t n = v.dim(0);
    std::vector<double> out(rows * n);
    auto x = v.data();
    for (std::size_t r = 0; r < rows; ++r) std::copy(x.begin(), x.end(), out.begin() + r * n);
    return Tensor::from_op("tile_rows", {rows, n}, std::move(out), {v}, [rows, n](detail::Node& nd) {
        double* gv = detail::parent_grad(nd, 0);
        if (!gv) return;
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < n; ++j) gv[j] += nd.grad[r * n + j];
    });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (numel(shape) != a.size())
        throw ShapeError("reshape: " + to_string(a.shape()) + " -> " + to_string(shape));
    return Tensor::from_op("reshape", std::move(shape), a.values(), {a}, [](detail::Node& nd) {
        double* ga = detail::parent_grad(nd, 0);
        if (!ga) return;
        for (std::size_t i = 0; i < nd.grad.size(); ++i) ga[i] += nd.grad[i];
    });
}

// ---------------------------------------------------------------------------
// Elementwise

enum class Elementwise { add, sub, mul };

inline Tensor elementwise(Elementwise op, const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "elementwise");
    std::vector<double> out(a.size());
    auto x = a.data();
    auto y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        switch (op) {
            case Elementwise::add: out[i] = x[i] + y[i]; break;
            case Elementwise::sub: out[i] = x[i] - y[i]; break;
            case Elementwise::mul: out[i] = x[i] * y[i]; break;
        }
    }
    const char* name = op == Elementwise::add ? "add" : op == Elementwise::sub ? "sub" : "mul";
    return Tensor::from_op(name, a.shape(), std::move(out), {a, b}, [op](detail::Node& nd) {
        const auto& G = nd.grad;
        double* ga = detail::parent_grad(nd, 0);
        double* gb = detail::parent_grad(nd, 1);
        const auto& x = detail::parent_data(nd, 0);
        const auto& y = detail::parent_data(nd, 1);
        for (std::size_t i = 0; i < G.size(); ++i) {
            switch (op) {
                case Elementwise::add:
                    if (ga) ga[i] += G[i];
                    if (gb) gb[i] += G[i];
                    break;
                case Elementwise::sub:
                    if (ga) ga[i] += G[i];
                    if (gb) gb[i] -= G[i];
                    break;
                case Elementwise::mul:
                    if (ga) ga[i] += G[i] * y[i];
                    if (gb) gb[i] += G[i] * x[i];
                    break;
            }
        }
    });
}

inline Tensor add(const Tensor& a, const Tensor& b) { return elementwise(Elementwise::add, a, b); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(Elementwise::sub, a, b); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(Elementwise::mul, a, b); }

inline Tensor scale(const Tensor& a, double s) {
    return detail::unary("scale", a, [s](double x) { return s * x; },
                         [s](double, double) { return s; });
}

/// 1 - a
inline Tensor one_minus(const Tensor& a) {
    return detail::unary("one_minus", a, [](double x) { return 1.0 - x; },
                         [](double, double) { return -1.0; });
}

inline Tensor sigmoid(const Tensor& a) {
    return detail::unary(
        "sigmoid", a,
        [](double x) {
            // Split by sign so exp() never overflows. Saturated values are
            // clamped to the nearest doubles inside (0,1).
            constexpr double lo = std::numeric_limits<double>::min();
            const double hi = std::nextafter(1.0, 0.0);
            if (x >= 0) return std::min(1.0 / (1.0 + std::exp(-x)), hi);
            const double e = std::exp(x);
            return std::max(e / (1.0 + e), lo);
        },
        [](double, double y) { return y * (1.0 - y); });
}

/// max(0, x); the subgradient at exactly 0 is 0.
inline Tensor relu(const Tensor& a) {
    return detail::unary("relu", a, [](double x) { return x > 0 ? x : 0.0; },
                         [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

/// |x|; the subgradient at exactly 0 is 0.
inline Tensor abs(const Tensor& a) {
    return detail::unary("abs", a, [](double x) { return std::fabs(x); },
                         [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

inline Tensor exp(const Tensor& a) {
    return detail::unary("exp", a, [](double x) { return std::exp(x); },
                         [](double, double y) { return y; });
}

inline Tensor log(const Tensor& a) {
    return detail::unary("log", a, [](double x) { return std::log(x); },
                         [](double x, double) { return 1.0 / x; });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    return Tensor::from_op("sum", {}, {s}, {a}, [](detail::Node& nd) {
        double* ga = detail::parent_grad(nd, 0);
        if (!ga) return;
        const std::size_t n = nd.parents[0]->data.size();
        for (std::size_t i = 0; i < n; ++i) ga[i] += nd.grad[0];
    });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

/// Sum of absolute values.
inline Tensor l1_norm(const Tensor& a) { return sum(abs(a)); }

/// Mean over the batch of -log softmax(logits)[label], with max-subtraction.
inline Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
    detail::require_rank(logits, 2, "softmax_cross_entropy");
    const std::size_t B = logits.dim(0), C = logits.dim(1);
    if (labels.size() != B)
        throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                         " labels for batch of " + std::to_string(B));
    for (int y : labels)
        if (y < 0 || static_cast<std::size_t>(y) >= C)
            throw ShapeError("softmax_cross_entropy: label " + std::to_string(y) +
                             " out of range [0," + std::to_string(C) + ")");
    auto z = logits.data();
    std::vector<double> prob(B * C);
    double loss = 0.0;
    for (std::size_t i = 0; i < B; ++i) {
        const double* row = z.data() + i * C;
        const double mx = *std::max_element(row, row + C);
        double se = 0.0;
        for (std::size_t c = 0; c < C; ++c) se += std::exp(row[c] - mx);
        const double lse = mx + std::log(se);
        for (std::size_t c = 0; c < C; ++c) prob[i * C + c] = std::exp(row[c] - lse);
        loss += lse - row[labels[i]];
    }
    loss /= static_cast<double>(B);
    std::vector<int> y(labels.begin(), labels.end());
    return Tensor::from_op("softmax_cross_entropy", {}, {loss}, {logits},
                           [prob = std::move(prob), y = std::move(y), B, C](detail::Node& nd) {
                               double* g = detail::parent_grad(nd, 0);
                               if (!g) return;
                               const double s = nd.grad[0] / static_cast<double>(B);
                               for (std::size_t i = 0; i < B; ++i)
                                   for (std::size_t c = 0; c < C; ++c)
                                       g[i * C + c] +=
                                           s * (prob[i * C + c] - (static_cast<int>(c) == y[i] ? 1.0 : 0.0));
                           });
}

// ---------------------------------------------------------------------------
// Row-wise ops on B x N matrices

/// out[i] = a[index[i]]; index may repeat, gradients scatter-add back.
inline Tensor gather_rows(const Tensor& a, std::span<const std::size_t> index) {
    detail::require_rank(a, 2, "gather_rows");
    const std::size_t R = a.dim(0), D = a.dim(1);
    for (auto r : index)
        if (r >= R)
            throw ShapeError("gather_rows: index " + std::to_string(r) + " out of range for " +
                             std::to_string(R) + " rows");
    std::vector<double> out(index.size() * D);
    auto x = a.data();
    for (std::size_t i = 0; i < index.size(); ++i)
        std::copy_n(x.begin() + index[i] * D, D, out.begin() + i * D);
    std::vector<std::size_t> idx(index.begin(), index.end());
    return Tensor::from_op("gather_rows", {index.size(), D}, std::move(out), {a},
                           [idx = std::move(idx), D](detail::Node& nd) {
                               double* g = detail::parent_grad(nd, 0);
                               if (!g) return;
                               for (std::size_t i = 0; i < idx.size(); ++i)
                                   for (std::size_t d = 0; d < D; ++d) g[idx[i] * D + d] += nd.grad[i * D + d];
                           });
}

/// Each row divided by its L2 norm. An all-zero row stays zero.
inline Tensor l2_normalize_rows(const Tensor& a) {
    detail::require_rank(a, 2, "l2_normalize_rows");
    const std::size_t B = a.dim(0), D = a.dim(1);
    auto x = a.data();
    std::vector<double> out(B * D), norms(B);
    for (std::size_t i = 0; i < B; ++i) {
        double ss = 0.0;
        for (std::size_t d = 0; d < D; ++d) ss += x[i * D + d] * x[i * D + d];
        const double nrm = std::sqrt(ss);
        norms[i] = nrm;
        for (std::size_t d = 0; d < D; ++d) out[i * D + d] = nrm > 0 ? x[i * D + d] / nrm : 0.0;
    }
    return Tensor::from_op("l2_normalize_rows", {B, D}, std::move(out), {a},
                           [norms = std::move(norms), B, D](detail::Node& nd) {
                               double* g = detail::parent_grad(nd, 0);
                               if (!g) return;
                               for (std::size_t i = 0; i < B; ++i) {
                                   if (norms[i] == 0.0) continue;
                                   const double* y = nd.data.data() + i * D;
                                   const double* gy = nd.grad.data() + i * D;
                                   double dot = 0.0;
                                   for (std::size_t d = 0; d < D; ++d) dot += gy[d] * y[d];
                                   for (std::size_t d = 0; d < D; ++d)
                                       g[i * D + d] += (gy[d] - y[d] * dot) / norms[i];
                               }
                           });
}

/// Row-wise log-softmax with max-subtraction.
inline Tensor log_softmax_rows(const Tensor& a) {
    detail::require_rank(a, 2, "log_softmax_rows");
    const std::size_t B = a.dim(0), N = a.dim(1);
    auto x = a.data();
    std::vector<double> out(B * N);
    for (std::size_t i = 0; i < B; ++i) {
        const double* row = x.data() + i * N;
        const double mx = *std::max_element(row, row + N);
        double se = 0.0;
        for (std::size_t j = 0; j < N; ++j) se += std::exp(row[j] - mx);
        const double lse = mx + std::log(se);
        for (std::size_t j = 0; j < N; ++j) out[i * N + j] = row[j] - lse;
    }
    return Tensor::from_op("log_softmax_rows", {B, N}, std::move(out), {a}, [B, N](detail::Node& nd) {
        double* g = detail::parent_grad(nd, 0);
        if (!g) return;
        for (std::size_t i = 0; i < B; ++i) {
            double gs = 0.0;
            for (std::size_t j = 0; j < N; ++j) gs += nd.grad[i * N + j];
            for (std::size_t j = 0; j < N; ++j)
                g[i * N + j] += nd.grad[i * N + j] - std::exp(nd.data[i * N + j]) * gs;
        }
    });
}

/// out[i] = a[i, column[i]].
inline Tensor pick(const Tensor& a, std::span<const std::size_t> column) {
    detail::require_rank(a, 2, "pick");
    const std::size_t B = a.dim(0), N = a.dim(1);
    if (column.size() != B) throw ShapeError("pick: need one column per row");
    std::vector<double> out(B);
    for (std::size_t i = 0; i < B; ++i) {
        if (column[i] >= N)
            throw ShapeError("pick: column " + std::to_string(column[i]) + " out of range [0," +
                             std::to_string(N) + ")");
        out[i] = a.data()[i * N + column[i]];
    }
    std::vector<std::size_t> col(column.begin(), column.end());
    return Tensor::from_op("pick", {B}, std::move(out), {a}, [col = std::move(col), N](detail::Node& nd) {
        double* g = detail::parent_grad(nd, 0);
        if (!g) return;
        for (std::size_t i = 0; i < col.size(); ++i) g[i * N + col[i]] += nd.grad[i];
    });
}

/// out[i] = log sum_{j in subsets[i]} exp(a[i, j]).
inline Tensor logsumexp_subset(const Tensor& a, const std::vector<std::vector<std::size_t>>& subsets) {
    detail::require_rank(a, 2, "logsumexp_subset");
    const std::size_t B = a.dim(0), N = a.dim(1);
    if (subsets.size() != B) throw ShapeError("logsumexp_subset: need one index set per row");
    std::vector<double> out(B);
    for (std::size_t i = 0; i < B; ++i) {
        if (subsets[i].empty()) throw ShapeError("logsumexp_subset: empty index set");
        double mx = -std::numeric_limits<double>::infinity();
        for (auto j : subsets[i]) {
            if (j >= N) throw ShapeError("logsumexp_subset: index out of range");
            mx = std::max(mx, a.data()[i * N + j]);
        }
        double se = 0.0;
        for (auto j : subsets[i]) se += std::exp(a.data()[i * N + j] - mx);
        out[i] = mx + std::log(se);
    }
    return Tensor::from_op("logsumexp_subset", {B}, std::move(out), {a}, [subsets, N](detail::Node& nd) {
        double* g = detail::parent_grad(nd, 0);
        if (!g) return;
        const auto& x = detail::parent_data(nd, 0);
        for (std::size_t i = 0; i < subsets.size(); ++i)
            for (auto j : subsets[i]) g[i * N + j] += nd.grad[i] * std::exp(x[i * N + j] - nd.data[i]);
    });
}

// ---------------------------------------------------------------------------
// Convolution (NCHW, 3x3 kernel, stride 1, zero padding 1) and 2x2 average pooling

inline Tensor conv2d_3x3(const Tensor& x, const Tensor& w, const Tensor& b) {
    detail::require_rank(x, 4, "conv2d_3x3");
    detail::require_rank(w, 4, "conv2d_3x3");
    detail::require_rank(b, 1, "conv2d_3x3");
    const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t O = w.dim(0);
    if (w.dim(1) != C || w.dim(2) != 3 || w.dim(3) != 3 || b.dim(0) != O)
        throw ShapeError("conv2d_3x3: weights " + to_string(w.shape()) + " / bias " +
                         to_string(b.shape()) + " do not fit input " + to_string(x.shape()));
    auto X = x.data();
    auto K = w.data();
    auto bias = b.data();
    std::vector<double> out(B * O * H * W);
    const long h = static_cast<long>(H), wd = static_cast<long>(W);
    for (std::size_t n = 0; n < B; ++n)
        for (std::size_t o = 0; o < O; ++o) {
            double* y = out.data() + (n * O + o) * H * W;
            for (std::size_t i = 0; i < H * W; ++i) y[i] = bias[o];
            for (std::size_t c = 0; c < C; ++c) {
                const double* xc = X.data() + (n * C + c) * H * W;
                const double* k = K.data() + (o * C + c) * 9;
                for (long r = 0; r < h; ++r)
                    for (long q = 0; q < wd; ++q) {
                        double s = 0.0;
                        for (long dr = -1; dr <= 1; ++dr) {
                            const long rr = r + dr;
                            if (rr < 0 || rr >= h) continue;
                            for (long dq = -1; dq <= 1; ++dq) {
                                const long qq = q + dq;
                                if (qq < 0 || qq >= wd) continue;
                                s += k[(dr + 1) * 3 + (dq + 1)] * xc[rr * wd + qq];
                            }
                        }
                        y[r * wd + q] += s;
                    }
            }
        }
    return Tensor::from_op("conv2d_3x3", {B, O, H, W}, std::move(out), {x, w, b},
                           [B, C, H, W, O](detail::Node& nd) {
                               const auto& X = detail::parent_data(nd, 0);
                               const auto& K = detail::parent_data(nd, 1);
                               double* gx = detail::parent_grad(nd, 0);
                               double* gw = detail::parent_grad(nd, 1);
                               double* gb = detail::parent_grad(nd, 2);
                               const long h = static_cast<long>(H), wd = static_cast<long>(W);
                               for (std::size_t n = 0; n < B; ++n)
                                   for (std::size_t o = 0; o < O; ++o) {
                                       const double* gy = nd.grad.data() + (n * O + o) * H * W;
                                       if (gb)
                                           for (std::size_t i = 0; i < H * W; ++i) gb[o] += gy[i];
                                       for (std::size_t c = 0; c < C; ++c) {
                                           const double* xc = X.data() + (n * C + c) * H * W;
                                           const double* k = K.data() + (o * C + c) * 9;
                                           double* gxc = gx ? gx + (n * C + c) * H * W : nullptr;
                                           double* gk = gw ? gw + (o * C + c) * 9 : nullptr;
                                           for (long r = 0; r < h; ++r)
                                               for (long q = 0; q < wd; ++q) {
                                                   const double g = gy[r * wd + q];
                                                   if (g == 0.0) continue;
                                                   for (long dr = -1; dr <= 1; ++dr) {
                                                       const long rr = r + dr;
                                                       if (rr < 0 || rr >= h) continue;
                                                       for (long dq = -1; dq <= 1; ++dq) {
                                                           const long qq = q + dq;
                                                           if (qq < 0 || qq >= wd) continue;
                                                           const long ki = (dr + 1) * 3 + (dq + 1);
                                                           if (gk) gk[ki] += g * xc[rr * wd + qq];
                                                           if (gxc) gxc[rr * wd + qq] += g * k[ki];
                                                       }
                                                   }
                                               }
                                       }
                                   }
                           });
}

/// 2x2 average pooling with stride 2; odd trailing rows/columns are dropped.
inline Tensor avg_pool2(const Tensor& x) {
    detail::require_rank(x, 4, "avg_pool2");
    const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t Ho = H / 2, Wo = W / 2;
    if (Ho == 0 || Wo == 0) throw ShapeError("avg_pool2: input too small " + to_string(x.shape()));
    auto X = x.data();
    std::vector<double> out(B * C * Ho * Wo);
    for (std::size_t p = 0; p < B * C; ++p)
        for (std::size_t r = 0; r < Ho; ++r)
            for (std::size_t q = 0; q < Wo; ++q) {
                const double* base = X.data() + p * H * W + 2 * r * W + 2 * q;
                out[p * Ho * Wo + r * Wo + q] = 0.25 * (base[0] + base[1] + base[W] + base[W + 1]);
            }
    return Tensor::from_op("avg_pool2", {B, C, Ho, Wo}, std::move(out), {x},
                           [B, C, H, W, Ho, Wo](detail::Node& nd) {
                               double* g = detail::parent_grad(nd, 0);
                               if (!g) return;
                               for (std::size_t p = 0; p < B * C; ++p)
                                   for (std::size_t r = 0; r < Ho; ++r)
                                       for (std::size_t q = 0; q < Wo; ++q) {
                                           const double v = 0.25 * nd.grad[p * Ho * Wo + r * Wo + q];
                                           double* base = g + p * H * W + 2 * r * W + 2 * q;
                                           base[0] += v;
                                           base[1] += v;
                                           base[W] += v;
                                           base[W + 1] += v;
                                       }
                           });
}

}  // namespace dtdn
