#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "foci/errors.hpp"
#include "foci/tensor.hpp"

namespace foci {

// Define-by-run reverse-mode autodiff over dense 2-D tensors. Each op builds
// a Node holding the forward value and a closure that scatters the node's
// gradient into its parents. Graphs are rebuilt every step and freed when the
// last NodePtr drops.
struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<NodePtr> parents;
    std::function<void(Node&)> backprop;

    void ensure_grad() {
        if (grad.rows != value.rows || grad.cols != value.cols)
            grad = Tensor(value.rows, value.cols);
    }

    void zero_grad() {
        grad = Tensor(value.rows, value.cols);
    }
};

inline NodePtr constant(Tensor value) {
    require_finite(value, "constant");
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    return n;
}

// A trainable leaf: participates in backward, keeps its gradient across the
// graph's lifetime until zero_grad().
inline NodePtr parameter(Tensor value) {
    require_finite(value, "parameter");
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = true;
    n->ensure_grad();
    return n;
}

namespace detail {

inline NodePtr make_op(Tensor value, std::vector<NodePtr> parents,
                       std::function<void(Node&)> backprop) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    bool needs = false;
    for (const auto& p : parents) needs = needs || p->requires_grad;
    n->requires_grad = needs;
    if (needs) {
        n->parents = std::move(parents);
        n->backprop = std::move(backprop);
    }
    return n;
}

enum class Broadcast { None, Row, Col };

inline Broadcast broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
    if (a.same_shape(b)) return Broadcast::None;
    if (b.rows == 1 && b.cols == a.cols) return Broadcast::Row;
    if (b.cols == 1 && b.rows == a.rows) return Broadcast::Col;
    throw NumericError(std::string(op) + ": shape mismatch " + shape_str(a) +
                       " vs " + shape_str(b));
}

inline double broadcast_at(const Tensor& b, Broadcast kind, std::size_t i, std::size_t j) {
    switch (kind) {
        case Broadcast::None: return b.at(i, j);
        case Broadcast::Row: return b.at(0, j);
        default: return b.at(i, 0);
    }
}

inline void accumulate_broadcast(Tensor& dst, Broadcast kind, const Tensor& g,
                                 double scale_or_factor) {
    // dst receives g (times a per-element factor handled by caller) reduced
    // over the broadcast dimension.
    for (std::size_t i = 0; i < g.rows; ++i)
        for (std::size_t j = 0; j < g.cols; ++j) {
            const double v = g.at(i, j) * scale_or_factor;
            switch (kind) {
                case Broadcast::None: dst.at(i, j) += v; break;
                case Broadcast::Row: dst.at(0, j) += v; break;
                case Broadcast::Col: dst.at(i, 0) += v; break;
            }
        }
}

} // namespace detail

// ----- arithmetic -----

// b may equal a's shape, or broadcast as a 1 x cols row or rows x 1 column.
inline NodePtr add(const NodePtr& a, const NodePtr& b) {
    require_finite(a->value, "add");
    require_finite(b->value, "add");
    const auto kind = detail::broadcast_kind(a->value, b->value, "add");
    Tensor out(a->value.rows, a->value.cols);
    for (std::size_t i = 0; i < out.rows; ++i)
        for (std::size_t j = 0; j < out.cols; ++j)
            out.at(i, j) = a->value.at(i, j) + detail::broadcast_at(b->value, kind, i, j);
    return detail::make_op(std::move(out), {a, b}, [kind](Node& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::size_t k = 0; k < n.grad.size(); ++k) pa.grad.data[k] += n.grad.data[k];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (std::size_t i = 0; i < n.grad.rows; ++i)
                for (std::size_t j = 0; j < n.grad.cols; ++j) {
                    const double v = n.grad.at(i, j);
                    switch (kind) {
                        case detail::Broadcast::None: pb.grad.at(i, j) += v; break;
                        case detail::Broadcast::Row: pb.grad.at(0, j) += v; break;
                        case detail::Broadcast::Col: pb.grad.at(i, 0) += v; break;
                    }
                }
        }
    });
}

inline NodePtr sub(const NodePtr& a, const NodePtr& b) {
    require_finite(a->value, "sub");
    require_finite(b->value, "sub");
    const auto kind = detail::broadcast_kind(a->value, b->value, "sub");
    Tensor out(a->value.rows, a->value.cols);
    for (std::size_t i = 0; i < out.rows; ++i)
        for (std::size_t j = 0; j < out.cols; ++j)
            out.at(i, j) = a->value.at(i, j) - detail::broadcast_at(b->value, kind, i, j);
    return detail::make_op(std::move(out), {a, b}, [kind](Node& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::size_t k = 0; k < n.grad.size(); ++k) pa.grad.data[k] += n.grad.data[k];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (std::size_t i = 0; i < n.grad.rows; ++i)
                for (std::size_t j = 0; j < n.grad.cols; ++j) {
                    const double v = -n.grad.at(i, j);
                    switch (kind) {
                        case detail::Broadcast::None: pb.grad.at(i, j) += v; break;
                        case detail::Broadcast::Row: pb.grad.at(0, j) += v; break;
                        case detail::Broadcast::Col: pb.grad.at(i, 0) += v; break;
                    }
                }
        }
    });
}

// Elementwise (Hadamard) product with the same broadcast rules as add.
inline NodePtr mul(const NodePtr& a, const NodePtr& b) {
    require_finite(a->value, "mul");
    require_finite(b->value, "mul");
    const auto kind = detail::broadcast_kind(a->value, b->value, "mul");
    Tensor out(a->value.rows, a->value.cols);
    for (std::size_t i = 0; i < out.rows; ++i)
        for (std::size_t j = 0; j < out.cols; ++j)
            out.at(i, j) = a->value.at(i, j) * detail::broadcast_at(b->value, kind, i, j);
    return detail::make_op(std::move(out), {a, b}, [kind](Node& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < n.grad.rows; ++i)
                for (std::size_t j = 0; j < n.grad.cols; ++j)
                    pa.grad.at(i, j) +=
                        n.grad.at(i, j) * detail::broadcast_at(pb.value, kind, i, j);
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (std::size_t i = 0; i < n.grad.rows; ++i)
                for (std::size_t j = 0; j < n.grad.cols; ++j) {
                    const double v = n.grad.at(i, j) * pa.value.at(i, j);
                    switch (kind) {
                        case detail::Broadcast::None: pb.grad.at(i, j) += v; break;
                        case detail::Broadcast::Row: pb.grad.at(0, j) += v; break;
                        case detail::Broadcast::Col: pb.grad.at(i, 0) += v; break;
                    }
                }
        }
    });
}

inline NodePtr scale(const NodePtr& a, double c) {
    require_finite(a->value, "scale");
    if (!std::isfinite(c)) throw NumericError("scale: non-finite factor");
    Tensor out = a->value;
    for (double& v : out.data) v *= c;
    return detail::make_op(std::move(out), {a}, [c](Node& n) {
        auto& pa = *n.parents[0];
        pa.ensure_grad();
        for (std::size_t k = 0; k < n.grad.size(); ++k)
            pa.grad.data[k] += c * n.grad.data[k];
    });
}

inline NodePtr add_scalar(const NodePtr& a, double c) {
    require_finite(a->value, "add_scalar");
    if (!std::isfinite(c)) throw NumericError("add_scalar: non-finite addend");
    Tensor out = a->value;
    for (double& v : out.data) v += c;
    return detail::make_op(std::move(out), {a}, [](Node& n) {
        auto& pa = *n.parents[0];
        pa.ensure_grad();
        for (std::size_t k = 0; k < n.grad.size(); ++k)
            pa.grad.data[k] += n.grad.data[k];
    });
}

// ----- linear algebra -----

inline void matmul_accumulate(const Tensor& a, const Tensor& b, Tensor& out) {
    // i-k-j order: the inner loop runs over contiguous rows of b and out.
    for (std::size_t i = 0; i < a.rows; ++i) {
        double* out_row = out.row_ptr(i);
        const double* a_row = a.row_ptr(i);
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double aik = a_row[k];
            if (aik == 0.0) continue;
            const double* b_row = b.row_ptr(k);
            for (std::size_t j = 0; j < b.cols; ++j) out_row[j] += aik * b_row[j];
        }
    }
}

inline NodePtr matmul(const NodePtr& a, const NodePtr& b) {
    require_finite(a->value, "matmul");
    require_finite(b->value, "matmul");
    if (a->value.cols != b->value.rows)
        throw NumericError("matmul: inner dimensions " + shape_str(a->value) +
                           " vs " + shape_str(b->value));
    Tensor out(a->value.rows, b->value.cols);
    matmul_accumulate(a->value, b->value, out);
    return detail::make_op(std::move(out), {a, b}, [](Node& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        const Tensor& g = n.grad;
        if (pa.requires_grad) {
            pa.ensure_grad();
            // dA[i,k] += sum_j g[i,j] B[k,j]
            const Tensor& bv = pb.value;
            for (std::size_t i = 0; i < pa.grad.rows; ++i) {
                double* da_row = pa.grad.row_ptr(i);
                const double* g_row = g.row_ptr(i);
                for (std::size_t k = 0; k < pa.grad.cols; ++k) {
                    const double* b_row = bv.row_ptr(k);
                    double acc = 0.0;
                    for (std::size_t j = 0; j < g.cols; ++j) acc += g_row[j] * b_row[j];
                    da_row[k] += acc;
                }
            }
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            // dB[k,j] += sum_i A[i,k] g[i,j]
            const Tensor& av = pa.value;
            for (std::size_t i = 0; i < av.rows; ++i) {
                const double* a_row = av.row_ptr(i);
                const double* g_row = g.row_ptr(i);
                for (std::size_t k = 0; k < pb.grad.rows; ++k) {
                    const double aik = a_row[k];
                    if (aik == 0.0) continue;
                    double* db_row = pb.grad.row_ptr(k);
                    for (std::size_t j = 0; j < g.cols; ++j) db_row[j] += aik * g_row[j];
                }
            }
        }
    });
}

inline NodePtr transpose(const NodePtr& a) {
    require_finite(a->value, "transpose");
    Tensor out(a->value.cols, a->value.rows);
    for (std::size_t i = 0; i < a->value.rows; ++i)
        for (std::size_t j = 0; j < a->value.cols; ++j)
            out.at(j, i) = a->value.at(i, j);
    return detail::make_op(std::move(out), {a}, [](Node& n) {
        auto& pa = *n.parents[0];
        pa.ensure_grad();
        for (std::size_t i = 0; i < n.grad.rows; ++i)
            for (std::size_t j = 0; j < n.grad.cols; ++j)
                pa.grad.at(j, i) += n.grad.at(i, j);
    });
}

// ----- elementwise nonlinearities -----

namespace detail {

// df_dx receives (input value, output value) per element.
template <typename F, typename DF>
inline NodePtr unary_op(const char* name, const NodePtr& a, F f, DF df_dx) {
    require_finite(a->value, name);
    Tensor out(a->value.rows, a->value.cols);
    for (std::size_t k = 0; k < out.size(); ++k) out.data[k] = f(a->value.data[k]);
    return make_op(std::move(out), {a}, [df_dx](Node& n) {
        auto& pa = *n.parents[0];
        pa.ensure_grad();
        for (std::size_t k = 0; k < n.grad.size(); ++k)
            pa.grad.data[k] += n.grad.data[k] * df_dx(pa.value.data[k], n.value.data[k]);
    });
}

} // namespace detail

inline double sigmoid_value(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline NodePtr sigmoid(const NodePtr& a) {
    return detail::unary_op(
        "sigmoid", a, [](double x) { return sigmoid_value(x); },
        [](double, double y) { return y * (1.0 - y); });
}

inline NodePtr tanh_op(const NodePtr& a) {
    return detail::unary_op(
        "tanh", a, [](double x) { return std::tanh(x); },
        [](double, double y) { return 1.0 - y * y; });
}

inline NodePtr exp_op(const NodePtr& a) {
    auto out = detail::unary_op(
        "exp", a, [](double x) { return std::exp(x); },
        [](double, double y) { return y; });
    require_finite(out->value, "exp output");
    return out;
}

// Defined for strictly positive inputs only.
inline NodePtr log_op(const NodePtr& a) {
    for (double v : a->value.data)
        if (!(v > 0.0)) throw NumericError("log: input must be positive");
    return detail::unary_op(
        "log", a, [](double x) { return std::log(x); },
        [](double x, double) { return 1.0 / x; });
}

inline NodePtr square(const NodePtr& a) {
    return detail::unary_op(
        "square", a, [](double x) { return x * x; },
        [](double x, double) { return 2.0 * x; });
}

// Gradient at the kink (x == 0) is defined as 0.
inline NodePtr relu(const NodePtr& a) {
    return detail::unary_op(
        "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
        [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline NodePtr recip(const NodePtr& a) {
    for (double v : a->value.data)
        if (v == 0.0) throw NumericError("recip: division by zero");
    auto out = detail::unary_op(
        "recip", a, [](double x) { return 1.0 / x; },
        [](double, double y) { return -y * y; });
    require_finite(out->value, "recip output");
    return out;
}

// Gradient passes only strictly inside (lo, hi); at and beyond the clamp
// boundaries it is 0.
inline NodePtr clamp(const NodePtr& a, double lo, double hi) {
    if (!(lo <= hi)) throw NumericError("clamp: lo > hi");
    return detail::unary_op(
        "clamp", a,
        [lo, hi](double x) { return std::min(hi, std::max(lo, x)); },
        [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

// ----- softmax and reductions -----

// Row-wise softmax with an optional additive mask. The mask is the only
// engine input allowed to contain -inf; a fully masked row is an error.
// Masked entries come out exactly 0 and receive zero gradient.
inline NodePtr softmax_rows(const NodePtr& a, const Tensor* mask = nullptr) {
    require_finite(a->value, "softmax");
    if (mask) {
        require_valid_mask(*mask, "softmax");
        if (!(mask->same_shape(a->value) ||
              (mask->rows == 1 && mask->cols == a->value.cols)))
            throw NumericError("softmax: mask shape " + shape_str(*mask) +
                               " does not match input " + shape_str(a->value));
    }
    const Tensor& x = a->value;
    Tensor out(x.rows, x.cols);
    const double neg_inf = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < x.rows; ++i) {
        double hi = neg_inf;
        for (std::size_t j = 0; j < x.cols; ++j) {
            const double m = mask ? mask->at(mask->rows == 1 ? 0 : i, j) : 0.0;
            if (m != neg_inf) hi = std::max(hi, x.at(i, j) + m);
        }
        if (hi == neg_inf) throw NumericError("softmax: row fully masked");
        double denom = 0.0;
        for (std::size_t j = 0; j < x.cols; ++j) {
            const double m = mask ? mask->at(mask->rows == 1 ? 0 : i, j) : 0.0;
            if (m == neg_inf) {
                out.at(i, j) = 0.0;
            } else {
                const double e = std::exp(x.at(i, j) + m - hi);
                out.at(i, j) = e;
                denom += e;
            }
        }
        for (std::size_t j = 0; j < x.cols; ++j) out.at(i, j) /= denom;
    }
    return detail::make_op(std::move(out), {a}, [](Node& n) {
        auto& pa = *n.parents[0];
        pa.ensure_grad();
        for (std::size_t i = 0; i < n.grad.rows; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < n.grad.cols; ++j)
                dot += n.grad.at(i, j) * n.value.at(i, j);
            for (std::size_t j = 0; j < n.grad.cols; ++j)
                pa.grad.at(i, j) += n.value.at(i, j) * (n.grad.at(i, j) - dot);
        }
    });
}

inline NodePtr sum(const NodePtr& a) {
    require_finite(a->value, "sum");
    double s = 0.0;
    for (double v : a->value.data) s += v;
    return detail::make_op(Tensor::scalar(s), {a}, [](Node& n) {
        auto& pa = *n.parents[0];
        pa.ensure_grad();
        const double g = n.grad.data[0];
        for (double& d : pa.grad.data) d += g;
    });
}

inline NodePtr mean(const NodePtr& a) {
    require_finite(a->value, "mean");
    if (a->value.size() == 0) throw NumericError("mean: empty tensor");
    double s = 0.0;
    for (double v : a->value.data) s += v;
    const double inv_n = 1.0 / static_cast<double>(a->value.size());
    return detail::make_op(Tensor::scalar(s * inv_n), {a}, [inv_n](Node& n) {
        auto& pa = *n.parents[0];
        pa.ensure_grad();
        const double g = n.grad.data[0] * inv_n;
        for (double& d : pa.grad.data) d += g;
    });
}

// Column vector of per-row sums.
inline NodePtr sum_rows(const NodePtr& a) {
    require_finite(a->value, "sum_rows");
    Tensor out(a->value.rows, 1);
    for (std::size_t i = 0; i < a->value.rows; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < a->value.cols; ++j) s += a->value.at(i, j);
        out.at(i, 0) = s;
    }
    return detail::make_op(std::move(out), {a}, [](Node& n) {
        auto& pa = *n.parents[0];
        pa.ensure_grad();
        for (std::size_t i = 0; i < pa.grad.rows; ++i) {
            const double g = n.grad.at(i, 0);
            for (std::size_t j = 0; j < pa.grad.cols; ++j) pa.grad.at(i, j) += g;
        }
    });
}

// ----- structural ops -----

inline NodePtr concat_rows(const std::vector<NodePtr>& parts) {
    if (parts.empty()) throw NumericError("concat_rows: empty input");
    const std::size_t cols = parts[0]->value.cols;
    std::size_t rows = 0;
    for (const auto& p : parts) {
        require_finite(p->value, "concat_rows");
        if (p->value.cols != cols)
            throw NumericError("concat_rows: column mismatch");
        rows += p->value.rows;
    }
    Tensor out(rows, cols);
    std::size_t r = 0;
    for (const auto& p : parts) {
        std::copy(p->value.data.begin(), p->value.data.end(), out.row_ptr(r));
        r += p->value.rows;
    }
    return detail::make_op(std::move(out), parts, [](Node& n) {
        std::size_t r = 0;
        for (auto& parent : n.parents) {
            auto& p = *parent;
            if (p.requires_grad) {
                p.ensure_grad();
                for (std::size_t k = 0; k < p.grad.size(); ++k)
                    p.grad.data[k] += n.grad.data[r * n.grad.cols + k];
            }
            r += p.value.rows;
        }
    });
}

inline NodePtr concat_cols(const std::vector<NodePtr>& parts) {
    if (parts.empty()) throw NumericError("concat_cols: empty input");
    const std::size_t rows = parts[0]->value.rows;
    std::size_t cols = 0;
    for (const auto& p : parts) {
        require_finite(p->value, "concat_cols");
        if (p->value.rows != rows)
            throw NumericError("concat_cols: row mismatch");
        cols += p->value.cols;
    }
    Tensor out(rows, cols);
    std::size_t c = 0;
    for (const auto& p : parts) {
        for (std::size_t i = 0; i < rows; ++i)
            std::copy(p->value.row_ptr(i), p->value.row_ptr(i) + p->value.cols,
                      out.row_ptr(i) + c);
        c += p->value.cols;
    }
    return detail::make_op(std::move(out), parts, [](Node& n) {
        std::size_t c = 0;
        for (auto& parent : n.parents) {
            auto& p = *parent;
            if (p.requires_grad) {
                p.ensure_grad();
                for (std::size_t i = 0; i < p.grad.rows; ++i)
                    for (std::size_t j = 0; j < p.grad.cols; ++j)
                        p.grad.at(i, j) += n.grad.at(i, c + j);
            }
            c += p.value.cols;
        }
    });
}

// Out row r is a's row indices[r]. Duplicate indices accumulate gradient.
inline NodePtr gather_rows(const NodePtr& a, std::vector<std::size_t> indices) {
    require_finite(a->value, "gather_rows");
    for (std::size_t idx : indices)
        if (idx >= a->value.rows)
            throw NumericError("gather_rows: index out of range");
    Tensor out(indices.size(), a->value.cols);
    for (std::size_t r = 0; r < indices.size(); ++r)
        std::copy(a->value.row_ptr(indices[r]),
                  a->value.row_ptr(indices[r]) + a->value.cols, out.row_ptr(r));
    return detail::make_op(std::move(out), {a}, [idx = std::move(indices)](Node& n) {
        auto& pa = *n.parents[0];
        pa.ensure_grad();
        for (std::size_t r = 0; r < idx.size(); ++r) {
            double* dst = pa.grad.row_ptr(idx[r]);
            const double* src = n.grad.row_ptr(r);
            for (std::size_t j = 0; j < n.grad.cols; ++j) dst[j] += src[j];
        }
    });
}

// Contiguous column window [start, start+len).
inline NodePtr slice_cols(const NodePtr& a, std::size_t start, std::size_t len) {
    require_finite(a->value, "slice_cols");
    if (len == 0 || start + len > a->value.cols)
        throw NumericError("slice_cols: window out of range");
    Tensor out(a->value.rows, len);
    for (std::size_t i = 0; i < out.rows; ++i)
        std::copy(a->value.row_ptr(i) + start, a->value.row_ptr(i) + start + len,
                  out.row_ptr(i));
    return detail::make_op(std::move(out), {a}, [start](Node& n) {
        auto& pa = *n.parents[0];
        pa.ensure_grad();
        for (std::size_t i = 0; i < n.grad.rows; ++i)
            for (std::size_t j = 0; j < n.grad.cols; ++j)
                pa.grad.at(i, start + j) += n.grad.at(i, j);
    });
}

// Extracts one entry as a 1 x 1 node.
inline NodePtr pick(const NodePtr& a, std::size_t i, std::size_t j) {
    require_finite(a->value, "pick");
    if (i >= a->value.rows || j >= a->value.cols)
        throw NumericError("pick: index out of range");
    return detail::make_op(Tensor::scalar(a->value.at(i, j)), {a}, [i, j](Node& n) {
        auto& pa = *n.parents[0];
        pa.ensure_grad();
        pa.grad.at(i, j) += n.grad.data[0];
    });
}

// Identity in the forward pass; blocks all gradient flow. The returned node
// is a fresh constant so backward never descends into a's subgraph.
inline NodePtr stop_grad(const NodePtr& a) {
    return constant(a->value);
}

// Straight-through gate: the forward value IS the binary mask (no arithmetic
// on it, so the identity is exact), while the backward pass routes gradient
// through a sigmoid surrogate of the logits: d out_i / d a_i = sigmoid'(a_i),
// with zero cross-terms. Equivalent to m + sigmoid(a) - stop_grad(sigmoid(a))
// without the float round-trip.
inline NodePtr ste_gate(const Tensor& hard, const NodePtr& a) {
    require_finite(hard, "ste_gate");
    require_finite(a->value, "ste_gate");
    if (!hard.same_shape(a->value))
        throw NumericError("ste_gate: mask shape " + shape_str(hard) +
                           " does not match logits " + shape_str(a->value));
    for (double v : hard.data)
        if (v != 0.0 && v != 1.0)
            throw NumericError("ste_gate: mask must be binary");
    return detail::make_op(hard, {a}, [](Node& n) {
        auto& pa = *n.parents[0];
        pa.ensure_grad();
        for (std::size_t k = 0; k < n.grad.size(); ++k) {
            const double s = sigmoid_value(pa.value.data[k]);
            pa.grad.data[k] += n.grad.data[k] * s * (1.0 - s);
        }
    });
}

// ----- backward -----

// Reverse-mode sweep from a scalar root. Topological order is built by an
// iterative DFS restricted to grad-requiring nodes, so the visit order and
// therefore every accumulation order is deterministic.
inline void backward(const NodePtr& root) {
    if (root->value.size() != 1)
        throw NumericError("backward: root must be scalar");
    if (!root->requires_grad) return;

    std::vector<Node*> topo;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next_child] = stack.back();
        if (next_child < node->parents.size()) {
            Node* child = node->parents[next_child].get();
            ++next_child;
            if (child->requires_grad && visited.insert(child).second)
                stack.emplace_back(child, 0);
        } else {
            topo.push_back(node);
            stack.pop_back();
        }
    }

    root->ensure_grad();
    root->grad.data[0] = 1.0;
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        Node* node = *it;
        if (node->backprop) {
            node->ensure_grad();
            node->backprop(*node);
        }
    }
}

} // namespace foci
