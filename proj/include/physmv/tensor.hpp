#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "physmv/common.hpp"

namespace physmv {

// ---------------------------------------------------------------------------
// Tensor: dense row-major n-d array with optional participation in a
// reverse-mode gradient tape. Values are stored at Real precision; every
// reduction below accumulates in double regardless of Real.
//
// Tensors are value types over shared payloads; recorded operations never
// mutate a tape-tracked payload, which keeps the backward rules valid.
// ---------------------------------------------------------------------------

template <typename Real>
class Tape;

template <typename Real>
class Tensor {
public:
    using Buffer = std::shared_ptr<std::vector<Real>>;

    Tensor() = default;

    explicit Tensor(Shape shape, Real fill = Real(0), bool requires_grad = false)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<Real>>(shape_numel(shape_), fill)),
          requires_grad_(requires_grad) {
        check_extents();
        if (requires_grad_) ensure_grad();
    }

    Tensor(Shape shape, std::vector<Real> values, bool requires_grad = false)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<Real>>(std::move(values))),
          requires_grad_(requires_grad) {
        check_extents();
        if (data_->size() != shape_numel(shape_))
            throw ShapeError("tensor data length " + std::to_string(data_->size()) +
                             " does not match shape " + shape_str(shape_));
        if (requires_grad_) ensure_grad();
    }

    static Tensor scalar(Real value, bool requires_grad = false) {
        return Tensor(Shape{1}, std::vector<Real>{value}, requires_grad);
    }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t numel() const { return data_ ? data_->size() : 0; }
    bool defined() const { return static_cast<bool>(data_); }

    std::span<Real> values() { return {data_->data(), data_->size()}; }
    std::span<const Real> values() const { return {data_->data(), data_->size()}; }

    Real item() const {
        if (numel() != 1) throw ShapeError("item() requires a single-element tensor");
        return (*data_)[0];
    }

    std::size_t flat_index(std::span<const std::size_t> idx) const {
        std::size_t off = 0;
        for (std::size_t d = 0; d < shape_.size(); ++d) off = off * shape_[d] + idx[d];
        return off;
    }

    Real at(std::initializer_list<std::size_t> idx) const {
        return (*data_)[flat_index(std::span<const std::size_t>(idx.begin(), idx.size()))];
    }
    Real& at(std::initializer_list<std::size_t> idx) {
        return (*data_)[flat_index(std::span<const std::size_t>(idx.begin(), idx.size()))];
    }

    bool requires_grad() const { return requires_grad_; }
    Tensor& set_requires_grad(bool b) {
        requires_grad_ = b;
        if (b) ensure_grad();
        return *this;
    }

    bool has_grad() const { return static_cast<bool>(grad_); }
    std::span<const Real> grad() const {
        if (!grad_) throw DomainError("tensor has no gradient buffer");
        return {grad_->data(), grad_->size()};
    }
    void zero_grad() {
        if (grad_) std::fill(grad_->begin(), grad_->end(), Real(0));
    }

    /// Same payload, detached from gradient bookkeeping.
    Tensor detached() const {
        Tensor t;
        t.shape_ = shape_;
        t.data_ = data_;
        return t;
    }

    /// Deep copy of the values (fresh payload, no grad).
    Tensor clone_values() const {
        Tensor t;
        t.shape_ = shape_;
        t.data_ = std::make_shared<std::vector<Real>>(*data_);
        return t;
    }

    void ensure_grad() {
        if (!grad_) grad_ = std::make_shared<std::vector<Real>>(numel(), Real(0));
    }

    const Buffer& payload() const { return data_; }
    const Buffer& grad_buffer() const { return grad_; }

    /// Zero-copy view with a different shape (same element count).
    Tensor reshaped(Shape new_shape) const {
        if (shape_numel(new_shape) != numel())
            throw ShapeError("reshape " + shape_str(shape_) + " -> " + shape_str(new_shape) +
                             " changes element count");
        for (std::size_t e : new_shape)
            if (e == 0) throw ShapeError("reshape to zero extent");
        Tensor t;
        t.shape_ = std::move(new_shape);
        t.data_ = data_;
        t.grad_ = grad_;
        t.requires_grad_ = requires_grad_;
        return t;
    }

private:
    void check_extents() const {
        for (std::size_t e : shape_)
            if (e == 0) throw ShapeError("zero extent in shape " + shape_str(shape_));
    }

    Shape shape_;
    Buffer data_;
    Buffer grad_;
    bool requires_grad_ = false;
};

// ---------------------------------------------------------------------------
// Tape: ordered record of operation backward rules. The record order is a
// topological order of the computation, so one reverse replay propagates
// every adjoint exactly once. A tape is active for the current thread from
// construction to destruction.
// ---------------------------------------------------------------------------

template <typename Real>
class Tape {
public:
    Tape() : prev_(active_ref()) { active_ref() = this; }
    ~Tape() { active_ref() = prev_; }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active() { return active_ref(); }

    void record(std::function<void()> backward_rule) { nodes_.push_back(std::move(backward_rule)); }

    std::size_t node_count() const { return nodes_.size(); }

    void clear() { nodes_.clear(); }

    /// Seeds the root adjoint with 1 and replays all nodes in reverse.
    /// Repeated calls without zeroing gradients accumulate.
    void backward(Tensor<Real>& root) {
        if (root.numel() != 1) throw ShapeError("backward root must be scalar");
        if (!root.requires_grad() || !root.has_grad())
            throw DomainError("backward root does not participate in the tape");
        (*root.grad_buffer())[0] += Real(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    }

private:
    static Tape*& active_ref() {
        static thread_local Tape* active = nullptr;
        return active;
    }

    std::vector<std::function<void()>> nodes_;
    Tape* prev_ = nullptr;
};

template <typename Real>
inline void backward(Tensor<Real>& root) {
    if (!Tape<Real>::active()) throw DomainError("backward requires an active tape");
    Tape<Real>::active()->backward(root);
}

// ---------------------------------------------------------------------------
// Broadcasting (trailing-dimension alignment) utilities.
// ---------------------------------------------------------------------------

namespace detail {

struct BroadcastPlan {
    Shape out;
    // Strides aligned to the output rank; zero where an input broadcasts.
    std::vector<std::size_t> stride_a, stride_b;
};

inline std::vector<std::size_t> row_major_strides(const Shape& s) {
    std::vector<std::size_t> st(s.size(), 1);
    for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
    return st;
}

inline BroadcastPlan broadcast_plan(const Shape& a, const Shape& b, const char* op) {
    BroadcastPlan plan;
    const std::size_t rank = std::max(a.size(), b.size());
    plan.out.resize(rank);
    plan.stride_a.assign(rank, 0);
    plan.stride_b.assign(rank, 0);
    const auto sa = row_major_strides(a);
    const auto sb = row_major_strides(b);
    for (std::size_t i = 0; i < rank; ++i) {
        const std::size_t d = rank - 1 - i;
        const std::size_t ea = i < a.size() ? a[a.size() - 1 - i] : 1;
        const std::size_t eb = i < b.size() ? b[b.size() - 1 - i] : 1;
        if (ea != eb && ea != 1 && eb != 1)
            throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                             shape_str(b));
        plan.out[d] = std::max(ea, eb);
        if (ea != 1) plan.stride_a[d] = sa[a.size() - 1 - i];
        if (eb != 1) plan.stride_b[d] = sb[b.size() - 1 - i];
    }
    return plan;
}

// Odometer walk over an output shape carrying two input offsets.
template <typename Fn>
inline void for_each_broadcast(const BroadcastPlan& plan, Fn&& fn) {
    const std::size_t rank = plan.out.size();
    const std::size_t total = shape_numel(plan.out);
    std::vector<std::size_t> idx(rank, 0);
    std::size_t off_a = 0, off_b = 0;
    for (std::size_t flat = 0; flat < total; ++flat) {
        fn(flat, off_a, off_b);
        for (std::size_t d = rank; d-- > 0;) {
            ++idx[d];
            off_a += plan.stride_a[d];
            off_b += plan.stride_b[d];
            if (idx[d] < plan.out[d]) break;
            off_a -= plan.stride_a[d] * plan.out[d];
            off_b -= plan.stride_b[d] * plan.out[d];
            idx[d] = 0;
        }
    }
}

template <typename Real>
inline void check_finite(const Tensor<Real>& t, const char* op) {
    for (Real v : t.values())
        if (!std::isfinite(static_cast<double>(v)))
            throw DomainError(std::string(op) + " produced a non-finite value");
}

template <typename Real>
inline bool tape_should_record(std::initializer_list<const Tensor<Real>*> inputs) {
    if (!Tape<Real>::active()) return false;
    for (const auto* t : inputs)
        if (t && t->requires_grad()) return true;
    return false;
}

// Marks the output as tape-tracked and gives every participating tensor a
// gradient buffer before the backward rule is recorded.
template <typename Real>
inline void prepare_node(Tensor<Real>& out, std::initializer_list<Tensor<Real>*> inputs) {
    out.set_requires_grad(true);
    for (auto* t : inputs)
        if (t && t->requires_grad()) t->ensure_grad();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise operations.
// ---------------------------------------------------------------------------

enum class EwKind { add, sub, mul, div, exp, log, tanh, sigmoid, relu };

namespace detail {

template <typename Real, typename Fwd, typename Bwd>
Tensor<Real> binary_op(const char* name, Tensor<Real> a, Tensor<Real> b, Fwd fwd, Bwd bwd) {
    const auto plan = broadcast_plan(a.shape(), b.shape(), name);
    Tensor<Real> out(plan.out);
    {
        auto ov = out.values();
        const auto av = a.values();
        const auto bv = b.values();
        for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
            ov[o] = fwd(av[ia], bv[ib]);
        });
    }
    check_finite(out, name);
    if (tape_should_record<Real>({&a, &b})) {
        prepare_node(out, {&a, &b});
        auto ga = a.requires_grad() ? a.grad_buffer() : nullptr;
        auto gb = b.requires_grad() ? b.grad_buffer() : nullptr;
        auto go = out.grad_buffer();
        auto pa = a.payload();
        auto pb = b.payload();
        Tape<Real>::active()->record([plan, ga, gb, go, pa, pb, bwd]() {
            for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
                const Real g = (*go)[o];
                if (g == Real(0)) return;
                Real da = 0, db = 0;
                bwd((*pa)[ia], (*pb)[ib], g, da, db);
                if (ga) (*ga)[ia] += da;
                if (gb) (*gb)[ib] += db;
            });
        });
    }
    return out;
}

template <typename Real, typename Fwd, typename Bwd>
Tensor<Real> unary_op(const char* name, Tensor<Real> x, Fwd fwd, Bwd bwd) {
    Tensor<Real> out(x.shape());
    {
        auto ov = out.values();
        const auto xv = x.values();
        for (std::size_t i = 0; i < xv.size(); ++i) ov[i] = fwd(xv[i]);
    }
    check_finite(out, name);
    if (tape_should_record<Real>({&x})) {
        prepare_node(out, {&x});
        auto gx = x.grad_buffer();
        auto go = out.grad_buffer();
        auto px = x.payload();
        auto po = out.payload();
        Tape<Real>::active()->record([gx, go, px, po, bwd]() {
            for (std::size_t i = 0; i < gx->size(); ++i) {
                const Real g = (*go)[i];
                if (g != Real(0)) (*gx)[i] += bwd((*px)[i], (*po)[i]) * g;
            }
        });
    }
    return out;
}

}  // namespace detail

template <typename Real>
Tensor<Real> add(Tensor<Real> a, Tensor<Real> b) {
    return detail::binary_op<Real>(
        "add", std::move(a), std::move(b), [](Real x, Real y) { return x + y; },
        [](Real, Real, Real g, Real& da, Real& db) {
            da = g;
            db = g;
        });
}

template <typename Real>
Tensor<Real> sub(Tensor<Real> a, Tensor<Real> b) {
    return detail::binary_op<Real>(
        "sub", std::move(a), std::move(b), [](Real x, Real y) { return x - y; },
        [](Real, Real, Real g, Real& da, Real& db) {
            da = g;
            db = -g;
        });
}

template <typename Real>
Tensor<Real> mul(Tensor<Real> a, Tensor<Real> b) {
    return detail::binary_op<Real>(
        "mul", std::move(a), std::move(b), [](Real x, Real y) { return x * y; },
        [](Real x, Real y, Real g, Real& da, Real& db) {
            da = g * y;
            db = g * x;
        });
}

template <typename Real>
Tensor<Real> div(Tensor<Real> a, Tensor<Real> b) {
    for (Real v : b.values())
        if (v == Real(0)) throw DomainError("div: zero divisor");
    return detail::binary_op<Real>(
        "div", std::move(a), std::move(b), [](Real x, Real y) { return x / y; },
        [](Real x, Real y, Real g, Real& da, Real& db) {
            da = g / y;
            db = -g * x / (y * y);
        });
}

template <typename Real>
Tensor<Real> exp(Tensor<Real> x) {
    return detail::unary_op<Real>(
        "exp", std::move(x), [](Real v) { return std::exp(v); },
        [](Real, Real y) { return y; });
}

template <typename Real>
Tensor<Real> log(Tensor<Real> x) {
    for (Real v : x.values())
        if (!(v > Real(0))) throw DomainError("log: non-positive operand");
    return detail::unary_op<Real>(
        "log", std::move(x), [](Real v) { return std::log(v); },
        [](Real v, Real) { return Real(1) / v; });
}

template <typename Real>
Tensor<Real> tanh(Tensor<Real> x) {
    return detail::unary_op<Real>(
        "tanh", std::move(x), [](Real v) { return std::tanh(v); },
        [](Real, Real y) { return Real(1) - y * y; });
}

template <typename Real>
Tensor<Real> sigmoid(Tensor<Real> x) {
    return detail::unary_op<Real>(
        "sigmoid", std::move(x),
        [](Real v) {
            if (v >= Real(0)) return Real(1) / (Real(1) + std::exp(-v));
            const Real e = std::exp(v);
            return e / (Real(1) + e);
        },
        [](Real, Real y) { return y * (Real(1) - y); });
}

template <typename Real>
Tensor<Real> relu(Tensor<Real> x) {
    return detail::unary_op<Real>(
        "relu", std::move(x), [](Real v) { return v > Real(0) ? v : Real(0); },
        [](Real v, Real) { return v > Real(0) ? Real(1) : Real(0); });
}

/// softplus(x) = log(1 + e^x), evaluated in its overflow-safe form.
template <typename Real>
Tensor<Real> softplus(Tensor<Real> x) {
    return detail::unary_op<Real>(
        "softplus", std::move(x),
        [](Real v) { return std::max(v, Real(0)) + std::log1p(std::exp(-std::abs(v))); },
        [](Real v, Real) {
            if (v >= Real(0)) return Real(1) / (Real(1) + std::exp(-v));
            const Real e = std::exp(v);
            return e / (Real(1) + e);
        });
}

/// Square root with subgradient 0 at the origin, so exactly-flat inputs
/// keep exactly-zero derivatives.
template <typename Real>
Tensor<Real> sqrt_guarded(Tensor<Real> x) {
    for (Real v : x.values())
        if (v < Real(0)) throw DomainError("sqrt: negative operand");
    return detail::unary_op<Real>(
        "sqrt", std::move(x), [](Real v) { return std::sqrt(v); },
        [](Real, Real y) { return y > Real(0) ? Real(1) / (Real(2) * y) : Real(0); });
}

template <typename Real>
Tensor<Real> abs(Tensor<Real> x) {
    return detail::unary_op<Real>(
        "abs", std::move(x), [](Real v) { return std::abs(v); },
        [](Real v, Real) { return v > Real(0) ? Real(1) : (v < Real(0) ? Real(-1) : Real(0)); });
}

template <typename Real>
Tensor<Real> neg(Tensor<Real> x) {
    return detail::unary_op<Real>(
        "neg", std::move(x), [](Real v) { return -v; }, [](Real, Real) { return Real(-1); });
}

/// x * c for a plain constant.
template <typename Real>
Tensor<Real> scale(Tensor<Real> x, Real c) {
    return detail::unary_op<Real>(
        "scale", std::move(x), [c](Real v) { return v * c; }, [c](Real, Real) { return c; });
}

/// x + c for a plain constant.
template <typename Real>
Tensor<Real> add_scalar(Tensor<Real> x, Real c) {
    return detail::unary_op<Real>(
        "add_scalar", std::move(x), [c](Real v) { return v + c; },
        [](Real, Real) { return Real(1); });
}

/// max(x, c): clamp from below against a constant; subgradient 0 at/below c.
template <typename Real>
Tensor<Real> clamp_min(Tensor<Real> x, Real c) {
    return detail::unary_op<Real>(
        "clamp_min", std::move(x), [c](Real v) { return v > c ? v : c; },
        [c](Real v, Real) { return v > c ? Real(1) : Real(0); });
}

/// log(x) clamped from below at `floor_value`, with the logarithm never
/// materialized where it would underflow to -inf. Gradient is 1/x above the
/// floor and 0 at it.
template <typename Real>
Tensor<Real> log_clamped(Tensor<Real> x, Real floor_value) {
    for (Real v : x.values())
        if (v < Real(0)) throw DomainError("log_clamped: negative operand");
    const Real lift = std::exp(floor_value);
    return detail::unary_op<Real>(
        "log_clamped", std::move(x),
        [floor_value, lift](Real v) {
            return v > lift ? std::max(std::log(v), floor_value) : floor_value;
        },
        [lift](Real v, Real) { return v > lift ? Real(1) / v : Real(0); });
}

/// Dispatch entry point mirroring the operation table: binary kinds take two
/// tensors, unary kinds one.
template <typename Real>
Tensor<Real> elementwise(EwKind kind, Tensor<Real> a) {
    switch (kind) {
        case EwKind::exp: return exp(std::move(a));
        case EwKind::log: return log(std::move(a));
        case EwKind::tanh: return tanh(std::move(a));
        case EwKind::sigmoid: return sigmoid(std::move(a));
        case EwKind::relu: return relu(std::move(a));
        default: throw DomainError("elementwise: kind requires two operands");
    }
}

template <typename Real>
Tensor<Real> elementwise(EwKind kind, Tensor<Real> a, Tensor<Real> b) {
    switch (kind) {
        case EwKind::add: return add(std::move(a), std::move(b));
        case EwKind::sub: return sub(std::move(a), std::move(b));
        case EwKind::mul: return mul(std::move(a), std::move(b));
        case EwKind::div: return div(std::move(a), std::move(b));
        default: throw DomainError("elementwise: kind takes one operand");
    }
}

template <typename Real>
Tensor<Real> operator+(Tensor<Real> a, Tensor<Real> b) {
    return add(std::move(a), std::move(b));
}
template <typename Real>
Tensor<Real> operator-(Tensor<Real> a, Tensor<Real> b) {
    return sub(std::move(a), std::move(b));
}
template <typename Real>
Tensor<Real> operator*(Tensor<Real> a, Tensor<Real> b) {
    return mul(std::move(a), std::move(b));
}

// ---------------------------------------------------------------------------
// Matrix multiply with broadcast over leading batch dimensions.
// ---------------------------------------------------------------------------

template <typename Real>
Tensor<Real> matmul(Tensor<Real> a, Tensor<Real> b) {
    if (a.rank() < 2 || b.rank() < 2) throw ShapeError("matmul requires rank >= 2");
    const std::size_t m = a.shape()[a.rank() - 2];
    const std::size_t ka = a.shape()[a.rank() - 1];
    const std::size_t kb = b.shape()[b.rank() - 2];
    const std::size_t n = b.shape()[b.rank() - 1];
    if (ka != kb)
        throw ShapeError("matmul inner extents differ: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    const Shape batch_a(a.shape().begin(), a.shape().end() - 2);
    const Shape batch_b(b.shape().begin(), b.shape().end() - 2);
    const auto plan = detail::broadcast_plan(batch_a, batch_b, "matmul(batch)");

    Shape out_shape = plan.out;
    out_shape.push_back(m);
    out_shape.push_back(n);
    Tensor<Real> out(out_shape);

    const std::size_t mat_a = m * ka, mat_b = ka * n, mat_o = m * n;
    {
        const auto av = a.values();
        const auto bv = b.values();
        auto ov = out.values();
        std::vector<double> acc(n);
        detail::for_each_broadcast(plan, [&](std::size_t ob, std::size_t ia, std::size_t ib) {
            const Real* pa = av.data() + ia * mat_a;
            const Real* pb = bv.data() + ib * mat_b;
            Real* po = ov.data() + ob * mat_o;
            for (std::size_t i = 0; i < m; ++i) {
                std::fill(acc.begin(), acc.end(), 0.0);
                for (std::size_t k = 0; k < ka; ++k) {
                    const double aik = static_cast<double>(pa[i * ka + k]);
                    if (aik == 0.0) continue;
                    const Real* brow = pb + k * n;
                    for (std::size_t j = 0; j < n; ++j)
                        acc[j] += aik * static_cast<double>(brow[j]);
                }
                for (std::size_t j = 0; j < n; ++j) po[i * n + j] = static_cast<Real>(acc[j]);
            }
        });
    }
    detail::check_finite(out, "matmul");

    if (detail::tape_should_record<Real>({&a, &b})) {
        detail::prepare_node(out, {&a, &b});
        auto ga = a.requires_grad() ? a.grad_buffer() : nullptr;
        auto gb = b.requires_grad() ? b.grad_buffer() : nullptr;
        auto go = out.grad_buffer();
        auto pa = a.payload();
        auto pb = b.payload();
        Tape<Real>::active()->record([plan, ga, gb, go, pa, pb, m, ka, n, mat_a, mat_b, mat_o]() {
            detail::for_each_broadcast(plan, [&](std::size_t ob, std::size_t ia, std::size_t ib) {
                const Real* g = go->data() + ob * mat_o;
                const Real* A = pa->data() + ia * mat_a;
                const Real* B = pb->data() + ib * mat_b;
                if (ga) {
                    Real* dst = ga->data() + ia * mat_a;
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < n; ++j) {
                            const Real gij = g[i * n + j];
                            if (gij == Real(0)) continue;
                            for (std::size_t k = 0; k < ka; ++k)
                                dst[i * ka + k] += gij * B[k * n + j];
                        }
                }
                if (gb) {
                    Real* dst = gb->data() + ib * mat_b;
                    for (std::size_t k = 0; k < ka; ++k)
                        for (std::size_t i = 0; i < m; ++i) {
                            const Real aik = A[i * ka + k];
                            if (aik == Real(0)) continue;
                            for (std::size_t j = 0; j < n; ++j)
                                dst[k * n + j] += aik * g[i * n + j];
                        }
                }
            });
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Softmax over the last dimension, max-subtracted for stability.
// ---------------------------------------------------------------------------

template <typename Real>
Tensor<Real> softmax_lastdim(Tensor<Real> x) {
    if (x.rank() == 0 || x.shape().back() == 0) throw ShapeError("softmax: empty last dimension");
    const std::size_t cols = x.shape().back();
    const std::size_t rows = x.numel() / cols;
    Tensor<Real> out(x.shape());
    {
        const auto xv = x.values();
        auto ov = out.values();
        for (std::size_t r = 0; r < rows; ++r) {
            const Real* px = xv.data() + r * cols;
            Real* po = ov.data() + r * cols;
            double mx = static_cast<double>(px[0]);
            for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, static_cast<double>(px[c]));
            double sum = 0.0;
            for (std::size_t c = 0; c < cols; ++c) {
                const double e = std::exp(static_cast<double>(px[c]) - mx);
                po[c] = static_cast<Real>(e);
                sum += e;
            }
            const double inv = 1.0 / sum;
            for (std::size_t c = 0; c < cols; ++c)
                po[c] = static_cast<Real>(static_cast<double>(po[c]) * inv);
        }
    }
    detail::check_finite(out, "softmax");
    if (detail::tape_should_record<Real>({&x})) {
        detail::prepare_node(out, {&x});
        auto gx = x.grad_buffer();
        auto go = out.grad_buffer();
        auto po = out.payload();
        Tape<Real>::active()->record([gx, go, po, rows, cols]() {
            for (std::size_t r = 0; r < rows; ++r) {
                const Real* y = po->data() + r * cols;
                const Real* g = go->data() + r * cols;
                Real* dst = gx->data() + r * cols;
                double dot = 0.0;
                for (std::size_t c = 0; c < cols; ++c)
                    dot += static_cast<double>(g[c]) * static_cast<double>(y[c]);
                for (std::size_t c = 0; c < cols; ++c)
                    dst[c] += static_cast<Real>(
                        static_cast<double>(y[c]) * (static_cast<double>(g[c]) - dot));
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Concatenation / splitting along an axis. split(concat) and concat(split)
// are bit-exact round trips.
// ---------------------------------------------------------------------------

template <typename Real>
Tensor<Real> concat(const std::vector<Tensor<Real>>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat of zero tensors");
    const Shape& first = parts[0].shape();
    if (axis >= first.size()) throw ShapeError("concat axis out of range");
    std::size_t axis_total = 0;
    for (const auto& p : parts) {
        if (p.rank() != first.size()) throw ShapeError("concat rank mismatch");
        for (std::size_t d = 0; d < first.size(); ++d)
            if (d != axis && p.shape()[d] != first[d])
                throw ShapeError("concat extent mismatch on non-concat axis " + std::to_string(d));
        axis_total += p.shape()[axis];
    }
    Shape out_shape = first;
    out_shape[axis] = axis_total;
    Tensor<Real> out(out_shape);

    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
    for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];

    std::vector<std::size_t> offsets;  // element offset of each part within an outer row
    {
        auto ov = out.values();
        std::size_t axis_off = 0;
        for (const auto& p : parts) {
            offsets.push_back(axis_off);
            const std::size_t block = p.shape()[axis] * inner;
            const auto pv = p.values();
            for (std::size_t o = 0; o < outer; ++o)
                std::copy(pv.data() + o * block, pv.data() + (o + 1) * block,
                          ov.data() + o * axis_total * inner + axis_off * inner);
            axis_off += p.shape()[axis];
        }
    }

    bool any_grad = false;
    for (const auto& p : parts)
        if (p.requires_grad()) any_grad = true;
    if (Tape<Real>::active() && any_grad) {
        Tensor<Real>& mut_out = out;
        mut_out.set_requires_grad(true);
        struct Piece {
            typename Tensor<Real>::Buffer grad;
            std::size_t extent, offset;
        };
        std::vector<Piece> pieces;
        for (std::size_t i = 0; i < parts.size(); ++i) {
            auto& p = const_cast<Tensor<Real>&>(parts[i]);
            if (p.requires_grad()) p.ensure_grad();
            pieces.push_back({p.requires_grad() ? p.grad_buffer() : nullptr, p.shape()[axis],
                              offsets[i]});
        }
        auto go = out.grad_buffer();
        Tape<Real>::active()->record([go, pieces, outer, inner, axis_total]() {
            for (const auto& piece : pieces) {
                if (!piece.grad) continue;
                const std::size_t block = piece.extent * inner;
                for (std::size_t o = 0; o < outer; ++o) {
                    const Real* src = go->data() + o * axis_total * inner + piece.offset * inner;
                    Real* dst = piece.grad->data() + o * block;
                    for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
                }
            }
        });
    }
    return out;
}

template <typename Real>
Tensor<Real> concat(Tensor<Real> a, Tensor<Real> b, std::size_t axis) {
    return concat(std::vector<Tensor<Real>>{std::move(a), std::move(b)}, axis);
}

/// Slice of `len` extents starting at `start` along `axis` (copying).
template <typename Real>
Tensor<Real> slice(Tensor<Real> x, std::size_t axis, std::size_t start, std::size_t len) {
    if (axis >= x.rank()) throw ShapeError("slice axis out of range");
    if (start + len > x.shape()[axis] || len == 0)
        throw ShapeError("slice range [" + std::to_string(start) + "," +
                         std::to_string(start + len) + ") out of axis extent " +
                         std::to_string(x.shape()[axis]));
    Shape out_shape = x.shape();
    out_shape[axis] = len;
    Tensor<Real> out(out_shape);

    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= x.shape()[d];
    for (std::size_t d = axis + 1; d < x.rank(); ++d) inner *= x.shape()[d];
    const std::size_t axis_extent = x.shape()[axis];
    {
        const auto xv = x.values();
        auto ov = out.values();
        for (std::size_t o = 0; o < outer; ++o)
            std::copy(xv.data() + (o * axis_extent + start) * inner,
                      xv.data() + (o * axis_extent + start + len) * inner,
                      ov.data() + o * len * inner);
    }
    if (detail::tape_should_record<Real>({&x})) {
        detail::prepare_node(out, {&x});
        auto gx = x.grad_buffer();
        auto go = out.grad_buffer();
        Tape<Real>::active()->record([gx, go, outer, inner, axis_extent, start, len]() {
            for (std::size_t o = 0; o < outer; ++o) {
                const Real* src = go->data() + o * len * inner;
                Real* dst = gx->data() + (o * axis_extent + start) * inner;
                for (std::size_t i = 0; i < len * inner; ++i) dst[i] += src[i];
            }
        });
    }
    return out;
}

/// Splits an axis into `groups` equal parts; errors if indivisible.
template <typename Real>
std::vector<Tensor<Real>> split(const Tensor<Real>& x, std::size_t axis, std::size_t groups) {
    if (axis >= x.rank()) throw ShapeError("split axis out of range");
    if (groups == 0 || x.shape()[axis] % groups != 0)
        throw ShapeError("split: axis extent " + std::to_string(x.shape()[axis]) +
                         " not divisible by " + std::to_string(groups));
    const std::size_t piece = x.shape()[axis] / groups;
    std::vector<Tensor<Real>> out;
    out.reserve(groups);
    for (std::size_t g = 0; g < groups; ++g) out.push_back(slice(x, axis, g * piece, piece));
    return out;
}

// ---------------------------------------------------------------------------
// Axis permutation (copying transpose).
// ---------------------------------------------------------------------------

template <typename Real>
Tensor<Real> permute(Tensor<Real> x, const std::vector<std::size_t>& perm) {
    if (perm.size() != x.rank()) throw ShapeError("permute rank mismatch");
    std::vector<bool> seen(perm.size(), false);
    for (std::size_t p : perm) {
        if (p >= perm.size() || seen[p]) throw ShapeError("permute is not a permutation");
        seen[p] = true;
    }
    Shape out_shape(perm.size());
    for (std::size_t d = 0; d < perm.size(); ++d) out_shape[d] = x.shape()[perm[d]];
    Tensor<Real> out(out_shape);

    const auto in_strides = detail::row_major_strides(x.shape());
    std::vector<std::size_t> gather(perm.size());
    for (std::size_t d = 0; d < perm.size(); ++d) gather[d] = in_strides[perm[d]];

    const std::size_t total = x.numel();
    const std::size_t rank = perm.size();
    std::vector<std::size_t> map(total);
    {
        std::vector<std::size_t> idx(rank, 0);
        std::size_t src = 0;
        for (std::size_t flat = 0; flat < total; ++flat) {
            map[flat] = src;
            for (std::size_t d = rank; d-- > 0;) {
                ++idx[d];
                src += gather[d];
                if (idx[d] < out_shape[d]) break;
                src -= gather[d] * out_shape[d];
                idx[d] = 0;
            }
        }
        const auto xv = x.values();
        auto ov = out.values();
        for (std::size_t flat = 0; flat < total; ++flat) ov[flat] = xv[map[flat]];
    }
    if (detail::tape_should_record<Real>({&x})) {
        detail::prepare_node(out, {&x});
        auto gx = x.grad_buffer();
        auto go = out.grad_buffer();
        auto shared_map = std::make_shared<std::vector<std::size_t>>(std::move(map));
        Tape<Real>::active()->record([gx, go, shared_map]() {
            for (std::size_t flat = 0; flat < shared_map->size(); ++flat)
                (*gx)[(*shared_map)[flat]] += (*go)[flat];
        });
    }
    return out;
}

/// Reshape that participates in the tape through buffer sharing: the result
/// aliases both payload and gradient, so no node is needed.
template <typename Real>
Tensor<Real> reshape(const Tensor<Real>& x, Shape new_shape) {
    if (Tape<Real>::active() && x.requires_grad())
        const_cast<Tensor<Real>&>(x).ensure_grad();
    return x.reshaped(std::move(new_shape));
}

// ---------------------------------------------------------------------------
// Reductions.
// ---------------------------------------------------------------------------

template <typename Real>
Tensor<Real> sum_all(Tensor<Real> x) {
    double acc = 0.0;
    for (Real v : x.values()) acc += static_cast<double>(v);
    Tensor<Real> out = Tensor<Real>::scalar(static_cast<Real>(acc));
    detail::check_finite(out, "sum");
    if (detail::tape_should_record<Real>({&x})) {
        detail::prepare_node(out, {&x});
        auto gx = x.grad_buffer();
        auto go = out.grad_buffer();
        Tape<Real>::active()->record([gx, go]() {
            const Real g = (*go)[0];
            if (g == Real(0)) return;
            for (auto& v : *gx) v += g;
        });
    }
    return out;
}

template <typename Real>
Tensor<Real> mean_all(Tensor<Real> x) {
    const Real inv = Real(1.0 / static_cast<double>(x.numel()));
    return scale(sum_all(std::move(x)), inv);
}

// ---------------------------------------------------------------------------
// Pairwise squared distances between two point sets, computed per pair so
// the diagonal of a self-comparison is exactly zero.
// ---------------------------------------------------------------------------

template <typename Real>
Tensor<Real> pairwise_sqdist(Tensor<Real> a, Tensor<Real> b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1])
        throw ShapeError("pairwise_sqdist expects [N,D] and [M,D]");
    const std::size_t n = a.shape()[0], m = b.shape()[0], d = a.shape()[1];
    Tensor<Real> out(Shape{n, m});
    {
        const auto av = a.values();
        const auto bv = b.values();
        auto ov = out.values();
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) {
                double s = 0.0;
                for (std::size_t k = 0; k < d; ++k) {
                    const double diff = static_cast<double>(av[i * d + k]) -
                                        static_cast<double>(bv[j * d + k]);
                    s += diff * diff;
                }
                ov[i * m + j] = static_cast<Real>(s);
            }
    }
    detail::check_finite(out, "pairwise_sqdist");
    if (detail::tape_should_record<Real>({&a, &b})) {
        detail::prepare_node(out, {&a, &b});
        auto ga = a.requires_grad() ? a.grad_buffer() : nullptr;
        auto gb = b.requires_grad() ? b.grad_buffer() : nullptr;
        auto go = out.grad_buffer();
        auto pa = a.payload();
        auto pb = b.payload();
        Tape<Real>::active()->record([ga, gb, go, pa, pb, n, m, d]() {
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < m; ++j) {
                    const Real g = (*go)[i * m + j];
                    if (g == Real(0)) continue;
                    for (std::size_t k = 0; k < d; ++k) {
                        const Real diff = (*pa)[i * d + k] - (*pb)[j * d + k];
                        if (ga) (*ga)[i * d + k] += Real(2) * diff * g;
                        if (gb) (*gb)[j * d + k] -= Real(2) * diff * g;
                    }
                }
        });
    }
    return out;
}

/// Constant tensor helper: values fixed, never differentiable.
template <typename Real>
Tensor<Real> constant(Shape shape, std::vector<Real> values) {
    return Tensor<Real>(std::move(shape), std::move(values), false);
}

}  // namespace physmv
