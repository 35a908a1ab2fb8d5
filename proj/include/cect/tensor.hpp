#pragma once

// Dense tensor with tape-based reverse-mode autodiff. Tensors are cheap
// handles onto shared nodes; an op output that requires grad keeps shared
// ownership of its inputs plus a closure that scatters the output gradient
// back into them. backward() walks that DAG once in reverse topological
// order and then releases it.
//
// The element type is a template parameter: the product path runs
// TensorT<float> (alias Tensor), while gradient-check harnesses instantiate
// TensorT<double>. Reductions inside ops always accumulate in double and
// round once on store, so float results stay close to the double oracles.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "cect/errors.hpp"
#include "cect/rng.hpp"

namespace cect {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

namespace autograd {

inline thread_local bool grad_enabled = true;

// RAII guard disabling tape recording on the current thread.
struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_enabled) { grad_enabled = false; }
    ~NoGradGuard() { grad_enabled = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline std::atomic<bool> finite_checks{true};
inline bool finite_checks_enabled() { return finite_checks.load(std::memory_order_relaxed); }
inline void set_finite_checks(bool on) { finite_checks.store(on, std::memory_order_relaxed); }

inline std::uint64_t next_node_id() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1, std::memory_order_relaxed);
}

} // namespace autograd

template <typename S>
struct TensorNode {
    Shape shape;
    std::vector<S> value;
    std::vector<S> grad; // empty until backward touches this node
    bool requires_grad = false;
    std::uint64_t id = autograd::next_node_id();
    const char* op = "leaf";
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void()> backward_fn;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), S(0));
    }
};

template <typename S>
class TensorT {
public:
    using Scalar = S;

    TensorT() = default;

    explicit TensorT(Shape shape, S fill = S(0)) : node_(std::make_shared<TensorNode<S>>()) {
        node_->shape = std::move(shape);
        node_->value.assign(static_cast<std::size_t>(shape_numel(node_->shape)), fill);
    }

    TensorT(Shape shape, std::vector<S> data) : node_(std::make_shared<TensorNode<S>>()) {
        if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
            throw DimensionError("tensor: shape " + shape_str(shape) + " does not match buffer of " +
                                 std::to_string(data.size()) + " elements");
        node_->shape = std::move(shape);
        node_->value = std::move(data);
    }

    static TensorT scalar(S v) { return TensorT(Shape{}, std::vector<S>{v}); }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    std::int64_t dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
    std::int64_t size() const { return static_cast<std::int64_t>(node_->value.size()); }
    std::uint64_t id() const { return node_->id; }

    S* data() { return node_->value.data(); }
    const S* data() const { return node_->value.data(); }
    std::vector<S>& values() { return node_->value; }
    const std::vector<S>& values() const { return node_->value; }

    S item() const {
        if (size() != 1) throw ContractError("item(): tensor has shape " + shape_str(shape()));
        return node_->value[0];
    }

    S& at(const std::vector<std::int64_t>& idx) {
        return node_->value[static_cast<std::size_t>(flat_index(idx))];
    }
    S at(const std::vector<std::int64_t>& idx) const {
        return node_->value[static_cast<std::size_t>(flat_index(idx))];
    }

    bool requires_grad() const { return node_ && node_->requires_grad; }
    TensorT& set_requires_grad(bool v) {
        node_->requires_grad = v;
        return *this;
    }

    bool has_grad() const { return node_ && !node_->grad.empty(); }
    const std::vector<S>& grad() const { return node_->grad; }
    std::vector<S>& grad() { return node_->grad; }
    void zero_grad() { node_->grad.clear(); }

    std::shared_ptr<TensorNode<S>> node() const { return node_; }

    // Value copy detached from any recorded graph.
    TensorT detach() const {
        TensorT out(node_->shape, node_->value);
        return out;
    }

private:
    std::int64_t flat_index(const std::vector<std::int64_t>& idx) const {
        if (idx.size() != node_->shape.size())
            throw ContractError("at(): rank mismatch for shape " + shape_str(shape()));
        std::int64_t off = 0;
        for (std::size_t d = 0; d < idx.size(); ++d) {
            if (idx[d] < 0 || idx[d] >= node_->shape[d])
                throw ContractError("at(): index out of range for shape " + shape_str(shape()));
            off = off * node_->shape[d] + idx[d];
        }
        return off;
    }

    std::shared_ptr<TensorNode<S>> node_;
};

using Tensor = TensorT<float>;

namespace detail {

template <typename S>
void check_finite(const TensorT<S>& t, const char* op) {
    if (!autograd::finite_checks_enabled()) return;
    for (S v : t.values()) {
        if (!std::isfinite(static_cast<double>(v)))
            throw NumericError(std::string("non-finite value produced by op '") + op + "' (node " +
                               std::to_string(t.id()) + ")");
    }
}

template <typename S>
bool any_requires_grad(std::initializer_list<const TensorT<S>*> ts) {
    if (!autograd::grad_enabled) return false;
    for (const auto* t : ts)
        if (t->defined() && t->requires_grad()) return true;
    return false;
}

// Wire `out` into the tape. `fn` must scatter out.grad into the parents.
template <typename S>
void attach(TensorT<S>& out, const char* op, std::vector<std::shared_ptr<TensorNode<S>>> parents,
            std::function<void()> fn) {
    auto n = out.node();
    n->op = op;
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward_fn = std::move(fn);
}

template <typename S>
void accumulate(TensorNode<S>& node, const std::vector<double>& contribution) {
    node.ensure_grad();
    for (std::size_t i = 0; i < contribution.size(); ++i) node.grad[i] += static_cast<S>(contribution[i]);
}

} // namespace detail

// ---------------------------------------------------------------------------
// backward

template <typename S>
void backward(const TensorT<S>& loss) {
    if (!loss.defined()) throw ContractError("backward: undefined tensor");
    if (loss.size() != 1)
        throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    auto root = loss.node();
    if (!root->requires_grad)
        throw ContractError("backward: loss is not connected to any tensor requiring grad");

    // Iterative post-order DFS; reversed, it yields children-before-parents.
    std::vector<TensorNode<S>*> order;
    std::unordered_set<TensorNode<S>*> visited;
    struct Frame {
        TensorNode<S>* node;
        std::size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({root.get(), 0});
    visited.insert(root.get());
    while (!stack.empty()) {
        Frame f = stack.back();
        if (f.next_parent < f.node->parents.size()) {
            stack.back().next_parent++;
            TensorNode<S>* p = f.node->parents[f.next_parent].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }

    root->grad.assign(1, S(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward_fn) (*it)->backward_fn();
    }
    // Release the recorded graph; leaves keep their grads.
    for (auto* n : order) {
        n->backward_fn = nullptr;
        n->parents.clear();
    }
}

// ---------------------------------------------------------------------------
// elementwise ops

template <typename S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.shape() != b.shape())
        throw DimensionError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    TensorT<S> out(a.shape());
    const S* pa = a.data();
    const S* pb = b.data();
    S* po = out.data();
    for (std::int64_t i = 0; i < a.size(); ++i) po[i] = pa[i] + pb[i];
    detail::check_finite(out, "add");
    if (detail::any_requires_grad<S>({&a, &b})) {
        auto an = a.node(), bn = b.node(), on = out.node();
        detail::attach(out, "add", {an, bn}, [an, bn, on] {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i];
            }
        });
    }
    return out;
}

template <typename S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.shape() != b.shape())
        throw DimensionError("sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    TensorT<S> out(a.shape());
    for (std::int64_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
    detail::check_finite(out, "sub");
    if (detail::any_requires_grad<S>({&a, &b})) {
        auto an = a.node(), bn = b.node(), on = out.node();
        detail::attach(out, "sub", {an, bn}, [an, bn, on] {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] -= on->grad[i];
            }
        });
    }
    return out;
}

template <typename S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.shape() != b.shape())
        throw DimensionError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    TensorT<S> out(a.shape());
    for (std::int64_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
    detail::check_finite(out, "mul");
    if (detail::any_requires_grad<S>({&a, &b})) {
        auto an = a.node(), bn = b.node(), on = out.node();
        detail::attach(out, "mul", {an, bn}, [an, bn, on] {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * bn->value[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i] * an->value[i];
            }
        });
    }
    return out;
}

template <typename S>
TensorT<S> scale(const TensorT<S>& a, double c) {
    TensorT<S> out(a.shape());
    const S sc = static_cast<S>(c);
    for (std::int64_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * sc;
    detail::check_finite(out, "scale");
    if (detail::any_requires_grad<S>({&a})) {
        auto an = a.node(), on = out.node();
        detail::attach(out, "scale", {an}, [an, on, sc] {
            an->ensure_grad();
            for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * sc;
        });
    }
    return out;
}

template <typename S>
TensorT<S> sum(const TensorT<S>& a) {
    double acc = 0.0;
    for (std::int64_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a.data()[i]);
    TensorT<S> out = TensorT<S>::scalar(static_cast<S>(acc));
    detail::check_finite(out, "sum");
    if (detail::any_requires_grad<S>({&a})) {
        auto an = a.node(), on = out.node();
        detail::attach(out, "sum", {an}, [an, on] {
            an->ensure_grad();
            const S g = on->grad[0];
            for (auto& v : an->grad) v += g;
        });
    }
    return out;
}

template <typename S>
TensorT<S> relu(const TensorT<S>& a) {
    TensorT<S> out(a.shape());
    for (std::int64_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] > S(0) ? a.data()[i] : S(0);
    detail::check_finite(out, "relu");
    if (detail::any_requires_grad<S>({&a})) {
        auto an = a.node(), on = out.node();
        detail::attach(out, "relu", {an}, [an, on] {
            an->ensure_grad();
            for (std::size_t i = 0; i < on->grad.size(); ++i)
                if (an->value[i] > S(0)) an->grad[i] += on->grad[i];
        });
    }
    return out;
}

// Exact Gaussian-CDF GELU: x * Phi(x).
template <typename S>
TensorT<S> gelu(const TensorT<S>& a) {
    TensorT<S> out(a.shape());
    for (std::int64_t i = 0; i < a.size(); ++i) {
        const double x = static_cast<double>(a.data()[i]);
        out.data()[i] = static_cast<S>(0.5 * x * (1.0 + std::erf(x * 0.7071067811865475244)));
    }
    detail::check_finite(out, "gelu");
    if (detail::any_requires_grad<S>({&a})) {
        auto an = a.node(), on = out.node();
        detail::attach(out, "gelu", {an}, [an, on] {
            an->ensure_grad();
            constexpr double inv_sqrt_2pi = 0.3989422804014326779;
            for (std::size_t i = 0; i < on->grad.size(); ++i) {
                const double x = static_cast<double>(an->value[i]);
                const double phi = 0.5 * (1.0 + std::erf(x * 0.7071067811865475244));
                const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
                an->grad[i] += on->grad[i] * static_cast<S>(phi + x * pdf);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// shape ops

template <typename S>
TensorT<S> reshape(const TensorT<S>& a, Shape shape) {
    // One extent may be -1 and is inferred.
    std::int64_t known = 1;
    int infer = -1;
    for (std::size_t d = 0; d < shape.size(); ++d) {
        if (shape[d] == -1) {
            if (infer >= 0) throw DimensionError("reshape: more than one inferred extent");
            infer = static_cast<int>(d);
        } else {
            known *= shape[d];
        }
    }
    if (infer >= 0) {
        if (known == 0 || a.size() % known != 0)
            throw DimensionError("reshape: cannot infer extent for " + shape_str(a.shape()));
        shape[static_cast<std::size_t>(infer)] = a.size() / known;
    }
    if (shape_numel(shape) != a.size())
        throw DimensionError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape) +
                             " changes element count");
    TensorT<S> out(std::move(shape), a.values());
    if (detail::any_requires_grad<S>({&a})) {
        auto an = a.node(), on = out.node();
        detail::attach(out, "reshape", {an}, [an, on] {
            an->ensure_grad();
            for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
        });
    }
    return out;
}

namespace detail {

inline std::vector<std::int64_t> row_major_strides(const Shape& s) {
    std::vector<std::int64_t> st(s.size(), 1);
    for (int d = static_cast<int>(s.size()) - 2; d >= 0; --d) st[d] = st[d + 1] * s[d + 1];
    return st;
}

// dst[out coords] = src[out coords mapped through perm]; returns out shape.
template <typename S>
void permute_copy(const std::vector<S>& src, const Shape& in_shape, const std::vector<int>& perm,
                  std::vector<S>& dst, Shape& out_shape) {
    const int r = static_cast<int>(in_shape.size());
    out_shape.resize(in_shape.size());
    for (int d = 0; d < r; ++d) out_shape[d] = in_shape[static_cast<std::size_t>(perm[d])];
    const auto in_strides = row_major_strides(in_shape);
    std::vector<std::int64_t> step(in_shape.size());
    for (int d = 0; d < r; ++d) step[d] = in_strides[static_cast<std::size_t>(perm[d])];
    dst.resize(src.size());
    std::vector<std::int64_t> coord(in_shape.size(), 0);
    std::int64_t in_off = 0;
    const std::int64_t n = static_cast<std::int64_t>(src.size());
    for (std::int64_t o = 0; o < n; ++o) {
        dst[static_cast<std::size_t>(o)] = src[static_cast<std::size_t>(in_off)];
        for (int d = r - 1; d >= 0; --d) {
            in_off += step[d];
            if (++coord[d] < out_shape[d]) break;
            in_off -= step[d] * out_shape[d];
            coord[d] = 0;
        }
    }
}

} // namespace detail

template <typename S>
TensorT<S> permute(const TensorT<S>& a, const std::vector<int>& perm) {
    const int r = a.rank();
    if (static_cast<int>(perm.size()) != r)
        throw DimensionError("permute: order has " + std::to_string(perm.size()) + " entries for rank " +
                             std::to_string(r));
    std::vector<bool> seen(static_cast<std::size_t>(r), false);
    for (int p : perm) {
        if (p < 0 || p >= r || seen[static_cast<std::size_t>(p)])
            throw DimensionError("permute: invalid axis order");
        seen[static_cast<std::size_t>(p)] = true;
    }
    std::vector<S> data;
    Shape out_shape;
    detail::permute_copy(a.values(), a.shape(), perm, data, out_shape);
    TensorT<S> out(out_shape, std::move(data));
    if (detail::any_requires_grad<S>({&a})) {
        std::vector<int> inv(perm.size());
        for (int d = 0; d < r; ++d) inv[static_cast<std::size_t>(perm[d])] = d;
        auto an = a.node(), on = out.node();
        detail::attach(out, "permute", {an}, [an, on, inv] {
            std::vector<S> g;
            Shape gshape;
            detail::permute_copy(on->grad, on->shape, inv, g, gshape);
            an->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i];
        });
    }
    return out;
}

// Cyclic shift of the two middle axes of [N, H, W, C]. Content at (y, x)
// moves to ((y + sy) mod H, (x + sx) mod W).
template <typename S>
TensorT<S> roll2d(const TensorT<S>& a, std::int64_t sy, std::int64_t sx) {
    if (a.rank() != 4) throw DimensionError("roll2d: expected rank-4 tokens, got " + shape_str(a.shape()));
    const std::int64_t N = a.dim(0), H = a.dim(1), W = a.dim(2), C = a.dim(3);
    auto mod = [](std::int64_t v, std::int64_t m) { return ((v % m) + m) % m; };
    sy = mod(sy, H);
    sx = mod(sx, W);
    TensorT<S> out(a.shape());
    const S* src = a.data();
    S* dst = out.data();
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t y = 0; y < H; ++y) {
            const std::int64_t oy = y + sy >= H ? y + sy - H : y + sy;
            for (std::int64_t x = 0; x < W; ++x) {
                const std::int64_t ox = x + sx >= W ? x + sx - W : x + sx;
                const S* s0 = src + ((n * H + y) * W + x) * C;
                S* d0 = dst + ((n * H + oy) * W + ox) * C;
                for (std::int64_t c = 0; c < C; ++c) d0[c] = s0[c];
            }
        }
    if (detail::any_requires_grad<S>({&a})) {
        auto an = a.node(), on = out.node();
        detail::attach(out, "roll2d", {an}, [an, on, sy, sx, N, H, W, C] {
            an->ensure_grad();
            for (std::int64_t n = 0; n < N; ++n)
                for (std::int64_t y = 0; y < H; ++y) {
                    const std::int64_t oy = y + sy >= H ? y + sy - H : y + sy;
                    for (std::int64_t x = 0; x < W; ++x) {
                        const std::int64_t ox = x + sx >= W ? x + sx - W : x + sx;
                        const S* g0 = on->grad.data() + ((n * H + oy) * W + ox) * C;
                        S* d0 = an->grad.data() + ((n * H + y) * W + x) * C;
                        for (std::int64_t c = 0; c < C; ++c) d0[c] += g0[c];
                    }
                }
        });
    }
    return out;
}

// Contiguous slice along the last axis.
template <typename S>
TensorT<S> slice_last(const TensorT<S>& a, std::int64_t start, std::int64_t len) {
    if (a.rank() < 1) throw DimensionError("slice_last: scalar input");
    const std::int64_t D = a.dim(a.rank() - 1);
    if (start < 0 || len < 1 || start + len > D)
        throw DimensionError("slice_last: range [" + std::to_string(start) + "," +
                             std::to_string(start + len) + ") out of extent " + std::to_string(D));
    Shape out_shape = a.shape();
    out_shape.back() = len;
    TensorT<S> out(out_shape);
    const std::int64_t rows = a.size() / D;
    for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < len; ++j) out.data()[r * len + j] = a.data()[r * D + start + j];
    if (detail::any_requires_grad<S>({&a})) {
        auto an = a.node(), on = out.node();
        detail::attach(out, "slice_last", {an, }, [an, on, start, len, D, rows] {
            an->ensure_grad();
            for (std::int64_t r = 0; r < rows; ++r)
                for (std::int64_t j = 0; j < len; ++j)
                    an->grad[static_cast<std::size_t>(r * D + start + j)] +=
                        on->grad[static_cast<std::size_t>(r * len + j)];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// construction helpers

template <typename S>
TensorT<S> full(Shape shape, S v) {
    return TensorT<S>(std::move(shape), v);
}

template <typename S>
TensorT<S> rand_uniform(Shape shape, double lo, double hi, Rng& rng) {
    TensorT<S> out(std::move(shape));
    for (std::int64_t i = 0; i < out.size(); ++i) out.data()[i] = static_cast<S>(rng.uniform(lo, hi));
    return out;
}

template <typename S>
TensorT<S> rand_normal(Shape shape, double mean, double stddev, Rng& rng) {
    TensorT<S> out(std::move(shape));
    for (std::int64_t i = 0; i < out.size(); ++i)
        out.data()[i] = static_cast<S>(mean + stddev * rng.normal());
    return out;
}

} // namespace cect
