#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mdepth/errors.hpp"
#include "mdepth/rng.hpp"

namespace mdepth {

enum class Dtype : std::uint8_t { f32 = 0, f64 = 1 };

template <class T>
constexpr Dtype dtype_of();
template <>
constexpr Dtype dtype_of<float>() { return Dtype::f32; }
template <>
constexpr Dtype dtype_of<double>() { return Dtype::f64; }

inline const char* dtype_name(Dtype d) { return d == Dtype::f32 ? "f32" : "f64"; }

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::int64_t{1},
                           std::multiplies<std::int64_t>());
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ',';
        os << s[i];
    }
    os << ']';
    return os.str();
}

// Boolean attend/block matrix. true = may attend. Kept separate from Tensor
// (which is strictly floating point).
struct Mask {
    std::int64_t rows = 0;
    std::int64_t cols = 0;
    std::vector<std::uint8_t> data;  // row-major, 0/1

    Mask() = default;
    Mask(std::int64_t r, std::int64_t c, bool fill = true)
        : rows(r), cols(c), data(static_cast<std::size_t>(r * c), fill ? 1 : 0) {}

    bool at(std::int64_t r, std::int64_t c) const {
        return data[static_cast<std::size_t>(r * cols + c)] != 0;
    }
    void set(std::int64_t r, std::int64_t c, bool v) {
        data[static_cast<std::size_t>(r * cols + c)] = v ? 1 : 0;
    }
};

namespace detail {

// Thread-local switch: when false, ops run forward-only (no graph nodes).
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

}  // namespace detail

// RAII scope that disables graph recording (finite-difference passes,
// evaluation, inference).
struct NoGradGuard {
    NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

template <class T>
class Tensor;

template <class T>
struct TensorNode {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // allocated lazily; same length as data when present
    bool requires_grad = false;
    std::vector<Tensor<T>> parents;
    std::function<void(TensorNode<T>&)> backward_fn;
    const char* op = "";

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    bool is_leaf() const { return parents.empty(); }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    }

    void accumulate(const T* g, std::int64_t n) {
        ensure_grad();
        for (std::int64_t i = 0; i < n; ++i) grad[static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(i)];
    }
};

// Dense row-major tensor with optional reverse-mode gradient tracking.
// Value semantics: copies share the underlying node (graph aliasing), like
// the usual framework convention; use clone() for an independent buffer.
template <class T>
class Tensor {
public:
    using Scalar = T;

    Tensor() = default;

    Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
        : node_(std::make_shared<TensorNode<T>>()) {
        const std::int64_t n = shape_numel(shape);
        if (n != static_cast<std::int64_t>(data.size())) {
            throw DimensionError("tensor data length " + std::to_string(data.size()) +
                                 " does not match shape " + shape_str(shape));
        }
        for (auto e : shape) {
            if (e <= 0) throw DimensionError("non-positive extent in shape " + shape_str(shape));
        }
        node_->shape = std::move(shape);
        node_->data = std::move(data);
        node_->requires_grad = requires_grad && grad_enabled();
    }

    static Tensor zeros(const Shape& shape, bool requires_grad = false) {
        return Tensor(shape, std::vector<T>(static_cast<std::size_t>(shape_numel(shape)), T(0)),
                      requires_grad);
    }

    static Tensor full(const Shape& shape, T value, bool requires_grad = false) {
        return Tensor(shape, std::vector<T>(static_cast<std::size_t>(shape_numel(shape)), value),
                      requires_grad);
    }

    static Tensor ones(const Shape& shape, bool requires_grad = false) {
        return full(shape, T(1), requires_grad);
    }

    static Tensor scalar(T value, bool requires_grad = false) {
        return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
    }

    static Tensor randn(const Shape& shape, CounterRng& rng, T stddev = T(1),
                        bool requires_grad = false) {
        std::vector<T> d(static_cast<std::size_t>(shape_numel(shape)));
        for (auto& v : d) v = static_cast<T>(rng.next_normal()) * stddev;
        return Tensor(shape, std::move(d), requires_grad);
    }

    static Tensor identity(std::int64_t n) {
        Tensor t = zeros({n, n});
        for (std::int64_t i = 0; i < n; ++i) t.mut_data()[i * n + i] = T(1);
        return t;
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::int64_t rank() const { return static_cast<std::int64_t>(node_->shape.size()); }
    std::int64_t extent(std::int64_t d) const { return node_->shape[static_cast<std::size_t>(d)]; }
    std::int64_t numel() const { return node_->numel(); }
    Dtype dtype() const { return dtype_of<T>(); }

    // A Tensor is a handle onto a shared node; handle constness does not
    // constrain the node (the usual framework aliasing semantics).
    const T* data() const { return node_->data.data(); }
    T* mut_data() const { return node_->data.data(); }
    const std::vector<T>& data_vec() const { return node_->data; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool v) { node_->requires_grad = v; }

    bool has_grad() const { return !node_->grad.empty(); }
    const std::vector<T>& grad() const { return node_->grad; }
    std::vector<T>& mut_grad() const {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() const {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
    }
    void drop_grad() const { node_->grad.clear(); }

    T item() const {
        if (numel() != 1) throw UsageError("item() requires a single-element tensor");
        return node_->data[0];
    }

    // Deep copy of values; detached from any graph.
    Tensor clone() const {
        return Tensor(node_->shape, node_->data, false);
    }

    // Same buffer contents, different dtype.
    template <class U>
    Tensor<U> cast() const {
        std::vector<U> d(node_->data.size());
        for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<U>(node_->data[i]);
        return Tensor<U>(node_->shape, std::move(d), false);
    }

    bool same_node(const Tensor& other) const { return node_ == other.node_; }

    TensorNode<T>* node() const { return node_.get(); }

    // Reverse-mode backprop from a scalar. Non-leaf gradients are transient
    // per call; leaf gradients accumulate additively across calls.
    void backward() const {
        if (numel() != 1) {
            throw UsageError("backward() requires a scalar loss, got shape " + shape_str(shape()));
        }
        if (!node_->requires_grad) {
            throw UsageError("backward() on a tensor that does not require gradients");
        }
        std::vector<TensorNode<T>*> topo;
        build_topo(node_.get(), topo);
        for (auto* n : topo) {
            if (!n->is_leaf()) n->grad.assign(n->data.size(), T(0));
        }
        node_->ensure_grad();
        node_->grad[0] += T(1);
        for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
            TensorNode<T>* n = *it;
            if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
        }
    }

    // --- graph construction (used by ops) ---

    static Tensor make_op(Shape shape, std::vector<T> data, const char* op,
                          std::vector<Tensor<T>> parents,
                          std::function<void(TensorNode<T>&)> backward) {
        Tensor out(std::move(shape), std::move(data), false);
        bool track = false;
        if (grad_enabled()) {
            for (const auto& p : parents) track = track || p.requires_grad();
        }
        if (track) {
            out.node_->requires_grad = true;
            out.node_->parents = std::move(parents);
            out.node_->backward_fn = std::move(backward);
            out.node_->op = op;
        }
        return out;
    }

private:
    static void build_topo(TensorNode<T>* root, std::vector<TensorNode<T>*>& topo) {
        // Iterative DFS; graphs get deep at per-op granularity.
        std::unordered_set<TensorNode<T>*> visited;
        std::vector<std::pair<TensorNode<T>*, std::size_t>> stack;
        stack.emplace_back(root, 0);
        visited.insert(root);
        while (!stack.empty()) {
            auto& [n, idx] = stack.back();
            if (idx < n->parents.size()) {
                TensorNode<T>* p = n->parents[idx].node();
                ++idx;
                if (p->requires_grad && visited.insert(p).second) {
                    stack.emplace_back(p, 0);
                }
            } else {
                topo.push_back(n);
                stack.pop_back();
            }
        }
    }

    std::shared_ptr<TensorNode<T>> node_;
};

// Forward outputs must stay finite; a non-finite value is an error, never a
// silent poison.
template <class T>
inline void ensure_finite(const std::vector<T>& data, const char* op) {
    for (std::size_t i = 0; i < data.size(); ++i) {
        if (!std::isfinite(data[i])) {
            throw NumericError(std::string(op) + " produced a non-finite value at flat index " +
                               std::to_string(i));
        }
    }
}

}  // namespace mdepth
