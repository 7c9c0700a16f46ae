#pragma once

// Dense double-precision tensors with a dynamic reverse-mode tape.
//
// A Tensor is a cheap shared handle onto a node. Nodes created by operations
// remember their parents and a closure that pushes the node's gradient back
// to them; the graph is rebuilt on every forward pass.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace dtdn {

using Shape = std::vector<std::size_t>;

/// Raised when an operation produces (or receives) a NaN or infinite value.
class NumericError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Raised on incompatible shapes or invalid indices.
class ShapeError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this node's grad and accumulates into the parents' grads.
    std::function<void(Node&)> backward_fn;
    const char* op = "leaf";

    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
    }
};

inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

}  // namespace detail

/// Disables tape recording on this thread for its lifetime (evaluation).
class NoGradGuard {
  public:
    NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool previous_;
};

class Tensor {
  public:
    Tensor() = default;

    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
        : node_(std::make_shared<detail::Node>()) {
        if (numel(shape) != data.size())
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + dtdn::to_string(shape));
        node_->shape = std::move(shape);
        node_->data = std::move(data);
        node_->requires_grad = requires_grad;
        check_finite("construct");
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        auto n = numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
    }
    static Tensor full(Shape shape, double value, bool requires_grad = false) {
        auto n = numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
    }
    static Tensor scalar(double value, bool requires_grad = false) {
        return Tensor({}, {value}, requires_grad);
    }
    static Tensor vector(std::initializer_list<double> values, bool requires_grad = false) {
        return Tensor({values.size()}, std::vector<double>(values), requires_grad);
    }
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                         bool requires_grad = false) {
        return Tensor({rows, cols}, std::move(values), requires_grad);
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t size() const { return node_->data.size(); }
    bool requires_grad() const { return node_->requires_grad; }
    bool is_leaf() const { return node_->parents.empty() && !node_->backward_fn; }
    const char* op_name() const { return node_->op; }

    std::span<const double> data() const { return node_->data; }
    // Parameters are updated in place by the optimizer; nothing else should write.
    std::span<double> mutable_data() { return node_->data; }

    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const double> grad() const { return node_->grad; }
    std::span<double> mutable_grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() { node_->grad.clear(); }

    double item() const {
        if (size() != 1) throw ShapeError("item() on tensor of shape " + dtdn::to_string(shape()));
        return node_->data[0];
    }
    double operator[](std::size_t i) const { return node_->data[i]; }
    double at(std::size_t r, std::size_t c) const { return node_->data[r * shape().at(1) + c]; }

    /// Same values, cut from the graph.
    Tensor detach() const { return Tensor(shape(), node_->data, false); }

    /// Values only, as an owning vector.
    std::vector<double> values() const { return node_->data; }

    bool same_node(const Tensor& other) const { return node_ == other.node_; }

    void check_finite(const char* where) const {
        for (double v : node_->data)
            if (!std::isfinite(v))
                throw NumericError(std::string("non-finite value in ") + where);
    }

    // Used by op implementations.
    static Tensor from_op(const char* op, Shape shape, std::vector<double> data,
                          std::vector<Tensor> inputs, std::function<void(detail::Node&)> fn) {
        Tensor out(std::move(shape), std::move(data), false);
        out.node_->op = op;
        bool any = false;
        if (detail::grad_mode())
            for (const auto& in : inputs) any = any || in.requires_grad();
        if (any) {
            out.node_->requires_grad = true;
            out.node_->backward_fn = std::move(fn);
            for (auto& in : inputs) out.node_->parents.push_back(in.node_);
        }
        return out;
    }

    detail::Node& node() const { return *node_; }

  private:
    friend void backward(const Tensor& loss);
    std::shared_ptr<detail::Node> node_;
};

/// Reverse sweep from a scalar loss. Leaf gradients accumulate across calls
/// until zero_grad(); interior gradients are released after use.
inline void backward(const Tensor& loss) {
    if (loss.size() != 1 || loss.rank() > 1)
        throw ShapeError("backward() needs a scalar loss, got " + to_string(loss.shape()));
    if (!loss.requires_grad()) return;

    // Iterative post-order DFS; every node is emitted exactly once.
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(loss.node_.get(), 0);
    seen.insert(loss.node_.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            detail::Node* p = node->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    loss.node_->ensure_grad();
    loss.node_->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* n = *it;
        if (!n->backward_fn) continue;
        n->ensure_grad();
        for (auto& p : n->parents)
            if (p->requires_grad) p->ensure_grad();
        n->backward_fn(*n);
        n->grad.clear();
    }
}

}  // namespace dtdn
