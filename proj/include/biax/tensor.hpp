#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "biax/errors.hpp"

namespace biax {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

template <class T>
struct TensorNode {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> inputs;
    // Reads this node's grad and accumulates into inputs' grads.
    std::function<void(TensorNode&)> backward_fn;

    std::vector<T>& ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), T(0));
        return grad;
    }
};

/// Dense row-major tensor with reverse-mode autodiff.
///
/// A tensor is a shared handle: copies alias the same storage and graph node.
/// Ops record a backward closure only when some input requires a gradient, so
/// inference graphs carry no tape.
template <class T>
class BasicTensor {
public:
    using Node = TensorNode<T>;
    using value_type = T;

    BasicTensor() = default;

    BasicTensor(Shape shape, std::vector<T> data, bool requires_grad = false)
        : node_(std::make_shared<Node>()) {
        if (shape_numel(shape) != data.size()) {
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        }
        node_->shape = std::move(shape);
        node_->value = std::move(data);
        node_->requires_grad = requires_grad;
    }

    static BasicTensor zeros(Shape shape, bool requires_grad = false) {
        auto n = shape_numel(shape);
        return BasicTensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
    }

    static BasicTensor full(Shape shape, T v, bool requires_grad = false) {
        auto n = shape_numel(shape);
        return BasicTensor(std::move(shape), std::vector<T>(n, v), requires_grad);
    }

    static BasicTensor scalar(T v, bool requires_grad = false) {
        return BasicTensor(Shape{}, std::vector<T>{v}, requires_grad);
    }

    bool defined() const { return node_ != nullptr; }

    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
    std::size_t numel() const { return node_->value.size(); }

    std::span<const T> values() const { return node_->value; }
    std::span<T> mutable_values() { return node_->value; }
    T operator[](std::size_t i) const { return node_->value[i]; }

    T item() const {
        if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
        return node_->value[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool rg) { node_->requires_grad = rg; }

    /// Gradient accumulated by backward(); zeros if none has reached this tensor.
    std::span<const T> grad() const { return node_->ensure_grad(); }
    std::span<T> mutable_grad() { return node_->ensure_grad(); }
    void zero_grad() { node_->grad.assign(node_->value.size(), T(0)); }

    /// Same values, no history.
    BasicTensor detach() const { return BasicTensor(shape(), node_->value, false); }

    void backward() const;

    const std::shared_ptr<Node>& node() const { return node_; }

    static BasicTensor from_node(std::shared_ptr<Node> node) {
        BasicTensor t;
        t.node_ = std::move(node);
        return t;
    }

private:
    std::shared_ptr<Node> node_;
};

using Tensor = BasicTensor<float>;

/// Builds an op result. Inputs and the backward closure are kept only when
/// at least one input requires a gradient.
template <class T>
BasicTensor<T> make_result(Shape shape, std::vector<T> value,
                           std::vector<BasicTensor<T>> inputs,
                           std::function<void(TensorNode<T>&)> backward_fn) {
    BasicTensor<T> out(std::move(shape), std::move(value), false);
    bool rg = false;
    for (const auto& in : inputs) rg = rg || in.requires_grad();
    if (rg) {
        auto& node = *out.node();
        node.requires_grad = true;
        for (auto& in : inputs) node.inputs.push_back(in.node());
        node.backward_fn = std::move(backward_fn);
    }
    return out;
}

template <class T>
void BasicTensor<T>::backward() const {
    if (numel() != 1) {
        throw ContractError("backward() requires a scalar loss, got shape " + shape_str(shape()));
    }
    if (!requires_grad()) return;

    // Iterative post-order DFS; graphs from deep stacks would overflow recursion.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
    visited.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->inputs.size()) {
            Node* child = n->inputs[next++].get();
            if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    for (Node* n : order) {
        if (n->backward_fn) n->grad.assign(n->value.size(), T(0));
    }
    node_->ensure_grad()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward_fn) (*it)->backward_fn(**it);
    }
}

}  // namespace biax
