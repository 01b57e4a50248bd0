#pragma once

#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "sml/errors.hpp"
#include "sml/tensor.hpp"

namespace sml {

// Reverse-mode autodiff on an explicit tape. Every op appends a node holding
// the forward value plus a closure that scatters the node's grad into its
// parents. backward() sweeps nodes newest-to-oldest, so a node's grad is
// complete before its closure runs.
template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // same shape as value, allocated lazily
    std::function<void()> backprop;
    bool needs_grad = false;
    bool grad_ready = false;

    void ensure_grad() {
        if (!grad_ready) {
            grad = Tensor<T>(value.shape());
            grad_ready = true;
        }
    }
};

template <typename T>
class Tape;

// Cheap handle into the tape; pass by value.
template <typename T>
class Var {
public:
    Var() = default;
    Var(Tape<T>* tape, Node<T>* node) : tape_(tape), node_(node) {}

    bool valid() const { return node_ != nullptr; }
    Tape<T>* tape() const { return tape_; }
    Node<T>* node() const { return node_; }

    const Tensor<T>& value() const { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    std::size_t size() const { return node_->value.size(); }
    bool needs_grad() const { return node_->needs_grad; }

    // Gradient of the last backward() w.r.t. this var. Zero tensor when the
    // var never received any contribution.
    Tensor<T> grad() const {
        if (node_->grad_ready) return node_->grad;
        return Tensor<T>(node_->value.shape());
    }

private:
    Tape<T>* tape_ = nullptr;
    Node<T>* node_ = nullptr;
};

template <typename T>
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool grad_enabled() const { return grad_enabled_; }
    void set_grad_enabled(bool b) { grad_enabled_ = b; }

    Var<T> leaf(Tensor<T> value, bool needs_grad) {
        auto node = std::make_unique<Node<T>>();
        node->value = std::move(value);
        node->needs_grad = needs_grad && grad_enabled_;
        nodes_.push_back(std::move(node));
        return Var<T>(this, nodes_.back().get());
    }

    Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

    // Record an op result. backprop may be empty for ops with no trainable
    // ancestry; needs_grad should be the OR over parents.
    Var<T> record(Tensor<T> value, bool needs_grad, std::function<void()> backprop) {
        auto node = std::make_unique<Node<T>>();
        node->value = std::move(value);
        node->needs_grad = needs_grad && grad_enabled_;
        if (node->needs_grad) node->backprop = std::move(backprop);
        nodes_.push_back(std::move(node));
        return Var<T>(this, nodes_.back().get());
    }

    // Accumulate seed gradients from `root` through the whole graph. Clears
    // previous gradients first so repeated calls give identical results.
    void backward(Var<T> root) {
        if (root.tape() != this) throw ArgumentError("backward: var belongs to a different tape");
        if (root.size() != 1) throw ArgumentError("backward: root must be a scalar, got shape " + shape_str(root.shape()));
        for (auto& n : nodes_) n->grad_ready = false;
        root.node()->ensure_grad();
        root.node()->grad[0] = T(1);
        bool seen_root = false;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            Node<T>* n = it->get();
            if (n == root.node()) seen_root = true;
            if (!seen_root || !n->needs_grad || !n->grad_ready) continue;
            if (n->backprop) n->backprop();
        }
    }

    std::size_t node_count() const { return nodes_.size(); }

    // Drop every node; invalidates all Vars handed out so far.
    void reset() { nodes_.clear(); }

private:
    std::vector<std::unique_ptr<Node<T>>> nodes_;
    bool grad_enabled_ = true;
};

// Add `delta` into the node's grad buffer, allocating on first touch.
template <typename T>
inline void accumulate_grad(Node<T>* n, const Tensor<T>& delta) {
    n->ensure_grad();
    T* g = n->grad.data();
    const T* d = delta.data();
    for (std::size_t i = 0; i < delta.size(); ++i) g[i] += d[i];
}

}  // namespace sml
