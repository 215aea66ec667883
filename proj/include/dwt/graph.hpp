#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "dwt/error.hpp"
#include "dwt/tensor.hpp"

namespace dwt {

using NodeId = std::size_t;

template <typename T>
class Graph;

// Handle to a node of a Graph. Cheap to copy; valid as long as the graph is.
template <typename T>
struct Var {
    Graph<T>* graph = nullptr;
    NodeId id = 0;

    const Tensor<T>& value() const { return graph->value(id); }
    const Shape& shape() const { return value().shape(); }
    bool requires_grad() const { return graph->requires_grad(id); }
};

template <typename T>
using GradientMap = std::map<NodeId, Tensor<T>>;

// Append-only tape for reverse-mode differentiation. Inputs of node k always
// have ids < k, so reverse insertion order is a valid topological order and
// gradient accumulation order is fixed by construction.
template <typename T>
class Graph {
public:
    using BackwardFn = std::function<void(Graph&, NodeId)>;

    struct Node {
        const char* op = "leaf";
        std::vector<NodeId> inputs;
        Tensor<T> value;
        std::vector<T> grad;
        bool requires_grad = false;
        bool is_leaf = false;
        BackwardFn backward;
    };

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var<T> leaf(Tensor<T> value, bool requires_grad = false) {
        if (!value.all_finite()) throw NumericError("non-finite value in graph leaf");
        Node n;
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        n.is_leaf = true;
        nodes_.push_back(std::move(n));
        return Var<T>{this, nodes_.size() - 1};
    }

    // Records the result of an op. The backward closure is dropped when no
    // input needs a gradient, so inference graphs carry no closures.
    Var<T> push(const char* op, Tensor<T> value, std::vector<NodeId> inputs, BackwardFn backward) {
        const NodeId id = nodes_.size();
        bool needs = false;
        for (NodeId in : inputs) {
            if (in >= id) throw ContractError(std::string("op ") + op + " references a later node");
            needs = needs || nodes_[in].requires_grad;
        }
        if (check_finite_ && !value.all_finite()) {
            throw NumericError(std::string("op ") + op + " produced a non-finite value");
        }
        Node n;
        n.op = op;
        n.inputs = std::move(inputs);
        n.value = std::move(value);
        n.requires_grad = needs;
        if (needs) n.backward = std::move(backward);
        nodes_.push_back(std::move(n));
        return Var<T>{this, id};
    }

    const Tensor<T>& value(NodeId id) const { return nodes_.at(id).value; }
    bool requires_grad(NodeId id) const { return nodes_.at(id).requires_grad; }
    const Node& node(NodeId id) const { return nodes_.at(id); }
    std::size_t size() const { return nodes_.size(); }

    // Upstream gradient of a node during backward (empty if none arrived).
    const std::vector<T>& grad(NodeId id) const { return nodes_[id].grad; }

    // Gradient buffer of an input, zero-initialised on first touch.
    // Returns nullptr for inputs that do not require a gradient.
    T* accum(NodeId id) {
        Node& n = nodes_[id];
        if (!n.requires_grad) return nullptr;
        if (n.grad.empty()) n.grad.assign(n.value.size(), T{0});
        return n.grad.data();
    }

    void set_check_finite(bool on) { check_finite_ = on; }

    // Reverse sweep from a scalar loss. Every node is visited once, in
    // reverse insertion order. Returns dLoss/dLeaf for each leaf created with
    // requires_grad; leaves that received no gradient map to zeros.
    GradientMap<T> backward(Var<T> loss) {
        if (loss.graph != this) throw ContractError("loss belongs to another graph");
        if (nodes_.at(loss.id).value.size() != 1) {
            throw ContractError("backward needs a scalar loss, got shape " +
                                shape_str(nodes_[loss.id].value.shape()));
        }
        for (Node& n : nodes_) n.grad.clear();
        GradientMap<T> out;
        if (!nodes_[loss.id].requires_grad) return out;
        nodes_[loss.id].grad.assign(1, T{1});
        for (NodeId id = loss.id + 1; id-- > 0;) {
            Node& n = nodes_[id];
            if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
            n.backward(*this, id);
        }
        for (NodeId id = 0; id < nodes_.size(); ++id) {
            const Node& n = nodes_[id];
            if (!n.is_leaf || !n.requires_grad) continue;
            std::vector<T> g = n.grad.empty() ? std::vector<T>(n.value.size(), T{0}) : n.grad;
            out.emplace(id, Tensor<T>(n.value.shape(), std::move(g)));
        }
        return out;
    }

private:
    // deque: value() references stay valid while the tape grows
    std::deque<Node> nodes_;
    bool check_finite_ = true;
};

template <typename T>
GradientMap<T> backward(Graph<T>& graph, Var<T> loss) {
    return graph.backward(loss);
}

}  // namespace dwt
