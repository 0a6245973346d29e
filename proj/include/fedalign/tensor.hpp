#pragma once

// Dense row-major tensor with a define-by-run reverse-mode gradient tape.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace fedalign {

using Shape = std::vector<std::size_t>;

/// Raised when a caller breaks an operation's precondition.
class ContractViolation : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

/// Raised when training produces non-finite values.
class DivergenceError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

inline void require(bool condition, const std::string& message) {
    if (!condition) {
        throw ContractViolation(message);
    }
}

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? ", " : "") << shape[i];
    }
    os << ')';
    return os.str();
}

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    bool is_leaf = true;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    std::vector<double>& ensure_grad() {
        if (grad.size() != value.size()) {
            grad.assign(value.size(), 0.0);
        }
        return grad;
    }
};

// Multiply-accumulate counter fed by the matrix-product style ops.
inline thread_local std::uint64_t mac_counter = 0;

} // namespace detail

class Tensor {
  public:
    Tensor() = default;

    static Tensor constant(Shape shape, std::vector<double> values) {
        require(fedalign::numel(shape) == values.size(),
                "tensor shape " + to_string(shape) + " does not match " + std::to_string(values.size()) + " values");
        auto node = std::make_shared<detail::Node>();
        node->shape = std::move(shape);
        node->value = std::move(values);
        return Tensor(std::move(node));
    }

    static Tensor zeros(Shape shape) {
        const auto n = fedalign::numel(shape);
        return constant(std::move(shape), std::vector<double>(n, 0.0));
    }

    static Tensor scalar(double v) { return constant({1}, {v}); }

    /// Leaf that accumulates gradients.
    static Tensor parameter(Shape shape, std::vector<double> values) {
        Tensor t = constant(std::move(shape), std::move(values));
        t.node_->requires_grad = true;
        return t;
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->value.size(); }
    bool requires_grad() const { return node_->requires_grad; }
    bool is_leaf() const { return node_->is_leaf; }

    std::span<const double> values() const { return node_->value; }

    /// In-place access for leaves (optimizer updates, perturbation probes).
    std::span<double> mutable_values() {
        require(node_->is_leaf, "only leaf tensors may be modified in place");
        return node_->value;
    }

    bool has_grad() const { return node_->grad.size() == node_->value.size(); }

    std::span<const double> grad() const {
        require(has_grad(), "tensor has no accumulated gradient");
        return node_->grad;
    }

    std::span<double> mutable_grad() { return node_->ensure_grad(); }

    void zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

    double item() const {
        require(numel() == 1, "item() needs a single-element tensor, got " + to_string(shape()));
        return node_->value[0];
    }

    /// Copy of the values with no link to the tape.
    Tensor detach() const { return constant(node_->shape, node_->value); }

    const std::shared_ptr<detail::Node>& node() const { return node_; }

  private:
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
    friend Tensor make_op(Shape, std::vector<double>, std::vector<Tensor>, std::function<void(detail::Node&)>);

    std::shared_ptr<detail::Node> node_;
};

/// Builds an op output. The backward closure reads `self.grad` and accumulates
/// into `self.parents[i]->grad` for parents that require gradients.
inline Tensor make_op(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                      std::function<void(detail::Node&)> backward) {
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->is_leaf = false;
    for (const auto& in : inputs) {
        if (in.requires_grad()) {
            node->requires_grad = true;
        }
    }
    if (node->requires_grad) {
        node->parents.reserve(inputs.size());
        for (auto& in : inputs) {
            node->parents.push_back(in.node());
        }
        node->backward = std::move(backward);
    }
    return Tensor(std::move(node));
}

/// Reverse-mode sweep from a scalar. Leaf gradients accumulate across calls;
/// intermediate gradients are recomputed each call.
inline void backward(const Tensor& loss) {
    require(loss.defined() && loss.numel() == 1,
            "backward() needs a scalar loss, got " + (loss.defined() ? to_string(loss.shape()) : std::string("undefined")));
    if (!loss.requires_grad()) {
        return;
    }

    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> visited;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    visited.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            detail::Node* parent = node->parents[next++].get();
            if (parent->requires_grad && visited.insert(parent).second) {
                stack.emplace_back(parent, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (auto* node : order) {
        if (!node->is_leaf) {
            node->grad.assign(node->value.size(), 0.0);
        }
    }
    loss.node()->ensure_grad()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if (!(*it)->is_leaf && (*it)->backward) {
            (*it)->backward(**it);
        }
    }
    // Intermediate buffers are not needed after the sweep.
    for (auto* node : order) {
        if (!node->is_leaf && node != loss.node().get()) {
            std::vector<double>().swap(node->grad);
        }
    }
}

/// Counts multiply-accumulates performed on this thread while in scope.
class MacScope {
  public:
    MacScope() : start_(detail::mac_counter) {}
    std::uint64_t macs() const { return detail::mac_counter - start_; }

  private:
    std::uint64_t start_;
};

} // namespace fedalign
