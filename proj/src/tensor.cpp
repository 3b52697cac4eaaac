#include "phydi/tensor.hpp"

#include "phydi/errors.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace phydi {

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    bool leaf = true;
    std::string op = "leaf";
    std::vector<NodePtr> inputs;
    BackwardFn backward;

    std::vector<double>& grad_buffer() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
        return grad;
    }
};

}  // namespace detail

namespace {

thread_local bool t_grad_enabled = true;

detail::NodePtr make_leaf(Shape shape, std::vector<double> data, bool requires_grad) {
    if (shape_numel(shape) != data.size()) {
        throw ShapeError("tensor data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value = std::move(data);
    node->requires_grad = requires_grad;
    return node;
}

const detail::Node& checked(const detail::NodePtr& node) {
    if (!node) throw Error("use of an undefined tensor");
    return *node;
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out << 'x';
        out << shape[i];
    }
    out << ']';
    return out.str();
}

bool GradSinks::wants(std::size_t i) const { return inputs_[i]->requires_grad; }

std::span<double> GradSinks::operator[](std::size_t i) const {
    return inputs_[i]->grad_buffer();
}

std::span<const double> GradSinks::input(std::size_t i) const { return inputs_[i]->value; }

const Shape& GradSinks::input_shape(std::size_t i) const { return inputs_[i]->shape; }

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    const auto n = shape_numel(shape);
    return Tensor(make_leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    const auto n = shape_numel(shape);
    return Tensor(make_leaf(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    return Tensor(make_leaf(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return Tensor(make_leaf({}, {value}, requires_grad));
}

Tensor Tensor::make_op(std::string op, Shape shape, std::vector<double> value,
                       std::vector<Tensor> inputs, BackwardFn backward) {
    auto node = make_leaf(std::move(shape), std::move(value), false);
    node->op = std::move(op);
    node->leaf = false;
    const bool any = t_grad_enabled &&
                     std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor& t) { return t.requires_grad(); });
    if (any) {
        node->requires_grad = true;
        node->inputs.reserve(inputs.size());
        for (auto& t : inputs) node->inputs.push_back(std::move(t.node_));
        node->backward = std::move(backward);
    }
    return Tensor(std::move(node));
}

const Shape& Tensor::shape() const { return checked(node_).shape; }

std::size_t Tensor::dim(std::size_t axis) const {
    const auto& s = shape();
    if (axis >= s.size()) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
    }
    return s[axis];
}

std::size_t Tensor::numel() const { return checked(node_).value.size(); }

std::span<const double> Tensor::data() const { return checked(node_).value; }

std::span<double> Tensor::mutable_data() {
    checked(node_);
    if (!node_->leaf) throw Error("mutable_data() on a non-leaf tensor (op " + node_->op + ")");
    return node_->value;
}

double Tensor::item() const {
    const auto& n = checked(node_);
    if (n.value.size() != 1) {
        throw ShapeError("item() on a tensor of shape " + shape_str(n.shape));
    }
    return n.value[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

bool Tensor::is_leaf() const { return checked(node_).leaf; }

const std::string& Tensor::op() const { return checked(node_).op; }

bool Tensor::has_grad() const {
    return node_ && !node_->grad.empty() && node_->grad.size() == node_->value.size();
}

std::span<const double> Tensor::grad() const { return checked(node_).grad; }

void Tensor::zero_grad() {
    checked(node_);
    node_->grad.clear();
}

Tensor Tensor::detach() const {
    const auto& n = checked(node_);
    return Tensor(make_leaf(n.shape, n.value, false));
}

Tape Tape::from(const Tensor& root) {
    Tape tape;
    if (!root.node_ || !root.node_->requires_grad) return tape;
    // Iterative post-order DFS: a node is emitted after all of its inputs.
    std::unordered_set<const detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(root.node_.get(), 0);
    seen.insert(root.node_.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            detail::Node* child = node->inputs[next++].get();
            if (child->requires_grad && !child->leaf && seen.insert(child).second) {
                stack.emplace_back(child, 0);
            }
            continue;
        }
        tape.nodes_.push_back(node);
        stack.pop_back();
    }
    return tape;
}

std::vector<std::string> Tape::op_names() const {
    std::vector<std::string> names;
    names.reserve(nodes_.size());
    for (const auto* n : nodes_) names.push_back(n->op);
    return names;
}

bool Tape::topologically_ordered() const {
    std::unordered_map<const detail::Node*, std::size_t> position;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        if (!position.emplace(nodes_[i], i).second) return false;
    }
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        for (const auto& in : nodes_[i]->inputs) {
            auto it = position.find(in.get());
            if (it != position.end() && it->second >= i) return false;
        }
    }
    return true;
}

void Tensor::backward() const {
    const auto& root = checked(node_);
    if (root.value.size() != 1) {
        throw ShapeError("backward() needs a scalar loss, got shape " + shape_str(root.shape));
    }
    if (!root.requires_grad) {
        throw Error("backward() on a loss that is detached from every parameter");
    }
    node_->grad_buffer()[0] += 1.0;
    if (root.leaf) return;

    const Tape tape = Tape::from(*this);
    for (auto it = tape.nodes_.rbegin(); it != tape.nodes_.rend(); ++it) {
        detail::Node* node = *it;
        if (node->grad.empty()) continue;
        const GradSinks sinks(node->inputs);
        node->backward(node->grad, node->value, sinks);
        // Intermediate gradients are not retained.
        std::vector<double>().swap(node->grad);
    }
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }

NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

}  // namespace phydi
