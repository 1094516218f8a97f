#include "smb/tensor.hpp"

#include "smb/error.hpp"

#include <sstream>
#include <unordered_set>

namespace smb::inline SMB_PRECISION::nn {

namespace {
thread_local Tape* g_active_tape = nullptr;
}

std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) {
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) {
            os << 'x';
        }
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    auto node = std::make_shared<TensorNode>();
    node->data.assign(nn::numel(shape), real(0.0));
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<real> values, bool requires_grad) {
    if (nn::numel(shape) != values.size()) {
        throw std::invalid_argument("tensor: " + std::to_string(values.size()) +
                                    " values do not fill shape " + shape_str(shape));
    }
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->data = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::scalar(real value, bool requires_grad) {
    return from({1}, {value}, requires_grad);
}

real Tensor::item() const {
    if (numel() != 1) {
        throw std::invalid_argument("item() on tensor of shape " + shape_str(shape()));
    }
    return node_->data[0];
}

void Tensor::set_requires_grad(bool on) {
    if (!node_->leaf) {
        throw std::logic_error("set_requires_grad on a non-leaf tensor");
    }
    node_->requires_grad = on;
    if (!on) {
        node_->grad.clear();
    }
}

std::span<real> Tensor::mutable_grad() {
    if (node_->grad.empty()) {
        node_->grad.assign(node_->data.size(), real(0.0));
    }
    return node_->grad;
}

Tensor Tensor::clone() const {
    return from(node_->shape, node_->data, false);
}

std::vector<real>& pass_grad(TensorNode* node) {
    if (node->pass_grad.empty()) {
        node->pass_grad.assign(node->data.size(), real(0.0));
    }
    return node->pass_grad;
}

void Tape::backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw std::invalid_argument("backward: loss must be a scalar, got shape " +
                                    (loss.defined() ? shape_str(loss.shape()) : "<undefined>"));
    }
    if (!loss.requires_grad()) {
        throw std::invalid_argument("backward: loss was not recorded on a tape");
    }

    std::vector<TensorNode*> nodes;
    std::unordered_set<TensorNode*> seen;
    auto visit = [&](TensorNode* n) {
        if (seen.insert(n).second) {
            nodes.push_back(n);
        }
    };
    for (const auto& e : entries_) {
        visit(e.output.get());
        for (const auto& in : e.inputs) {
            visit(in.get());
        }
    }
    visit(loss.node());
    for (TensorNode* n : nodes) {
        n->pass_grad.clear();
    }

    pass_grad(loss.node())[0] = real(1.0);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
        if (!it->output->pass_grad.empty()) {
            it->backward();
        }
    }

    for (TensorNode* n : nodes) {
        if (n->leaf && n->requires_grad && !n->pass_grad.empty()) {
            if (n->grad.empty()) {
                n->grad.assign(n->data.size(), real(0.0));
            }
            for (std::size_t i = 0; i < n->grad.size(); ++i) {
                n->grad[i] += n->pass_grad[i];
            }
        }
        n->pass_grad.clear();
        n->pass_grad.shrink_to_fit();
    }
}

Tape* active_tape() { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = previous_; }

void backward(const Tensor& loss) {
    Tape* tape = active_tape();
    if (!tape) {
        throw std::logic_error("backward: no active tape");
    }
    tape->backward(loss);
}

} // namespace smb::inline SMB_PRECISION::nn
