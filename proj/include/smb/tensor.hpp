#pragma once

// Dense f32 tensors with a reverse-mode gradient tape.
//
// A Tensor is a cheap handle onto shared storage. Operations in ops.hpp
// record a backward rule on the thread's active Tape whenever one of their
// inputs requires a gradient. Tape::backward walks the records in exact
// reverse order and *adds* the resulting gradients into the leaves, so two
// backward calls accumulate.

#include "smb/real.hpp"

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace smb::inline SMB_PRECISION::nn {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorNode {
    Shape shape;
    std::vector<real> data;
    std::vector<real> grad;      // persistent, accumulated into on leaves
    std::vector<real> pass_grad; // scratch for a single backward pass
    bool requires_grad = false;
    bool leaf = true;
};

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<real> values, bool requires_grad = false);
    static Tensor scalar(real value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t numel() const { return node_->data.size(); }

    std::span<real> data() { return node_->data; }
    std::span<const real> data() const { return node_->data; }
    real item() const;

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool on);
    bool is_leaf() const { return node_->leaf; }

    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const real> grad() const { return node_->grad; }
    std::span<real> mutable_grad();
    void zero_grad() { node_->grad.clear(); }

    // Detached deep copy (no grad, leaf).
    Tensor clone() const;

    TensorNode* node() const { return node_.get(); }
    const std::shared_ptr<TensorNode>& shared() const { return node_; }

private:
    explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}
    std::shared_ptr<TensorNode> node_;
};

class Tape {
public:
    struct Entry {
        std::shared_ptr<TensorNode> output;
        std::vector<std::shared_ptr<TensorNode>> inputs;
        std::function<void()> backward;
    };

    void record(Entry entry) { entries_.push_back(std::move(entry)); }
    std::size_t size() const { return entries_.size(); }
    void clear() { entries_.clear(); }

    // Seeds d(loss)=1 and propagates through every entry in reverse
    // recording order. Leaf gradients are added to, never overwritten.
    void backward(const Tensor& loss);

private:
    std::vector<Entry> entries_;
};

// The tape that ops record onto in this thread; nullptr disables recording.
Tape* active_tape();

class TapeScope {
public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* previous_;
};

class NoGradScope {
public:
    NoGradScope();
    ~NoGradScope();
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

private:
    Tape* previous_;
};

// backward() on the active tape.
void backward(const Tensor& loss);

// Scratch gradient buffer for a node during backward, zero-filled on first use.
std::vector<real>& pass_grad(TensorNode* node);

} // namespace smb::inline SMB_PRECISION::nn
