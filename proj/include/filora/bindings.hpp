#pragma once

#include <unordered_map>

#include "filora/tape.hpp"

namespace filora {

/// Binds parameter tensors to tape leaves, one leaf per tensor per pass.
/// Layers ask for their parameters through this object so that a tensor
/// used twice in one forward pass maps to a single node and its gradient
/// accumulates correctly.
class TapeBindings {
  public:
    explicit TapeBindings(Tape& tape) : tape_(&tape) {}

    /// Trainable leaf (cached by tensor address).
    NodeId param(const Tensor& t) { return bind(t, true); }

    /// Frozen leaf (cached by tensor address). No gradient is tracked.
    NodeId frozen(const Tensor& t) { return bind(t, false); }

    /// Uncached data leaf for sample inputs.
    NodeId input(Tensor t) { return tape_->leaf(std::move(t), false); }

    Tape& tape() { return *tape_; }

    bool bound(const Tensor& t) const { return cache_.count(&t) > 0; }

    /// Gradient of a bound tensor after backward; zeros if the tensor was
    /// never used in this pass or was bound frozen.
    Tensor grad_of(const Tensor& t) const {
        auto it = cache_.find(&t);
        if (it == cache_.end() || !tape_->requires_grad(it->second)) return Tensor(t.shape());
        return tape_->grad(it->second);
    }

  private:
    NodeId bind(const Tensor& t, bool requires_grad) {
        auto it = cache_.find(&t);
        if (it != cache_.end()) return it->second;
        NodeId id = tape_->leaf(t, requires_grad);
        cache_.emplace(&t, id);
        return id;
    }

    Tape* tape_;
    std::unordered_map<const Tensor*, NodeId> cache_;
};

}  // namespace filora
