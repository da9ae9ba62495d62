#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "filora/tensor.hpp"

namespace filora {

using NodeId = std::uint32_t;

/// Reverse-mode automatic differentiation over a linear tape of primitive
/// operations. Nodes are appended in execution order, so the record is
/// topologically sorted by construction; one backward sweep accumulates a
/// gradient for every node reachable from the loss.
///
/// A tape is single use: build the forward computation, call backward()
/// once, read gradients. A second backward() is a contract error.
class Tape {
  public:
    /// Inserts an input node. Gradients are tracked only when
    /// requires_grad is set.
    NodeId leaf(Tensor value, bool requires_grad);

    NodeId matmul(NodeId a, NodeId b);
    /// y = W x for W [m x n], x [n].
    NodeId matvec(NodeId w, NodeId x);
    /// y = A^T x for A [m x n], x [m].
    NodeId matvec_transposed(NodeId a, NodeId x);
    NodeId add(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);
    NodeId scale(NodeId x, double c);
    /// Elementwise product with a one-element node; the gradient flows into
    /// both the tensor and the scalar.
    NodeId scale_by(NodeId x, NodeId scalar);
    NodeId pick(NodeId x, std::size_t index);
    NodeId concat(std::span<const NodeId> parts);
    NodeId sigmoid(NodeId x);
    /// GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
    NodeId gelu(NodeId x);
    NodeId log_softmax(NodeId logits);
    NodeId cross_entropy(NodeId logits, std::size_t target);
    NodeId sum(NodeId x);
    NodeId add_n(std::span<const NodeId> parts);
    /// Inner product with a constant weight vector (no gradient into the weights).
    NodeId dot_const(NodeId x, Tensor weights);
    /// Mean of the table rows selected by token ids; table is [V x d].
    NodeId embedding_mean(NodeId table, std::span<const int> token_ids);

    void backward(NodeId loss);

    const Tensor& value(NodeId id) const { return nodes_[id].value; }
    const Tensor& grad(NodeId id) const;
    bool requires_grad(NodeId id) const { return nodes_[id].requires_grad; }
    bool backward_done() const { return backward_done_; }
    std::size_t size() const { return nodes_.size(); }

  private:
    enum class Op : std::uint8_t {
        kLeaf,
        kMatMul,
        kMatVec,
        kMatVecT,
        kAdd,
        kMul,
        kScale,
        kScaleBy,
        kPick,
        kConcat,
        kSigmoid,
        kGelu,
        kLogSoftmax,
        kCrossEntropy,
        kSum,
        kAddN,
        kDotConst,
        kEmbedMean,
    };

    struct Node {
        Op op;
        bool requires_grad = false;
        double cval = 0.0;
        std::size_t index = 0;
        std::vector<NodeId> inputs;
        Tensor value;
        Tensor grad;
        Tensor aux;               // op-specific saved forward data
        std::vector<int> tokens;  // kEmbedMean
    };

    NodeId push(Node node);
    const Node& node(NodeId id) const { return nodes_[id]; }
    void check_exists(NodeId id) const;

    std::vector<Node> nodes_;
    bool backward_done_ = false;
};

// GELU tanh-approximation constants.
inline constexpr double kGeluCoeff = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluCubic = 0.044715;

double gelu_scalar(double x);
double gelu_grad_scalar(double x);
double sigmoid_scalar(double x);

}  // namespace filora
