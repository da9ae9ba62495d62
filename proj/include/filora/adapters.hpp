#pragma once

#include <map>
#include <span>
#include <vector>

#include "filora/bindings.hpp"
#include "filora/groups.hpp"
#include "filora/params.hpp"
#include "filora/tensor.hpp"

namespace filora {

/// Per-group gate values in [0,1], the control signal derived from an
/// instruction. Ordered by group id so iteration is deterministic.
struct GateVector {
    std::map<GroupId, double> values;

    double at(const GroupId& id) const;
    static GateVector constant(std::span<const GroupId> ids, double v);
};

/// One low-rank pair: delta W = B A^T with A [d_in x r] and B [d_out x r].
/// B starts at zero so the update vanishes before training.
struct LoraGroup {
    GroupId id;
    Tensor a;
    Tensor b;
    std::size_t rank = 0;
};

/// Frozen linear transformation plus per-group low-rank factors. The base
/// weight and bias never receive gradients; training touches only the
/// factors. The forward pass stays factored (B (A^T x) per group) and the
/// full W' is materialized only on demand.
class GroupedLoraLinear {
  public:
    /// Wraps an existing frozen base. A_g ~ Gaussian(0, 1/d_in), B_g = 0.
    static GroupedLoraLinear wrap(Tensor base_weight, Tensor base_bias, std::span<const GroupId> group_ids,
                                  std::size_t rank, double scale, std::uint64_t seed);

    /// Fresh layer with W ~ Gaussian(0, 1/d_in), bias zero.
    static GroupedLoraLinear init(std::size_t d_in, std::size_t d_out, std::span<const GroupId> group_ids,
                                  std::size_t rank, double scale, std::uint64_t seed);

    std::size_t d_in() const { return weight_.cols(); }
    std::size_t d_out() const { return weight_.rows(); }
    double scale() const { return scale_; }
    const Tensor& weight() const { return weight_; }
    const Tensor& bias() const { return bias_; }
    const std::map<GroupId, LoraGroup>& groups() const { return groups_; }
    std::map<GroupId, LoraGroup>& groups() { return groups_; }

    /// W + scale * sum_g gates[g] * B_g A_g^T, materialized.
    Tensor effective_weight(const GateVector& gates) const;

    /// Factored adapted forward on the tape: W x + sum_g gates[g] * scale *
    /// B_g (A_g^T x) + bias. Gradients flow into the factors and the gate
    /// nodes, never into W or the bias.
    NodeId forward_on_tape(TapeBindings& tb, NodeId x, const std::map<GroupId, NodeId>& gate_nodes) const;

    /// Evaluation convenience over a throwaway tape.
    Tensor forward(const Tensor& x, const GateVector& gates) const;

    void append_params(const std::string& prefix, std::vector<NamedParam>& out);
    std::size_t adapter_param_count() const;

  private:
    Tensor weight_;
    Tensor bias_;
    std::map<GroupId, LoraGroup> groups_;
    double scale_ = 1.0;
};

/// Largest rank the r << min(d_in, d_out) invariant admits for a layer.
std::size_t max_lora_rank(std::size_t d_in, std::size_t d_out);

}  // namespace filora
