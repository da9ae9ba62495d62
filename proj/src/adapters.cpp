#include "filora/adapters.hpp"

#include <cmath>
#include <set>

#include "filora/rng.hpp"

namespace filora {

double GateVector::at(const GroupId& id) const {
    auto it = values.find(id);
    if (it == values.end()) throw GatingError("no gate value for group '" + id + "'");
    return it->second;
}

GateVector GateVector::constant(std::span<const GroupId> ids, double v) {
    GateVector g;
    for (const GroupId& id : ids) g.values[id] = v;
    return g;
}

std::size_t max_lora_rank(std::size_t d_in, std::size_t d_out) {
    return std::min(d_in, d_out) / 2;
}

GroupedLoraLinear GroupedLoraLinear::wrap(Tensor base_weight, Tensor base_bias, std::span<const GroupId> group_ids,
                                          std::size_t rank, double scale, std::uint64_t seed) {
    if (base_weight.rank() != 2) {
        throw ShapeError("base weight must be 2-D, got " + shape_str(base_weight.shape()));
    }
    if (base_bias.rank() != 1 || base_bias.size() != base_weight.rows()) {
        throw ShapeError("base bias shape " + shape_str(base_bias.shape()) + " does not match weight " +
                         shape_str(base_weight.shape()));
    }
    if (group_ids.empty()) throw ConfigError("grouped LoRA layer needs at least one group id");
    if (rank < 1) throw ConfigError("LoRA rank must be >= 1");
    const std::size_t d_in = base_weight.cols();
    const std::size_t d_out = base_weight.rows();
    if (rank > max_lora_rank(d_in, d_out)) {
        throw ConfigError("LoRA rank " + std::to_string(rank) + " too large for a " + std::to_string(d_out) + "x" +
                          std::to_string(d_in) + " layer (max " + std::to_string(max_lora_rank(d_in, d_out)) + ")");
    }
    if (scale <= 0.0) throw ConfigError("LoRA scale must be positive");

    GroupedLoraLinear layer;
    layer.weight_ = std::move(base_weight);
    layer.bias_ = std::move(base_bias);
    layer.scale_ = scale;

    std::set<GroupId> seen;
    std::uint64_t gi = 0;
    for (const GroupId& id : group_ids) {
        if (!seen.insert(id).second) throw ConfigError("duplicate LoRA group id '" + id + "'");
        LoraGroup grp;
        grp.id = id;
        grp.rank = rank;
        grp.a = Tensor({d_in, rank});
        grp.b = Tensor({d_out, rank});
        Rng rng(mix_seed(seed, "lora-a", gi++));
        const double std_a = std::sqrt(1.0 / static_cast<double>(d_in));
        for (std::size_t i = 0; i < grp.a.size(); ++i) grp.a[i] = std_a * rng.normal();
        layer.groups_.emplace(id, std::move(grp));
    }
    return layer;
}

GroupedLoraLinear GroupedLoraLinear::init(std::size_t d_in, std::size_t d_out, std::span<const GroupId> group_ids,
                                          std::size_t rank, double scale, std::uint64_t seed) {
    Tensor w({d_out, d_in});
    Rng rng(mix_seed(seed, "base-w"));
    const double std_w = std::sqrt(1.0 / static_cast<double>(d_in));
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = std_w * rng.normal();
    return wrap(std::move(w), Tensor({d_out}), group_ids, rank, scale, seed);
}

Tensor GroupedLoraLinear::effective_weight(const GateVector& gates) const {
    const std::size_t m = d_out(), k = d_in();
    Tensor w = weight_;
    for (const auto& [id, grp] : groups_) {
        const double g = gates.at(id);
        const double c = scale_ * g;
        if (c == 0.0) continue;
        // W += c * B A^T
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t r = 0; r < grp.rank; ++r) {
                const double bv = c * grp.b.data()[i * grp.rank + r];
                if (bv == 0.0) continue;
                double* wrow = w.data() + i * k;
                for (std::size_t j = 0; j < k; ++j) wrow[j] += bv * grp.a.data()[j * grp.rank + r];
            }
        }
    }
    return w;
}

NodeId GroupedLoraLinear::forward_on_tape(TapeBindings& tb, NodeId x, const std::map<GroupId, NodeId>& gate_nodes) const {
    Tape& tape = tb.tape();
    NodeId acc = tape.matvec(tb.frozen(weight_), x);
    for (const auto& [id, grp] : groups_) {
        auto it = gate_nodes.find(id);
        if (it == gate_nodes.end()) throw GatingError("no gate node for group '" + id + "'");
        NodeId u = tape.matvec_transposed(tb.param(grp.a), x);
        NodeId v = tape.matvec(tb.param(grp.b), u);
        NodeId scaled = tape.scale(v, scale_);
        NodeId gated = tape.scale_by(scaled, it->second);
        acc = tape.add(acc, gated);
    }
    return tape.add(acc, tb.frozen(bias_));
}

Tensor GroupedLoraLinear::forward(const Tensor& x, const GateVector& gates) const {
    Tape tape;
    TapeBindings tb(tape);
    std::map<GroupId, NodeId> gate_nodes;
    for (const auto& [id, grp] : groups_) {
        gate_nodes[id] = tape.leaf(Tensor::scalar(gates.at(id)), false);
    }
    NodeId out = forward_on_tape(tb, tb.input(x), gate_nodes);
    return tape.value(out);
}

void GroupedLoraLinear::append_params(const std::string& prefix, std::vector<NamedParam>& out) {
    for (auto& [id, grp] : groups_) {
        out.push_back({prefix + "." + id + ".A", &grp.a, ParamGroup::kAdapter});
        out.push_back({prefix + "." + id + ".B", &grp.b, ParamGroup::kAdapter});
    }
}

std::size_t GroupedLoraLinear::adapter_param_count() const {
    std::size_t n = 0;
    for (const auto& [id, grp] : groups_) n += grp.a.size() + grp.b.size();
    return n;
}

}  // namespace filora
