#include "filora/model.hpp"

#include <algorithm>
#include <cmath>

#include "filora/rng.hpp"

namespace filora {

std::uint64_t tensor_checksum(const Tensor& t, std::uint64_t h) {
    return fnv1a64(t.data(), t.size() * sizeof(double), h);
}

int argmax_lowest(const Tensor& logits) {
    if (logits.rank() != 1 || logits.size() == 0) {
        throw ShapeError("argmax expects a nonempty 1-D tensor, got " + shape_str(logits.shape()));
    }
    std::size_t best = 0;
    for (std::size_t i = 1; i < logits.size(); ++i) {
        if (logits[i] > logits[best]) best = i;
    }
    return static_cast<int>(best);
}

double log_prob_of(const Tensor& logits, int label) {
    if (label < 0 || static_cast<std::size_t>(label) >= logits.size()) {
        throw LabelError("label " + std::to_string(label) + " out of range [0, " + std::to_string(logits.size()) +
                         ")");
    }
    double m = logits[0];
    for (std::size_t i = 1; i < logits.size(); ++i) m = std::max(m, logits[i]);
    double s = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) s += std::exp(logits[i] - m);
    return logits[static_cast<std::size_t>(label)] - m - std::log(s);
}

int TrainableModel::predict(const FeatureMap& features, const Instruction& instruction) const {
    return argmax_lowest(forward(features, instruction));
}

double TrainableModel::log_prob(const FeatureMap& features, const Instruction& instruction, int label) const {
    return log_prob_of(forward(features, instruction), label);
}

std::map<GroupId, GroupRole> model_group_roles(const DatasetSpec& spec) {
    std::map<GroupId, GroupRole> roles = group_roles(spec);
    roles[kFusionGroup] = GroupRole::kNeutral;
    return roles;
}

std::vector<GroupId> gate_groups_for(const DatasetSpec& spec) {
    std::vector<GroupId> groups = spec.group_ids();
    groups.push_back(kFusionGroup);
    return groups;
}

std::uint64_t BaseCheckpoint::checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const GroupId& gid : feature_groups) {
        for (const Linear& lin : encoders.at(gid)) {
            h = tensor_checksum(lin.w, h);
            h = tensor_checksum(lin.b, h);
        }
    }
    h = tensor_checksum(fusion.w, h);
    h = tensor_checksum(fusion.b, h);
    h = tensor_checksum(head.w, h);
    h = tensor_checksum(head.b, h);
    return h;
}

namespace {

Linear init_linear(std::size_t d_out, std::size_t d_in, std::uint64_t seed, std::string_view tag) {
    Linear lin;
    lin.w = Tensor({d_out, d_in});
    lin.b = Tensor({d_out});
    Rng rng(mix_seed(seed, tag));
    const double std_w = std::sqrt(1.0 / static_cast<double>(d_in));
    for (std::size_t i = 0; i < lin.w.size(); ++i) lin.w[i] = std_w * rng.normal();
    return lin;
}

NodeId linear_on_tape(TapeBindings& tb, const Linear& lin, NodeId x, bool trainable) {
    Tape& tape = tb.tape();
    NodeId w = trainable ? tb.param(lin.w) : tb.frozen(lin.w);
    NodeId b = trainable ? tb.param(lin.b) : tb.frozen(lin.b);
    return tape.add(tape.matvec(w, x), b);
}

NodeId bind_feature(TapeBindings& tb, const FeatureMap& features, const GroupId& gid) {
    auto it = features.find(gid);
    if (it == features.end()) throw ContractError("missing features for group '" + gid + "'");
    return tb.input(it->second);
}

}  // namespace

BaseCheckpoint init_base(const DatasetSpec& spec, std::uint64_t seed) {
    spec.validate();
    BaseCheckpoint base;
    base.feature_groups = spec.group_ids();
    base.num_classes = spec.num_classes;
    base.init_seed = seed;
    for (const FeatureGroupSpec& g : spec.groups) {
        base.input_dims[g.id] = g.dim;
        std::vector<Linear>& stack = base.encoders[g.id];
        stack.push_back(init_linear(kGroupHidden, g.dim, seed, "base-enc-" + g.id + "-0"));
        for (std::size_t l = 1; l < kGroupDepth; ++l) {
            stack.push_back(init_linear(kGroupHidden, kGroupHidden, seed,
                                        "base-enc-" + g.id + "-" + std::to_string(l)));
        }
    }
    base.fusion = init_linear(kFusionHidden, kGroupHidden * spec.groups.size(), seed, "base-fusion");
    base.head = init_linear(spec.num_classes, kFusionHidden, seed, "base-head");
    return base;
}

NodeId base_logits_on_tape(TapeBindings& tb, const BaseCheckpoint& base, const FeatureMap& features, bool trainable) {
    Tape& tape = tb.tape();
    std::vector<NodeId> reps;
    for (const GroupId& gid : base.feature_groups) {
        NodeId h = bind_feature(tb, features, gid);
        for (const Linear& lin : base.encoders.at(gid)) {
            h = tape.gelu(linear_on_tape(tb, lin, h, trainable));
        }
        reps.push_back(h);
    }
    NodeId fused_in = tape.concat(reps);
    NodeId f = tape.gelu(linear_on_tape(tb, base.fusion, fused_in, trainable));
    return linear_on_tape(tb, base.head, f, trainable);
}

Tensor base_forward(const BaseCheckpoint& base, const FeatureMap& features) {
    Tape tape;
    TapeBindings tb(tape);
    return tape.value(base_logits_on_tape(tb, base, features, false));
}

BaseCheckpoint pretrain_base(const Dataset& dataset, std::size_t steps, std::uint64_t seed,
                             const PretrainOptions& opt) {
    std::vector<const Sample*> neutral;
    for (const Sample& s : dataset.train) {
        if (s.condition == ConditionId::kNeutral) neutral.push_back(&s);
    }
    if (neutral.empty()) throw TrainingError("pretrain_base: dataset has no neutral-condition samples");

    BaseCheckpoint base = init_base(dataset.spec, seed);
    std::vector<NamedParam> params;
    for (const GroupId& gid : base.feature_groups) {
        std::vector<Linear>& stack = base.encoders.at(gid);
        for (std::size_t l = 0; l < stack.size(); ++l) {
            params.push_back({"base.enc." + gid + "." + std::to_string(l) + ".w", &stack[l].w, ParamGroup::kAdapter});
            params.push_back({"base.enc." + gid + "." + std::to_string(l) + ".b", &stack[l].b, ParamGroup::kAdapter});
        }
    }
    params.push_back({"base.fusion.w", &base.fusion.w, ParamGroup::kAdapter});
    params.push_back({"base.fusion.b", &base.fusion.b, ParamGroup::kAdapter});
    params.push_back({"base.head.w", &base.head.w, ParamGroup::kAdapter});
    params.push_back({"base.head.b", &base.head.b, ParamGroup::kAdapter});

    std::vector<std::size_t> order(neutral.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle_rng(mix_seed(seed, "pretrain-shuffle"));
    shuffle_rng.shuffle(order);

    std::size_t cursor = 0;
    for (std::size_t step = 0; step < steps; ++step) {
        Tape tape;
        TapeBindings tb(tape);
        std::vector<NodeId> losses;
        for (std::size_t b = 0; b < opt.batch_size; ++b) {
            if (cursor == order.size()) {
                cursor = 0;
                shuffle_rng.shuffle(order);
            }
            const Sample& s = *neutral[order[cursor++]];
            NodeId logits = base_logits_on_tape(tb, base, s.features, true);
            losses.push_back(tape.cross_entropy(logits, static_cast<std::size_t>(s.y)));
        }
        NodeId loss = tape.scale(tape.add_n(losses), 1.0 / static_cast<double>(losses.size()));
        if (!std::isfinite(tape.value(loss).item())) {
            throw TrainingError("pretrain_base: NaN loss at step " + std::to_string(step));
        }
        tape.backward(loss);
        for (const NamedParam& p : params) {
            Tensor g = tb.grad_of(*p.tensor);
            for (std::size_t i = 0; i < p.tensor->size(); ++i) {
                (*p.tensor)[i] -= opt.learning_rate * g[i];
            }
        }
    }
    return base;
}

// ---------------------------------------------------------------------------
// FiLoRA

FiloraModel FiloraModel::create(const BaseCheckpoint& base, const TemplateBank& bank, const FiloraConfig& cfg) {
    if (cfg.rank < 1) throw ConfigError("FiLoRA rank must be >= 1");
    FiloraModel m;
    m.feature_groups = base.feature_groups;
    m.gate_groups = base.feature_groups;
    m.gate_groups.push_back(kFusionGroup);
    m.num_classes = base.num_classes;
    m.config = cfg;

    const double scale = cfg.lora_alpha / static_cast<double>(cfg.rank);
    std::uint64_t li = 0;
    for (const GroupId& gid : m.feature_groups) {
        const GroupId ids[] = {gid};
        std::vector<GroupedLoraLinear>& stack = m.encoders[gid];
        for (const Linear& lin : base.encoders.at(gid)) {
            stack.push_back(GroupedLoraLinear::wrap(lin.w, lin.b, ids, cfg.rank, scale,
                                                    mix_seed(cfg.seed, "filora-enc", li++)));
        }
    }
    const GroupId fusion_ids[] = {kFusionGroup};
    m.fusion_layer = GroupedLoraLinear::wrap(base.fusion.w, base.fusion.b, fusion_ids, cfg.rank, scale,
                                             mix_seed(cfg.seed, "filora-fusion"));
    // The head is narrow (K outputs); its rank is clamped to keep r within
    // the low-rank invariant. The scale stays the uniform alpha / rank.
    const std::size_t head_rank = std::min(cfg.rank, max_lora_rank(kFusionHidden, base.num_classes));
    if (head_rank < 1) throw ConfigError("head layer too narrow for any LoRA rank");
    m.head_layer = GroupedLoraLinear::wrap(base.head.w, base.head.b, fusion_ids, head_rank, scale,
                                           mix_seed(cfg.seed, "filora-head"));

    Vocabulary vocab = Vocabulary::from_words(bank.vocabulary_words());
    m.instr_encoder = InstructionEncoder::init(std::move(vocab), m.gate_groups, cfg.encoder,
                                               mix_seed(cfg.seed, "filora-encoder"));
    return m;
}

NodeId FiloraModel::logits_with_gates_node(TapeBindings& tb, const FeatureMap& features, NodeId gates_node) const {
    Tape& tape = tb.tape();
    std::map<GroupId, NodeId> gate_nodes;
    for (std::size_t i = 0; i < gate_groups.size(); ++i) {
        gate_nodes[gate_groups[i]] = tape.pick(gates_node, i);
    }
    std::vector<NodeId> reps;
    for (const GroupId& gid : feature_groups) {
        NodeId h = bind_feature(tb, features, gid);
        for (const GroupedLoraLinear& layer : encoders.at(gid)) {
            h = tape.gelu(layer.forward_on_tape(tb, h, gate_nodes));
        }
        reps.push_back(h);
    }
    NodeId fused_in = tape.concat(reps);
    NodeId f = tape.gelu(fusion_layer.forward_on_tape(tb, fused_in, gate_nodes));
    return head_layer.forward_on_tape(tb, f, gate_nodes);
}

NodeId FiloraModel::logits_on_tape(TapeBindings& tb, const FeatureMap& features, const Instruction& instruction) const {
    NodeId gates_node = instr_encoder.gates_on_tape(tb, instruction);
    return logits_with_gates_node(tb, features, gates_node);
}

Tensor FiloraModel::forward(const FeatureMap& features, const Instruction& instruction) const {
    Tape tape;
    TapeBindings tb(tape);
    return tape.value(logits_on_tape(tb, features, instruction));
}

Tensor FiloraModel::forward_with_gates(const FeatureMap& features, const GateVector& gates) const {
    Tape tape;
    TapeBindings tb(tape);
    Tensor g({gate_groups.size()});
    for (std::size_t i = 0; i < gate_groups.size(); ++i) g[i] = gates.at(gate_groups[i]);
    NodeId gates_node = tape.leaf(std::move(g), false);
    return tape.value(logits_with_gates_node(tb, features, gates_node));
}

int FiloraModel::predict_with_gates(const FeatureMap& features, const GateVector& gates) const {
    return argmax_lowest(forward_with_gates(features, gates));
}

double FiloraModel::log_prob_with_gates(const FeatureMap& features, const GateVector& gates, int label) const {
    return log_prob_of(forward_with_gates(features, gates), label);
}

SampleLossParts FiloraModel::loss_on_tape(TapeBindings& tb, const RoutedSample& sample, double lambda) const {
    Tape& tape = tb.tape();
    NodeId gates_node = instr_encoder.gates_on_tape(tb, *sample.instruction);
    NodeId logits = logits_with_gates_node(tb, *sample.features, gates_node);
    NodeId cls = tape.cross_entropy(logits, static_cast<std::size_t>(sample.target));

    SampleLossParts parts;
    parts.cls = tape.value(cls).item();

    Tensor alpha({gate_groups.size()});
    bool any_nonzero = false;
    for (std::size_t i = 0; i < gate_groups.size(); ++i) {
        auto it = sample.alpha.find(gate_groups[i]);
        if (it == sample.alpha.end()) {
            throw ConfigError("routed sample alpha is missing group '" + gate_groups[i] + "'");
        }
        alpha[i] = it->second;
        any_nonzero = any_nonzero || it->second != 0.0;
    }
    if (lambda != 0.0 && any_nonzero) {
        NodeId gate_term = tape.dot_const(gates_node, std::move(alpha));
        parts.gate_reg = tape.value(gate_term).item();
        parts.total = tape.add(cls, tape.scale(gate_term, lambda));
    } else {
        parts.gate_reg = 0.0;
        parts.total = cls;
    }
    return parts;
}

std::vector<NamedParam> FiloraModel::trainable_params() {
    std::vector<NamedParam> params;
    for (auto& [gid, stack] : encoders) {
        for (std::size_t l = 0; l < stack.size(); ++l) {
            stack[l].append_params("enc." + gid + "." + std::to_string(l), params);
        }
    }
    fusion_layer.append_params("fusion", params);
    head_layer.append_params("head", params);
    instr_encoder.append_params(params);
    return params;
}

std::uint64_t FiloraModel::base_checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& [gid, stack] : encoders) {
        for (const GroupedLoraLinear& layer : stack) {
            h = tensor_checksum(layer.weight(), h);
            h = tensor_checksum(layer.bias(), h);
        }
    }
    h = tensor_checksum(fusion_layer.weight(), h);
    h = tensor_checksum(fusion_layer.bias(), h);
    h = tensor_checksum(head_layer.weight(), h);
    h = tensor_checksum(head_layer.bias(), h);
    return h;
}

std::size_t FiloraModel::adapter_param_count() const {
    std::size_t n = 0;
    for (const auto& [gid, stack] : encoders) {
        for (const GroupedLoraLinear& layer : stack) n += layer.adapter_param_count();
    }
    n += fusion_layer.adapter_param_count();
    n += head_layer.adapter_param_count();
    return n;
}

// ---------------------------------------------------------------------------
// Baselines

std::string baseline_method_name(BaselineKind kind) {
    switch (kind) {
        case BaselineKind::kFullFineTune: return "full_ft";
        case BaselineKind::kPlainLora: return "lora";
        case BaselineKind::kPromptOnly: return "prompt_only";
    }
    throw ConfigError("unknown baseline kind");
}

BaselineKind baseline_from_method_name(const std::string& name) {
    if (name == "full_ft") return BaselineKind::kFullFineTune;
    if (name == "lora") return BaselineKind::kPlainLora;
    if (name == "prompt_only") return BaselineKind::kPromptOnly;
    throw ConfigError("unknown baseline method '" + name + "'");
}

namespace {

BaselineModel::LoraPair init_lora_pair(std::size_t d_in, std::size_t d_out, std::size_t rank, double lora_alpha,
                                       std::uint64_t seed) {
    BaselineModel::LoraPair pair;
    pair.rank = std::min(rank, max_lora_rank(d_in, d_out));
    if (pair.rank < 1) throw ConfigError("layer too narrow for any LoRA rank");
    pair.scale = lora_alpha / static_cast<double>(rank);
    pair.a = Tensor({d_in, pair.rank});
    pair.b = Tensor({d_out, pair.rank});
    Rng rng(mix_seed(seed, "baseline-lora-a"));
    const double std_a = std::sqrt(1.0 / static_cast<double>(d_in));
    for (std::size_t i = 0; i < pair.a.size(); ++i) pair.a[i] = std_a * rng.normal();
    return pair;
}

}  // namespace

BaselineModel build_baseline(BaselineKind kind, const BaseCheckpoint& base, const TemplateBank& bank,
                             const BaselineConfig& cfg) {
    BaselineModel m;
    m.kind = kind;
    m.feature_groups = base.feature_groups;
    m.num_classes = base.num_classes;
    m.instr_dim = cfg.instr_dim;
    m.config = cfg;
    m.encoders = base.encoders;
    m.head = base.head;
    m.vocab = Vocabulary::from_words(bank.vocabulary_words());

    // Extend the fusion weight with an instruction column block. The block
    // is seeded, shared across baseline kinds for one seed, and belongs to
    // the frozen base everywhere except FullFineTune.
    const std::size_t rep_width = base.fusion.w.cols();
    m.fusion.w = Tensor({kFusionHidden, rep_width + cfg.instr_dim});
    m.fusion.b = base.fusion.b;
    Rng wr(mix_seed(cfg.seed, "baseline-instr-w"));
    const double std_i = std::sqrt(1.0 / static_cast<double>(cfg.instr_dim));
    for (std::size_t r = 0; r < kFusionHidden; ++r) {
        const double* src = base.fusion.w.data() + r * rep_width;
        double* dst = m.fusion.w.data() + r * (rep_width + cfg.instr_dim);
        std::copy(src, src + rep_width, dst);
        for (std::size_t j = 0; j < cfg.instr_dim; ++j) dst[rep_width + j] = std_i * wr.normal();
    }

    m.instr_embedding = Tensor({m.vocab.size(), cfg.instr_dim});
    Rng er(mix_seed(cfg.seed, "baseline-embed"));
    for (std::size_t i = 0; i < m.instr_embedding.size(); ++i) m.instr_embedding[i] = er.normal();

    if (kind == BaselineKind::kPlainLora) {
        std::uint64_t li = 0;
        for (const GroupId& gid : m.feature_groups) {
            const std::vector<Linear>& stack = base.encoders.at(gid);
            for (std::size_t l = 0; l < stack.size(); ++l) {
                m.lora.emplace("enc:" + gid + ":" + std::to_string(l),
                               init_lora_pair(stack[l].w.cols(), stack[l].w.rows(), cfg.rank, cfg.lora_alpha,
                                              mix_seed(cfg.seed, "bl-lora", li++)));
            }
        }
        m.lora.emplace("fusion", init_lora_pair(rep_width + cfg.instr_dim, kFusionHidden, cfg.rank, cfg.lora_alpha,
                                                mix_seed(cfg.seed, "bl-lora-fusion")));
        m.lora.emplace("head", init_lora_pair(kFusionHidden, base.num_classes, cfg.rank, cfg.lora_alpha,
                                              mix_seed(cfg.seed, "bl-lora-head")));
    }
    return m;
}

NodeId BaselineModel::logits_on_tape(TapeBindings& tb, const FeatureMap& features,
                                     const Instruction& instruction) const {
    Tape& tape = tb.tape();
    const bool train_base = (kind == BaselineKind::kFullFineTune);

    auto layer = [&](const std::string& name, const Linear& lin, NodeId x) {
        NodeId y = linear_on_tape(tb, lin, x, train_base);
        auto it = lora.find(name);
        if (it != lora.end()) {
            const LoraPair& pair = it->second;
            NodeId u = tape.matvec_transposed(tb.param(pair.a), x);
            NodeId v = tape.matvec(tb.param(pair.b), u);
            y = tape.add(y, tape.scale(v, pair.scale));
        }
        return y;
    };

    std::vector<NodeId> reps;
    for (const GroupId& gid : feature_groups) {
        NodeId h = bind_feature(tb, features, gid);
        const std::vector<Linear>& stack = encoders.at(gid);
        for (std::size_t l = 0; l < stack.size(); ++l) {
            h = tape.gelu(layer("enc:" + gid + ":" + std::to_string(l), stack[l], h));
        }
        reps.push_back(h);
    }
    std::vector<int> ids = vocab.encode(instruction);
    reps.push_back(tape.embedding_mean(tb.param(instr_embedding), ids));

    NodeId fused_in = tape.concat(reps);
    NodeId f = tape.gelu(layer("fusion", fusion, fused_in));
    return layer("head", head, f);
}

Tensor BaselineModel::forward(const FeatureMap& features, const Instruction& instruction) const {
    Tape tape;
    TapeBindings tb(tape);
    return tape.value(logits_on_tape(tb, features, instruction));
}

SampleLossParts BaselineModel::loss_on_tape(TapeBindings& tb, const RoutedSample& sample, double lambda) const {
    (void)lambda;  // no gates, no gate regularizer
    Tape& tape = tb.tape();
    NodeId logits = logits_on_tape(tb, *sample.features, *sample.instruction);
    SampleLossParts parts;
    parts.total = tape.cross_entropy(logits, static_cast<std::size_t>(sample.target));
    parts.cls = tape.value(parts.total).item();
    parts.gate_reg = 0.0;
    return parts;
}

std::vector<NamedParam> BaselineModel::trainable_params() {
    std::vector<NamedParam> params;
    if (kind == BaselineKind::kFullFineTune) {
        for (auto& [gid, stack] : encoders) {
            for (std::size_t l = 0; l < stack.size(); ++l) {
                params.push_back({"enc." + gid + "." + std::to_string(l) + ".w", &stack[l].w, ParamGroup::kAdapter});
                params.push_back({"enc." + gid + "." + std::to_string(l) + ".b", &stack[l].b, ParamGroup::kAdapter});
            }
        }
        params.push_back({"fusion.w", &fusion.w, ParamGroup::kAdapter});
        params.push_back({"fusion.b", &fusion.b, ParamGroup::kAdapter});
        params.push_back({"head.w", &head.w, ParamGroup::kAdapter});
        params.push_back({"head.b", &head.b, ParamGroup::kAdapter});
    }
    if (kind == BaselineKind::kPlainLora) {
        for (auto& [name, pair] : lora) {
            params.push_back({"lora." + name + ".A", &pair.a, ParamGroup::kAdapter});
            params.push_back({"lora." + name + ".B", &pair.b, ParamGroup::kAdapter});
        }
    }
    params.push_back({"instr_embedding", &instr_embedding, ParamGroup::kEncoder});
    return params;
}

std::uint64_t BaselineModel::base_checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& [gid, stack] : encoders) {
        for (const Linear& lin : stack) {
            h = tensor_checksum(lin.w, h);
            h = tensor_checksum(lin.b, h);
        }
    }
    h = tensor_checksum(fusion.w, h);
    h = tensor_checksum(fusion.b, h);
    h = tensor_checksum(head.w, h);
    h = tensor_checksum(head.b, h);
    return h;
}

std::size_t BaselineModel::adapter_param_count() const {
    std::size_t n = 0;
    for (const auto& [name, pair] : lora) n += pair.a.size() + pair.b.size();
    return n;
}

}  // namespace filora
