#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "filora/adapters.hpp"
#include "filora/instructions.hpp"
#include "filora/synthdata.hpp"

namespace filora {

struct TrainingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Desk-scale architecture: per-group encoder stack of two adapted linears
// (dim -> 32 -> 32, GELU after each), fusion linear (32 * n_groups -> 64)
// + GELU, head (64 -> K). Each group's gate scales its adapter in both
// stack layers, so sensitivity to a gate grows with its activity.
inline constexpr std::size_t kGroupHidden = 32;
inline constexpr std::size_t kGroupDepth = 3;
inline constexpr std::size_t kFusionHidden = 64;
/// Width of the baselines' instruction embedding pathway at fusion.
inline constexpr std::size_t kBaselineInstrDim = 16;

struct Linear {
    Tensor w;
    Tensor b;
};

/// Frozen pretrained base: the un-adapted classifier every variant starts
/// from. It consumes features only; instructions enter the architecture
/// through the variant-specific pathways.
struct BaseCheckpoint {
    std::vector<GroupId> feature_groups;
    std::map<GroupId, std::size_t> input_dims;
    std::map<GroupId, std::vector<Linear>> encoders;
    Linear fusion;
    Linear head;
    std::size_t num_classes = 0;
    std::uint64_t init_seed = 0;

    std::uint64_t checksum() const;
};

BaseCheckpoint init_base(const DatasetSpec& spec, std::uint64_t seed);

NodeId base_logits_on_tape(TapeBindings& tb, const BaseCheckpoint& base, const FeatureMap& features,
                           bool trainable);
Tensor base_forward(const BaseCheckpoint& base, const FeatureMap& features);

struct PretrainOptions {
    std::size_t steps = 500;
    double learning_rate = 0.05;
    std::size_t batch_size = 16;
};

/// Trains the un-adapted architecture on neutral-condition samples against
/// the core labels, then freezes it. All adapted variants start here.
BaseCheckpoint pretrain_base(const Dataset& dataset, std::size_t steps, std::uint64_t seed,
                             const PretrainOptions& opt = {});

/// Condition-free view of a training sample: everything the optimizer loop
/// is allowed to see. Built by supervision routing; holds no condition id
/// and no label besides the routed target.
struct RoutedSample {
    const FeatureMap* features = nullptr;
    const Instruction* instruction = nullptr;
    int target = 0;
    std::map<GroupId, double> alpha;
};

struct SampleLossParts {
    NodeId total = 0;
    double cls = 0.0;
    double gate_reg = 0.0;
};

class TrainableModel {
  public:
    virtual ~TrainableModel() = default;

    virtual SampleLossParts loss_on_tape(TapeBindings& tb, const RoutedSample& sample, double lambda) const = 0;
    virtual std::vector<NamedParam> trainable_params() = 0;
    virtual std::string method_name() const = 0;
    virtual Tensor forward(const FeatureMap& features, const Instruction& instruction) const = 0;

    int predict(const FeatureMap& features, const Instruction& instruction) const;
    double log_prob(const FeatureMap& features, const Instruction& instruction, int label) const;
};

/// Argmax with ties broken toward the lowest class index.
int argmax_lowest(const Tensor& logits);
double log_prob_of(const Tensor& logits, int label);

/// Group roles extended with the neutral fusion gate group.
std::map<GroupId, GroupRole> model_group_roles(const DatasetSpec& spec);
std::vector<GroupId> gate_groups_for(const DatasetSpec& spec);

struct FiloraConfig {
    std::size_t rank = 8;
    double lora_alpha = 16.0;  // LoRA scale = lora_alpha / rank
    EncoderDims encoder;
    std::uint64_t seed = 0;
};

/// The instruction-gated grouped-LoRA classifier. Each feature group's
/// encoder carries exactly its own adapter group; the fusion and head
/// layers carry the shared neutral "fusion" group. Trainable state is the
/// adapter factors plus the instruction encoder, nothing else.
class FiloraModel : public TrainableModel {
  public:
    std::vector<GroupId> feature_groups;
    std::vector<GroupId> gate_groups;
    std::map<GroupId, std::vector<GroupedLoraLinear>> encoders;
    GroupedLoraLinear fusion_layer;
    GroupedLoraLinear head_layer;
    InstructionEncoder instr_encoder;
    std::size_t num_classes = 0;
    FiloraConfig config;

    static FiloraModel create(const BaseCheckpoint& base, const TemplateBank& bank, const FiloraConfig& cfg);

    NodeId logits_on_tape(TapeBindings& tb, const FeatureMap& features, const Instruction& instruction) const;
    NodeId logits_with_gates_node(TapeBindings& tb, const FeatureMap& features, NodeId gates_node) const;

    Tensor forward(const FeatureMap& features, const Instruction& instruction) const override;
    Tensor forward_with_gates(const FeatureMap& features, const GateVector& gates) const;
    int predict_with_gates(const FeatureMap& features, const GateVector& gates) const;
    double log_prob_with_gates(const FeatureMap& features, const GateVector& gates, int label) const;

    GateVector gates(const Instruction& instruction) const { return instr_encoder.gates(instruction); }

    SampleLossParts loss_on_tape(TapeBindings& tb, const RoutedSample& sample, double lambda) const override;
    std::vector<NamedParam> trainable_params() override;
    std::string method_name() const override { return "filora"; }

    std::uint64_t base_checksum() const;
    std::size_t adapter_param_count() const;
};

enum class BaselineKind { kFullFineTune, kPlainLora, kPromptOnly };

std::string baseline_method_name(BaselineKind kind);
BaselineKind baseline_from_method_name(const std::string& name);

struct BaselineConfig {
    std::size_t rank = 8;
    double lora_alpha = 16.0;
    std::size_t instr_dim = kBaselineInstrDim;
    std::uint64_t seed = 0;
};

/// Comparison baselines. All three consume the instruction through an
/// embedded pathway concatenated at fusion, so the comparison against
/// FiLoRA isolates gating rather than instruction access.
///   FullFineTune: every base weight trainable, no adapters.
///   PlainLora:    frozen base, one undifferentiated LoRA pair per layer.
///   PromptOnly:   frozen base, only the instruction embedding trainable.
class BaselineModel : public TrainableModel {
  public:
    BaselineKind kind = BaselineKind::kFullFineTune;
    std::vector<GroupId> feature_groups;
    std::map<GroupId, std::vector<Linear>> encoders;
    Linear fusion;  // extended with the instruction block: [64 x (32 n + instr_dim)]
    Linear head;
    Tensor instr_embedding;  // [V x instr_dim]
    Vocabulary vocab;
    std::size_t num_classes = 0;
    std::size_t instr_dim = kBaselineInstrDim;
    BaselineConfig config;

    struct LoraPair {
        Tensor a;
        Tensor b;
        std::size_t rank = 0;
        double scale = 1.0;
    };
    std::map<std::string, LoraPair> lora;  // "enc:<group>", "fusion", "head"; PlainLora only

    NodeId logits_on_tape(TapeBindings& tb, const FeatureMap& features, const Instruction& instruction) const;

    Tensor forward(const FeatureMap& features, const Instruction& instruction) const override;
    SampleLossParts loss_on_tape(TapeBindings& tb, const RoutedSample& sample, double lambda) const override;
    std::vector<NamedParam> trainable_params() override;
    std::string method_name() const override { return baseline_method_name(kind); }

    std::uint64_t base_checksum() const;
    std::size_t adapter_param_count() const;
};

BaselineModel build_baseline(BaselineKind kind, const BaseCheckpoint& base, const TemplateBank& bank,
                             const BaselineConfig& cfg);

std::uint64_t tensor_checksum(const Tensor& t, std::uint64_t h = 0xcbf29ce484222325ull);

// Checkpoint files: one JSON document with f64 arrays, a schema version and
// the originating config hash.
inline const std::string kCheckpointSchema = "filora-checkpoint-v1";
void save_base_checkpoint(const BaseCheckpoint& base, const std::string& path, const std::string& config_hash);
BaseCheckpoint load_base_checkpoint(const std::string& path);
void save_filora_checkpoint(const FiloraModel& model, const std::string& path, const std::string& config_hash);
FiloraModel load_filora_checkpoint(const std::string& path);
void save_baseline_checkpoint(const BaselineModel& model, const std::string& path, const std::string& config_hash);
BaselineModel load_baseline_checkpoint(const std::string& path);
std::string checkpoint_method(const std::string& path);

}  // namespace filora
