#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "filora/groups.hpp"
#include "filora/instructions.hpp"
#include "filora/rng.hpp"
#include "filora/tensor.hpp"

namespace filora {

enum class Modality { kTextLike, kVisionLike, kAudioLike };

std::string modality_name(Modality m);
Modality modality_from_name(const std::string& name);

std::string role_name(GroupRole r);
GroupRole role_from_name(const std::string& name);

struct FeatureGroupSpec {
    GroupId id;
    Modality modality = Modality::kTextLike;
    GroupRole role = GroupRole::kCore;
    std::size_t dim = 16;
    double class_separation = 1.0;
    double noise_sigma = 0.5;
};

struct DatasetSpec {
    std::vector<FeatureGroupSpec> groups;
    std::size_t num_classes = 4;
    /// Probability that the spurious latent label copies the core label;
    /// otherwise it is uniform over the other classes.
    double rho = 0.9;
    /// Probability that the proxy label is flipped to a uniform other class.
    double proxy_noise = 0.05;
    std::size_t n_train = 4000;
    std::size_t n_eval = 1000;
    std::uint64_t seed = 17;

    void validate() const;
    std::vector<GroupId> group_ids() const;
    std::vector<GroupId> group_ids_with_role(GroupRole role) const;
    const FeatureGroupSpec& group(const GroupId& id) const;

    /// Benchmark defaults: two core and two spurious groups of dim 16,
    /// K = 4, rho = 0.9, proxy_noise = 0.05, 4000 train / 1000 eval.
    static DatasetSpec reference(std::uint64_t seed = 17);

    static DatasetSpec load(const std::string& path);
    void save(const std::string& path) const;
    std::string to_json() const;
    static DatasetSpec from_json(const std::string& text);
};

/// Role map over feature groups; the fusion gate group is appended as a
/// neutral role by model-level helpers, not here.
std::map<GroupId, GroupRole> group_roles(const DatasetSpec& spec);

using FeatureMap = std::map<GroupId, Tensor>;

struct Sample {
    FeatureMap features;
    int y = 0;
    int y_spurious = 0;
    ConditionId condition = ConditionId::kNeutral;
    Instruction instruction;
};

/// Fixed per-class unit direction for every group, drawn once per dataset
/// seed. Near-orthogonal at the benchmark dimensions, which keeps classes
/// separable group by group.
class Prototypes {
  public:
    static Prototypes build(const DatasetSpec& spec);
    const Tensor& at(const GroupId& id, int cls) const;

  private:
    std::map<GroupId, std::vector<Tensor>> by_group_;
};

struct Dataset {
    DatasetSpec spec;
    Prototypes prototypes;
    std::vector<Sample> train;
    std::vector<Sample> eval;
};

Dataset generate_dataset(const DatasetSpec& spec, const TemplateBank& bank);

/// Nearest-prototype label over the spurious groups only, then flipped to a
/// uniform other class with probability proxy_noise. Core features carry no
/// weight in this label by construction.
int proxy_label(const FeatureMap& features, const DatasetSpec& spec, const Prototypes& prototypes, double proxy_noise,
                Rng& rng);
int proxy_label(const Sample& sample, const DatasetSpec& spec, const Prototypes& prototypes, double proxy_noise,
                std::uint64_t seed);

/// Scales the targeted groups' features by (1 - strength) toward zero (the
/// population mean by construction). Labels, condition and instruction are
/// untouched.
Sample suppress(const Sample& sample, std::span<const GroupId> group_ids, double strength);
Sample remove_groups(const Sample& sample, std::span<const GroupId> group_ids);

double empirical_alignment_rate(std::span<const Sample> samples);

// JSON Lines dataset serialization: a header line with the schema version,
// spec and content hash, then one sample per line.
inline const std::string kDatasetSchema = "filora-dataset-v1";
void write_dataset_jsonl(const Dataset& dataset, const std::string& path, const std::string& config_hash);
Dataset read_dataset_jsonl(const std::string& path);

}  // namespace filora
