#pragma once

#include <span>
#include <vector>

#include "filora/model.hpp"

namespace filora {

/// Optimizer defaults follow the experiment protocol: AdamW at 2e-4 for
/// adapter parameters and 1e-4 for the instruction encoder, decoupled
/// weight decay 1e-2, global gradient-norm clip 1.0, batch size 16. Plain
/// SGD with decoupled weight decay is available behind use_adamw=false.
struct TrainingConfig {
    double learning_rate_adapters = 2e-4;
    double learning_rate_encoder = 1e-4;
    double weight_decay = 1e-2;
    double grad_clip_norm = 1.0;
    std::size_t batch_size = 16;
    std::size_t epochs = 240;
    double lambda = 0.01;
    std::uint64_t seed = 0;
    bool use_adamw = true;

    void validate() const;
    static TrainingConfig load(const std::string& path);
    void save(const std::string& path) const;
    static TrainingConfig parse(const std::string& text);
    std::string to_text() const;
};

struct EpochStats {
    double mean_loss = 0.0;
    double mean_cls = 0.0;
    double mean_gate = 0.0;  // raw gate regularizer, before the lambda weight
    /// mean |lambda * L_gate| / mean L_cls over the epoch.
    double lambda_dominance = 0.0;
};

/// Supervision routing: conditions that emphasize core evidence (and the
/// neutral condition) target the core label; the ignore-core condition
/// targets the spurious proxy label.
int route_target(const Sample& sample);

std::vector<RoutedSample> route_all(std::span<const Sample> samples, const ConditionTable& conditions);

double gate_regularizer(const GateVector& gates, const std::map<GroupId, double>& alpha);

/// Per-sample objective value: CE against the routed target plus
/// lambda * gate regularizer, evaluated on a throwaway tape.
double sample_loss(const TrainableModel& model, const Sample& sample, const ConditionTable& conditions,
                   double lambda);

/// Global L2-norm clip in place; returns the pre-clip norm.
double clip_gradients(std::vector<Tensor>& gradients, double max_norm);

/// Minibatch loop over routed samples: shuffle (seeded), forward, backward,
/// clip, SGD step with decoupled weight decay at the per-group rates.
/// Deterministic for a fixed config and model state.
std::vector<EpochStats> train_routed(TrainableModel& model, std::span<const RoutedSample> samples,
                                     const TrainingConfig& config);

/// Routes the samples, then runs train_routed. The optimizer loop only ever
/// sees RoutedSample, so condition metadata is unreachable past routing.
std::vector<EpochStats> train(TrainableModel& model, std::span<const Sample> samples,
                              const ConditionTable& conditions, const TrainingConfig& config);

void write_loss_trace_csv(const std::string& path, std::span<const EpochStats> trace);

}  // namespace filora
