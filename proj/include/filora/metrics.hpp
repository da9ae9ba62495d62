#pragma once

#include <functional>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "filora/model.hpp"
#include "filora/synthdata.hpp"

namespace filora {

/// Gate Modulation Range per group: mean absolute gate difference between
/// paired focus and ignore renders. Gates depend only on the instruction
/// text, so the renders are the whole input.
std::map<GroupId, double> gmr(const FiloraModel& model, std::span<const Instruction> focus_renders,
                              std::span<const Instruction> ignore_renders);

struct RsOptions {
    double delta = 0.05;
    /// When true, RS is measured at the gold label y instead of the
    /// unperturbed prediction. The prediction-based variant is canonical.
    bool at_gold_label = false;
};

struct RsResult {
    /// Canonical central-difference estimate at the unperturbed prediction.
    std::map<GroupId, double> fd;
    /// Tape-gradient estimate of the same quantity.
    std::map<GroupId, double> analytic;
    /// The same pair restricted to probes where the gate sat at least delta
    /// from both ends of [0,1] (true central differences); empty for groups
    /// with no interior probe. The 5% agreement contract between the two
    /// estimators applies to these.
    std::map<GroupId, double> fd_interior;
    std::map<GroupId, double> analytic_interior;
    /// Fraction of (sample, group) probes that were interior.
    double interior_fraction = 0.0;
};

/// Reliance Sensitivity per group: |d log p(yhat | x, I) / d g_g| averaged
/// over samples, with gates produced by the given per-sample renders. The
/// derivative is taken by central difference; at the [0,1] boundary the
/// probe interval is clamped and the difference divided by its actual
/// width. An analytic variant is computed from the same probes.
RsResult reliance_sensitivity(const FiloraModel& model, std::span<const Sample> samples,
                              std::span<const Instruction> renders, const RsOptions& opt = {});

/// Ratio of mean RS over core groups to mean RS over spurious groups.
double core_spurious_ratio(const std::map<GroupId, double>& rs, const std::map<GroupId, GroupRole>& roles);

using PredictFn = std::function<int(const FeatureMap& features, const Instruction& instruction)>;

struct InterventionSpec {
    std::vector<GroupId> groups;
    double strength = 1.0;
};

/// Fraction of samples whose prediction is unchanged by the intervention,
/// with the per-sample instructions (neutral renders in the protocol).
double decision_stability(const PredictFn& predict, std::span<const Sample> samples,
                          std::span<const Instruction> instructions, const InterventionSpec& intervention);

/// Accuracy against the core labels y at each suppression strength applied
/// to the listed groups. Predictions at each strength are computed once.
std::vector<std::pair<double, double>> degradation_curve(const PredictFn& predict, std::span<const Sample> samples,
                                                         std::span<const Instruction> instructions,
                                                         std::span<const double> strengths,
                                                         std::span<const GroupId> suppressed_groups);

/// Plug-in mutual information (nats) over the empirical joint of two
/// discrete series.
double mutual_information(std::span<const int> xs, std::span<const int> ys);

/// Equal-frequency quantization into q bins; ties resolve by original
/// position, so the binning is deterministic.
std::vector<int> equal_frequency_bins(std::span<const double> values, std::size_t q);

inline constexpr std::size_t kMiBins = 8;

/// Per-group MI with the labels: every feature coordinate is quantized into
/// kMiBins equal-frequency bins and the coordinate MIs are averaged.
std::map<GroupId, double> mi_by_group(std::span<const Sample> samples, const DatasetSpec& spec);

/// Jensen-Shannon divergence in nats between two distributions.
double jsd(std::span<const double> p, std::span<const double> q);

enum class MaskMode { kFull, kCoreOnly, kSpuriousOnly };
std::string mask_mode_name(MaskMode mode);

struct SeparabilityScores {
    double jsd_score = 0.0;
    double l2_score = 0.0;
};

/// Label separability of label-wise mean feature vectors under feature
/// masking. l2 is the mean pairwise distance; jsd compares the means
/// normalized into distributions over absolute feature magnitudes (an
/// all-zero mean falls back to uniform).
SeparabilityScores label_separability(std::span<const Sample> samples, const DatasetSpec& spec, MaskMode mode);

struct MetricsReport {
    std::string manifest_hash;
    std::map<GroupId, double> gmr;
    std::map<std::string, std::map<GroupId, double>> rs;           // condition -> group -> RS (canonical)
    std::map<std::string, std::map<GroupId, double>> rs_analytic;  // analytic variant
    std::map<std::string, std::map<GroupId, double>> rs_gold;      // gold-label variant
    // Interior-probe restrictions of rs and rs_analytic; the 5% estimator
    // agreement holds on these.
    std::map<std::string, std::map<GroupId, double>> rs_fd_interior;
    std::map<std::string, std::map<GroupId, double>> rs_analytic_interior;
    std::map<std::string, double> rs_core_spurious_ratio;
    std::map<std::string, double> stability;                                      // method -> agreement
    std::map<std::string, std::vector<std::pair<double, double>>> degradation;    // method -> curve
    std::map<GroupId, double> mi_table;
    std::map<std::string, SeparabilityScores> separability;  // mask mode -> scores
    std::map<std::string, double> extra;                     // scalar diagnostics (accuracies, checks)

    std::string to_json() const;
};

inline const std::string kReportSchema = "filora-report-v1";

void write_report_bundle(const MetricsReport& report, const std::string& dir, bool emit_svg);

}  // namespace filora
