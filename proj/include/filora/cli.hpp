#pragma once

#include <string>
#include <vector>

#include "filora/metrics.hpp"

namespace filora {

// Exit-code contract: 0 success, 1 runtime failure, 2 configuration error.
inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitConfig = 2;

/// Batch-experiment description. The content hash covers the manifest file
/// and both referenced files, and is embedded into every artifact so a
/// bundle can be traced back to its exact inputs.
struct ExperimentManifest {
    std::string dataset_spec_path;
    std::string training_config_path;
    std::vector<std::string> methods{"filora", "full_ft", "lora", "prompt_only"};
    std::string out_dir;
    std::uint64_t seed = 0;
    std::string content_hash;

    static ExperimentManifest load(const std::string& path);

    std::string dataset_path() const { return out_dir + "/dataset.jsonl"; }
    std::string base_checkpoint_path() const { return out_dir + "/base.ckpt.json"; }
    std::string checkpoint_path(const std::string& method) const { return out_dir + "/" + method + ".ckpt.json"; }
    std::string trace_path(const std::string& method) const { return out_dir + "/" + method + ".trace.csv"; }
    std::string report_dir() const { return out_dir + "/report"; }
};

struct ReportOptions {
    std::vector<double> strengths{0.0, 0.25, 0.5, 0.75, 1.0};
    bool svg = false;
    /// Eval samples used for the RS estimates (full set for stability and
    /// degradation).
    std::size_t rs_samples = 200;
    std::size_t gmr_renders = 200;
};

int cmd_gen_data(const std::string& spec_path, const std::string& out_path);
int cmd_pretrain(const ExperimentManifest& manifest);
int cmd_train(const ExperimentManifest& manifest);
int cmd_report(const ExperimentManifest& manifest, const ReportOptions& options);
int cmd_intervene(const ExperimentManifest& manifest, const std::string& method, std::vector<GroupId> groups,
                  double strength);
int cmd_templates(const std::string& out_dir);

/// Qualitative findings the experiment is expected to reproduce; evaluated
/// from a finished report and printed into summary.txt.
struct QualitativeChecks {
    bool gmr_spurious = false;
    bool rs_ordering = false;
    bool rs_agreement = false;
    bool stability_margin = false;
    bool degradation_dominance = false;
    bool separability_ordering = false;
    bool lambda_dominance = false;
};

QualitativeChecks evaluate_checks(const MetricsReport& report, const DatasetSpec& spec);
std::string make_summary(const MetricsReport& report, const DatasetSpec& spec);

}  // namespace filora
