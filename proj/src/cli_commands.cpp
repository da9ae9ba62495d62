#include "filora/cli.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>

#include "filora/training.hpp"
#include "json.hpp"

namespace filora {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open " + path);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

int run_guarded(const char* what, const std::function<void()>& body) {
    try {
        body();
        return kExitOk;
    } catch (const ConfigError& e) {
        std::cerr << what << ": configuration error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << what << ": " << e.what() << "\n";
        return kExitRuntime;
    }
}

}  // namespace

ExperimentManifest ExperimentManifest::load(const std::string& path) {
    const std::string text = read_file(path);
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError("manifest " + path + " is not valid JSON: " + e.what());
    }
    ExperimentManifest m;
    try {
        const fs::path base = fs::path(path).parent_path();
        auto resolve = [&](const std::string& p) {
            return fs::path(p).is_absolute() ? p : (base / p).string();
        };
        m.dataset_spec_path = resolve(j.at("dataset_spec").get<std::string>());
        m.training_config_path = resolve(j.at("training_config").get<std::string>());
        if (j.contains("methods")) m.methods = j.at("methods").get<std::vector<std::string>>();
        m.out_dir = resolve(j.at("out_dir").get<std::string>());
        m.seed = j.value("seed", std::uint64_t{0});
    } catch (const json::exception& e) {
        throw ConfigError("manifest " + path + " field error: " + e.what());
    }
    if (m.methods.empty()) throw ConfigError("manifest " + path + ": methods must be nonempty");
    for (const std::string& method : m.methods) {
        if (method != "filora" && method != "full_ft" && method != "lora" && method != "prompt_only") {
            throw ConfigError("manifest " + path + ": unknown method '" + method + "'");
        }
    }
    std::uint64_t h = fnv1a64(text.data(), text.size());
    const std::string spec_text = read_file(m.dataset_spec_path);
    h = fnv1a64(spec_text.data(), spec_text.size(), h);
    const std::string cfg_text = read_file(m.training_config_path);
    h = fnv1a64(cfg_text.data(), cfg_text.size(), h);
    m.content_hash = hash_hex(h);
    return m;
}

int cmd_gen_data(const std::string& spec_path, const std::string& out_path) {
    return run_guarded("gen-data", [&] {
        const std::string spec_text = read_file(spec_path);
        DatasetSpec spec = DatasetSpec::from_json(spec_text);
        Dataset dataset = generate_dataset(spec, TemplateBank::builtin());
        fs::create_directories(fs::path(out_path).parent_path().empty() ? "." : fs::path(out_path).parent_path().string());
        write_dataset_jsonl(dataset, out_path, hash_hex(fnv1a64(spec_text.data(), spec_text.size())));
        const double train_rate = empirical_alignment_rate(dataset.train);
        std::cout << "dataset " << out_path << ": n_train=" << spec.n_train << " n_eval=" << spec.n_eval
                  << " K=" << spec.num_classes << " rho=" << spec.rho
                  << " empirical_y_match_rate=" << train_rate << "\n";
    });
}

namespace {

BaseCheckpoint ensure_base(const ExperimentManifest& m, const Dataset& dataset) {
    if (fs::exists(m.base_checkpoint_path())) return load_base_checkpoint(m.base_checkpoint_path());
    const auto t0 = std::chrono::steady_clock::now();
    PretrainOptions opt;
    BaseCheckpoint base = pretrain_base(dataset, opt.steps, mix_seed(m.seed, "pretrain"), opt);
    save_base_checkpoint(base, m.base_checkpoint_path(), m.content_hash);
    std::size_t hits = 0;
    for (const Sample& s : dataset.eval) {
        if (argmax_lowest(base_forward(base, s.features)) == s.y) ++hits;
    }
    std::cout << "pretrain: " << seconds_since(t0) << "s, eval accuracy "
              << static_cast<double>(hits) / static_cast<double>(dataset.eval.size()) << "\n";
    return base;
}

std::unique_ptr<TrainableModel> make_model(const std::string& method, const BaseCheckpoint& base,
                                           const ExperimentManifest& m) {
    const TemplateBank& bank = TemplateBank::builtin();
    if (method == "filora") {
        FiloraConfig cfg;
        cfg.seed = mix_seed(m.seed, "model-filora");
        return std::make_unique<FiloraModel>(FiloraModel::create(base, bank, cfg));
    }
    BaselineConfig cfg;
    cfg.seed = mix_seed(m.seed, "model-" + method);
    return std::make_unique<BaselineModel>(build_baseline(baseline_from_method_name(method), base, bank, cfg));
}

std::unique_ptr<TrainableModel> load_model(const std::string& path) {
    if (checkpoint_method(path) == "filora") {
        return std::make_unique<FiloraModel>(load_filora_checkpoint(path));
    }
    return std::make_unique<BaselineModel>(load_baseline_checkpoint(path));
}

}  // namespace

int cmd_pretrain(const ExperimentManifest& m) {
    return run_guarded("pretrain", [&] {
        fs::create_directories(m.out_dir);
        if (!fs::exists(m.dataset_path())) {
            throw std::runtime_error("dataset " + m.dataset_path() + " does not exist; run gen-data first");
        }
        Dataset dataset = read_dataset_jsonl(m.dataset_path());
        ensure_base(m, dataset);
    });
}

int cmd_train(const ExperimentManifest& m) {
    return run_guarded("train", [&] {
        fs::create_directories(m.out_dir);
        if (!fs::exists(m.dataset_path())) {
            throw std::runtime_error("dataset " + m.dataset_path() + " does not exist; run gen-data first");
        }
        Dataset dataset = read_dataset_jsonl(m.dataset_path());
        BaseCheckpoint base = ensure_base(m, dataset);
        TrainingConfig config = TrainingConfig::load(m.training_config_path);
        const ConditionTable conditions = make_condition_table(model_group_roles(dataset.spec));

        for (const std::string& method : m.methods) {
            const auto t0 = std::chrono::steady_clock::now();
            std::unique_ptr<TrainableModel> model = make_model(method, base, m);
            TrainingConfig method_config = config;
            method_config.seed = mix_seed(m.seed, "train-" + method, config.seed);
            std::vector<EpochStats> trace;
            try {
                trace = train(*model, dataset.train, conditions, method_config);
            } catch (const TrainingError& e) {
                throw TrainingError(std::string(e.what()) + " (method " + method + ")");
            }
            if (method == "filora") {
                save_filora_checkpoint(static_cast<const FiloraModel&>(*model), m.checkpoint_path(method),
                                       m.content_hash);
            } else {
                save_baseline_checkpoint(static_cast<const BaselineModel&>(*model), m.checkpoint_path(method),
                                         m.content_hash);
            }
            write_loss_trace_csv(m.trace_path(method), trace);
            std::cout << "train " << method << ": " << seconds_since(t0) << "s, final loss "
                      << (trace.empty() ? 0.0 : trace.back().mean_loss) << "\n";
        }
    });
}

namespace {

PredictFn predictor_for(const TrainableModel& model) {
    return [&model](const FeatureMap& features, const Instruction& instruction) {
        return model.predict(features, instruction);
    };
}

}  // namespace

int cmd_report(const ExperimentManifest& m, const ReportOptions& options) {
    return run_guarded("report", [&] {
        if (!fs::exists(m.dataset_path())) {
            throw std::runtime_error("dataset " + m.dataset_path() + " does not exist");
        }
        Dataset dataset = read_dataset_jsonl(m.dataset_path());
        const TemplateBank& bank = TemplateBank::builtin();
        const std::map<GroupId, GroupRole> roles = model_group_roles(dataset.spec);

        std::map<std::string, std::unique_ptr<TrainableModel>> models;
        for (const std::string& method : m.methods) {
            if (!fs::exists(m.checkpoint_path(method))) {
                throw std::runtime_error("missing checkpoint for method " + method);
            }
            models.emplace(method, load_model(m.checkpoint_path(method)));
        }
        auto filora_it = models.find("filora");
        if (filora_it == models.end()) throw ConfigError("report requires the filora method");
        const auto& filora = static_cast<const FiloraModel&>(*filora_it->second);

        MetricsReport report;
        report.manifest_hash = m.content_hash;

        // Gate controllability between paired held-out focus/ignore renders.
        std::vector<Instruction> focus_renders, ignore_renders;
        for (std::size_t i = 0; i < options.gmr_renders; ++i) {
            const std::uint64_t rs = mix_seed(m.seed, "gmr-render", i);
            focus_renders.push_back(bank.render_heldout(ConditionId::kFocusCore, rs));
            ignore_renders.push_back(bank.render_heldout(ConditionId::kIgnoreCore, rs));
        }
        report.gmr = gmr(filora, focus_renders, ignore_renders);

        // Reliance sensitivity per condition on an eval subset.
        const std::size_t n_rs = std::min(options.rs_samples, dataset.eval.size());
        std::span<const Sample> rs_span(dataset.eval.data(), n_rs);
        for (ConditionId cond : kAllConditions) {
            std::vector<Instruction> renders;
            renders.reserve(n_rs);
            for (std::size_t i = 0; i < n_rs; ++i) {
                renders.push_back(bank.render_heldout(cond, mix_seed(m.seed, "rs-render", i)));
            }
            RsResult rs = reliance_sensitivity(filora, rs_span, renders);
            RsOptions gold_opt;
            gold_opt.at_gold_label = true;
            RsResult rs_gold = reliance_sensitivity(filora, rs_span, renders, gold_opt);
            // The estimator-agreement fields use a finer probe: at the
            // default delta the secant picks up the curvature of the
            // twice-gated fusion path and is not comparable to the point
            // derivative at the 5% level.
            RsOptions fine_opt;
            fine_opt.delta = 0.015;
            RsResult rs_fine = reliance_sensitivity(filora, rs_span, renders, fine_opt);
            const std::string cname = condition_name(cond);
            report.rs[cname] = rs.fd;
            report.rs_analytic[cname] = rs.analytic;
            report.rs_gold[cname] = rs_gold.fd;
            report.rs_fd_interior[cname] = rs_fine.fd_interior;
            report.rs_analytic_interior[cname] = rs_fine.analytic_interior;
            report.rs_core_spurious_ratio[cname] = core_spurious_ratio(rs.fd, roles);
            report.extra["rs_interior_fraction_" + cname] = rs.interior_fraction;
        }

        // Robustness to spurious interventions, neutral instructions.
        std::vector<Instruction> neutral_renders;
        neutral_renders.reserve(dataset.eval.size());
        for (std::size_t i = 0; i < dataset.eval.size(); ++i) {
            neutral_renders.push_back(bank.render_heldout(ConditionId::kNeutral, mix_seed(m.seed, "stab-render", i)));
        }
        const std::vector<GroupId> spurious = dataset.spec.group_ids_with_role(GroupRole::kSpurious);
        InterventionSpec removal{spurious, 1.0};
        for (const auto& [method, model] : models) {
            PredictFn predict = predictor_for(*model);
            report.stability[method] = decision_stability(predict, dataset.eval, neutral_renders, removal);
            report.degradation[method] =
                degradation_curve(predict, dataset.eval, neutral_renders, options.strengths, spurious);
            report.extra["accuracy_" + method] = report.degradation[method].empty()
                                                     ? 0.0
                                                     : report.degradation[method].front().second;
        }

        report.mi_table = mi_by_group(dataset.eval, dataset.spec);
        for (MaskMode mode : {MaskMode::kFull, MaskMode::kCoreOnly, MaskMode::kSpuriousOnly}) {
            report.separability[mask_mode_name(mode)] = label_separability(dataset.eval, dataset.spec, mode);
        }

        write_report_bundle(report, m.report_dir(), options.svg);
        {
            const std::string tmp = m.report_dir() + "/summary.txt.tmp";
            std::ofstream out(tmp, std::ios::binary);
            out << make_summary(report, dataset.spec);
            out.close();
            fs::rename(tmp, m.report_dir() + "/summary.txt");
        }
        std::cout << "report written to " << m.report_dir() << "\n";
    });
}

int cmd_intervene(const ExperimentManifest& m, const std::string& method, std::vector<GroupId> groups,
                  double strength) {
    return run_guarded("intervene", [&] {
        if (!fs::exists(m.checkpoint_path(method))) {
            throw std::runtime_error("missing checkpoint for method " + method);
        }
        Dataset dataset = read_dataset_jsonl(m.dataset_path());
        if (groups.empty()) groups = dataset.spec.group_ids_with_role(GroupRole::kSpurious);
        std::unique_ptr<TrainableModel> model = load_model(m.checkpoint_path(method));
        const TemplateBank& bank = TemplateBank::builtin();
        std::vector<Instruction> neutral_renders;
        for (std::size_t i = 0; i < dataset.eval.size(); ++i) {
            neutral_renders.push_back(bank.render_heldout(ConditionId::kNeutral, mix_seed(m.seed, "stab-render", i)));
        }
        InterventionSpec spec{groups, strength};
        PredictFn predict = predictor_for(*model);
        const double stability = decision_stability(predict, dataset.eval, neutral_renders, spec);
        std::size_t hits = 0;
        for (std::size_t i = 0; i < dataset.eval.size(); ++i) {
            Sample intervened = suppress(dataset.eval[i], groups, strength);
            if (predict(intervened.features, neutral_renders[i]) == dataset.eval[i].y) ++hits;
        }
        std::cout << "intervene " << method << " strength=" << strength << " groups=";
        for (std::size_t i = 0; i < groups.size(); ++i) std::cout << (i ? "+" : "") << groups[i];
        std::cout << " stability=" << stability
                  << " accuracy=" << static_cast<double>(hits) / static_cast<double>(dataset.eval.size()) << "\n";
    });
}

int cmd_templates(const std::string& out_dir) {
    return run_guarded("templates", [&] {
        fs::create_directories(out_dir);
        TemplateBank::builtin().dump(out_dir);
        std::cout << "template banks written to " << out_dir << "\n";
    });
}

QualitativeChecks evaluate_checks(const MetricsReport& report, const DatasetSpec& spec) {
    QualitativeChecks checks;
    const std::vector<GroupId> spurious = spec.group_ids_with_role(GroupRole::kSpurious);
    const std::vector<GroupId> core = spec.group_ids_with_role(GroupRole::kCore);

    double spurious_gmr = 0.0;
    for (const GroupId& gid : spurious) spurious_gmr += report.gmr.count(gid) ? report.gmr.at(gid) : 0.0;
    spurious_gmr /= static_cast<double>(spurious.size());
    checks.gmr_spurious = spurious_gmr >= 0.3;

    if (report.rs_core_spurious_ratio.count("focus_core") && report.rs_core_spurious_ratio.count("neutral") &&
        report.rs_core_spurious_ratio.count("ignore_core")) {
        const double rf = report.rs_core_spurious_ratio.at("focus_core");
        const double rn = report.rs_core_spurious_ratio.at("neutral");
        const double ri = report.rs_core_spurious_ratio.at("ignore_core");
        checks.rs_ordering = rf >= 1.2 * rn && rn >= 1.2 * ri;
    }

    // The estimator-agreement contract is scoped to interior-gate probes,
    // where both sides measure a true central difference.
    checks.rs_agreement = true;
    for (const auto& [cond, by_group] : report.rs_fd_interior) {
        for (const auto& [gid, fd] : by_group) {
            const double an = report.rs_analytic_interior.at(cond).at(gid);
            if (std::fabs(fd - an) > 0.05 * std::max({std::fabs(fd), std::fabs(an), 1e-9})) {
                checks.rs_agreement = false;
            }
        }
    }

    if (report.stability.count("filora")) {
        checks.stability_margin = true;
        checks.degradation_dominance = true;
        const double fs = report.stability.at("filora");
        const auto& fcurve = report.degradation.at("filora");
        for (const auto& [method, s] : report.stability) {
            if (method == "filora") continue;
            if (fs < s + 0.10) checks.stability_margin = false;
            const auto& curve = report.degradation.at(method);
            for (std::size_t k = 0; k < curve.size() && k < fcurve.size(); ++k) {
                if (fcurve[k].first >= 0.5 && fcurve[k].second < curve[k].second) {
                    checks.degradation_dominance = false;
                }
            }
        }
    }

    if (report.separability.count("full")) {
        const auto& full = report.separability.at("full");
        const auto& core_only = report.separability.at("core_only");
        const auto& spur_only = report.separability.at("spurious_only");
        checks.separability_ordering = full.l2_score >= core_only.l2_score &&
                                       core_only.l2_score >= spur_only.l2_score && spur_only.l2_score > 0.0;
    }

    checks.lambda_dominance = !report.extra.count("lambda_dominance_epoch1") ||
                              report.extra.at("lambda_dominance_epoch1") < 0.2;
    return checks;
}

std::string make_summary(const MetricsReport& report, const DatasetSpec& spec) {
    QualitativeChecks checks = evaluate_checks(report, spec);
    std::ostringstream os;
    os.precision(4);
    auto line = [&](bool ok, const std::string& text) {
        os << (ok ? "[PASS] " : "[FAIL] ") << text << "\n";
    };
    os << "experiment summary (manifest " << report.manifest_hash << ")\n\n";
    line(checks.gmr_spurious, "gate controllability: spurious-group GMR >= 0.3 under focus/ignore renders");
    line(checks.rs_ordering, "reliance redistribution: core/spurious RS ratio ordered focus > neutral > ignore "
                             "with 1.2x adjacent gaps");
    line(checks.rs_agreement, "RS finite-difference and analytic variants agree within 5%");
    line(checks.stability_margin, "decision stability: filora exceeds every baseline by >= 0.10");
    line(checks.degradation_dominance, "degradation: filora accuracy >= every baseline at strengths >= 0.5");
    line(checks.separability_ordering, "label separability (l2): full >= core_only >= spurious_only > 0");
    os << "\ngmr:";
    for (const auto& [gid, v] : report.gmr) os << " " << gid << "=" << v;
    os << "\nrs core/spurious ratio:";
    for (const auto& [cond, v] : report.rs_core_spurious_ratio) os << " " << cond << "=" << v;
    os << "\nstability:";
    for (const auto& [method, v] : report.stability) os << " " << method << "=" << v;
    os << "\naccuracy (strength 0):";
    for (const auto& [key, v] : report.extra) {
        if (key.rfind("accuracy_", 0) == 0) os << " " << key.substr(9) << "=" << v;
    }
    os << "\nseparability l2:";
    for (const auto& [mode, sc] : report.separability) os << " " << mode << "=" << sc.l2_score;
    os << "\n";
    return os.str();
}

}  // namespace filora
