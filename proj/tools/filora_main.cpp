#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "filora/cli.hpp"

using namespace filora;

int main(int argc, char** argv) {
    CLI::App app{"filora: grouped, instruction-gated low-rank adaptation experiments"};
    app.require_subcommand(1);

    std::string spec_path, out_path, manifest_path, method, templates_dir;
    std::string out_override;
    std::uint64_t seed_override = 0;
    bool has_seed_override = false;
    std::vector<std::string> methods_override;
    std::vector<double> strengths;
    std::vector<std::string> groups;
    double strength = 1.0;
    bool svg = false;

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset from a spec file");
    gen->add_option("--spec", spec_path, "dataset spec JSON")->required();
    gen->add_option("--out", out_path, "output JSONL path")->required();

    auto add_manifest_opts = [&](CLI::App* cmd) {
        cmd->add_option("--manifest", manifest_path, "experiment manifest JSON")->required();
        cmd->add_option("--out", out_override, "override the manifest output directory");
        cmd->add_option("--seed", seed_override, "override the manifest seed")
            ->each([&](const std::string&) { has_seed_override = true; });
        cmd->add_option("--methods", methods_override, "override the manifest method list");
    };

    auto* pre = app.add_subcommand("pretrain", "pretrain and freeze the base model");
    add_manifest_opts(pre);

    auto* tr = app.add_subcommand("train", "train all methods in the manifest");
    add_manifest_opts(tr);

    auto* rep = app.add_subcommand("report", "evaluate checkpoints and emit the metrics bundle");
    add_manifest_opts(rep);
    rep->add_option("--strengths", strengths, "suppression strengths for the degradation curve");
    rep->add_flag("--svg", svg, "also emit static SVG renders");

    auto* intv = app.add_subcommand("intervene", "single ad-hoc intervention query");
    add_manifest_opts(intv);
    intv->add_option("--method", method, "trained method to query")->required();
    intv->add_option("--groups", groups, "groups to suppress (default: all spurious groups)");
    intv->add_option("--strength", strength, "suppression strength in [0,1]");

    auto* tpl = app.add_subcommand("templates", "dump the built-in instruction template banks");
    tpl->add_option("--out", templates_dir, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (gen->parsed()) return cmd_gen_data(spec_path, out_path);
        if (tpl->parsed()) return cmd_templates(templates_dir);

        ExperimentManifest manifest = ExperimentManifest::load(manifest_path);
        if (!out_override.empty()) manifest.out_dir = out_override;
        if (has_seed_override) manifest.seed = seed_override;
        if (!methods_override.empty()) manifest.methods = methods_override;

        if (pre->parsed()) return cmd_pretrain(manifest);
        if (tr->parsed()) return cmd_train(manifest);
        if (rep->parsed()) {
            ReportOptions options;
            if (!strengths.empty()) options.strengths = strengths;
            options.svg = svg;
            return cmd_report(manifest, options);
        }
        if (intv->parsed()) return cmd_intervene(manifest, method, groups, strength);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitConfig;
}
