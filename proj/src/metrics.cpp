#include "filora/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "filora/parallel.hpp"
#include "json.hpp"

namespace filora {

using nlohmann::json;

std::map<GroupId, double> gmr(const FiloraModel& model, std::span<const Instruction> focus_renders,
                              std::span<const Instruction> ignore_renders) {
    if (focus_renders.empty() || ignore_renders.empty()) {
        throw ContractError("gmr: render sets must be nonempty");
    }
    if (focus_renders.size() != ignore_renders.size()) {
        throw ContractError("gmr: focus and ignore renders must pair up");
    }
    const std::size_t n = focus_renders.size();
    std::vector<std::map<GroupId, double>> diffs(n);
    parallel_for(n, [&](std::size_t i) {
        GateVector gf = model.gates(focus_renders[i]);
        GateVector gi = model.gates(ignore_renders[i]);
        std::map<GroupId, double> d;
        for (const auto& [gid, v] : gf.values) d[gid] = std::fabs(v - gi.at(gid));
        diffs[i] = std::move(d);
    });
    std::map<GroupId, double> out;
    for (const GroupId& gid : model.gate_groups) out[gid] = 0.0;
    for (const auto& d : diffs) {
        for (const auto& [gid, v] : d) out[gid] += v;
    }
    for (auto& [gid, v] : out) v /= static_cast<double>(n);
    return out;
}

RsResult reliance_sensitivity(const FiloraModel& model, std::span<const Sample> samples,
                              std::span<const Instruction> renders, const RsOptions& opt) {
    if (samples.empty()) throw ContractError("reliance_sensitivity: empty sample set");
    if (samples.size() != renders.size()) {
        throw ContractError("reliance_sensitivity: need one render per sample");
    }
    if (opt.delta <= 0.0 || opt.delta >= 0.5) throw ContractError("reliance_sensitivity: delta must be in (0, 0.5)");

    const std::size_t n = samples.size();
    const std::size_t ng = model.gate_groups.size();
    std::vector<std::vector<double>> fd(n, std::vector<double>(ng, 0.0));
    std::vector<std::vector<double>> an(n, std::vector<double>(ng, 0.0));
    std::vector<std::vector<unsigned char>> is_interior(n, std::vector<unsigned char>(ng, 0));

    parallel_for(n, [&](std::size_t i) {
        const Sample& s = samples[i];
        GateVector gates = model.gates(renders[i]);
        const int label = opt.at_gold_label ? s.y : model.predict_with_gates(s.features, gates);

        // Analytic: gradient of log p(label) with respect to the gate leaf.
        Tensor gvals({ng});
        for (std::size_t g = 0; g < ng; ++g) gvals[g] = gates.at(model.gate_groups[g]);
        {
            Tape tape;
            TapeBindings tb(tape);
            NodeId gnode = tape.leaf(gvals, true);
            NodeId logits = model.logits_with_gates_node(tb, s.features, gnode);
            NodeId lp = tape.pick(tape.log_softmax(logits), static_cast<std::size_t>(label));
            tape.backward(lp);
            const Tensor& grad = tape.grad(gnode);
            for (std::size_t g = 0; g < ng; ++g) an[i][g] = std::fabs(grad[g]);
        }

        // Central difference, clamped at the [0,1] boundary.
        for (std::size_t g = 0; g < ng; ++g) {
            const GroupId& gid = model.gate_groups[g];
            const double g0 = gates.at(gid);
            const double hi = std::min(1.0, g0 + opt.delta);
            const double lo = std::max(0.0, g0 - opt.delta);
            if (hi - lo <= 0.0) continue;
            GateVector up = gates, down = gates;
            up.values[gid] = hi;
            down.values[gid] = lo;
            const double lp_hi = model.log_prob_with_gates(s.features, up, label);
            const double lp_lo = model.log_prob_with_gates(s.features, down, label);
            fd[i][g] = std::fabs(lp_hi - lp_lo) / (hi - lo);
            if (g0 - opt.delta >= 0.0 && g0 + opt.delta <= 1.0) is_interior[i][g] = 1;
        }
    });

    RsResult result;
    std::size_t interior_total = 0;
    for (std::size_t g = 0; g < ng; ++g) {
        double sf = 0.0, sa = 0.0, sfi = 0.0, sai = 0.0;
        std::size_t ni = 0;
        for (std::size_t i = 0; i < n; ++i) {
            sf += fd[i][g];
            sa += an[i][g];
            if (is_interior[i][g]) {
                sfi += fd[i][g];
                sai += an[i][g];
                ++ni;
            }
        }
        result.fd[model.gate_groups[g]] = sf / static_cast<double>(n);
        result.analytic[model.gate_groups[g]] = sa / static_cast<double>(n);
        if (ni > 0) {
            result.fd_interior[model.gate_groups[g]] = sfi / static_cast<double>(ni);
            result.analytic_interior[model.gate_groups[g]] = sai / static_cast<double>(ni);
        }
        interior_total += ni;
    }
    result.interior_fraction = static_cast<double>(interior_total) / static_cast<double>(n * ng);
    return result;
}

double core_spurious_ratio(const std::map<GroupId, double>& rs, const std::map<GroupId, GroupRole>& roles) {
    double core = 0.0, spurious = 0.0;
    std::size_t nc = 0, ns = 0;
    for (const auto& [gid, v] : rs) {
        auto it = roles.find(gid);
        if (it == roles.end()) continue;
        if (it->second == GroupRole::kCore) {
            core += v;
            ++nc;
        } else if (it->second == GroupRole::kSpurious) {
            spurious += v;
            ++ns;
        }
    }
    if (nc == 0 || ns == 0) throw ContractError("core_spurious_ratio: need both core and spurious groups");
    core /= static_cast<double>(nc);
    spurious /= static_cast<double>(ns);
    if (spurious == 0.0) return std::numeric_limits<double>::infinity();
    return core / spurious;
}

double decision_stability(const PredictFn& predict, std::span<const Sample> samples,
                          std::span<const Instruction> instructions, const InterventionSpec& intervention) {
    if (samples.empty()) throw ContractError("decision_stability: empty evaluation set");
    if (samples.size() != instructions.size()) {
        throw ContractError("decision_stability: need one instruction per sample");
    }
    const std::size_t n = samples.size();
    std::vector<unsigned char> agree(n, 0);
    parallel_for(n, [&](std::size_t i) {
        const int before = predict(samples[i].features, instructions[i]);
        Sample intervened = suppress(samples[i], intervention.groups, intervention.strength);
        const int after = predict(intervened.features, instructions[i]);
        agree[i] = before == after ? 1 : 0;
    });
    std::size_t hits = std::accumulate(agree.begin(), agree.end(), std::size_t{0});
    return static_cast<double>(hits) / static_cast<double>(n);
}

std::vector<std::pair<double, double>> degradation_curve(const PredictFn& predict, std::span<const Sample> samples,
                                                         std::span<const Instruction> instructions,
                                                         std::span<const double> strengths,
                                                         std::span<const GroupId> suppressed_groups) {
    if (samples.empty()) throw ContractError("degradation_curve: empty evaluation set");
    if (samples.size() != instructions.size()) {
        throw ContractError("degradation_curve: need one instruction per sample");
    }
    for (std::size_t k = 0; k + 1 < strengths.size(); ++k) {
        if (strengths[k] > strengths[k + 1]) throw ContractError("degradation_curve: strengths must ascend");
    }
    std::vector<std::pair<double, double>> curve;
    curve.reserve(strengths.size());
    const std::size_t n = samples.size();
    for (double s : strengths) {
        std::vector<unsigned char> correct(n, 0);
        parallel_for(n, [&](std::size_t i) {
            Sample intervened = suppress(samples[i], suppressed_groups, s);
            correct[i] = predict(intervened.features, instructions[i]) == samples[i].y ? 1 : 0;
        });
        std::size_t hits = std::accumulate(correct.begin(), correct.end(), std::size_t{0});
        curve.emplace_back(s, static_cast<double>(hits) / static_cast<double>(n));
    }
    return curve;
}

double mutual_information(std::span<const int> xs, std::span<const int> ys) {
    if (xs.size() != ys.size()) throw ContractError("mutual_information: series length mismatch");
    if (xs.empty()) throw ContractError("mutual_information: empty series");
    std::map<int, std::size_t> xi, yi;
    for (int x : xs) xi.emplace(x, 0);
    for (int y : ys) yi.emplace(y, 0);
    std::size_t k = 0;
    for (auto& [v, idx] : xi) idx = k++;
    k = 0;
    for (auto& [v, idx] : yi) idx = k++;

    const std::size_t nx = xi.size(), ny = yi.size(), n = xs.size();
    std::vector<double> joint(nx * ny, 0.0), px(nx, 0.0), py(ny, 0.0);
    const double inv = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t a = xi.at(xs[i]), b = yi.at(ys[i]);
        joint[a * ny + b] += inv;
        px[a] += inv;
        py[b] += inv;
    }
    double mi = 0.0;
    for (std::size_t a = 0; a < nx; ++a) {
        for (std::size_t b = 0; b < ny; ++b) {
            const double p = joint[a * ny + b];
            if (p > 0.0) mi += p * std::log(p / (px[a] * py[b]));
        }
    }
    return mi;
}

std::vector<int> equal_frequency_bins(std::span<const double> values, std::size_t q) {
    if (q == 0) throw ContractError("equal_frequency_bins: need at least one bin");
    const std::size_t n = values.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
    std::vector<int> bins(n, 0);
    for (std::size_t rank = 0; rank < n; ++rank) {
        bins[order[rank]] = static_cast<int>(rank * q / n);
    }
    return bins;
}

std::map<GroupId, double> mi_by_group(std::span<const Sample> samples, const DatasetSpec& spec) {
    if (samples.empty()) throw ContractError("mi_by_group: empty sample set");
    std::vector<int> labels;
    labels.reserve(samples.size());
    for (const Sample& s : samples) labels.push_back(s.y);

    std::map<GroupId, double> out;
    for (const FeatureGroupSpec& g : spec.groups) {
        double acc = 0.0;
        std::vector<double> coord(samples.size());
        for (std::size_t d = 0; d < g.dim; ++d) {
            for (std::size_t i = 0; i < samples.size(); ++i) coord[i] = samples[i].features.at(g.id)[d];
            std::vector<int> bins = equal_frequency_bins(coord, kMiBins);
            acc += mutual_information(bins, labels);
        }
        out[g.id] = acc / static_cast<double>(g.dim);
    }
    return out;
}

double jsd(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size() || p.empty()) throw ContractError("jsd: distributions must match and be nonempty");
    double sp = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] < 0.0 || q[i] < 0.0) throw ContractError("jsd: negative probability mass");
        sp += p[i];
        sq += q[i];
    }
    if (std::fabs(sp - 1.0) > 1e-9 || std::fabs(sq - 1.0) > 1e-9) {
        throw ContractError("jsd: distributions must sum to 1 within 1e-9");
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double m = 0.5 * (p[i] + q[i]);
        if (p[i] > 0.0) acc += 0.5 * p[i] * std::log(p[i] / m);
        if (q[i] > 0.0) acc += 0.5 * q[i] * std::log(q[i] / m);
    }
    return acc;
}

std::string mask_mode_name(MaskMode mode) {
    switch (mode) {
        case MaskMode::kFull: return "full";
        case MaskMode::kCoreOnly: return "core_only";
        case MaskMode::kSpuriousOnly: return "spurious_only";
    }
    throw ConfigError("unknown mask mode");
}

SeparabilityScores label_separability(std::span<const Sample> samples, const DatasetSpec& spec, MaskMode mode) {
    if (samples.empty()) throw ContractError("label_separability: empty sample set");
    const std::size_t k = spec.num_classes;
    std::size_t total_dim = 0;
    for (const FeatureGroupSpec& g : spec.groups) total_dim += g.dim;

    std::vector<std::vector<double>> means(k, std::vector<double>(total_dim, 0.0));
    std::vector<std::size_t> counts(k, 0);
    for (const Sample& s : samples) {
        if (s.y < 0 || static_cast<std::size_t>(s.y) >= k) throw LabelError("label_separability: label out of range");
        std::vector<double>& m = means[static_cast<std::size_t>(s.y)];
        ++counts[static_cast<std::size_t>(s.y)];
        std::size_t off = 0;
        for (const FeatureGroupSpec& g : spec.groups) {
            const bool keep = mode == MaskMode::kFull || (mode == MaskMode::kCoreOnly && g.role == GroupRole::kCore) ||
                              (mode == MaskMode::kSpuriousOnly && g.role == GroupRole::kSpurious);
            if (keep) {
                const Tensor& x = s.features.at(g.id);
                for (std::size_t d = 0; d < g.dim; ++d) m[off + d] += x[d];
            }
            off += g.dim;
        }
    }
    for (std::size_t c = 0; c < k; ++c) {
        if (counts[c] == 0) throw ContractError("label_separability: label " + std::to_string(c) + " has no samples");
        for (double& v : means[c]) v /= static_cast<double>(counts[c]);
    }

    auto as_distribution = [&](const std::vector<double>& m) {
        std::vector<double> d(m.size());
        double sum = 0.0;
        for (std::size_t i = 0; i < m.size(); ++i) {
            d[i] = std::fabs(m[i]);
            sum += d[i];
        }
        if (sum <= 0.0) {
            std::fill(d.begin(), d.end(), 1.0 / static_cast<double>(d.size()));
        } else {
            for (double& v : d) v /= sum;
        }
        return d;
    };

    SeparabilityScores scores;
    std::size_t pairs = 0;
    for (std::size_t a = 0; a < k; ++a) {
        for (std::size_t b = a + 1; b < k; ++b) {
            double sq = 0.0;
            for (std::size_t i = 0; i < total_dim; ++i) {
                const double d = means[a][i] - means[b][i];
                sq += d * d;
            }
            scores.l2_score += std::sqrt(sq);
            scores.jsd_score += jsd(as_distribution(means[a]), as_distribution(means[b]));
            ++pairs;
        }
    }
    scores.l2_score /= static_cast<double>(pairs);
    scores.jsd_score /= static_cast<double>(pairs);
    return scores;
}

// ---------------------------------------------------------------------------
// Report serialization

std::string MetricsReport::to_json() const {
    json j;
    j["schema"] = kReportSchema;
    j["manifest_hash"] = manifest_hash;
    j["gmr"] = gmr;
    j["rs"] = rs;
    j["rs_analytic"] = rs_analytic;
    j["rs_gold"] = rs_gold;
    j["rs_fd_interior"] = rs_fd_interior;
    j["rs_analytic_interior"] = rs_analytic_interior;
    j["rs_core_spurious_ratio"] = rs_core_spurious_ratio;
    j["stability"] = stability;
    json deg = json::object();
    for (const auto& [method, curve] : degradation) {
        json rows = json::array();
        for (const auto& [s, acc] : curve) rows.push_back({{"strength", s}, {"accuracy", acc}});
        deg[method] = rows;
    }
    j["degradation"] = deg;
    j["mi_table"] = mi_table;
    json sep = json::object();
    for (const auto& [mode, sc] : separability) sep[mode] = {{"jsd", sc.jsd_score}, {"l2", sc.l2_score}};
    j["separability"] = sep;
    j["extra"] = extra;
    return j.dump(2);
}

namespace {

void write_file_atomic(const std::string& path, const std::string& content) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw ConfigError("cannot write " + path);
        out << content;
    }
    std::filesystem::rename(tmp, path);
}

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

// Minimal static SVG renders of the stability bars and degradation curves.
// Everything is derived from the same data as the CSVs.

const char* kSvgColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b", "#e377c2"};

std::string svg_header(int w, int h) {
    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\" viewBox=\"0 0 " << w
       << " " << h << "\">\n<rect width=\"" << w << "\" height=\"" << h << "\" fill=\"white\"/>\n";
    return os.str();
}

std::string stability_svg(const std::map<std::string, double>& stability) {
    const int w = 520, h = 360, margin = 60;
    std::ostringstream os;
    os << svg_header(w, h);
    os << "<text x=\"" << w / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">decision stability</text>\n";
    const int plot_w = w - 2 * margin, plot_h = h - 2 * margin;
    const std::size_t n = stability.size();
    const double bar_w = n > 0 ? static_cast<double>(plot_w) / (2.0 * n) : 0.0;
    std::size_t i = 0;
    for (const auto& [method, v] : stability) {
        const double x = margin + (2.0 * i + 0.5) * bar_w;
        const double bh = v * plot_h;
        os << "<rect x=\"" << x << "\" y=\"" << (h - margin - bh) << "\" width=\"" << bar_w << "\" height=\"" << bh
           << "\" fill=\"" << kSvgColors[i % 6] << "\"/>\n";
        os << "<text x=\"" << (x + bar_w / 2) << "\" y=\"" << (h - margin + 16)
           << "\" text-anchor=\"middle\" font-size=\"11\">" << method << "</text>\n";
        os << "<text x=\"" << (x + bar_w / 2) << "\" y=\"" << (h - margin - bh - 4)
           << "\" text-anchor=\"middle\" font-size=\"11\">" << fmt(v).substr(0, 5) << "</text>\n";
        ++i;
    }
    os << "<line x1=\"" << margin << "\" y1=\"" << (h - margin) << "\" x2=\"" << (w - margin) << "\" y2=\""
       << (h - margin) << "\" stroke=\"black\"/>\n";
    os << "</svg>\n";
    return os.str();
}

std::string degradation_svg(const std::map<std::string, std::vector<std::pair<double, double>>>& degradation) {
    const int w = 520, h = 360, margin = 60;
    std::ostringstream os;
    os << svg_header(w, h);
    os << "<text x=\"" << w / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">"
       << "accuracy under spurious suppression</text>\n";
    const int plot_w = w - 2 * margin, plot_h = h - 2 * margin;
    auto map_x = [&](double s) { return margin + s * plot_w; };
    auto map_y = [&](double a) { return h - margin - a * plot_h; };
    os << "<line x1=\"" << margin << "\" y1=\"" << (h - margin) << "\" x2=\"" << (w - margin) << "\" y2=\""
       << (h - margin) << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << margin << "\" y1=\"" << margin << "\" x2=\"" << margin << "\" y2=\"" << (h - margin)
       << "\" stroke=\"black\"/>\n";
    std::size_t i = 0;
    for (const auto& [method, curve] : degradation) {
        os << "<polyline fill=\"none\" stroke=\"" << kSvgColors[i % 6] << "\" stroke-width=\"2\" points=\"";
        for (const auto& [s, acc] : curve) os << map_x(s) << "," << map_y(acc) << " ";
        os << "\"/>\n";
        os << "<text x=\"" << (w - margin + 4) << "\" y=\"" << (margin + 16 * static_cast<int>(i))
           << "\" font-size=\"11\" fill=\"" << kSvgColors[i % 6] << "\">" << method << "</text>\n";
        ++i;
    }
    os << "</svg>\n";
    return os.str();
}

}  // namespace

void write_report_bundle(const MetricsReport& report, const std::string& dir, bool emit_svg) {
    std::filesystem::create_directories(dir);
    write_file_atomic(dir + "/report.json", report.to_json() + "\n");

    {
        std::ostringstream os;
        os << "group,gmr\n";
        for (const auto& [gid, v] : report.gmr) os << gid << "," << fmt(v) << "\n";
        write_file_atomic(dir + "/gmr.csv", os.str());
    }
    {
        std::ostringstream os;
        os << "condition,group,rs,rs_analytic,rs_gold\n";
        for (const auto& [cond, by_group] : report.rs) {
            for (const auto& [gid, v] : by_group) {
                os << cond << "," << gid << "," << fmt(v);
                os << "," << fmt(report.rs_analytic.at(cond).at(gid));
                os << "," << fmt(report.rs_gold.at(cond).at(gid)) << "\n";
            }
        }
        write_file_atomic(dir + "/rs.csv", os.str());
    }
    {
        std::ostringstream os;
        os << "condition,core_spurious_ratio\n";
        for (const auto& [cond, v] : report.rs_core_spurious_ratio) os << cond << "," << fmt(v) << "\n";
        write_file_atomic(dir + "/rs_ratio.csv", os.str());
    }
    {
        std::ostringstream os;
        os << "method,stability\n";
        for (const auto& [method, v] : report.stability) os << method << "," << fmt(v) << "\n";
        write_file_atomic(dir + "/stability.csv", os.str());
    }
    {
        std::ostringstream os;
        os << "method,strength,accuracy\n";
        for (const auto& [method, curve] : report.degradation) {
            for (const auto& [s, acc] : curve) os << method << "," << fmt(s) << "," << fmt(acc) << "\n";
        }
        write_file_atomic(dir + "/degradation.csv", os.str());
    }
    {
        std::ostringstream os;
        os << "group,mi_nats\n";
        for (const auto& [gid, v] : report.mi_table) os << gid << "," << fmt(v) << "\n";
        write_file_atomic(dir + "/mi.csv", os.str());
    }
    {
        std::ostringstream os;
        os << "mask_mode,jsd,l2\n";
        for (const auto& [mode, sc] : report.separability) {
            os << mode << "," << fmt(sc.jsd_score) << "," << fmt(sc.l2_score) << "\n";
        }
        write_file_atomic(dir + "/separability.csv", os.str());
    }
    if (emit_svg) {
        write_file_atomic(dir + "/stability.svg", stability_svg(report.stability));
        write_file_atomic(dir + "/degradation.svg", degradation_svg(report.degradation));
    }
}

}  // namespace filora
