#include "filora/synthdata.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace filora {

using nlohmann::json;

std::string modality_name(Modality m) {
    switch (m) {
        case Modality::kTextLike: return "text";
        case Modality::kVisionLike: return "vision";
        case Modality::kAudioLike: return "audio";
    }
    throw ConfigError("unknown modality");
}

Modality modality_from_name(const std::string& name) {
    if (name == "text") return Modality::kTextLike;
    if (name == "vision") return Modality::kVisionLike;
    if (name == "audio") return Modality::kAudioLike;
    throw ConfigError("unknown modality '" + name + "'");
}

std::string role_name(GroupRole r) {
    switch (r) {
        case GroupRole::kCore: return "core";
        case GroupRole::kSpurious: return "spurious";
        case GroupRole::kNeutral: return "neutral";
    }
    throw ConfigError("unknown group role");
}

GroupRole role_from_name(const std::string& name) {
    if (name == "core") return GroupRole::kCore;
    if (name == "spurious") return GroupRole::kSpurious;
    if (name == "neutral") return GroupRole::kNeutral;
    throw ConfigError("unknown group role '" + name + "'");
}

void DatasetSpec::validate() const {
    if (groups.empty()) throw ConfigError("dataset spec: groups must be nonempty");
    std::set<GroupId> seen;
    bool has_core = false, has_spurious = false;
    for (const FeatureGroupSpec& g : groups) {
        if (g.id.empty()) throw ConfigError("dataset spec: empty group id");
        if (g.id == kFusionGroup) throw ConfigError("dataset spec: group id '" + kFusionGroup + "' is reserved");
        if (!seen.insert(g.id).second) throw ConfigError("dataset spec: duplicate group id '" + g.id + "'");
        if (g.dim == 0) throw ConfigError("dataset spec: group '" + g.id + "' dim must be positive");
        if (g.class_separation <= 0.0)
            throw ConfigError("dataset spec: group '" + g.id + "' class_separation must be > 0");
        if (g.noise_sigma < 0.0) throw ConfigError("dataset spec: group '" + g.id + "' noise_sigma must be >= 0");
        if (g.role == GroupRole::kCore) has_core = true;
        if (g.role == GroupRole::kSpurious) has_spurious = true;
        if (g.role == GroupRole::kNeutral)
            throw ConfigError("dataset spec: group '" + g.id + "' must be core or spurious");
    }
    if (!has_core || !has_spurious)
        throw ConfigError("dataset spec: need at least one core and one spurious group");
    if (num_classes < 2) throw ConfigError("dataset spec: num_classes must be >= 2");
    if (rho < 0.0 || rho > 1.0) throw ConfigError("dataset spec: rho must lie in [0,1]");
    if (proxy_noise < 0.0 || proxy_noise > 1.0) throw ConfigError("dataset spec: proxy_noise must lie in [0,1]");
    if (n_train < num_classes) throw ConfigError("dataset spec: n_train must be >= num_classes");
    if (n_eval < num_classes) throw ConfigError("dataset spec: n_eval must be >= num_classes");
}

std::vector<GroupId> DatasetSpec::group_ids() const {
    std::vector<GroupId> ids;
    for (const FeatureGroupSpec& g : groups) ids.push_back(g.id);
    return ids;
}

std::vector<GroupId> DatasetSpec::group_ids_with_role(GroupRole role) const {
    std::vector<GroupId> ids;
    for (const FeatureGroupSpec& g : groups) {
        if (g.role == role) ids.push_back(g.id);
    }
    return ids;
}

const FeatureGroupSpec& DatasetSpec::group(const GroupId& id) const {
    for (const FeatureGroupSpec& g : groups) {
        if (g.id == id) return g;
    }
    throw ConfigError("dataset spec: unknown group '" + id + "'");
}

DatasetSpec DatasetSpec::reference(std::uint64_t seed) {
    // Spurious groups carry slightly larger, cleaner class directions than
    // the core groups, so a lazily pretrained base grabs the shortcut
    // first, while the core label means stay the more separated ones.
    DatasetSpec spec;
    spec.groups = {
        {"semantic", Modality::kTextLike, GroupRole::kCore, 16, 0.9, 0.5},
        {"prosody", Modality::kAudioLike, GroupRole::kCore, 16, 0.9, 0.5},
        {"appearance", Modality::kVisionLike, GroupRole::kSpurious, 16, 0.95, 0.5},
        {"background", Modality::kVisionLike, GroupRole::kSpurious, 16, 0.95, 0.5},
    };
    spec.num_classes = 4;
    spec.rho = 0.9;
    spec.proxy_noise = 0.05;
    spec.n_train = 4000;
    spec.n_eval = 1000;
    spec.seed = seed;
    return spec;
}

std::map<GroupId, GroupRole> group_roles(const DatasetSpec& spec) {
    std::map<GroupId, GroupRole> roles;
    for (const FeatureGroupSpec& g : spec.groups) roles[g.id] = g.role;
    return roles;
}

namespace {

json spec_to_json_obj(const DatasetSpec& spec) {
    json groups = json::array();
    for (const FeatureGroupSpec& g : spec.groups) {
        groups.push_back({{"id", g.id},
                          {"modality", modality_name(g.modality)},
                          {"role", role_name(g.role)},
                          {"dim", g.dim},
                          {"class_separation", g.class_separation},
                          {"noise_sigma", g.noise_sigma}});
    }
    return json{{"groups", groups},      {"num_classes", spec.num_classes}, {"rho", spec.rho},
                {"proxy_noise", spec.proxy_noise}, {"n_train", spec.n_train},       {"n_eval", spec.n_eval},
                {"seed", spec.seed}};
}

DatasetSpec spec_from_json_obj(const json& j) {
    DatasetSpec spec;
    try {
        spec.groups.clear();
        for (const json& g : j.at("groups")) {
            FeatureGroupSpec fg;
            fg.id = g.at("id").get<std::string>();
            fg.modality = modality_from_name(g.at("modality").get<std::string>());
            fg.role = role_from_name(g.at("role").get<std::string>());
            fg.dim = g.at("dim").get<std::size_t>();
            fg.class_separation = g.at("class_separation").get<double>();
            fg.noise_sigma = g.at("noise_sigma").get<double>();
            spec.groups.push_back(std::move(fg));
        }
        spec.num_classes = j.at("num_classes").get<std::size_t>();
        spec.rho = j.at("rho").get<double>();
        spec.proxy_noise = j.at("proxy_noise").get<double>();
        spec.n_train = j.at("n_train").get<std::size_t>();
        spec.n_eval = j.at("n_eval").get<std::size_t>();
        spec.seed = j.at("seed").get<std::uint64_t>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("dataset spec parse error: ") + e.what());
    }
    spec.validate();
    return spec;
}

}  // namespace

std::string DatasetSpec::to_json() const { return spec_to_json_obj(*this).dump(); }

DatasetSpec DatasetSpec::from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("dataset spec is not valid JSON: ") + e.what());
    }
    return spec_from_json_obj(j);
}

DatasetSpec DatasetSpec::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open dataset spec " + path);
    std::ostringstream os;
    os << in.rdbuf();
    return from_json(os.str());
}

void DatasetSpec::save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write dataset spec " + path);
    out << spec_to_json_obj(*this).dump(2) << "\n";
}

Prototypes Prototypes::build(const DatasetSpec& spec) {
    Prototypes p;
    for (std::size_t gi = 0; gi < spec.groups.size(); ++gi) {
        const FeatureGroupSpec& g = spec.groups[gi];
        std::vector<Tensor> protos;
        for (std::size_t cls = 0; cls < spec.num_classes; ++cls) {
            Rng rng(mix_seed(spec.seed, "prototype", gi * 4096 + cls));
            Tensor v({g.dim});
            double norm2 = 0.0;
            for (std::size_t i = 0; i < g.dim; ++i) {
                v[i] = rng.normal();
                norm2 += v[i] * v[i];
            }
            const double inv = 1.0 / std::sqrt(norm2);
            for (std::size_t i = 0; i < g.dim; ++i) v[i] *= inv;
            protos.push_back(std::move(v));
        }
        p.by_group_.emplace(g.id, std::move(protos));
    }
    return p;
}

const Tensor& Prototypes::at(const GroupId& id, int cls) const {
    auto it = by_group_.find(id);
    if (it == by_group_.end()) throw ConfigError("no prototypes for group '" + id + "'");
    if (cls < 0 || static_cast<std::size_t>(cls) >= it->second.size())
        throw LabelError("prototype class " + std::to_string(cls) + " out of range");
    return it->second[static_cast<std::size_t>(cls)];
}

int proxy_label(const FeatureMap& features, const DatasetSpec& spec, const Prototypes& prototypes, double proxy_noise,
                Rng& rng) {
    const std::vector<GroupId> spurious = spec.group_ids_with_role(GroupRole::kSpurious);
    if (spurious.empty()) throw ConfigError("proxy_label requires at least one spurious group");
    const std::size_t k = spec.num_classes;
    int best = 0;
    double best_dist = 0.0;
    for (std::size_t cls = 0; cls < k; ++cls) {
        double dist = 0.0;
        for (const GroupId& gid : spurious) {
            auto fit = features.find(gid);
            if (fit == features.end()) throw ConfigError("proxy_label: sample lacks group '" + gid + "'");
            const Tensor& x = fit->second;
            const Tensor& proto = prototypes.at(gid, static_cast<int>(cls));
            const double sep = spec.group(gid).class_separation;
            for (std::size_t i = 0; i < x.size(); ++i) {
                const double d = x[i] - sep * proto[i];
                dist += d * d;
            }
        }
        if (cls == 0 || dist < best_dist) {
            best = static_cast<int>(cls);
            best_dist = dist;
        }
    }
    if (proxy_noise > 0.0 && rng.uniform() < proxy_noise) {
        std::size_t other = rng.index(k - 1);
        best = static_cast<int>(other >= static_cast<std::size_t>(best) ? other + 1 : other);
    }
    return best;
}

int proxy_label(const Sample& sample, const DatasetSpec& spec, const Prototypes& prototypes, double proxy_noise,
                std::uint64_t seed) {
    Rng rng(mix_seed(seed, "proxy"));
    return proxy_label(sample.features, spec, prototypes, proxy_noise, rng);
}

namespace {

Sample make_sample(const DatasetSpec& spec, const Prototypes& protos, const TemplateBank& bank, Rng& rng) {
    Sample s;
    const std::size_t k = spec.num_classes;
    s.y = static_cast<int>(rng.index(k));
    int y_latent = s.y;
    if (rng.uniform() >= spec.rho) {
        std::size_t other = rng.index(k - 1);
        y_latent = static_cast<int>(other >= static_cast<std::size_t>(s.y) ? other + 1 : other);
    }
    for (const FeatureGroupSpec& g : spec.groups) {
        const int cls = (g.role == GroupRole::kCore) ? s.y : y_latent;
        const Tensor& proto = protos.at(g.id, cls);
        Tensor x({g.dim});
        for (std::size_t i = 0; i < g.dim; ++i) {
            x[i] = g.class_separation * proto[i] + g.noise_sigma * rng.normal();
        }
        s.features.emplace(g.id, std::move(x));
    }
    s.y_spurious = proxy_label(s.features, spec, protos, spec.proxy_noise, rng);
    s.condition = kAllConditions[rng.index(4)];
    s.instruction = bank.render(s.condition, rng.next_u64());
    return s;
}

}  // namespace

Dataset generate_dataset(const DatasetSpec& spec, const TemplateBank& bank) {
    spec.validate();
    Dataset d;
    d.spec = spec;
    d.prototypes = Prototypes::build(spec);
    d.train.reserve(spec.n_train);
    for (std::size_t i = 0; i < spec.n_train; ++i) {
        Rng rng(mix_seed(spec.seed, "sample-train", i));
        d.train.push_back(make_sample(spec, d.prototypes, bank, rng));
    }
    d.eval.reserve(spec.n_eval);
    for (std::size_t i = 0; i < spec.n_eval; ++i) {
        Rng rng(mix_seed(spec.seed, "sample-eval", i));
        d.eval.push_back(make_sample(spec, d.prototypes, bank, rng));
    }
    return d;
}

Sample suppress(const Sample& sample, std::span<const GroupId> group_ids, double strength) {
    if (strength < 0.0 || strength > 1.0) {
        throw ConfigError("suppression strength " + std::to_string(strength) + " outside [0,1]");
    }
    Sample out = sample;
    const double keep = 1.0 - strength;
    for (const GroupId& gid : group_ids) {
        auto it = out.features.find(gid);
        if (it == out.features.end()) throw ConfigError("suppress: unknown group '" + gid + "'");
        for (std::size_t i = 0; i < it->second.size(); ++i) it->second[i] *= keep;
    }
    return out;
}

Sample remove_groups(const Sample& sample, std::span<const GroupId> group_ids) {
    return suppress(sample, group_ids, 1.0);
}

double empirical_alignment_rate(std::span<const Sample> samples) {
    if (samples.empty()) return 0.0;
    std::size_t hits = 0;
    for (const Sample& s : samples) {
        if (s.y == s.y_spurious) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(samples.size());
}

namespace {

json sample_to_json(const Sample& s, const char* split) {
    json features = json::object();
    for (const auto& [gid, x] : s.features) features[gid] = x.values();
    return json{{"split", split},
                {"features", features},
                {"y", s.y},
                {"y_spurious", s.y_spurious},
                {"condition", condition_name(s.condition)},
                {"instruction_tokens", s.instruction.tokens}};
}

Sample sample_from_json(const json& j, std::string& split_out) {
    Sample s;
    split_out = j.at("split").get<std::string>();
    for (const auto& [gid, arr] : j.at("features").items()) {
        std::vector<double> data = arr.get<std::vector<double>>();
        const std::size_t dim = data.size();
        s.features.emplace(gid, Tensor({dim}, std::move(data)));
    }
    s.y = j.at("y").get<int>();
    s.y_spurious = j.at("y_spurious").get<int>();
    s.condition = condition_from_name(j.at("condition").get<std::string>());
    s.instruction.tokens = j.at("instruction_tokens").get<std::vector<std::string>>();
    s.instruction.source_condition = s.condition;
    return s;
}

}  // namespace

void write_dataset_jsonl(const Dataset& dataset, const std::string& path, const std::string& config_hash) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw ConfigError("cannot write dataset file " + path);
        json header{{"schema", kDatasetSchema}, {"config_hash", config_hash}, {"spec", spec_to_json_obj(dataset.spec)}};
        out << header.dump() << "\n";
        for (const Sample& s : dataset.train) out << sample_to_json(s, "train").dump() << "\n";
        for (const Sample& s : dataset.eval) out << sample_to_json(s, "eval").dump() << "\n";
    }
    std::filesystem::rename(tmp, path);
}

Dataset read_dataset_jsonl(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open dataset file " + path);
    std::string line;
    if (!std::getline(in, line)) throw ConfigError("dataset file " + path + " is empty");
    json header;
    try {
        header = json::parse(line);
        if (header.at("schema").get<std::string>() != kDatasetSchema) {
            throw ConfigError("dataset file " + path + " has unsupported schema");
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("dataset header parse error: ") + e.what());
    }
    Dataset d;
    d.spec = spec_from_json_obj(header.at("spec"));
    d.prototypes = Prototypes::build(d.spec);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw ConfigError(std::string("dataset line parse error: ") + e.what());
        }
        std::string split;
        Sample s = sample_from_json(j, split);
        if (split == "train") {
            d.train.push_back(std::move(s));
        } else if (split == "eval") {
            d.eval.push_back(std::move(s));
        } else {
            throw ConfigError("dataset line has unknown split '" + split + "'");
        }
    }
    return d;
}

}  // namespace filora
