#include <filesystem>
#include <fstream>

#include "filora/model.hpp"
#include "json.hpp"

namespace filora {

using nlohmann::json;

namespace {

json tensor_to_json(const Tensor& t) {
    if (!t.all_finite()) throw NumericError("refusing to serialize a tensor with non-finite values");
    return json{{"shape", t.shape()}, {"data", t.values()}};
}

Tensor tensor_from_json(const json& j) {
    Shape shape = j.at("shape").get<Shape>();
    std::vector<double> data = j.at("data").get<std::vector<double>>();
    return Tensor(std::move(shape), std::move(data));
}

json linear_to_json(const Linear& lin) { return json{{"w", tensor_to_json(lin.w)}, {"b", tensor_to_json(lin.b)}}; }

Linear linear_from_json(const json& j) {
    return Linear{tensor_from_json(j.at("w")), tensor_from_json(j.at("b"))};
}

json lora_layer_to_json(const GroupedLoraLinear& layer) {
    json groups = json::object();
    for (const auto& [gid, grp] : layer.groups()) {
        groups[gid] = json{{"rank", grp.rank}, {"A", tensor_to_json(grp.a)}, {"B", tensor_to_json(grp.b)}};
    }
    return json{{"w", tensor_to_json(layer.weight())},
                {"b", tensor_to_json(layer.bias())},
                {"scale", layer.scale()},
                {"groups", groups}};
}

GroupedLoraLinear lora_layer_from_json(const json& j) {
    Tensor w = tensor_from_json(j.at("w"));
    Tensor b = tensor_from_json(j.at("b"));
    double scale = j.at("scale").get<double>();
    std::vector<GroupId> ids;
    for (const auto& [gid, _] : j.at("groups").items()) ids.push_back(gid);
    std::size_t rank = j.at("groups").begin().value().at("rank").get<std::size_t>();
    GroupedLoraLinear layer = GroupedLoraLinear::wrap(std::move(w), std::move(b), ids, rank, scale, 0);
    for (auto& [gid, grp] : layer.groups()) {
        const json& gj = j.at("groups").at(gid);
        grp.rank = gj.at("rank").get<std::size_t>();
        grp.a = tensor_from_json(gj.at("A"));
        grp.b = tensor_from_json(gj.at("B"));
    }
    return layer;
}

json encoder_to_json(const InstructionEncoder& enc) {
    return json{{"vocab", enc.vocab.words()},     {"gate_order", enc.gate_order},
                {"embedding", tensor_to_json(enc.embedding)},
                {"w1", tensor_to_json(enc.w1)},   {"b1", tensor_to_json(enc.b1)},
                {"w2", tensor_to_json(enc.w2)},   {"b2", tensor_to_json(enc.b2)},
                {"proj_w", tensor_to_json(enc.proj_w)}, {"proj_b", tensor_to_json(enc.proj_b)}};
}

InstructionEncoder encoder_from_json(const json& j) {
    InstructionEncoder enc;
    std::vector<std::string> words = j.at("vocab").get<std::vector<std::string>>();
    // from_words prepends UNK; the serialized list already contains it.
    if (!words.empty() && words.front() == kUnkToken) words.erase(words.begin());
    enc.vocab = Vocabulary::from_words(std::move(words));
    enc.gate_order = j.at("gate_order").get<std::vector<GroupId>>();
    enc.embedding = tensor_from_json(j.at("embedding"));
    enc.w1 = tensor_from_json(j.at("w1"));
    enc.b1 = tensor_from_json(j.at("b1"));
    enc.w2 = tensor_from_json(j.at("w2"));
    enc.b2 = tensor_from_json(j.at("b2"));
    enc.proj_w = tensor_from_json(j.at("proj_w"));
    enc.proj_b = tensor_from_json(j.at("proj_b"));
    return enc;
}

void write_checkpoint_file(const std::string& path, json body) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw ConfigError("cannot write checkpoint " + path);
        out << body.dump() << "\n";
    }
    std::filesystem::rename(tmp, path);
}

json read_checkpoint_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open checkpoint " + path);
    json j;
    try {
        in >> j;
        if (j.at("schema").get<std::string>() != kCheckpointSchema) {
            throw ConfigError("checkpoint " + path + " has unsupported schema");
        }
    } catch (const json::exception& e) {
        throw ConfigError("checkpoint parse error in " + path + ": " + e.what());
    }
    return j;
}

}  // namespace

std::string checkpoint_method(const std::string& path) {
    return read_checkpoint_file(path).at("method").get<std::string>();
}

void save_base_checkpoint(const BaseCheckpoint& base, const std::string& path, const std::string& config_hash) {
    json encoders = json::object();
    for (const auto& [gid, stack] : base.encoders) {
        json layers = json::array();
        for (const Linear& lin : stack) layers.push_back(linear_to_json(lin));
        encoders[gid] = layers;
    }
    write_checkpoint_file(path, json{{"schema", kCheckpointSchema},
                                     {"config_hash", config_hash},
                                     {"method", "base"},
                                     {"feature_groups", base.feature_groups},
                                     {"input_dims", base.input_dims},
                                     {"encoders", encoders},
                                     {"fusion", linear_to_json(base.fusion)},
                                     {"head", linear_to_json(base.head)},
                                     {"num_classes", base.num_classes},
                                     {"init_seed", base.init_seed}});
}

BaseCheckpoint load_base_checkpoint(const std::string& path) {
    json j = read_checkpoint_file(path);
    if (j.at("method").get<std::string>() != "base") {
        throw ConfigError("checkpoint " + path + " is not a base checkpoint");
    }
    BaseCheckpoint base;
    base.feature_groups = j.at("feature_groups").get<std::vector<GroupId>>();
    base.input_dims = j.at("input_dims").get<std::map<GroupId, std::size_t>>();
    for (const auto& [gid, layers] : j.at("encoders").items()) {
        for (const json& lj : layers) base.encoders[gid].push_back(linear_from_json(lj));
    }
    base.fusion = linear_from_json(j.at("fusion"));
    base.head = linear_from_json(j.at("head"));
    base.num_classes = j.at("num_classes").get<std::size_t>();
    base.init_seed = j.at("init_seed").get<std::uint64_t>();
    return base;
}

void save_filora_checkpoint(const FiloraModel& model, const std::string& path, const std::string& config_hash) {
    json encoders = json::object();
    for (const auto& [gid, stack] : model.encoders) {
        json layers = json::array();
        for (const GroupedLoraLinear& layer : stack) layers.push_back(lora_layer_to_json(layer));
        encoders[gid] = layers;
    }
    write_checkpoint_file(path, json{{"schema", kCheckpointSchema},
                                     {"config_hash", config_hash},
                                     {"method", "filora"},
                                     {"feature_groups", model.feature_groups},
                                     {"gate_groups", model.gate_groups},
                                     {"num_classes", model.num_classes},
                                     {"rank", model.config.rank},
                                     {"lora_alpha", model.config.lora_alpha},
                                     {"encoders", encoders},
                                     {"fusion", lora_layer_to_json(model.fusion_layer)},
                                     {"head", lora_layer_to_json(model.head_layer)},
                                     {"instruction_encoder", encoder_to_json(model.instr_encoder)}});
}

FiloraModel load_filora_checkpoint(const std::string& path) {
    json j = read_checkpoint_file(path);
    if (j.at("method").get<std::string>() != "filora") {
        throw ConfigError("checkpoint " + path + " is not a filora checkpoint");
    }
    FiloraModel m;
    m.feature_groups = j.at("feature_groups").get<std::vector<GroupId>>();
    m.gate_groups = j.at("gate_groups").get<std::vector<GroupId>>();
    m.num_classes = j.at("num_classes").get<std::size_t>();
    m.config.rank = j.at("rank").get<std::size_t>();
    m.config.lora_alpha = j.at("lora_alpha").get<double>();
    for (const auto& [gid, layers] : j.at("encoders").items()) {
        for (const json& lj : layers) m.encoders[gid].push_back(lora_layer_from_json(lj));
    }
    m.fusion_layer = lora_layer_from_json(j.at("fusion"));
    m.head_layer = lora_layer_from_json(j.at("head"));
    m.instr_encoder = encoder_from_json(j.at("instruction_encoder"));
    return m;
}

void save_baseline_checkpoint(const BaselineModel& model, const std::string& path, const std::string& config_hash) {
    json encoders = json::object();
    for (const auto& [gid, stack] : model.encoders) {
        json layers = json::array();
        for (const Linear& lin : stack) layers.push_back(linear_to_json(lin));
        encoders[gid] = layers;
    }
    json lora = json::object();
    for (const auto& [name, pair] : model.lora) {
        lora[name] = json{{"rank", pair.rank}, {"scale", pair.scale}, {"A", tensor_to_json(pair.a)},
                          {"B", tensor_to_json(pair.b)}};
    }
    write_checkpoint_file(path, json{{"schema", kCheckpointSchema},
                                     {"config_hash", config_hash},
                                     {"method", baseline_method_name(model.kind)},
                                     {"feature_groups", model.feature_groups},
                                     {"num_classes", model.num_classes},
                                     {"instr_dim", model.instr_dim},
                                     {"vocab", model.vocab.words()},
                                     {"encoders", encoders},
                                     {"fusion", linear_to_json(model.fusion)},
                                     {"head", linear_to_json(model.head)},
                                     {"instr_embedding", tensor_to_json(model.instr_embedding)},
                                     {"lora", lora}});
}

BaselineModel load_baseline_checkpoint(const std::string& path) {
    json j = read_checkpoint_file(path);
    BaselineModel m;
    m.kind = baseline_from_method_name(j.at("method").get<std::string>());
    m.feature_groups = j.at("feature_groups").get<std::vector<GroupId>>();
    m.num_classes = j.at("num_classes").get<std::size_t>();
    m.instr_dim = j.at("instr_dim").get<std::size_t>();
    std::vector<std::string> words = j.at("vocab").get<std::vector<std::string>>();
    if (!words.empty() && words.front() == kUnkToken) words.erase(words.begin());
    m.vocab = Vocabulary::from_words(std::move(words));
    for (const auto& [gid, layers] : j.at("encoders").items()) {
        for (const json& lj : layers) m.encoders[gid].push_back(linear_from_json(lj));
    }
    m.fusion = linear_from_json(j.at("fusion"));
    m.head = linear_from_json(j.at("head"));
    m.instr_embedding = tensor_from_json(j.at("instr_embedding"));
    for (const auto& [name, lj] : j.at("lora").items()) {
        BaselineModel::LoraPair pair;
        pair.rank = lj.at("rank").get<std::size_t>();
        pair.scale = lj.at("scale").get<double>();
        pair.a = tensor_from_json(lj.at("A"));
        pair.b = tensor_from_json(lj.at("B"));
        m.lora.emplace(name, std::move(pair));
    }
    return m;
}

}  // namespace filora
