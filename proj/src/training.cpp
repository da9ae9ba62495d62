#include "filora/training.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "filora/rng.hpp"

namespace filora {

void TrainingConfig::validate() const {
    if (learning_rate_adapters <= 0.0) throw ConfigError("learning_rate_adapters must be positive");
    if (learning_rate_encoder <= 0.0) throw ConfigError("learning_rate_encoder must be positive");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
    if (grad_clip_norm <= 0.0) throw ConfigError("grad_clip_norm must be positive");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (epochs == 0) throw ConfigError("epochs must be positive");
    if (lambda < 0.0) throw ConfigError("lambda must be >= 0");
}

TrainingConfig TrainingConfig::parse(const std::string& text) {
    TrainingConfig cfg;
    std::istringstream is(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        std::istringstream ls(line);
        std::string key, eq, value;
        if (!(ls >> key)) continue;
        if (!(ls >> eq >> value) || eq != "=") {
            throw ConfigError("training config line " + std::to_string(lineno) + ": expected 'key = value'");
        }
        try {
            if (key == "learning_rate_adapters") cfg.learning_rate_adapters = std::stod(value);
            else if (key == "learning_rate_encoder") cfg.learning_rate_encoder = std::stod(value);
            else if (key == "weight_decay") cfg.weight_decay = std::stod(value);
            else if (key == "grad_clip_norm") cfg.grad_clip_norm = std::stod(value);
            else if (key == "batch_size") cfg.batch_size = std::stoul(value);
            else if (key == "epochs") cfg.epochs = std::stoul(value);
            else if (key == "lambda") cfg.lambda = std::stod(value);
            else if (key == "seed") cfg.seed = std::stoull(value);
            else if (key == "use_adamw") cfg.use_adamw = (value == "true" || value == "1");
            else throw ConfigError("training config: unknown key '" + key + "'");
        } catch (const std::invalid_argument&) {
            throw ConfigError("training config: bad value for key '" + key + "': " + value);
        }
    }
    cfg.validate();
    return cfg;
}

std::string TrainingConfig::to_text() const {
    std::ostringstream os;
    os.precision(17);
    os << "learning_rate_adapters = " << learning_rate_adapters << "\n";
    os << "learning_rate_encoder = " << learning_rate_encoder << "\n";
    os << "weight_decay = " << weight_decay << "\n";
    os << "grad_clip_norm = " << grad_clip_norm << "\n";
    os << "batch_size = " << batch_size << "\n";
    os << "epochs = " << epochs << "\n";
    os << "lambda = " << lambda << "\n";
    os << "seed = " << seed << "\n";
    os << "use_adamw = " << (use_adamw ? "true" : "false") << "\n";
    return os.str();
}

TrainingConfig TrainingConfig::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open training config " + path);
    std::ostringstream os;
    os << in.rdbuf();
    return parse(os.str());
}

void TrainingConfig::save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write training config " + path);
    out << to_text();
}

int route_target(const Sample& sample) {
    switch (sample.condition) {
        case ConditionId::kFocusCore:
        case ConditionId::kIgnoreSpurious:
        case ConditionId::kNeutral:
            return sample.y;
        case ConditionId::kIgnoreCore:
            return sample.y_spurious;
    }
    throw ConfigError("route_target: unknown condition");
}

std::vector<RoutedSample> route_all(std::span<const Sample> samples, const ConditionTable& conditions) {
    std::vector<RoutedSample> routed;
    routed.reserve(samples.size());
    for (const Sample& s : samples) {
        auto it = conditions.find(s.condition);
        if (it == conditions.end()) throw ConfigError("route_all: condition table is missing an entry");
        RoutedSample r;
        r.features = &s.features;
        r.instruction = &s.instruction;
        r.target = it->second.uses_proxy_target ? s.y_spurious : s.y;
        r.alpha = it->second.alpha;
        routed.push_back(std::move(r));
    }
    return routed;
}

double gate_regularizer(const GateVector& gates, const std::map<GroupId, double>& alpha) {
    double acc = 0.0;
    for (const auto& [gid, g] : gates.values) {
        auto it = alpha.find(gid);
        if (it == alpha.end()) throw ConfigError("gate_regularizer: alpha is missing group '" + gid + "'");
        acc += it->second * g;
    }
    return acc;
}

double sample_loss(const TrainableModel& model, const Sample& sample, const ConditionTable& conditions,
                   double lambda) {
    std::vector<RoutedSample> routed = route_all(std::span(&sample, 1), conditions);
    Tape tape;
    TapeBindings tb(tape);
    SampleLossParts parts = model.loss_on_tape(tb, routed[0], lambda);
    return tape.value(parts.total).item();
}

double clip_gradients(std::vector<Tensor>& gradients, double max_norm) {
    if (max_norm <= 0.0) throw ConfigError("clip_gradients: max_norm must be positive");
    double sq = 0.0;
    for (const Tensor& g : gradients) {
        for (std::size_t i = 0; i < g.size(); ++i) sq += g[i] * g[i];
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm) {
        const double scale = max_norm / norm;
        for (Tensor& g : gradients) {
            for (std::size_t i = 0; i < g.size(); ++i) g[i] *= scale;
        }
    }
    return norm;
}

namespace {

struct AdamState {
    std::vector<Tensor> m;
    std::vector<Tensor> v;
    std::size_t step = 0;
};

}  // namespace

std::vector<EpochStats> train_routed(TrainableModel& model, std::span<const RoutedSample> samples,
                                     const TrainingConfig& config) {
    config.validate();
    if (samples.empty()) throw TrainingError("train: empty sample set");

    std::vector<NamedParam> params = model.trainable_params();
    AdamState adam;
    if (config.use_adamw) {
        for (const NamedParam& p : params) {
            adam.m.emplace_back(p.tensor->shape());
            adam.v.emplace_back(p.tensor->shape());
        }
    }

    std::vector<std::size_t> order(samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    std::vector<EpochStats> trace;
    trace.reserve(config.epochs);
    std::size_t batch_index = 0;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        Rng shuffle_rng(mix_seed(config.seed, "train-shuffle", epoch));
        shuffle_rng.shuffle(order);

        EpochStats stats;
        double abs_gate_weighted = 0.0;
        std::size_t seen = 0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size, ++batch_index) {
            const std::size_t end = std::min(order.size(), start + config.batch_size);
            Tape tape;
            TapeBindings tb(tape);
            std::vector<NodeId> losses;
            losses.reserve(end - start);
            for (std::size_t k = start; k < end; ++k) {
                const RoutedSample& s = samples[order[k]];
                SampleLossParts parts = model.loss_on_tape(tb, s, config.lambda);
                losses.push_back(parts.total);
                stats.mean_cls += parts.cls;
                stats.mean_gate += parts.gate_reg;
                abs_gate_weighted += std::fabs(config.lambda * parts.gate_reg);
                ++seen;
            }
            NodeId batch_loss = tape.scale(tape.add_n(losses), 1.0 / static_cast<double>(losses.size()));
            const double loss_value = tape.value(batch_loss).item();
            if (!std::isfinite(loss_value)) {
                throw TrainingError("NaN loss at batch " + std::to_string(batch_index));
            }
            stats.mean_loss += loss_value * static_cast<double>(losses.size());
            tape.backward(batch_loss);

            std::vector<Tensor> grads;
            grads.reserve(params.size());
            for (const NamedParam& p : params) grads.push_back(tb.grad_of(*p.tensor));
            clip_gradients(grads, config.grad_clip_norm);

            for (std::size_t pi = 0; pi < params.size(); ++pi) {
                Tensor& t = *params[pi].tensor;
                const double lr = params[pi].group == ParamGroup::kEncoder ? config.learning_rate_encoder
                                                                           : config.learning_rate_adapters;
                if (config.use_adamw) {
                    constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
                    adam.step = batch_index + 1;
                    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(adam.step));
                    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(adam.step));
                    for (std::size_t i = 0; i < t.size(); ++i) {
                        double& m = adam.m[pi][i];
                        double& v = adam.v[pi][i];
                        m = beta1 * m + (1.0 - beta1) * grads[pi][i];
                        v = beta2 * v + (1.0 - beta2) * grads[pi][i] * grads[pi][i];
                        const double mh = m / bc1;
                        const double vh = v / bc2;
                        t[i] -= lr * mh / (std::sqrt(vh) + eps) + lr * config.weight_decay * t[i];
                    }
                } else {
                    for (std::size_t i = 0; i < t.size(); ++i) {
                        t[i] -= lr * grads[pi][i] + lr * config.weight_decay * t[i];
                    }
                }
            }
        }
        stats.mean_loss /= static_cast<double>(seen);
        stats.mean_cls /= static_cast<double>(seen);
        stats.mean_gate /= static_cast<double>(seen);
        abs_gate_weighted /= static_cast<double>(seen);
        stats.lambda_dominance = stats.mean_cls > 0.0 ? abs_gate_weighted / stats.mean_cls : 0.0;
        trace.push_back(stats);
    }
    return trace;
}

std::vector<EpochStats> train(TrainableModel& model, std::span<const Sample> samples,
                              const ConditionTable& conditions, const TrainingConfig& config) {
    std::vector<RoutedSample> routed = route_all(samples, conditions);
    return train_routed(model, routed, config);
}

void write_loss_trace_csv(const std::string& path, std::span<const EpochStats> trace) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw ConfigError("cannot write loss trace " + path);
        out.precision(17);
        out << "epoch,mean_loss,mean_cls,mean_gate\n";
        for (std::size_t e = 0; e < trace.size(); ++e) {
            out << (e + 1) << "," << trace[e].mean_loss << "," << trace[e].mean_cls << "," << trace[e].mean_gate
                << "\n";
        }
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace filora
