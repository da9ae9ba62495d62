#include "filora/instructions.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "filora/rng.hpp"

namespace filora {

std::string condition_name(ConditionId id) {
    switch (id) {
        case ConditionId::kFocusCore: return "focus_core";
        case ConditionId::kIgnoreSpurious: return "ignore_spurious";
        case ConditionId::kNeutral: return "neutral";
        case ConditionId::kIgnoreCore: return "ignore_core";
    }
    throw ConfigError("unknown condition id");
}

ConditionId condition_from_name(const std::string& name) {
    for (ConditionId id : kAllConditions) {
        if (condition_name(id) == name) return id;
    }
    throw ConfigError("unknown condition name '" + name + "'");
}

Condition make_condition(ConditionId id, const std::map<GroupId, GroupRole>& roles) {
    Condition c;
    c.id = id;
    c.uses_proxy_target = (id == ConditionId::kIgnoreCore);
    for (const auto& [gid, role] : roles) {
        double a = 0.0;
        if (role == GroupRole::kCore) {
            if (id == ConditionId::kFocusCore) a = -1.0;
            if (id == ConditionId::kIgnoreCore) a = +1.0;
        } else if (role == GroupRole::kSpurious) {
            if (id == ConditionId::kFocusCore || id == ConditionId::kIgnoreSpurious) a = +1.0;
            if (id == ConditionId::kIgnoreCore) a = -1.0;
        }
        c.alpha[gid] = a;
    }
    return c;
}

ConditionTable make_condition_table(const std::map<GroupId, GroupRole>& roles) {
    ConditionTable table;
    for (ConditionId id : kAllConditions) table.emplace(id, make_condition(id, roles));
    return table;
}

std::string Instruction::text() const {
    std::string s;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i > 0) s += ' ';
        s += tokens[i];
    }
    return s;
}

namespace {

std::vector<std::string> split_words(const std::string& line) {
    std::vector<std::string> out;
    std::istringstream is(line);
    std::string w;
    while (is >> w) out.push_back(w);
    return out;
}

bool is_slot(const std::string& token) {
    return token.size() >= 3 && token.front() == '{' && token.back() == '}';
}

std::string slot_name(const std::string& token) { return token.substr(1, token.size() - 2); }

}  // namespace

TemplateBank TemplateBank::parse(const std::map<ConditionId, std::string>& bank_texts, const std::string& slots_text) {
    TemplateBank bank;

    std::istringstream slot_stream(slots_text);
    std::string line;
    while (std::getline(slot_stream, line)) {
        if (line.empty()) continue;
        auto colon = line.find(':');
        if (colon == std::string::npos) throw ConfigError("slot line missing ':': " + line);
        std::string name = line.substr(0, colon);
        std::vector<std::string> fills = split_words(line.substr(colon + 1));
        if (name.empty() || fills.empty()) throw ConfigError("empty slot definition: " + line);
        bank.slots_[name] = std::move(fills);
    }

    std::set<std::string> vocab;
    for (ConditionId id : kAllConditions) {
        auto it = bank_texts.find(id);
        if (it == bank_texts.end()) throw ConfigError("missing template bank for " + condition_name(id));
        std::istringstream ts(it->second);
        std::vector<std::string>& lines = bank.templates_[id];
        while (std::getline(ts, line)) {
            if (line.empty()) continue;
            std::vector<std::string> words = split_words(line);
            if (words.empty()) continue;
            if (words.size() > kMaxInstructionTokens) {
                throw ConfigError("template longer than " + std::to_string(kMaxInstructionTokens) +
                                  " tokens: " + line);
            }
            for (const std::string& w : words) {
                if (is_slot(w)) {
                    auto sit = bank.slots_.find(slot_name(w));
                    if (sit == bank.slots_.end()) throw ConfigError("unknown slot " + w + " in template: " + line);
                    for (const std::string& fill : sit->second) vocab.insert(fill);
                } else {
                    vocab.insert(w);
                }
            }
            lines.push_back(line);
        }
        if (lines.size() < 25) {
            throw ConfigError("paraphrase bank for " + condition_name(id) + " has " + std::to_string(lines.size()) +
                              " entries, need at least 25");
        }
    }
    bank.vocab_words_.assign(vocab.begin(), vocab.end());
    return bank;
}

TemplateBank TemplateBank::from_files(const std::string& dir) {
    auto read_file = [](const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open template file " + path);
        std::ostringstream os;
        os << in.rdbuf();
        return os.str();
    };
    std::map<ConditionId, std::string> texts;
    for (ConditionId id : kAllConditions) {
        texts[id] = read_file(dir + "/" + condition_name(id) + ".txt");
    }
    return parse(texts, read_file(dir + "/slots.txt"));
}

void TemplateBank::dump(const std::string& dir) const {
    auto write_file = [](const std::string& path, const std::string& content) {
        std::ofstream out(path);
        if (!out) throw ConfigError("cannot write template file " + path);
        out << content;
    };
    for (const auto& [id, lines] : templates_) {
        std::string content;
        for (const std::string& l : lines) content += l + "\n";
        write_file(dir + "/" + condition_name(id) + ".txt", content);
    }
    std::string slots;
    for (const auto& [name, fills] : slots_) {
        slots += name + ":";
        for (const std::string& f : fills) slots += " " + f;
        slots += "\n";
    }
    write_file(dir + "/slots.txt", slots);
}

std::size_t TemplateBank::template_count(ConditionId id) const { return templates_.at(id).size(); }

std::size_t TemplateBank::heldout_count(ConditionId id) const {
    return std::max<std::size_t>(1, template_count(id) / 5);
}

const std::vector<std::string>& TemplateBank::template_lines(ConditionId id) const { return templates_.at(id); }

Instruction TemplateBank::render_from(ConditionId id, std::size_t tpl_index, std::uint64_t paraphrase_seed) const {
    Rng rng(mix_seed(paraphrase_seed, "render-fill", static_cast<std::uint64_t>(id)));
    Instruction out;
    out.source_condition = id;
    for (const std::string& w : split_words(templates_.at(id)[tpl_index])) {
        if (is_slot(w)) {
            const std::vector<std::string>& fills = slots_.at(slot_name(w));
            out.tokens.push_back(fills[rng.index(fills.size())]);
        } else {
            out.tokens.push_back(w);
        }
    }
    return out;
}

Instruction TemplateBank::render(ConditionId id, std::uint64_t paraphrase_seed) const {
    const std::size_t train_count = template_count(id) - heldout_count(id);
    Rng rng(mix_seed(paraphrase_seed, "render-pick", static_cast<std::uint64_t>(id)));
    return render_from(id, rng.index(train_count), paraphrase_seed);
}

Instruction TemplateBank::render_heldout(ConditionId id, std::uint64_t paraphrase_seed) const {
    const std::size_t train_count = template_count(id) - heldout_count(id);
    Rng rng(mix_seed(paraphrase_seed, "render-pick-held", static_cast<std::uint64_t>(id)));
    return render_from(id, train_count + rng.index(heldout_count(id)), paraphrase_seed);
}

Vocabulary Vocabulary::from_words(std::vector<std::string> words) {
    std::sort(words.begin(), words.end());
    words.erase(std::unique(words.begin(), words.end()), words.end());
    Vocabulary v;
    v.words_.push_back(kUnkToken);
    for (std::string& w : words) {
        if (w == kUnkToken) continue;
        v.words_.push_back(std::move(w));
    }
    for (std::size_t i = 0; i < v.words_.size(); ++i) v.index_[v.words_[i]] = static_cast<int>(i);
    return v;
}

int Vocabulary::id_of(const std::string& word) const {
    auto it = index_.find(word);
    return it == index_.end() ? 0 : it->second;
}

std::vector<int> Vocabulary::encode(const Instruction& instruction) const {
    if (instruction.tokens.empty()) throw ContractError("cannot encode an empty instruction");
    std::vector<int> ids;
    ids.reserve(instruction.tokens.size());
    for (const std::string& w : instruction.tokens) ids.push_back(id_of(w));
    return ids;
}

InstructionEncoder InstructionEncoder::init(Vocabulary vocab, std::vector<GroupId> gate_order, EncoderDims dims,
                                            std::uint64_t seed) {
    if (gate_order.empty()) throw ConfigError("instruction encoder needs at least one gate group");
    InstructionEncoder enc;
    enc.vocab = std::move(vocab);
    enc.gate_order = std::move(gate_order);
    const std::size_t v = enc.vocab.size();
    enc.embedding = Tensor({v, dims.embed});
    enc.w1 = Tensor({dims.hidden, dims.embed});
    enc.b1 = Tensor({dims.hidden});
    enc.w2 = Tensor({dims.hidden, dims.hidden});
    enc.b2 = Tensor({dims.hidden});
    enc.proj_w = Tensor({enc.gate_order.size(), dims.hidden});
    enc.proj_b = Tensor({enc.gate_order.size()});

    Rng re(mix_seed(seed, "encoder-embedding"));
    for (std::size_t i = 0; i < enc.embedding.size(); ++i) enc.embedding[i] = kEmbedInitStd * re.normal();
    Rng r1(mix_seed(seed, "encoder-w1"));
    const double s1 = std::sqrt(2.0 / static_cast<double>(dims.embed));
    for (std::size_t i = 0; i < enc.w1.size(); ++i) enc.w1[i] = s1 * r1.normal();
    Rng r2(mix_seed(seed, "encoder-w2"));
    const double s2 = std::sqrt(2.0 / static_cast<double>(dims.hidden));
    for (std::size_t i = 0; i < enc.w2.size(); ++i) enc.w2[i] = s2 * r2.normal();
    // proj_w and proj_b stay zero: untrained gates sit at 0.5.
    return enc;
}

NodeId InstructionEncoder::encode_on_tape(TapeBindings& tb, const Instruction& instruction) const {
    Tape& tape = tb.tape();
    std::vector<int> ids = vocab.encode(instruction);
    NodeId pooled = tape.embedding_mean(tb.param(embedding), ids);
    NodeId h1 = tape.gelu(tape.add(tape.matvec(tb.param(w1), pooled), tb.param(b1)));
    NodeId z = tape.gelu(tape.add(tape.matvec(tb.param(w2), h1), tb.param(b2)));
    return z;
}

NodeId InstructionEncoder::gates_on_tape(TapeBindings& tb, const Instruction& instruction) const {
    Tape& tape = tb.tape();
    NodeId z = encode_on_tape(tb, instruction);
    return tape.sigmoid(tape.add(tape.matvec(tb.param(proj_w), z), tb.param(proj_b)));
}

Tensor InstructionEncoder::encode(const Instruction& instruction) const {
    Tape tape;
    TapeBindings tb(tape);
    return tape.value(encode_on_tape(tb, instruction));
}

GateVector InstructionEncoder::gates(const Instruction& instruction) const {
    Tape tape;
    TapeBindings tb(tape);
    return gates_from_tensor(tape.value(gates_on_tape(tb, instruction)));
}

GateVector InstructionEncoder::gates_from_tensor(const Tensor& values) const {
    if (values.size() != gate_order.size()) {
        throw ShapeError("gate tensor size " + std::to_string(values.size()) + " does not match group count " +
                         std::to_string(gate_order.size()));
    }
    GateVector g;
    for (std::size_t i = 0; i < gate_order.size(); ++i) g.values[gate_order[i]] = values[i];
    return g;
}

void InstructionEncoder::append_params(std::vector<NamedParam>& out) {
    out.push_back({"encoder.embedding", &embedding, ParamGroup::kEncoder});
    out.push_back({"encoder.w1", &w1, ParamGroup::kEncoder});
    out.push_back({"encoder.b1", &b1, ParamGroup::kEncoder});
    out.push_back({"encoder.w2", &w2, ParamGroup::kEncoder});
    out.push_back({"encoder.b2", &b2, ParamGroup::kEncoder});
    out.push_back({"encoder.proj_w", &proj_w, ParamGroup::kEncoder});
    out.push_back({"encoder.proj_b", &proj_b, ParamGroup::kEncoder});
}

std::size_t InstructionEncoder::gate_index(const GroupId& id) const {
    for (std::size_t i = 0; i < gate_order.size(); ++i) {
        if (gate_order[i] == id) return i;
    }
    throw GatingError("group '" + id + "' is not in the encoder gate order");
}

}  // namespace filora
