#include <filesystem>
#include <set>

#include "doctest.h"
#include "filora/grad_check.hpp"
#include "filora/instructions.hpp"
#include "filora/rng.hpp"

using namespace filora;
namespace fs = std::filesystem;

TEST_SUITE_BEGIN("instructions");

TEST_CASE("rendering is deterministic per seed") {
    const TemplateBank& bank = TemplateBank::builtin();
    Instruction a = bank.render(ConditionId::kFocusCore, 0);
    Instruction b = bank.render(ConditionId::kFocusCore, 0);
    CHECK(a.tokens == b.tokens);
    Instruction c = bank.render(ConditionId::kFocusCore, 1);
    CHECK(a.tokens != c.tokens);
}

TEST_CASE("every bank has at least 25 templates and a held-out fifth") {
    const TemplateBank& bank = TemplateBank::builtin();
    for (ConditionId id : kAllConditions) {
        CHECK(bank.template_count(id) >= 25);
        CHECK(bank.heldout_count(id) == bank.template_count(id) / 5);
    }
}

TEST_CASE("held-out paraphrases never appear among training renders") {
    const TemplateBank& bank = TemplateBank::builtin();
    for (ConditionId id : kAllConditions) {
        std::set<std::string> train_texts, heldout_texts;
        for (std::uint64_t seed = 0; seed < 2000; ++seed) {
            train_texts.insert(bank.render(id, seed).text());
            heldout_texts.insert(bank.render_heldout(id, seed).text());
        }
        for (const std::string& t : train_texts) CHECK(heldout_texts.count(t) == 0);
        CHECK(!heldout_texts.empty());
    }
}

TEST_CASE("instructions stay within the token budget and avoid condition-name tokens") {
    const TemplateBank& bank = TemplateBank::builtin();
    for (ConditionId id : kAllConditions) {
        for (std::uint64_t seed = 0; seed < 200; ++seed) {
            Instruction instr = bank.render(id, seed);
            CHECK(!instr.tokens.empty());
            CHECK(instr.tokens.size() <= kMaxInstructionTokens);
            for (const std::string& tok : instr.tokens) {
                CHECK(tok.find("focus_core") == std::string::npos);
                CHECK(tok.find("ignore_core") == std::string::npos);
                CHECK(tok.find("ignore_spurious") == std::string::npos);
                CHECK(tok.find("neutral") == std::string::npos);
            }
        }
    }
}

TEST_CASE("conditions share vocabulary but use distinct phrasings") {
    const TemplateBank& bank = TemplateBank::builtin();
    auto words_of = [&](ConditionId id) {
        std::set<std::string> words;
        for (std::uint64_t seed = 0; seed < 300; ++seed) {
            for (const std::string& t : bank.render(id, seed).tokens) words.insert(t);
        }
        return words;
    };
    std::set<std::string> focus = words_of(ConditionId::kFocusCore);
    std::set<std::string> ignore = words_of(ConditionId::kIgnoreCore);
    std::size_t shared = 0;
    for (const std::string& w : focus) shared += ignore.count(w);
    CHECK(shared > 5);       // overlapping vocabulary
    CHECK(focus != ignore);  // distinct phrasings
}

TEST_CASE("condition alpha assignments follow the role table") {
    std::map<GroupId, GroupRole> roles{{"sem", GroupRole::kCore},
                                       {"app", GroupRole::kSpurious},
                                       {kFusionGroup, GroupRole::kNeutral}};
    ConditionTable table = make_condition_table(roles);

    const Condition& focus = table.at(ConditionId::kFocusCore);
    CHECK(focus.alpha.at("sem") == -1.0);
    CHECK(focus.alpha.at("app") == +1.0);
    CHECK(focus.alpha.at(kFusionGroup) == 0.0);
    CHECK_FALSE(focus.uses_proxy_target);

    const Condition& igs = table.at(ConditionId::kIgnoreSpurious);
    CHECK(igs.alpha.at("sem") == 0.0);
    CHECK(igs.alpha.at("app") == +1.0);
    CHECK_FALSE(igs.uses_proxy_target);

    const Condition& neutral = table.at(ConditionId::kNeutral);
    for (const auto& [gid, a] : neutral.alpha) CHECK(a == 0.0);
    CHECK_FALSE(neutral.uses_proxy_target);

    const Condition& igc = table.at(ConditionId::kIgnoreCore);
    CHECK(igc.alpha.at("sem") == +1.0);
    CHECK(igc.alpha.at("app") == -1.0);
    CHECK(igc.uses_proxy_target);
}

namespace {

InstructionEncoder test_encoder(std::uint64_t seed) {
    Vocabulary vocab = Vocabulary::from_words(TemplateBank::builtin().vocabulary_words());
    EncoderDims dims;
    dims.embed = 8;
    dims.hidden = 12;
    return InstructionEncoder::init(std::move(vocab), {"sem", "app", kFusionGroup}, dims, seed);
}

}  // namespace

TEST_CASE("identical texts encode identically; token order does not matter") {
    InstructionEncoder enc = test_encoder(5);
    Instruction a;
    a.tokens = {"trust", "the", "story", "and", "ignore", "the", "color"};
    Instruction b = a;
    CHECK(enc.encode(a).values() == enc.encode(b).values());

    Instruction shuffled;
    shuffled.tokens = {"color", "the", "ignore", "and", "story", "the", "trust"};
    Tensor za = enc.encode(a);
    Tensor zs = enc.encode(shuffled);
    for (std::size_t i = 0; i < za.size(); ++i) CHECK(za[i] == doctest::Approx(zs[i]).epsilon(1e-15));
}

TEST_CASE("empty instruction is a contract error; unknown words map to UNK") {
    InstructionEncoder enc = test_encoder(6);
    Instruction empty;
    CHECK_THROWS_AS(enc.encode(empty), ContractError);

    Instruction oov;
    oov.tokens = {"zzzunseen", "zzzother"};
    Tensor z = enc.encode(oov);
    CHECK(z.all_finite());
    CHECK(enc.vocab.id_of("zzzunseen") == 0);

    Instruction unk_only;
    unk_only.tokens = {kUnkToken, kUnkToken};
    CHECK(enc.encode(unk_only).values() == z.values());
}

TEST_CASE("zero-initialized projection yields 0.5 gates, strictly inside (0,1) otherwise") {
    InstructionEncoder enc = test_encoder(7);
    Instruction instr;
    instr.tokens = {"judge", "the", "label"};
    GateVector g = enc.gates(instr);
    for (const auto& [gid, v] : g.values) CHECK(v == 0.5);

    Rng rng(8);
    for (std::size_t i = 0; i < enc.proj_w.size(); ++i) enc.proj_w[i] = rng.normal();
    GateVector g2 = enc.gates(instr);
    bool moved = false;
    for (const auto& [gid, v] : g2.values) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
        moved = moved || v != 0.5;
    }
    CHECK(moved);
}

TEST_CASE("gates are a pure function of tokens and parameters") {
    InstructionEncoder enc = test_encoder(9);
    Rng rng(10);
    for (std::size_t i = 0; i < enc.proj_w.size(); ++i) enc.proj_w[i] = 0.3 * rng.normal();
    Instruction a;
    a.tokens = {"use", "only", "the", "color"};
    a.source_condition = ConditionId::kIgnoreCore;
    Instruction b;
    b.tokens = a.tokens;
    b.source_condition = ConditionId::kNeutral;  // metadata must not matter
    CHECK(enc.gates(a).values == enc.gates(b).values);
}

TEST_CASE("encoder gradient through a downstream loss matches finite differences") {
    InstructionEncoder enc = test_encoder(11);
    Rng rng(12);
    // Small projection keeps the gates off the sigmoid tails, where the
    // finite-difference probe has meaningful resolution.
    for (std::size_t i = 0; i < enc.proj_w.size(); ++i) enc.proj_w[i] = 0.05 * rng.normal();
    Instruction instr;
    instr.tokens = {"rely", "on", "the", "story", "and", "skip", "the", "color"};

    std::vector<NamedParam> params;
    enc.append_params(params);
    auto loss = [&] {
        Tape tape;
        TapeBindings tb(tape);
        NodeId gates = enc.gates_on_tape(tb, instr);
        return tape.value(tape.sum(tape.mul(gates, gates))).item();
    };
    auto grads = [&] {
        Tape tape;
        TapeBindings tb(tape);
        NodeId gates = enc.gates_on_tape(tb, instr);
        tape.backward(tape.sum(tape.mul(gates, gates)));
        std::vector<Tensor> out;
        for (const NamedParam& p : params) out.push_back(tb.grad_of(*p.tensor));
        return out;
    };
    FiniteDiffOptions opt;
    opt.max_probes = 200;
    opt.seed = 13;
    FiniteDiffReport report = finite_difference_check(params, loss, grads, opt);
    CHECK(report.max_rel_error < 1e-5);
}

TEST_CASE("committed template files match the built-in banks") {
    const fs::path repo_data = fs::path(__FILE__).parent_path().parent_path() / "data/instruction_templates";
    TemplateBank committed = TemplateBank::from_files(repo_data.string());
    const TemplateBank& builtin = TemplateBank::builtin();
    for (ConditionId id : kAllConditions) {
        CHECK(committed.template_lines(id) == builtin.template_lines(id));
    }
    CHECK(committed.vocabulary_words() == builtin.vocabulary_words());
}

TEST_CASE("bank file round-trip preserves rendering") {
    const TemplateBank& builtin = TemplateBank::builtin();
    const std::string dir = "bank_roundtrip_tmp";
    std::filesystem::create_directories(dir);
    builtin.dump(dir);
    TemplateBank loaded = TemplateBank::from_files(dir);
    for (ConditionId id : kAllConditions) {
        for (std::uint64_t seed = 0; seed < 50; ++seed) {
            CHECK(builtin.render(id, seed).tokens == loaded.render(id, seed).tokens);
        }
    }
    CHECK(builtin.vocabulary_words() == loaded.vocabulary_words());
}

TEST_SUITE_END();
