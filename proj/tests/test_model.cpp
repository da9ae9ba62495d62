#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "filora/grad_check.hpp"
#include "filora/model.hpp"
#include "filora/training.hpp"

using namespace filora;

TEST_SUITE_BEGIN("model");

namespace {

DatasetSpec tiny_spec(std::uint64_t seed) {
    DatasetSpec spec = DatasetSpec::reference(seed);
    spec.n_train = 160;
    spec.n_eval = 40;
    return spec;
}

struct Fixture {
    Dataset dataset;
    BaseCheckpoint base;
    FiloraModel model;
};

Fixture make_fixture(std::uint64_t seed) {
    Fixture f{generate_dataset(tiny_spec(seed), TemplateBank::builtin()), {}, {}};
    f.base = init_base(f.dataset.spec, mix_seed(seed, "base"));
    FiloraConfig cfg;
    cfg.seed = mix_seed(seed, "model");
    f.model = FiloraModel::create(f.base, TemplateBank::builtin(), cfg);
    return f;
}

}  // namespace

TEST_CASE("base initialization is deterministic") {
    DatasetSpec spec = tiny_spec(3);
    BaseCheckpoint a = init_base(spec, 7);
    BaseCheckpoint b = init_base(spec, 7);
    CHECK(a.checksum() == b.checksum());
    BaseCheckpoint c = init_base(spec, 8);
    CHECK(a.checksum() != c.checksum());
}

TEST_CASE("zero-gate override reproduces the frozen base bitwise") {
    Fixture f = make_fixture(5);
    GateVector zeros = GateVector::constant(f.model.gate_groups, 0.0);
    for (std::size_t i = 0; i < 20; ++i) {
        const Sample& s = f.dataset.eval[i];
        Tensor via_model = f.model.forward_with_gates(s.features, zeros);
        Tensor via_base = base_forward(f.base, s.features);
        REQUIRE(via_model.size() == via_base.size());
        for (std::size_t k = 0; k < via_model.size(); ++k) {
            CHECK(std::fabs(via_model[k] - via_base[k]) < 1e-12);
        }
    }
}

TEST_CASE("predict follows argmax with lowest-index tie breaking and shift invariance") {
    CHECK(argmax_lowest(Tensor({4}, {0.1, 2.0, 0.1, 0.1})) == 1);
    CHECK(argmax_lowest(Tensor({4}, {1.0, 1.0, 0.0, 0.0})) == 0);
    Tensor logits({4}, {0.3, -1.0, 2.5, 2.5});
    CHECK(argmax_lowest(logits) == 2);
    Tensor shifted = logits;
    for (std::size_t i = 0; i < 4; ++i) shifted[i] += 100.0;
    CHECK(argmax_lowest(shifted) == argmax_lowest(logits));
}

TEST_CASE("log_prob matches the definitional identities") {
    Tensor uniform({4}, {0.5, 0.5, 0.5, 0.5});
    CHECK(log_prob_of(uniform, 2) == doctest::Approx(-std::log(4.0)).epsilon(1e-15));
    Tensor logits({4}, {0.2, -1.3, 0.9, 2.2});
    double total = 0.0;
    for (int k = 0; k < 4; ++k) total += std::exp(log_prob_of(logits, k));
    CHECK(std::fabs(total - 1.0) < 1e-12);
    // Matches cross-entropy negation.
    Tape tape;
    NodeId x = tape.leaf(logits, false);
    CHECK(log_prob_of(logits, 1) == doctest::Approx(-tape.value(tape.cross_entropy(x, 1)).item()).epsilon(1e-12));
    CHECK_THROWS_AS(log_prob_of(logits, 4), LabelError);
    CHECK_THROWS_AS(log_prob_of(logits, -1), LabelError);
}

TEST_CASE("forward is condition-blind: identical inputs give bitwise-equal logits") {
    Fixture f = make_fixture(7);
    Sample s = f.dataset.eval[0];
    Sample t = s;
    t.condition = ConditionId::kIgnoreCore;  // hidden metadata differs
    t.y = (s.y + 1) % 4;
    t.y_spurious = (s.y_spurious + 2) % 4;
    Tensor a = f.model.forward(s.features, s.instruction);
    Tensor b = f.model.forward(t.features, t.instruction);
    CHECK(a.values() == b.values());

    Instruction same_tokens = s.instruction;
    same_tokens.source_condition = ConditionId::kFocusCore;
    Tensor c = f.model.forward(s.features, same_tokens);
    CHECK(a.values() == c.values());
}

TEST_CASE("missing group features raise an input error") {
    Fixture f = make_fixture(9);
    FeatureMap features = f.dataset.eval[0].features;
    features.erase("semantic");
    CHECK_THROWS_AS(f.model.forward(features, f.dataset.eval[0].instruction), ContractError);
}

TEST_CASE("full model loss gradient matches finite differences") {
    Fixture f = make_fixture(11);
    // Give the adapters nonzero factors so every path carries gradient.
    Rng rng(13);
    for (NamedParam& p : f.model.trainable_params()) {
        if (p.name.find(".B") != std::string::npos) {
            for (std::size_t i = 0; i < p.tensor->size(); ++i) (*p.tensor)[i] = 0.05 * rng.normal();
        }
        if (p.name.find("proj_w") != std::string::npos) {
            for (std::size_t i = 0; i < p.tensor->size(); ++i) (*p.tensor)[i] = 0.1 * rng.normal();
        }
    }
    const ConditionTable conditions = make_condition_table(model_group_roles(f.dataset.spec));
    std::vector<RoutedSample> routed = route_all(std::span(f.dataset.train.data(), 2), conditions);

    std::vector<NamedParam> params = f.model.trainable_params();
    auto loss = [&] {
        Tape tape;
        TapeBindings tb(tape);
        std::vector<NodeId> parts;
        for (const RoutedSample& r : routed) parts.push_back(f.model.loss_on_tape(tb, r, 0.01).total);
        return tape.value(tape.scale(tape.add_n(parts), 0.5)).item();
    };
    auto grads = [&] {
        Tape tape;
        TapeBindings tb(tape);
        std::vector<NodeId> parts;
        for (const RoutedSample& r : routed) parts.push_back(f.model.loss_on_tape(tb, r, 0.01).total);
        tape.backward(tape.scale(tape.add_n(parts), 0.5));
        std::vector<Tensor> out;
        for (const NamedParam& p : params) out.push_back(tb.grad_of(*p.tensor));
        return out;
    };
    FiniteDiffOptions opt;
    opt.max_probes = 120;
    opt.seed = 15;
    FiniteDiffReport report = finite_difference_check(params, loss, grads, opt);
    INFO("worst " << report.worst_param << " analytic " << report.worst_analytic << " numeric "
                  << report.worst_numeric);
    CHECK(report.max_rel_error < 1e-4);
}

TEST_CASE("adapter parameter counts match the closed form") {
    Fixture f = make_fixture(17);
    // Four two-layer encoder stacks r(16+32) + r(32+32), fusion r(128+64),
    // head clamped to rank 2.
    const std::size_t expected_filora =
        4 * (8 * (16 + 32) + 8 * (32 + 32)) + 8 * (128 + 64) + 2 * (64 + 4);
    CHECK(f.model.adapter_param_count() == expected_filora);
    CHECK(expected_filora == 5256);

    BaselineModel lora = build_baseline(BaselineKind::kPlainLora, f.base, TemplateBank::builtin(), BaselineConfig{});
    const std::size_t expected_lora =
        4 * (8 * (16 + 32) + 8 * (32 + 32)) + 8 * ((128 + 16) + 64) + 2 * (64 + 4);
    CHECK(lora.adapter_param_count() == expected_lora);
    CHECK(expected_lora == 5384);

    BaselineModel fft =
        build_baseline(BaselineKind::kFullFineTune, f.base, TemplateBank::builtin(), BaselineConfig{});
    CHECK(fft.adapter_param_count() == 0);
}

TEST_CASE("baseline trainability contracts") {
    Fixture f = make_fixture(19);
    const ConditionTable conditions = make_condition_table(model_group_roles(f.dataset.spec));
    TrainingConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 16;
    cfg.learning_rate_adapters = 1e-2;
    cfg.learning_rate_encoder = 1e-2;

    BaselineModel fft =
        build_baseline(BaselineKind::kFullFineTune, f.base, TemplateBank::builtin(), BaselineConfig{});
    const std::uint64_t fft_before = fft.base_checksum();
    train(fft, std::span(f.dataset.train.data(), 16), conditions, cfg);
    CHECK(fft.base_checksum() != fft_before);

    BaselineModel prompt =
        build_baseline(BaselineKind::kPromptOnly, f.base, TemplateBank::builtin(), BaselineConfig{});
    const std::uint64_t prompt_before = prompt.base_checksum();
    const std::uint64_t embed_before = tensor_checksum(prompt.instr_embedding);
    train(prompt, f.dataset.train, conditions, cfg);
    CHECK(prompt.base_checksum() == prompt_before);
    CHECK(tensor_checksum(prompt.instr_embedding) != embed_before);

    BaselineModel lora = build_baseline(BaselineKind::kPlainLora, f.base, TemplateBank::builtin(), BaselineConfig{});
    const std::uint64_t lora_before = lora.base_checksum();
    train(lora, std::span(f.dataset.train.data(), 16), conditions, cfg);
    CHECK(lora.base_checksum() == lora_before);
}

TEST_CASE("pretraining is deterministic and divergence raises a training error") {
    Dataset d = generate_dataset(tiny_spec(23), TemplateBank::builtin());
    PretrainOptions opt;
    opt.steps = 30;
    BaseCheckpoint a = pretrain_base(d, opt.steps, 5, opt);
    BaseCheckpoint b = pretrain_base(d, opt.steps, 5, opt);
    CHECK(a.checksum() == b.checksum());

    PretrainOptions diverge;
    diverge.steps = 200;
    diverge.learning_rate = 1e6;  // guaranteed blow-up
    CHECK_THROWS_AS(pretrain_base(d, diverge.steps, 5, diverge), TrainingError);
}

TEST_CASE("checkpoint round-trips preserve forward outputs bitwise") {
    Fixture f = make_fixture(29);
    Rng rng(30);
    for (NamedParam& p : f.model.trainable_params()) {
        for (std::size_t i = 0; i < p.tensor->size(); ++i) (*p.tensor)[i] += 0.01 * rng.normal();
    }
    const Sample& s = f.dataset.eval[0];
    Tensor before = f.model.forward(s.features, s.instruction);

    const std::string path = "model_roundtrip_tmp.json";
    save_filora_checkpoint(f.model, path, "deadbeef");
    FiloraModel loaded = load_filora_checkpoint(path);
    Tensor after = loaded.forward(s.features, s.instruction);
    CHECK(before.values() == after.values());
    CHECK(checkpoint_method(path) == "filora");
    std::filesystem::remove(path);

    BaselineModel bl = build_baseline(BaselineKind::kPlainLora, f.base, TemplateBank::builtin(), BaselineConfig{});
    Tensor bl_before = bl.forward(s.features, s.instruction);
    save_baseline_checkpoint(bl, path, "deadbeef");
    BaselineModel bl_loaded = load_baseline_checkpoint(path);
    CHECK(bl_loaded.forward(s.features, s.instruction).values() == bl_before.values());
    std::filesystem::remove(path);

    save_base_checkpoint(f.base, path, "deadbeef");
    BaseCheckpoint base_loaded = load_base_checkpoint(path);
    CHECK(base_loaded.checksum() == f.base.checksum());
    std::filesystem::remove(path);
}

TEST_CASE("baselines consume instructions through the embedded pathway") {
    Fixture f = make_fixture(31);
    BaselineModel fft =
        build_baseline(BaselineKind::kFullFineTune, f.base, TemplateBank::builtin(), BaselineConfig{});
    const Sample& s = f.dataset.eval[0];
    Instruction other = TemplateBank::builtin().render(ConditionId::kIgnoreCore, 12345);
    Tensor a = fft.forward(s.features, s.instruction);
    Tensor b = fft.forward(s.features, other);
    CHECK(a.values() != b.values());  // instruction reaches the logits
}

TEST_SUITE_END();
