#include <cmath>

#include "doctest.h"
#include "filora/training.hpp"

using namespace filora;

TEST_SUITE_BEGIN("training");

namespace {

DatasetSpec tiny_spec(std::uint64_t seed) {
    DatasetSpec spec = DatasetSpec::reference(seed);
    spec.n_train = 240;
    spec.n_eval = 40;
    return spec;
}

struct Fixture {
    Dataset dataset;
    BaseCheckpoint base;
    ConditionTable conditions;
};

Fixture make_fixture(std::uint64_t seed) {
    Fixture f{generate_dataset(tiny_spec(seed), TemplateBank::builtin()), {}, {}};
    PretrainOptions opt;
    opt.steps = 120;
    f.base = pretrain_base(f.dataset, opt.steps, mix_seed(seed, "base"), opt);
    f.conditions = make_condition_table(model_group_roles(f.dataset.spec));
    return f;
}

FiloraModel fresh_model(const Fixture& f, std::uint64_t seed) {
    FiloraConfig cfg;
    cfg.seed = seed;
    return FiloraModel::create(f.base, TemplateBank::builtin(), cfg);
}

std::uint64_t trainable_checksum(TrainableModel& model) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const NamedParam& p : model.trainable_params()) h = tensor_checksum(*p.tensor, h);
    return h;
}

}  // namespace

TEST_CASE("route_target selects y except under ignore-core") {
    Sample s;
    s.y = 1;
    s.y_spurious = 3;
    s.condition = ConditionId::kFocusCore;
    CHECK(route_target(s) == 1);
    s.condition = ConditionId::kIgnoreSpurious;
    CHECK(route_target(s) == 1);
    s.condition = ConditionId::kNeutral;
    CHECK(route_target(s) == 1);
    s.condition = ConditionId::kIgnoreCore;
    CHECK(route_target(s) == 3);
}

TEST_CASE("gate_regularizer hand values") {
    GateVector gates;
    gates.values = {{"a", 0.9}, {"b", 0.2}};
    CHECK(gate_regularizer(gates, {{"a", -1.0}, {"b", 1.0}}) == doctest::Approx(-0.7).epsilon(1e-15));
    CHECK(gate_regularizer(gates, {{"a", 0.0}, {"b", 0.0}}) == 0.0);
    GateVector one;
    one.values = {{"a", 1.0}};
    CHECK(gate_regularizer(one, {{"a", 1.0}}) == 1.0);
    CHECK_THROWS_AS(gate_regularizer(gates, {{"a", 1.0}}), ConfigError);
}

TEST_CASE("lambda=0 reduces the loss to pure classification") {
    Fixture f = make_fixture(3);
    FiloraModel model = fresh_model(f, 4);
    const Sample& s = f.dataset.train[0];
    const double with_reg = sample_loss(model, s, f.conditions, 0.01);
    const double without = sample_loss(model, s, f.conditions, 0.0);
    // Untrained projection pins every gate at 0.5; the regularizer term is
    // alpha-sum * 0.5 * lambda.
    double alpha_sum = 0.0;
    for (const auto& [gid, a] : f.conditions.at(s.condition).alpha) alpha_sum += a;
    CHECK(with_reg == doctest::Approx(without + 0.01 * 0.5 * alpha_sum).epsilon(1e-12));
}

TEST_CASE("neutral condition contributes exactly zero gate loss") {
    Fixture f = make_fixture(5);
    FiloraModel model = fresh_model(f, 6);
    for (const Sample& s : f.dataset.train) {
        if (s.condition != ConditionId::kNeutral) continue;
        CHECK(sample_loss(model, s, f.conditions, 0.0) == sample_loss(model, s, f.conditions, 123.0));
        break;
    }
}

TEST_CASE("clip_gradients follows the norm arithmetic") {
    std::vector<Tensor> small{Tensor({2}, {0.3, 0.4})};  // norm 0.5
    CHECK(clip_gradients(small, 1.0) == doctest::Approx(0.5));
    CHECK(small[0].values() == std::vector<double>{0.3, 0.4});

    std::vector<Tensor> big{Tensor({2}, {3.0, 4.0})};  // norm 5
    CHECK(clip_gradients(big, 1.0) == doctest::Approx(5.0));
    CHECK(big[0][0] == doctest::Approx(0.6).epsilon(1e-15));
    CHECK(big[0][1] == doctest::Approx(0.8).epsilon(1e-15));

    Rng rng(9);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<Tensor> grads{Tensor({5}), Tensor({3})};
        for (Tensor& g : grads) {
            for (std::size_t i = 0; i < g.size(); ++i) g[i] = 10.0 * rng.normal();
        }
        clip_gradients(grads, 1.0);
        double sq = 0.0;
        for (const Tensor& g : grads) {
            for (std::size_t i = 0; i < g.size(); ++i) sq += g[i] * g[i];
        }
        CHECK(std::sqrt(sq) <= 1.0 + 1e-12);
    }
    CHECK_THROWS_AS(clip_gradients(big, 0.0), ConfigError);
}

TEST_CASE("a clipped step moves parameters by at most lr plus the decay term") {
    Fixture f = make_fixture(7);
    FiloraModel model = fresh_model(f, 8);
    std::vector<NamedParam> params = model.trainable_params();
    std::vector<double> before;
    double param_norm_sq = 0.0;
    for (const NamedParam& p : params) {
        for (std::size_t i = 0; i < p.tensor->size(); ++i) {
            before.push_back((*p.tensor)[i]);
            param_norm_sq += (*p.tensor)[i] * (*p.tensor)[i];
        }
    }
    TrainingConfig cfg;
    cfg.use_adamw = false;  // the clip arithmetic below is the SGD contract
    cfg.epochs = 1;
    cfg.batch_size = f.dataset.train.size();  // one batch, one step
    cfg.learning_rate_adapters = 0.5;         // large so the bound is informative
    cfg.learning_rate_encoder = 0.5;
    cfg.grad_clip_norm = 1.0;
    train(model, f.dataset.train, f.conditions, cfg);

    double delta_sq = 0.0;
    std::size_t k = 0;
    for (const NamedParam& p : params) {
        for (std::size_t i = 0; i < p.tensor->size(); ++i, ++k) {
            const double d = (*p.tensor)[i] - before[k];
            delta_sq += d * d;
        }
    }
    // ||update|| <= lr * clip + lr * wd * ||theta||.
    const double bound = 0.5 * 1.0 + 0.5 * cfg.weight_decay * std::sqrt(param_norm_sq);
    CHECK(std::sqrt(delta_sq) <= bound + 1e-9);
}

TEST_CASE("training is deterministic for a fixed config and seed") {
    Fixture f = make_fixture(11);
    TrainingConfig cfg;
    cfg.epochs = 2;
    cfg.seed = 42;

    FiloraModel a = fresh_model(f, 12);
    train(a, f.dataset.train, f.conditions, cfg);
    FiloraModel b = fresh_model(f, 12);
    train(b, f.dataset.train, f.conditions, cfg);
    CHECK(trainable_checksum(a) == trainable_checksum(b));

    FiloraModel c = fresh_model(f, 12);
    cfg.seed = 43;
    train(c, f.dataset.train, f.conditions, cfg);
    CHECK(trainable_checksum(a) != trainable_checksum(c));
}

TEST_CASE("condition-blind optimization: cached routing reproduces training bitwise") {
    Fixture f = make_fixture(13);
    TrainingConfig cfg;
    cfg.epochs = 2;
    cfg.seed = 77;

    FiloraModel direct = fresh_model(f, 14);
    train(direct, f.dataset.train, f.conditions, cfg);

    // Route first, then delete every piece of condition metadata the
    // optimizer could have read. Only (features, instruction, target,
    // alpha) survive.
    std::vector<RoutedSample> routed = route_all(f.dataset.train, f.conditions);
    std::vector<Sample> scrubbed = f.dataset.train;
    for (std::size_t i = 0; i < scrubbed.size(); ++i) {
        scrubbed[i].condition = ConditionId::kNeutral;
        scrubbed[i].y = -1;
        scrubbed[i].y_spurious = -1;
        scrubbed[i].instruction.source_condition = ConditionId::kNeutral;
        routed[i].features = &scrubbed[i].features;
        routed[i].instruction = &scrubbed[i].instruction;
    }
    FiloraModel cached = fresh_model(f, 14);
    train_routed(cached, routed, cfg);
    CHECK(trainable_checksum(direct) == trainable_checksum(cached));
}

TEST_CASE("frozen base stays bitwise frozen through training") {
    Fixture f = make_fixture(15);
    FiloraModel model = fresh_model(f, 16);
    const std::uint64_t before = model.base_checksum();
    TrainingConfig cfg;
    cfg.epochs = 2;
    train(model, f.dataset.train, f.conditions, cfg);
    CHECK(model.base_checksum() == before);
}

TEST_CASE("loss trend is monotone over the whole run on an easy benchmark") {
    Fixture f = make_fixture(17);
    FiloraModel model = fresh_model(f, 18);
    TrainingConfig cfg;
    cfg.epochs = 8;
    cfg.learning_rate_adapters = 5e-3;  // fast enough to show the trend on a tiny run
    cfg.learning_rate_encoder = 2e-3;
    std::vector<EpochStats> trace = train(model, f.dataset.train, f.conditions, cfg);
    REQUIRE(trace.size() == 8);
    CHECK(trace.back().mean_loss <= trace.front().mean_loss);
    // Lambda-dominance sanity: the gate term stays a small fraction of the
    // classification loss in the first epoch.
    CHECK(trace.front().lambda_dominance < 0.2);
}

TEST_CASE("NaN loss aborts with the batch index in the message") {
    Fixture f = make_fixture(19);
    FiloraModel model = fresh_model(f, 20);
    // Poison one adapter so the forward pass goes non-finite immediately.
    model.fusion_layer.groups().at(kFusionGroup).b[0] = std::numeric_limits<double>::infinity();
    TrainingConfig cfg;
    cfg.epochs = 1;
    try {
        train(model, f.dataset.train, f.conditions, cfg);
        FAIL("expected TrainingError");
    } catch (const TrainingError& e) {
        CHECK(std::string(e.what()).find("batch 0") != std::string::npos);
    }
}

TEST_CASE("training config text round-trip and validation") {
    TrainingConfig cfg;
    cfg.learning_rate_adapters = 3e-4;
    cfg.epochs = 17;
    cfg.lambda = 0.02;
    cfg.use_adamw = true;
    TrainingConfig back = TrainingConfig::parse(cfg.to_text());
    CHECK(back.learning_rate_adapters == cfg.learning_rate_adapters);
    CHECK(back.epochs == cfg.epochs);
    CHECK(back.lambda == cfg.lambda);
    CHECK(back.use_adamw == cfg.use_adamw);

    CHECK_THROWS_AS(TrainingConfig::parse("nonsense_key = 3"), ConfigError);
    CHECK_THROWS_AS(TrainingConfig::parse("epochs 3"), ConfigError);
    CHECK_THROWS_AS(TrainingConfig::parse("epochs = abc"), ConfigError);
    CHECK_THROWS_AS(TrainingConfig::parse("epochs = 0"), ConfigError);
    // Comments and blank lines are fine.
    TrainingConfig commented = TrainingConfig::parse("# comment\n\nepochs = 3\n");
    CHECK(commented.epochs == 3);
}

TEST_CASE("adamw variant runs and differs from plain sgd") {
    Fixture f = make_fixture(21);
    TrainingConfig cfg;
    cfg.epochs = 1;
    cfg.use_adamw = false;
    FiloraModel sgd = fresh_model(f, 22);
    train(sgd, f.dataset.train, f.conditions, cfg);
    cfg.use_adamw = true;
    FiloraModel adam = fresh_model(f, 22);
    train(adam, f.dataset.train, f.conditions, cfg);
    CHECK(trainable_checksum(sgd) != trainable_checksum(adam));
}

TEST_SUITE_END();
