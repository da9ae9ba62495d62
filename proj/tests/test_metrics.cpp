#include <cmath>

#include "doctest.h"
#include "filora/metrics.hpp"
#include "filora/rng.hpp"

using namespace filora;

TEST_SUITE_BEGIN("metrics");

// Golden constants computed with direct-summation oracles before the build
// and frozen here.
static constexpr double kMiGolden = 0.19274475702175753;   // joint [[0.4,0.1],[0.1,0.4]]
static constexpr double kJsdGolden = 0.21576155433883565;  // (0.5,0.5) vs (1,0)
static constexpr double kLn2 = 0.6931471805599453;

namespace {

DatasetSpec toy_spec(std::uint64_t seed) {
    DatasetSpec spec;
    spec.groups = {
        {"sem", Modality::kTextLike, GroupRole::kCore, 3, 1.0, 0.4},
        {"app", Modality::kVisionLike, GroupRole::kSpurious, 3, 1.0, 0.4},
    };
    spec.num_classes = 2;
    spec.rho = 0.8;
    spec.proxy_noise = 0.0;
    spec.n_train = 24;
    spec.n_eval = 8;
    spec.seed = seed;
    return spec;
}

struct ToyModel {
    Dataset dataset;
    BaseCheckpoint base;
    FiloraModel model;
};

ToyModel make_toy(std::uint64_t seed, bool nonzero_adapters) {
    ToyModel t{generate_dataset(toy_spec(seed), TemplateBank::builtin()), {}, {}};
    t.base = init_base(t.dataset.spec, mix_seed(seed, "base"));
    FiloraConfig cfg;
    cfg.rank = 1;
    cfg.lora_alpha = 2.0;
    cfg.seed = mix_seed(seed, "model");
    t.model = FiloraModel::create(t.base, TemplateBank::builtin(), cfg);
    if (nonzero_adapters) {
        Rng rng(mix_seed(seed, "fill"));
        for (NamedParam& p : t.model.trainable_params()) {
            if (p.name.find(".B") != std::string::npos) {
                for (std::size_t i = 0; i < p.tensor->size(); ++i) (*p.tensor)[i] = 0.3 * rng.normal();
            }
        }
    }
    return t;
}

std::vector<Instruction> neutral_renders(std::size_t n) {
    std::vector<Instruction> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(TemplateBank::builtin().render_heldout(ConditionId::kNeutral, i));
    return out;
}

}  // namespace

TEST_CASE("gmr is zero for a gate-constant encoder") {
    ToyModel t = make_toy(3, true);
    std::vector<Instruction> focus, ignore;
    for (std::uint64_t i = 0; i < 10; ++i) {
        focus.push_back(TemplateBank::builtin().render_heldout(ConditionId::kFocusCore, i));
        ignore.push_back(TemplateBank::builtin().render_heldout(ConditionId::kIgnoreCore, i));
    }
    // Zero projection pins every gate to 0.5 for any text.
    std::map<GroupId, double> result;
    for (const auto& [gid, v] : gmr(t.model, focus, ignore)) {
        CHECK(v == 0.0);
        result[gid] = v;
    }
    CHECK(result.size() == t.model.gate_groups.size());
    CHECK_THROWS_AS(gmr(t.model, {}, {}), ContractError);
}

TEST_CASE("gmr is one for hand-pinned saturated gates") {
    ToyModel t = make_toy(5, false);
    // Doctor the encoder: 1-d bottleneck driven by a single marker word so
    // focus renders saturate high and ignore renders saturate low.
    InstructionEncoder& enc = t.model.instr_encoder;
    enc.embedding.fill(0.0);
    for (const char* marker : {"only", "solely", "purely", "just", "alone", "merely", "strictly"}) {
        const int id = enc.vocab.id_of(marker);
        for (std::size_t c = 0; c < enc.embedding.cols(); ++c) {
            enc.embedding.at(static_cast<std::size_t>(id), c) = 1024.0;
        }
    }
    enc.w1.fill(0.0);
    for (std::size_t r = 0; r < enc.w1.rows(); ++r) enc.w1.at(r, 0) = 1.0;
    enc.b1.fill(0.0);
    enc.w2.fill(0.0);
    for (std::size_t r = 0; r < enc.w2.rows(); ++r) enc.w2.at(r, 0) = 1.0;
    enc.b2.fill(0.0);
    enc.proj_w.fill(0.0);
    for (std::size_t g = 0; g < enc.proj_w.rows(); ++g) enc.proj_w.at(g, 0) = 10.0;
    enc.proj_b.fill(-200.0);
    // Every ignore-core template carries one of the marker words; gates
    // land at sigmoid(>100) vs sigmoid(-200), i.e. 1 and 0 after rounding.
    std::vector<Instruction> focus, ignore;
    for (std::uint64_t i = 0; i < 8; ++i) {
        focus.push_back(TemplateBank::builtin().render_heldout(ConditionId::kNeutral, i));
        ignore.push_back(TemplateBank::builtin().render_heldout(ConditionId::kIgnoreCore, i));
    }
    for (const auto& [gid, v] : gmr(t.model, ignore, focus)) CHECK(v == 1.0);
}

TEST_CASE("reliance sensitivity vanishes when the head ignores the gates") {
    // Fresh adapters are zero, so gates reach nothing: a gate-free path.
    ToyModel t = make_toy(7, false);
    std::span<const Sample> samples(t.dataset.eval.data(), 4);
    RsResult rs = reliance_sensitivity(t.model, samples, neutral_renders(4));
    for (const auto& [gid, v] : rs.fd) CHECK(v == 0.0);
    for (const auto& [gid, v] : rs.analytic) CHECK(v == 0.0);
}

TEST_CASE("reliance sensitivity matches a brute-force oracle on the toy model") {
    ToyModel t = make_toy(9, true);
    const FiloraModel& m = t.model;
    const double delta = 0.05;
    std::span<const Sample> samples(t.dataset.eval.data(), 4);
    std::vector<Instruction> renders = neutral_renders(4);
    RsResult rs = reliance_sensitivity(m, samples, renders, RsOptions{delta, false});

    // Test-local forward pass, written against the layer math directly.
    auto hand_forward = [&](const FeatureMap& features, const std::vector<double>& gates) {
        auto layer_out = [&](const GroupedLoraLinear& layer, const std::vector<double>& x, double gate) {
            std::vector<double> y(layer.d_out());
            const LoraGroup& grp = layer.groups().begin()->second;
            std::vector<double> u(grp.rank, 0.0);
            for (std::size_t r = 0; r < grp.rank; ++r) {
                for (std::size_t j = 0; j < layer.d_in(); ++j) u[r] += grp.a.at(j, r) * x[j];
            }
            for (std::size_t i = 0; i < layer.d_out(); ++i) {
                double acc = layer.bias()[i];
                for (std::size_t j = 0; j < layer.d_in(); ++j) acc += layer.weight().at(i, j) * x[j];
                for (std::size_t r = 0; r < grp.rank; ++r) acc += gate * layer.scale() * grp.b.at(i, r) * u[r];
                y[i] = acc;
            }
            return y;
        };
        std::vector<double> fused;
        for (std::size_t g = 0; g < m.feature_groups.size(); ++g) {
            const GroupId& gid = m.feature_groups[g];
            const Tensor& xt = features.at(gid);
            std::vector<double> h(xt.data(), xt.data() + xt.size());
            for (const GroupedLoraLinear& layer : m.encoders.at(gid)) {
                h = layer_out(layer, h, gates[g]);
                for (double& v : h) v = gelu_scalar(v);
            }
            fused.insert(fused.end(), h.begin(), h.end());
        }
        const double fusion_gate = gates[m.gate_groups.size() - 1];
        std::vector<double> f = layer_out(m.fusion_layer, fused, fusion_gate);
        for (double& v : f) v = gelu_scalar(v);
        return layer_out(m.head_layer, f, fusion_gate);
    };
    auto hand_log_prob = [&](const std::vector<double>& logits, int label) {
        double mx = logits[0];
        for (double v : logits) mx = std::max(mx, v);
        double s = 0.0;
        for (double v : logits) s += std::exp(v - mx);
        return logits[static_cast<std::size_t>(label)] - mx - std::log(s);
    };

    const std::size_t ng = m.gate_groups.size();
    std::vector<double> oracle(ng, 0.0);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        std::vector<double> gates(ng, 0.5);  // zero projection pins 0.5
        std::vector<double> logits = hand_forward(samples[i].features, gates);
        int yhat = 0;
        for (std::size_t k = 1; k < logits.size(); ++k) {
            if (logits[k] > logits[yhat]) yhat = static_cast<int>(k);
        }
        for (std::size_t g = 0; g < ng; ++g) {
            std::vector<double> up = gates, down = gates;
            up[g] += delta;
            down[g] -= delta;
            const double lp_hi = hand_log_prob(hand_forward(samples[i].features, up), yhat);
            const double lp_lo = hand_log_prob(hand_forward(samples[i].features, down), yhat);
            oracle[g] += std::fabs(lp_hi - lp_lo) / (2.0 * delta);
        }
    }
    for (std::size_t g = 0; g < ng; ++g) {
        oracle[g] /= static_cast<double>(samples.size());
        CHECK(rs.fd.at(m.gate_groups[g]) == doctest::Approx(oracle[g]).epsilon(1e-9));
        // Analytic derivative agrees with the finite difference up to the
        // O(delta^2) truncation of the latter.
        if (oracle[g] > 1e-6) {
            CHECK(rs.analytic.at(m.gate_groups[g]) == doctest::Approx(oracle[g]).epsilon(0.05));
        }
    }
    CHECK(rs.interior_fraction == 1.0);
}

TEST_CASE("decision stability degenerate cases") {
    ToyModel t = make_toy(11, true);
    std::span<const Sample> samples(t.dataset.eval.data(), t.dataset.eval.size());
    std::vector<Instruction> renders = neutral_renders(samples.size());
    const GroupId spurious[] = {"app"};

    // Identity intervention keeps every prediction.
    InterventionSpec identity{{"app"}, 0.0};
    PredictFn model_predict = [&](const FeatureMap& f, const Instruction& instr) {
        return t.model.predict(f, instr);
    };
    CHECK(decision_stability(model_predict, samples, renders, identity) == 1.0);

    // A constant model is perfectly stable under any intervention.
    PredictFn constant = [](const FeatureMap&, const Instruction&) { return 0; };
    InterventionSpec removal{{"app"}, 1.0};
    CHECK(decision_stability(constant, samples, renders, removal) == 1.0);

    // A predictor keyed to one coordinate flips exactly when that
    // coordinate is positive before suppression.
    PredictFn keyed = [](const FeatureMap& f, const Instruction&) { return f.at("app")[0] > 0.5 ? 1 : 0; };
    std::vector<Sample> crafted(10, t.dataset.eval[0]);
    for (std::size_t i = 0; i < 10; ++i) {
        crafted[i].features.at("app")[0] = i < 5 ? 4.0 : -1.0;
    }
    CHECK(decision_stability(keyed, crafted, neutral_renders(10), removal) == 0.5);
    CHECK_THROWS_AS(decision_stability(constant, {}, {}, removal), ContractError);
    (void)spurious;
}

TEST_CASE("degradation curve endpoints and the spurious-only oracle") {
    DatasetSpec spec = DatasetSpec::reference(13);
    spec.n_train = 8;
    spec.n_eval = 1000;
    Dataset d = generate_dataset(spec, TemplateBank::builtin());
    const std::vector<GroupId> spurious = spec.group_ids_with_role(GroupRole::kSpurious);

    // Oracle classifier that reads only the spurious features: nearest
    // prototype, ties to the lowest class.
    PredictFn spurious_oracle = [&](const FeatureMap& f, const Instruction&) {
        int best = 0;
        double best_dist = 0.0;
        for (std::size_t c = 0; c < spec.num_classes; ++c) {
            double dist = 0.0;
            for (const GroupId& gid : spurious) {
                const Tensor& x = f.at(gid);
                const Tensor& proto = d.prototypes.at(gid, static_cast<int>(c));
                for (std::size_t k = 0; k < x.size(); ++k) {
                    const double diff = x[k] - proto[k];
                    dist += diff * diff;
                }
            }
            if (c == 0 || dist < best_dist) {
                best = static_cast<int>(c);
                best_dist = dist;
            }
        }
        return best;
    };

    const double strengths[] = {0.0, 0.5, 1.0};
    auto curve = degradation_curve(spurious_oracle, d.eval, neutral_renders(d.eval.size()), strengths, spurious);
    REQUIRE(curve.size() == 3);
    // Strength 0: the oracle tracks the latent spurious label, which matches
    // y at roughly rho (plus noise effects).
    CHECK(curve[0].second > 0.75);
    // Full suppression zeroes the evidence; every distance ties and the
    // oracle answers class 0, which is right 1/K of the time.
    CHECK(std::fabs(curve[2].second - 0.25) < 0.05);
    const double bad_order[] = {1.0, 0.0};
    CHECK_THROWS_AS(degradation_curve(spurious_oracle, d.eval, neutral_renders(d.eval.size()), bad_order, spurious),
                    ContractError);
}

TEST_CASE("mutual information exact cases and the frozen golden value") {
    // Y = X, uniform binary: MI = ln 2 and equals the entropy.
    std::vector<int> xs, ys;
    for (int i = 0; i < 1000; ++i) {
        xs.push_back(i % 2);
        ys.push_back(i % 2);
    }
    CHECK(std::fabs(mutual_information(xs, ys) - kLn2) < 1e-12);

    // Independent series built as an exact product joint.
    std::vector<int> xi, yi;
    for (int a = 0; a < 2; ++a) {
        for (int b = 0; b < 4; ++b) {
            xi.push_back(a);
            yi.push_back(b);
        }
    }
    CHECK(std::fabs(mutual_information(xi, yi)) < 1e-12);

    // Frozen golden joint p(0,0)=0.4, p(0,1)=0.1, p(1,0)=0.1, p(1,1)=0.4.
    std::vector<int> gx, gy;
    auto add = [&](int a, int b, int count) {
        for (int k = 0; k < count; ++k) {
            gx.push_back(a);
            gy.push_back(b);
        }
    };
    add(0, 0, 4);
    add(0, 1, 1);
    add(1, 0, 1);
    add(1, 1, 4);
    CHECK(std::fabs(mutual_information(gx, gy) - kMiGolden) < 1e-12);

    // Symmetry and MI(X,X) = H(X).
    CHECK(mutual_information(gx, gy) == doctest::Approx(mutual_information(gy, gx)).epsilon(1e-15));
    CHECK(mutual_information(gx, gx) >= 0.0);
    CHECK_THROWS_AS(mutual_information(std::vector<int>{1}, std::vector<int>{1, 2}), ContractError);
}

TEST_CASE("jsd exact cases, golden value, bounds and symmetry") {
    std::vector<double> p{0.5, 0.5}, q{1.0, 0.0};
    CHECK(jsd(p, p) == 0.0);
    CHECK(std::fabs(jsd(p, q) - kJsdGolden) < 1e-12);

    std::vector<double> a{1.0, 0.0}, b{0.0, 1.0};
    CHECK(std::fabs(jsd(a, b) - kLn2) < 1e-12);

    Rng rng(17);
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<double> u(5), v(5);
        double su = 0.0, sv = 0.0;
        for (int k = 0; k < 5; ++k) {
            u[k] = rng.uniform() + 1e-9;
            v[k] = rng.uniform() + 1e-9;
            su += u[k];
            sv += v[k];
        }
        for (int k = 0; k < 5; ++k) {
            u[k] /= su;
            v[k] /= sv;
        }
        const double d1 = jsd(u, v);
        const double d2 = jsd(v, u);
        CHECK(d1 >= 0.0);
        CHECK(d1 <= kLn2 + 1e-12);
        CHECK(d1 == doctest::Approx(d2).epsilon(1e-12));
    }

    std::vector<double> not_normalized{0.4, 0.4};
    CHECK_THROWS_AS(jsd(p, not_normalized), ContractError);
    std::vector<double> negative{1.5, -0.5};
    CHECK_THROWS_AS(jsd(p, negative), ContractError);
}

TEST_CASE("equal-frequency binning balances counts deterministically") {
    std::vector<double> values{5.0, 1.0, 3.0, 2.0, 4.0, 6.0, 8.0, 7.0};
    std::vector<int> bins = equal_frequency_bins(values, 4);
    std::map<int, int> counts;
    for (int b : bins) counts[b] += 1;
    REQUIRE(counts.size() == 4);
    for (const auto& [b, c] : counts) CHECK(c == 2);
    CHECK(bins == equal_frequency_bins(values, 4));
    CHECK(bins[1] == 0);  // smallest value lands in bin 0
    CHECK(bins[6] == 3);  // largest value lands in the top bin
}

TEST_CASE("label separability: degenerate zero case and benchmark ordering") {
    DatasetSpec spec = DatasetSpec::reference(19);
    spec.n_train = 8;
    spec.n_eval = 2000;
    Dataset d = generate_dataset(spec, TemplateBank::builtin());

    SeparabilityScores full = label_separability(d.eval, spec, MaskMode::kFull);
    SeparabilityScores core = label_separability(d.eval, spec, MaskMode::kCoreOnly);
    SeparabilityScores spur = label_separability(d.eval, spec, MaskMode::kSpuriousOnly);
    CHECK(full.l2_score >= core.l2_score);
    CHECK(core.l2_score >= spur.l2_score);
    CHECK(spur.l2_score > 0.0);
    CHECK(full.jsd_score > 0.0);

    // All classes sharing one mean scores zero on both metrics.
    std::vector<Sample> exact;
    for (int cls = 0; cls < static_cast<int>(spec.num_classes); ++cls) {
        Sample s = d.eval[0];
        s.y = cls;
        exact.push_back(s);
    }
    SeparabilityScores zero = label_separability(exact, spec, MaskMode::kFull);
    CHECK(zero.l2_score == 0.0);
    CHECK(zero.jsd_score == doctest::Approx(0.0).epsilon(1e-12));

    std::vector<Sample> missing(exact.begin(), exact.begin() + 2);
    CHECK_THROWS_AS(label_separability(missing, spec, MaskMode::kFull), ContractError);
}

TEST_CASE("mi_by_group separates informative from uninformative groups") {
    DatasetSpec spec = DatasetSpec::reference(23);
    spec.n_train = 8;
    spec.n_eval = 1500;
    // Make one spurious group pure noise by decorrelating it completely.
    Dataset d = generate_dataset(spec, TemplateBank::builtin());
    Rng rng(24);
    for (Sample& s : d.eval) {
        Tensor& x = s.features.at("background");
        for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.normal();
    }
    std::map<GroupId, double> mi = mi_by_group(d.eval, spec);
    CHECK(mi.at("semantic") > mi.at("background"));
    CHECK(mi.at("semantic") > 0.01);
    CHECK(mi.at("background") < mi.at("appearance"));
}

TEST_SUITE_END();
