#include <doctest.h>

#include <cstring>
#include <sstream>

#include <nlohmann/json.hpp>

#include "neuronlens/error.hpp"
#include "neuronlens/eval.hpp"
#include "support.hpp"

using namespace neuronlens;

namespace {

struct Fixture {
    ModelConfig config = testing::tiny_config(9);
    Model model = Model::initialize(config);
    std::vector<LabeledSequence> train =
        testing::random_sequences(90, config.vocab_size, config.max_seq_len, config.num_classes, 1);
    std::vector<LabeledSequence> eval =
        testing::random_sequences(60, config.vocab_size, config.max_seq_len, config.num_classes, 2);
    ActivationSet stats = record_corpus(model, train, std::vector<std::uint32_t>{1, 2}, Split::train);

    InterventionPolicy policy(double fraction, Scope scope = Scope::range, ConceptId target = 0,
                              std::uint32_t layer = 1) const {
        PolicyOptions o;
        o.fraction = fraction;
        o.scope = scope;
        return build_policy(stats, layer, compute_ranking(stats, layer, target, SaliencyMethod::probeless), o);
    }
};

Prediction hard(ConceptId label, std::size_t classes, double p) {
    Prediction out{label, std::vector<double>(classes, (1.0 - p) / static_cast<double>(classes - 1))};
    out.proba[label] = p;
    return out;
}

bool same_bits(double a, double b) {
    return std::memcmp(&a, &b, sizeof(double)) == 0;
}

} // namespace

TEST_CASE("class metrics") {
    std::vector<LabeledSequence> samples;
    std::vector<Prediction> perfect;
    for (ConceptId c = 0; c < 3; ++c) {
        for (int i = 0; i < 5; ++i) {
            samples.push_back({{0, 0, 0, 0}, c});
            perfect.push_back(hard(c, 3, 0.6 + 0.05 * i));
        }
    }
    const auto t = class_metrics(samples, perfect, 3);
    for (const auto& [c, m] : t) {
        CHECK(m.accuracy == 1.0);
        CHECK(m.n == 5);
        CHECK(m.confidence == doctest::Approx((0.6 + 0.65 + 0.7 + 0.75 + 0.8) / 5.0));
    }

    auto wrong = perfect;
    wrong[0] = hard(1, 3, 0.9);
    const auto w = class_metrics(samples, wrong, 3);
    CHECK(w.at(0).accuracy == doctest::Approx(0.8));
    CHECK(w.at(0).confidence == doctest::Approx((0.05 + 0.65 + 0.7 + 0.75 + 0.8) / 5.0));

    CHECK_THROWS_AS(class_metrics(samples, perfect, 4), ValidationError);
}

TEST_CASE("auxiliary averages exclude the target") {
    std::vector<LabeledSequence> samples;
    std::vector<Prediction> preds;
    for (ConceptId c = 0; c < 4; ++c) {
        for (int i = 0; i < 4; ++i) {
            samples.push_back({{0, 0, 0, 0}, c});
            preds.push_back(hard(i % 2 == 0 ? c : (c + 1) % 4, 4, 0.7));
        }
    }
    const auto base = erasure_metrics(class_metrics(samples, preds, 4), 2);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (samples[i].label == 2) {
            preds[i] = hard(0, 4, 0.97);
        }
    }
    const auto perturbed = erasure_metrics(class_metrics(samples, preds, 4), 2);
    CHECK(perturbed.cacc == base.cacc);
    CHECK(perturbed.cconf == base.cconf);
    CHECK(perturbed.acc != base.acc);
}

TEST_CASE("baseline metrics are deterministic") {
    Fixture f;
    CHECK(baseline_metrics(f.model, f.eval) == baseline_metrics(f.model, f.eval));
}

TEST_CASE("empty policy is a no-op and deltas are post minus baseline") {
    Fixture f;
    const auto r = erase_and_evaluate(f.model, f.eval, f.policy(0.0));
    CHECK(r.delta == ErasureMetrics{});
    CHECK(r.post_classes == r.baseline_classes);

    const auto full = erase_and_evaluate(f.model, f.eval, f.policy(1.0, Scope::neuron, 1, 2));
    CHECK(same_bits(full.delta.acc, full.post.acc - full.baseline.acc));
    CHECK(same_bits(full.delta.conf, full.post.conf - full.baseline.conf));
    CHECK(same_bits(full.delta.cacc, full.post.cacc - full.baseline.cacc));
    CHECK(same_bits(full.delta.cconf, full.post.cconf - full.baseline.cconf));
    CHECK(full.target == 1);
}

TEST_CASE("policies must come from the train split and match the model") {
    Fixture f;
    auto p = f.policy(0.5);
    p.provenance = Split::eval;
    CHECK_THROWS_AS(erase_and_evaluate(f.model, f.eval, p), ValidationError);

    p = f.policy(0.5);
    p.hidden_dim = 16;
    p.neurons.clear();
    CHECK_THROWS_AS(erase_and_evaluate(f.model, f.eval, p), ValidationError);

    p = f.policy(0.5);
    p.layer = 3;
    CHECK_THROWS_AS(erase_and_evaluate(f.model, f.eval, p), ValidationError);
}

TEST_CASE("trimmed mean") {
    std::vector<double> v(10, 0.0);
    v[9] = 100.0;
    CHECK(trimmed_mean(v) == 0.0);
    CHECK(trimmed_mean(std::vector<double>(7, 2.5)) == 2.5);
    CHECK(trimmed_mean(std::vector<double>{1, 2, 3, 10}) == 4.0);
    CHECK(trimmed_mean(std::vector<double>{5, 1, 3, 2, 4}, 0.2) == 3.0);
    CHECK_THROWS_AS(trimmed_mean(std::vector<double>{}), ValidationError);
    CHECK_THROWS_AS(trimmed_mean(std::vector<double>{1, 2}, 0.5), ValidationError);
}

TEST_CASE("tau sweep") {
    Fixture f;
    const auto base = f.policy(0.5);
    const std::vector<double> single{2.5};
    const auto one = sweep_tau(f.model, f.eval, base, single);
    REQUIRE(one.points.size() == 1);
    const auto direct = erase_and_evaluate(f.model, f.eval, base);
    CHECK(one.points[0].report.post_classes == direct.post_classes);
    CHECK(one.points[0].report.delta == direct.delta);
    CHECK(one.points[0].is_default);

    const std::vector<double> taus{0.5, 1.0, 2.5};
    const auto sweep = sweep_tau(f.model, f.eval, base, taus);
    CHECK(sweep.variable == "tau");
    for (std::size_t i = 0; i < taus.size(); ++i) {
        CHECK(sweep.points[i].value == taus[i]);
        CHECK(sweep.points[i].report.policy.tau == taus[i]);
    }
    const std::vector<double> unsorted{1.0, 0.5};
    CHECK_THROWS_AS(sweep_tau(f.model, f.eval, base, unsorted), ValidationError);
}

TEST_CASE("fraction and layer sweeps") {
    Fixture f;
    const auto ranking = compute_ranking(f.stats, 1, 0, SaliencyMethod::max);
    const std::vector<double> fractions{0.0, 0.5, 1.0};
    PolicyOptions o;
    const auto sweep = sweep_fraction(f.model, f.eval, f.stats, 1, ranking, o, fractions);
    CHECK(sweep.points.size() == 3);
    CHECK(sweep.points[0].report.delta == ErasureMetrics{});
    CHECK(sweep.points[2].report.policy.neurons.size() == f.config.hidden_dim);
    const std::vector<double> bad{0.5, 1.5};
    CHECK_THROWS_AS(sweep_fraction(f.model, f.eval, f.stats, 1, ranking, o, bad), ValidationError);

    const std::vector<std::uint32_t> layers{1, 2};
    const auto ls = sweep_layer(f.model, f.eval, f.stats, 0, SaliencyMethod::probeless, o, layers);
    REQUIRE(ls.points.size() == 2);
    CHECK(ls.points[0].is_default);
    CHECK_FALSE(ls.points[1].is_default);
    CHECK(default_layer(f.config) == 1);
    CHECK(ls.points[1].report.policy.layer == 2);
    const std::vector<std::uint32_t> missing{3};
    CHECK_THROWS_AS(sweep_layer(f.model, f.eval, f.stats, 0, SaliencyMethod::max, o, missing), ValidationError);
}

TEST_CASE("report exports") {
    Fixture f;
    std::vector<ErasureReport> reports;
    for (ConceptId c = 0; c < 3; ++c) {
        reports.push_back(erase_and_evaluate(f.model, f.eval, f.policy(0.5, Scope::range, c)));
    }
    const nlohmann::json j = reports[0];
    for (const char* block : {"baseline", "delta"}) {
        for (const char* key : {"acc", "conf", "cacc", "cconf"}) {
            CHECK(j.at(block).contains(key));
        }
    }
    CHECK(j.at("policy").at("scope") == "range");

    std::istringstream csv(report_csv(reports));
    std::string line;
    std::getline(csv, line);
    CHECK(line == "concept,scope,function,tau,fraction,layer,acc,conf,cacc,cconf,d_acc,d_conf,d_cacc,d_cconf");
    int rows = 0;
    while (std::getline(csv, line)) {
        ++rows;
    }
    CHECK(rows == 3);

    const auto s = summarize_reports(reports);
    CHECK(s.reports == 3);
    CHECK(s.delta.acc == doctest::Approx((reports[0].delta.acc + reports[1].delta.acc + reports[2].delta.acc) / 3));

    const std::vector<double> taus{1.0, 2.0};
    const auto sweep = sweep_tau(f.model, f.eval, f.policy(0.5), taus);
    std::istringstream sc(sweep_csv(sweep));
    std::getline(sc, line);
    CHECK(line.rfind("variable,value,default,concept", 0) == 0);
    const nlohmann::json sj = sweep;
    CHECK(sj.at("points").size() == 2);
    CHECK(metrics_csv(reports[0].baseline_classes).rfind("concept,n,acc,conf\n", 0) == 0);
}
