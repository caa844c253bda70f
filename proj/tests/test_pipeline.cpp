#include <doctest.h>

#include <cmath>

#include "neuronlens/eval.hpp"
#include "neuronlens/stats.hpp"

using namespace neuronlens;

namespace {

struct Trained {
    Corpus corpus;
    TrainResult result;
};

Trained train_on(const CorpusSpec& spec, ModelConfig config) {
    auto corpus = generate(spec);
    config.vocab_size = spec.vocab_size;
    config.max_seq_len = spec.seq_len;
    config.num_classes = spec.num_concepts;
    auto result = train(corpus, config);
    return {std::move(corpus), std::move(result)};
}

CorpusSpec corpus_spec(double sep, std::uint32_t per_concept, std::uint64_t seed, bool disjoint = false) {
    CorpusSpec s;
    s.separation = sep;
    s.samples_per_concept = per_concept;
    s.seed = seed;
    s.disjoint_supports = disjoint;
    return s;
}

// Four blocks at d = 32: faster than the default, same depth.
ModelConfig reduced_config(std::uint64_t seed) {
    ModelConfig c;
    c.hidden_dim = 32;
    c.epochs = 6;
    c.seed = seed;
    return c;
}

const Trained& separable() {
    static const Trained t = [] {
        ModelConfig c;
        c.seed = 1;
        return train_on(corpus_spec(1.0, 200, 1, true), c);
    }();
    return t;
}

} // namespace

TEST_CASE("a separable corpus is learned confidently") {
    const auto& t = separable();
    CHECK(t.result.eval_accuracy >= 0.95);
    double proba = 0.0;
    for (const auto& s : t.corpus.eval) {
        proba += predict_proba(t.result.model, s.tokens).proba[s.label];
    }
    CHECK(proba / static_cast<double>(t.corpus.eval.size()) >= 0.9);
}

TEST_CASE("a corpus without signal stays at chance") {
    // 800 eval samples put the tolerance beyond three binomial deviations.
    const auto t = train_on(corpus_spec(0.0, 1000, 2), reduced_config(2));
    CHECK(std::abs(t.result.eval_accuracy - 0.25) <= 0.05);
}

TEST_CASE("max-saliency sets overlap below 1 and grow with the fraction") {
    const auto& t = separable();
    const auto layer = default_layer(t.result.model.config());
    const auto set = record_corpus(t.result.model, t.corpus.train, std::vector<std::uint32_t>{layer}, Split::train);
    std::vector<SaliencyRanking> rankings;
    for (ConceptId c = 0; c < 4; ++c) {
        rankings.push_back(compute_ranking(set, layer, c, SaliencyMethod::max));
    }
    const std::vector<double> fractions{0.3, 0.5, 0.7, 0.9, 1.0};
    for (ConceptId a = 0; a < 4; ++a) {
        for (ConceptId b = a + 1; b < 4; ++b) {
            CAPTURE(a);
            CAPTURE(b);
            double previous = 0.0;
            for (double p : fractions) {
                const double o = overlap(top_fraction(rankings[a], p), top_fraction(rankings[b], p));
                if (p == 0.3) {
                    CHECK(o < 1.0);
                }
                CHECK(o >= previous);
                previous = o;
            }
            CHECK(previous == 1.0);
        }
    }
}

TEST_CASE("erasing every neuron at the last block collapses the target") {
    const auto& t = separable();
    const auto& model = t.result.model;
    const auto layer = model.config().num_layers;
    const auto set = record_corpus(model, t.corpus.train, std::vector<std::uint32_t>{layer}, Split::train);
    PolicyOptions o;
    o.scope = Scope::neuron;
    o.fraction = 1.0;
    const auto baseline = baseline_metrics(model, t.corpus.eval);
    for (ConceptId target = 0; target < 4; ++target) {
        const auto policy = build_policy(set, layer, compute_ranking(set, layer, target, SaliencyMethod::probeless), o);
        const auto report = erase_and_evaluate(model, t.corpus.eval, policy, &baseline);
        CHECK(report.baseline_classes == baseline);
        // A constant hidden state gives one prediction for every input, so at
        // most one class keeps any accuracy.
        CHECK(report.post.acc + 3.0 * report.post.cacc <= 1.0 + 1e-12);
        CHECK(report.delta.acc + 3.0 * report.delta.cacc < -2.5);
    }
}

TEST_CASE("separation, normality and scope trends over five seeds") {
    const std::vector<double> seps{0.0, 0.4, 0.8};
    std::vector<double> mean_acc(seps.size(), 0.0);
    int normality_votes = 0;
    int scope_votes = 0;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        for (std::size_t i = 0; i < seps.size(); ++i) {
            const auto t = train_on(corpus_spec(seps[i], 150, seed), reduced_config(seed));
            mean_acc[i] += t.result.eval_accuracy / 5.0;
            if (seps[i] != 0.8) {
                continue;
            }
            const auto& model = t.result.model;
            const auto pen = default_layer(model.config());
            const auto set =
                record_corpus(model, t.corpus.train, std::vector<std::uint32_t>{1, pen}, Split::train);
            normality_votes += practical_normality_fraction(set, pen) >= practical_normality_fraction(set, 1) ? 1 : 0;

            const auto baseline = baseline_metrics(model, t.corpus.eval);
            double neuron = 0.0;
            double range = 0.0;
            for (ConceptId target = 0; target < 4; ++target) {
                const auto ranking = compute_ranking(set, pen, target, SaliencyMethod::probeless);
                for (auto scope : {Scope::neuron, Scope::range}) {
                    PolicyOptions o;
                    o.scope = scope;
                    const auto r =
                        erase_and_evaluate(model, t.corpus.eval, build_policy(set, pen, ranking, o), &baseline);
                    (scope == Scope::neuron ? neuron : range) += r.delta.cacc;
                }
            }
            scope_votes += range >= neuron ? 1 : 0;
        }
    }
    CAPTURE(mean_acc[0]);
    CAPTURE(mean_acc[1]);
    CAPTURE(mean_acc[2]);
    CHECK(mean_acc[1] >= mean_acc[0] - 0.03);
    CHECK(mean_acc[2] >= mean_acc[1] - 0.03);
    CHECK(normality_votes >= 3);
    CHECK(scope_votes >= 3);
}
