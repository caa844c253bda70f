// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "neuronlens/error.hpp"
#include "neuronlens/eval.hpp"
#include "neuronlens/stats.hpp"

using namespace neuronlens;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

int failures = 0;

void criterion(int id, const char* name, double budget_s, const std::function<Outcome()>& body) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
        o = body();
    } catch (const std::exception& e) {
        o = {false, std::string("exception: ") + e.what()};
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (s > budget_s) {
        o.pass = false;
        o.detail += fmt("; over the %.0f s budget", budget_s);
    }
    failures += o.pass ? 0 : 1;
    std::printf("criterion %2d: %s  %s (%s; %.2f s)\n", id, o.pass ? "PASS" : "FAIL", name, o.detail.c_str(), s);
    std::fflush(stdout);
}

// ---------------------------------------------------------------------------
// Analytic checks

Outcome range_coverage() {
    std::mt19937_64 rng(101);
    const double mu = 1.3;
    const double sigma = 0.7;
    std::normal_distribution<double> n(mu, sigma);
    const auto r = correlated_range(mu, sigma, 2.5);
    const int draws = 100000;
    int inside = 0;
    for (int i = 0; i < draws; ++i) {
        inside += r.contains(n(rng)) ? 1 : 0;
    }
    const double frac = static_cast<double>(inside) / draws;
    const double analytic = gaussian_coverage(2.5);
    const bool ok = frac >= 0.975 && frac <= 0.995 && std::abs(analytic - 0.9876) <= 1e-4;
    return {ok, fmt("empirical %.5f, analytic %.6f", frac, analytic)};
}

ActivationSet gaussian_activations(std::uint64_t seed, std::uint32_t concepts, std::uint32_t d, std::size_t per) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> loc(-2.0, 2.0);
    std::uniform_real_distribution<double> scale(0.5, 1.5);
    ActivationManifest m;
    m.hidden_dim = d;
    m.layers = {1};
    for (std::uint32_t c = 0; c < concepts; ++c) {
        m.concepts.push_back("c" + std::to_string(c));
    }
    std::vector<std::normal_distribution<double>> dists;
    for (std::uint32_t k = 0; k < concepts * d; ++k) {
        dists.emplace_back(loc(rng), scale(rng));
    }
    std::vector<ActivationRecord> records;
    std::uint64_t id = 0;
    for (std::uint32_t c = 0; c < concepts; ++c) {
        for (std::size_t i = 0; i < per; ++i) {
            ActivationRecord r{id++, c, 1, std::vector<float>(d)};
            for (std::uint32_t j = 0; j < d; ++j) {
                r.vector[j] = static_cast<float>(dists[c * d + j](rng));
            }
            records.push_back(std::move(r));
        }
    }
    return ActivationSet(m, std::move(records));
}

Outcome normality_diagnostics() {
    const auto set = gaussian_activations(202, 4, 32, 5000);
    const auto summary = summarize(layer_statistics(set, 1, 0.1));
    const double frac = practical_normality_fraction(set, 1, 0.1);
    const bool ok = frac >= 0.99 && summary.mean_abs_skewness <= 0.05 && summary.mean_kurtosis >= 2.8 &&
                    summary.mean_kurtosis <= 3.2;
    return {ok, fmt("normal fraction %.3f, mean |skew| %.4f, mean kurtosis %.3f over %zu pairs", frac,
                    summary.mean_abs_skewness, summary.mean_kurtosis, summary.pairs)};
}

Outcome ks_oracle() {
    const double two = ks_statistic(std::vector<double>{-1.0, 1.0});
    std::mt19937_64 rng(303);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> g(0.0, 1.0);
    std::vector<double> uni(10000);
    std::vector<double> gau(10000);
    for (auto& v : uni) {
        v = u(rng);
    }
    for (auto& v : gau) {
        v = g(rng);
    }
    const double du = ks_statistic(uni);
    const double dg = ks_statistic(gau);
    const bool ok = std::abs(two - 0.3413) <= 1e-3 && du > 0.05 && dg < 0.03;
    return {ok, fmt("D[-1,1] %.5f, uniform %.4f, gaussian %.4f", two, du, dg)};
}

Outcome saliency_oracles() {
    std::mt19937_64 rng(404);
    std::uniform_int_distribution<int> nc(2, 5);
    std::uniform_int_distribution<int> nd(1, 32);
    std::uniform_int_distribution<int> nr(1, 20);
    std::normal_distribution<double> g(0.0, 2.0);
    double worst_probeless = 0.0;
    double worst_max = 0.0;
    int rank_mismatch = 0;
    for (int inst = 0; inst < 20; ++inst) {
        const int c = nc(rng);
        const int d = nd(rng);
        std::map<ConceptId, std::vector<double>> means;
        for (int k = 0; k < c; ++k) {
            auto& q = means[static_cast<ConceptId>(k)];
            q.resize(static_cast<std::size_t>(d));
            for (auto& v : q) {
                v = g(rng);
            }
        }
        const auto got = probeless_scores(means);
        for (int j = 0; j < d; ++j) {
            double r = 0.0;
            for (int a = 0; a < c; ++a) {
                for (int b = a + 1; b < c; ++b) {
                    r += std::abs(means[a][j] - means[b][j]);
                }
            }
            worst_probeless = std::max(worst_probeless, std::abs(got.scores[j] - r));
        }

        ConceptMatrix m;
        m.rows = static_cast<std::size_t>(nr(rng));
        m.cols = static_cast<std::size_t>(d);
        m.values.resize(m.rows * m.cols);
        for (auto& v : m.values) {
            v = g(rng);
        }
        const auto mx = max_scores(m);
        for (std::size_t j = 0; j < m.cols; ++j) {
            double sum = 0.0;
            for (std::size_t i = 0; i < m.rows; ++i) {
                sum += std::abs(m.values[i * m.cols + j]);
            }
            worst_max = std::max(worst_max, std::abs(mx.scores[j] - sum / static_cast<double>(m.rows)));
        }

        // Ties are likely after rounding to a coarse grid.
        SaliencyScores s;
        s.scores.resize(static_cast<std::size_t>(d));
        for (auto& v : s.scores) {
            v = std::round(g(rng));
        }
        std::vector<std::uint32_t> expect(s.scores.size());
        std::iota(expect.begin(), expect.end(), 0u);
        std::stable_sort(expect.begin(), expect.end(),
                         [&](std::uint32_t a, std::uint32_t b) { return s.scores[a] > s.scores[b]; });
        rank_mismatch += rank(s).order == expect ? 0 : 1;
    }
    const bool ok = worst_probeless <= 1e-12 && worst_max <= 1e-12 && rank_mismatch == 0;
    return {ok, fmt("probeless err %.2e, max err %.2e, rank mismatches %d/20", worst_probeless, worst_max,
                    rank_mismatch)};
}

Outcome probe_gradient() {
    std::mt19937_64 rng(505);
    std::normal_distribution<double> g(0.0, 1.0);
    const std::size_t d = 8;
    const std::size_t c = 3;
    ProbeData data;
    data.n = 60;
    data.dim = d;
    data.num_classes = c;
    data.x.resize(data.n * d);
    for (auto& v : data.x) {
        v = g(rng);
    }
    for (std::size_t i = 0; i < data.n; ++i) {
        data.y.push_back(static_cast<ConceptId>(i % c));
    }
    const double l1 = 1e-2;
    const double l2 = 1e-2;
    const double h = 1e-6;
    double worst = 0.0;
    for (int point = 0; point < 5; ++point) {
        std::vector<double> w(c * d);
        std::vector<double> b(c);
        for (auto& v : w) {
            v = g(rng);
        }
        for (auto& v : b) {
            v = g(rng);
        }
        std::vector<double> gw(w.size());
        std::vector<double> gb(b.size());
        probe_objective(data, w, b, l1, l2, gw, gb);
        auto rel = [](double a, double e) { return std::abs(a - e) / std::max({std::abs(a), std::abs(e), 1e-6}); };
        for (std::size_t k = 0; k < w.size(); ++k) {
            auto wp = w;
            auto wm = w;
            wp[k] += h;
            wm[k] -= h;
            const double fd = (probe_objective(data, wp, b, l1, l2) - probe_objective(data, wm, b, l1, l2)) / (2 * h);
            worst = std::max(worst, rel(gw[k], fd));
        }
        for (std::size_t k = 0; k < b.size(); ++k) {
            auto bp = b;
            auto bm = b;
            bp[k] += h;
            bm[k] -= h;
            const double fd = (probe_objective(data, w, bp, l1, l2) - probe_objective(data, w, bm, l1, l2)) / (2 * h);
            worst = std::max(worst, rel(gb[k], fd));
        }
    }
    return {worst <= 1e-3, fmt("worst relative error %.2e over 5 points", worst)};
}

// ---------------------------------------------------------------------------
// Toy pipeline, shared by criteria 6 to 8

constexpr int kSeeds = 5;
constexpr std::uint32_t kConcepts = 4;

struct SeedRun {
    Corpus corpus;
    Model model;
    ActivationSet stats;
    std::uint32_t layer = 0;
    MetricsTable baseline;
    std::vector<SaliencyRanking> rankings;
};

SeedRun prepare(std::uint64_t seed) {
    CorpusSpec spec;
    spec.num_concepts = kConcepts;
    spec.separation = 0.8;
    spec.samples_per_concept = 200;
    spec.seed = seed;
    SeedRun run{generate(spec), Model::initialize(ModelConfig{}), {}, 0, {}, {}};
    ModelConfig config;
    config.num_classes = kConcepts;
    config.vocab_size = spec.vocab_size;
    config.max_seq_len = spec.seq_len;
    config.seed = seed;
    run.model = train(run.corpus, config).model;
    run.layer = default_layer(config);
    run.stats = record_corpus(run.model, run.corpus.train, std::vector<std::uint32_t>{run.layer}, Split::train);
    run.baseline = baseline_metrics(run.model, run.corpus.eval);
    for (ConceptId t = 0; t < kConcepts; ++t) {
        run.rankings.push_back(compute_ranking(run.stats, run.layer, t, SaliencyMethod::probeless));
    }
    return run;
}

const std::vector<SeedRun>& seed_runs() {
    static const std::vector<SeedRun> runs = [] {
        std::vector<SeedRun> out;
        for (int s = 1; s <= kSeeds; ++s) {
            out.push_back(prepare(static_cast<std::uint64_t>(s)));
        }
        return out;
    }();
    return runs;
}

// Mean over every target concept of the erasure report fields.
ErasureSummary erase_all(const SeedRun& run, Scope scope, double fraction) {
    PolicyOptions o;
    o.scope = scope;
    o.function = InterventionFunction::zero;
    o.fraction = fraction;
    std::vector<ErasureReport> reports;
    for (const auto& r : run.rankings) {
        reports.push_back(erase_and_evaluate(run.model, run.corpus.eval, build_policy(run.stats, run.layer, r, o),
                                             &run.baseline));
    }
    return summarize_reports(reports, 0.0);
}

Outcome scope_comparison() {
    int wins = 0;
    std::string detail;
    for (const auto& run : seed_runs()) {
        const auto neuron = erase_all(run, Scope::neuron, 0.5);
        const auto range = erase_all(run, Scope::range, 0.5);
        const double gap = std::abs(range.delta.acc - neuron.delta.acc);
        const bool ok = gap <= 0.05 && range.delta.cacc >= neuron.delta.cacc;
        wins += ok ? 1 : 0;
        detail += fmt("%s[dAcc n %.3f r %.3f, dCAcc n %.3f r %.3f]", detail.empty() ? "" : " ", neuron.delta.acc,
                      range.delta.acc, neuron.delta.cacc, range.delta.cacc);
    }
    return {wins >= 3, fmt("%d/5 seeds ", wins) + detail};
}

Outcome tau_sweep_shape() {
    const std::vector<double> taus{0.5, 1.0, 1.5, 2.0, 2.5, 3.5};
    int wins = 0;
    std::string detail;
    for (const auto& run : seed_runs()) {
        std::vector<double> acc(taus.size(), 0.0);
        PolicyOptions o;
        o.fraction = 0.5;
        for (const auto& r : run.rankings) {
            const auto sweep = sweep_tau(run.model, run.corpus.eval, build_policy(run.stats, run.layer, r, o), taus);
            for (std::size_t i = 0; i < taus.size(); ++i) {
                acc[i] += sweep.points[i].report.post.acc / static_cast<double>(run.rankings.size());
            }
        }
        bool monotone = true;
        for (std::size_t i = 0; i + 1 < 5; ++i) {
            monotone = monotone && acc[i + 1] <= acc[i] + 0.02;
        }
        const double late = acc[4] - acc[5];
        const double mid = acc[1] - acc[3];
        wins += monotone && late < mid ? 1 : 0;
        detail += detail.empty() ? "Acc" : " |";
        for (double a : acc) {
            detail += fmt(" %.3f", a);
        }
    }
    return {wins >= 3, fmt("%d/5 seeds; ", wins) + detail};
}

Outcome fraction_sweep_shape() {
    int wins = 0;
    std::string detail;
    for (const auto& run : seed_runs()) {
        const auto neuron = erase_all(run, Scope::neuron, 1.0);
        const auto range = erase_all(run, Scope::range, 1.0);
        wins += neuron.delta.cacc <= range.delta.cacc ? 1 : 0;
        detail += fmt("%s[dCAcc n %.3f r %.3f]", detail.empty() ? "" : " ", neuron.delta.cacc, range.delta.cacc);
    }
    return {wins >= 3, fmt("%d/5 seeds ", wins) + detail};
}

// ---------------------------------------------------------------------------
// Algebra and serialization

bool same_bits(const std::vector<double>& a, const std::vector<double>& b) {
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

Outcome intervention_algebra() {
    std::mt19937_64 rng(909);
    std::uniform_real_distribution<double> u(-10.0, 10.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uniform_real_distribution<double> pos(0.01, 5.0);
    int bad_algebra = 0;
    for (int i = 0; i < 10000; ++i) {
        const double x = u(rng);
        const double mu = u(rng);
        const double sigma = pos(rng);
        const double beta = unit(rng);
        bad_algebra += phi_damp(x, 0.0) == 0.0 ? 0 : 1;
        bad_algebra += phi_damp(x, 1.0) == x ? 0 : 1;
        bad_algebra += phi_adaptive(mu, mu, sigma, beta) == 0.0 ? 0 : 1;
        const auto r = correlated_range(mu, sigma);
        const double in = r.lo + (r.hi - r.lo) * unit(rng);
        bad_algebra += std::abs(phi_adaptive(in, mu, sigma, beta)) <= beta * std::abs(in) ? 0 : 1;
    }

    int bad_apply = 0;
    const std::uint32_t d = 24;
    for (int trial = 0; trial < 100; ++trial) {
        InterventionPolicy p;
        p.scope = unit(rng) < 0.5 ? Scope::neuron : Scope::range;
        p.function = static_cast<InterventionFunction>(static_cast<int>(unit(rng) * 4.0) % 4);
        if (p.function == InterventionFunction::adaptive) {
            p.scope = Scope::range;
        }
        p.alpha = unit(rng);
        p.beta = unit(rng);
        p.tau = 0.5 + 3.0 * unit(rng);
        p.hidden_dim = d;
        std::vector<std::uint32_t> idx(d);
        std::iota(idx.begin(), idx.end(), 0u);
        std::shuffle(idx.begin(), idx.end(), rng);
        idx.resize(static_cast<std::size_t>(unit(rng) * d));
        for (auto j : idx) {
            p.neurons.push_back({j, u(rng) / 3.0, pos(rng), u(rng)});
        }
        std::vector<double> h(d);
        for (auto& v : h) {
            v = u(rng) / 3.0;
        }
        auto expect = h;
        for (const auto& n : p.neurons) {
            const double x = h[n.j];
            const double lo = n.mu - p.tau * n.sigma;
            const double hi = n.mu + p.tau * n.sigma;
            if (p.scope == Scope::range && !(lo <= x && x <= hi)) {
                continue;
            }
            switch (p.function) {
            case InterventionFunction::zero:
                expect[n.j] = 0.0;
                break;
            case InterventionFunction::damp:
                expect[n.j] = p.alpha * x;
                break;
            case InterventionFunction::mean:
                expect[n.j] = n.mu_ref;
                break;
            case InterventionFunction::adaptive:
                expect[n.j] = p.beta * (std::abs(x - n.mu) / (p.tau * n.sigma)) * x;
                break;
            }
        }
        bad_apply += same_bits(neuronlens::apply(h, p), expect) ? 0 : 1;
    }
    return {bad_algebra == 0 && bad_apply == 0,
            fmt("algebra violations %d, apply mismatches %d/100", bad_algebra, bad_apply)};
}

template <class Decode>
int corruption_detected(const std::vector<std::uint8_t>& bytes, std::uint64_t seed, Decode decode) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> at(0, bytes.size() - 1);
    std::uniform_int_distribution<int> mask(1, 255);
    int detected = 0;
    for (int trial = 0; trial < 100; ++trial) {
        auto bad = bytes;
        bad[at(rng)] ^= static_cast<std::uint8_t>(mask(rng));
        try {
            decode(bad);
        } catch (const ChecksumError&) {
            ++detected;
        } catch (const std::exception&) {
        }
    }
    return detected;
}

Outcome serialization() {
    ModelConfig config;
    config.num_layers = 2;
    config.hidden_dim = 16;
    config.num_heads = 2;
    config.seed = 7;
    const auto model = Model::initialize(config);
    const auto model_bytes = encode_model(model);
    const auto model_back = decode_model(model_bytes);
    const bool model_ok = model_back == model && encode_model(model_back) == model_bytes;

    CorpusSpec spec;
    spec.samples_per_concept = 20;
    spec.seed = 7;
    const auto corpus = generate(spec);
    const auto set = record_corpus(model, corpus.train, std::vector<std::uint32_t>{1, 2}, Split::train);
    const auto set_bytes = encode_activations(set);
    const auto set_back = decode_activations(set_bytes);
    bool set_ok = set_back == set && encode_activations(set_back) == set_bytes;
    const auto text = encode_activations_jsonl(set);
    set_ok = set_ok && decode_activations_jsonl(text) == set;

    const int model_detected = corruption_detected(model_bytes, 1010, [](const auto& b) { decode_model(b); });
    const int set_detected = corruption_detected(set_bytes, 1011, [](const auto& b) { decode_activations(b); });
    const bool ok = model_ok && set_ok && model_detected == 100 && set_detected == 100;
    return {ok, fmt("round trips model %s, activations %s; checksum detections model %d/100, activations %d/100",
                    model_ok ? "exact" : "DIFFER", set_ok ? "exact" : "DIFFER", model_detected, set_detected)};
}

} // namespace

int main() {
    criterion(1, "range coverage", 1.0, range_coverage);
    criterion(2, "normality diagnostics", 5.0, normality_diagnostics);
    criterion(3, "KS oracle", 1.0, ks_oracle);
    criterion(4, "saliency oracles", 1.0, saliency_oracles);
    criterion(5, "probe gradient check", 5.0, probe_gradient);
    // The shared trained models are built inside criterion 6 and count
    // against its budget.
    criterion(6, "range vs neuron scope", 300.0, scope_comparison);
    criterion(7, "tau sweep shape", 300.0, tau_sweep_shape);
    criterion(8, "fraction sweep shape", 180.0, fraction_sweep_shape);
    criterion(9, "intervention algebra", 1.0, intervention_algebra);
    criterion(10, "serialization", 5.0, serialization);
    std::printf("%d/10 criteria passed\n", 10 - failures);
    return failures == 0 ? 0 : 1;
}
