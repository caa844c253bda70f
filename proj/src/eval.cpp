#include "neuronlens/eval.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <nlohmann/json.hpp>

#include "neuronlens/error.hpp"

namespace neuronlens {

using nlohmann::json;

MetricsTable class_metrics(std::span<const LabeledSequence> samples, std::span<const Prediction> predictions,
                           std::size_t num_classes) {
    if (samples.size() != predictions.size()) {
        throw ValidationError("predictions", "one prediction per sample required");
    }
    MetricsTable table;
    for (std::size_t c = 0; c < num_classes; ++c) {
        table[static_cast<ConceptId>(c)].label = static_cast<ConceptId>(c);
    }
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto y = samples[i].label;
        if (y >= num_classes) {
            throw ValidationError("concept", "sample label " + std::to_string(y) + " >= " +
                                                 std::to_string(num_classes) + " classes");
        }
        auto& m = table[y];
        ++m.n;
        m.accuracy += predictions[i].label == y ? 1.0 : 0.0;
        m.confidence += predictions[i].proba.at(y);
    }
    for (auto& [c, m] : table) {
        if (m.n == 0) {
            throw ValidationError("eval", "concept " + std::to_string(c) + " has no evaluation samples");
        }
        m.accuracy /= static_cast<double>(m.n);
        m.confidence /= static_cast<double>(m.n);
    }
    return table;
}

MetricsTable baseline_metrics(const Model& model, std::span<const LabeledSequence> samples) {
    std::vector<Prediction> predictions;
    predictions.reserve(samples.size());
    for (const auto& s : samples) {
        predictions.push_back(predict_proba(model, s.tokens));
    }
    return class_metrics(samples, predictions, model.config().num_classes);
}

MetricsTable intervened_metrics(const Model& model, std::span<const LabeledSequence> samples,
                                const InterventionPolicy& policy) {
    if (policy.hidden_dim != model.config().hidden_dim) {
        throw ValidationError("hidden_dim", "policy built for d=" + std::to_string(policy.hidden_dim) +
                                                ", model has d=" + std::to_string(model.config().hidden_dim));
    }
    if (policy.layer > model.config().num_layers) {
        throw ValidationError("layer", "policy layer " + std::to_string(policy.layer) + " > model depth " +
                                           std::to_string(model.config().num_layers));
    }
    const auto hook = intervention_hook(policy);
    std::vector<Prediction> predictions;
    predictions.reserve(samples.size());
    for (const auto& s : samples) {
        predictions.push_back(forward_with_hook(model, s.tokens, hook).prediction);
    }
    return class_metrics(samples, predictions, model.config().num_classes);
}

ErasureMetrics erasure_metrics(const MetricsTable& table, ConceptId target) {
    if (!table.contains(target)) {
        throw ValidationError("concept", "unknown concept " + std::to_string(target));
    }
    if (table.size() < 2) {
        throw ValidationError("concepts", "auxiliary metrics need at least two concepts");
    }
    ErasureMetrics out;
    out.acc = table.at(target).accuracy;
    out.conf = table.at(target).confidence;
    for (const auto& [c, m] : table) {
        if (c != target) {
            out.cacc += m.accuracy;
            out.cconf += m.confidence;
        }
    }
    const auto k = static_cast<double>(table.size() - 1);
    out.cacc /= k;
    out.cconf /= k;
    return out;
}

namespace {

ErasureMetrics difference(const ErasureMetrics& post, const ErasureMetrics& base) {
    return {post.acc - base.acc, post.conf - base.conf, post.cacc - base.cacc, post.cconf - base.cconf};
}

} // namespace

ErasureReport erase_and_evaluate(const Model& model, std::span<const LabeledSequence> samples,
                                 const InterventionPolicy& policy, const MetricsTable* baseline) {
    if (policy.provenance != Split::train) {
        throw ValidationError("policy", "intervention statistics must come from the train split, got " +
                                            std::string(to_string(policy.provenance)));
    }
    if (policy.label >= model.config().num_classes) {
        throw ValidationError("concept", "unknown concept " + std::to_string(policy.label));
    }
    ErasureReport r;
    r.target = policy.label;
    r.policy = policy;
    r.baseline_classes = baseline != nullptr ? *baseline : baseline_metrics(model, samples);
    r.post_classes = intervened_metrics(model, samples, policy);
    r.baseline = erasure_metrics(r.baseline_classes, r.target);
    r.post = erasure_metrics(r.post_classes, r.target);
    r.delta = difference(r.post, r.baseline);
    return r;
}

double trimmed_mean(std::span<const double> values, double trim) {
    if (!(trim >= 0.0 && trim < 0.5)) {
        throw ValidationError("trim", "must lie in [0, 0.5)");
    }
    const std::size_t k = values.size();
    const auto cut = static_cast<std::size_t>(std::floor(trim * static_cast<double>(k)));
    if (k == 0 || 2 * cut >= k) {
        throw ValidationError("values", "nothing left after trimming");
    }
    std::vector<double> sorted(values.begin(), values.end());
    std::sort(sorted.begin(), sorted.end());
    double total = 0.0;
    for (std::size_t i = cut; i < k - cut; ++i) {
        total += sorted[i];
    }
    return total / static_cast<double>(k - 2 * cut);
}

ErasureSummary summarize_reports(std::span<const ErasureReport> reports, double trim) {
    if (reports.empty()) {
        throw ValidationError("reports", "nothing to summarise");
    }
    auto field = [&](auto select) {
        std::vector<double> v;
        for (const auto& r : reports) {
            v.push_back(select(r));
        }
        return trimmed_mean(v, trim);
    };
    auto block = [&](auto member) {
        return ErasureMetrics{field([&](const ErasureReport& r) { return (r.*member).acc; }),
                              field([&](const ErasureReport& r) { return (r.*member).conf; }),
                              field([&](const ErasureReport& r) { return (r.*member).cacc; }),
                              field([&](const ErasureReport& r) { return (r.*member).cconf; })};
    };
    ErasureSummary s;
    s.reports = reports.size();
    s.baseline = block(&ErasureReport::baseline);
    s.post = block(&ErasureReport::post);
    s.delta = block(&ErasureReport::delta);
    return s;
}

namespace {

template <typename T>
void require_ascending(std::span<const T> values, const char* field) {
    if (values.empty()) {
        throw ValidationError(field, "at least one value required");
    }
    for (std::size_t i = 1; i < values.size(); ++i) {
        if (!(values[i - 1] < values[i])) {
            throw ValidationError(field, "values must be strictly ascending");
        }
    }
}

} // namespace

SweepResult sweep_tau(const Model& model, std::span<const LabeledSequence> samples,
                      const InterventionPolicy& base_policy, std::span<const double> taus) {
    require_ascending(taus, "tau");
    const auto baseline = baseline_metrics(model, samples);
    SweepResult out{"tau", {}};
    for (double tau : taus) {
        auto policy = base_policy;
        policy.tau = tau;
        policy.validate();
        out.points.push_back({tau, tau == kDefaultTau, erase_and_evaluate(model, samples, policy, &baseline)});
    }
    return out;
}

SweepResult sweep_fraction(const Model& model, std::span<const LabeledSequence> samples, const ActivationSet& stats,
                           std::uint32_t layer, const SaliencyRanking& ranking, const PolicyOptions& options,
                           std::span<const double> fractions) {
    require_ascending(fractions, "fraction");
    const auto baseline = baseline_metrics(model, samples);
    SweepResult out{"fraction", {}};
    for (double p : fractions) {
        auto opts = options;
        opts.fraction = p;
        const auto policy = build_policy(stats, layer, ranking, opts);
        out.points.push_back({p, p == options.fraction, erase_and_evaluate(model, samples, policy, &baseline)});
    }
    return out;
}

std::uint32_t default_layer(const ModelConfig& config) {
    return config.num_layers > 1 ? config.num_layers - 1 : 1;
}

SweepResult sweep_layer(const Model& model, std::span<const LabeledSequence> samples, const ActivationSet& stats,
                        ConceptId target, SaliencyMethod method, const PolicyOptions& options,
                        std::span<const std::uint32_t> layers, const ProbeConfig& probe) {
    require_ascending(layers, "layer");
    for (auto l : layers) {
        if (l < 1 || l > model.config().num_layers) {
            throw ValidationError("layer", "layer " + std::to_string(l) + " outside [1, " +
                                               std::to_string(model.config().num_layers) + "]");
        }
        if (!stats.has_layer(l)) {
            throw ValidationError("layer", "layer " + std::to_string(l) + " not recorded in the activations");
        }
    }
    const auto baseline = baseline_metrics(model, samples);
    const auto flagged = default_layer(model.config());
    SweepResult out{"layer", {}};
    for (auto l : layers) {
        const auto ranking = compute_ranking(stats, l, target, method, probe);
        const auto policy = build_policy(stats, l, ranking, options);
        out.points.push_back(
            {static_cast<double>(l), l == flagged, erase_and_evaluate(model, samples, policy, &baseline)});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Export

void to_json(json& j, const ClassMetrics& m) {
    j = json{{"concept", m.label}, {"n", m.n}, {"acc", m.accuracy}, {"conf", m.confidence}};
}

void to_json(json& j, const ErasureMetrics& m) {
    j = json{{"acc", m.acc}, {"conf", m.conf}, {"cacc", m.cacc}, {"cconf", m.cconf}};
}

json metrics_table_json(const MetricsTable& table) {
    json out = json::array();
    for (const auto& [c, m] : table) {
        out.push_back(m);
    }
    return out;
}

void to_json(json& j, const ErasureReport& r) {
    j = json{{"concept", r.target},
             {"policy", r.policy},
             {"baseline", r.baseline},
             {"post", r.post},
             {"delta", r.delta},
             {"baseline_classes", metrics_table_json(r.baseline_classes)},
             {"post_classes", metrics_table_json(r.post_classes)}};
}

void to_json(json& j, const ErasureSummary& s) {
    j = json{{"reports", s.reports}, {"baseline", s.baseline}, {"post", s.post}, {"delta", s.delta}};
}

void to_json(json& j, const SweepResult& s) {
    json points = json::array();
    for (const auto& p : s.points) {
        points.push_back({{"value", p.value}, {"default", p.is_default}, {"report", p.report}});
    }
    j = json{{"variable", s.variable}, {"points", std::move(points)}};
}

namespace {

constexpr const char* kReportColumns =
    "concept,scope,function,tau,fraction,layer,acc,conf,cacc,cconf,d_acc,d_conf,d_cacc,d_cconf";

void report_row(std::ostream& out, const ErasureReport& r) {
    const auto& p = r.policy;
    out << r.target << ',' << to_string(p.scope) << ',' << to_string(p.function) << ',' << p.tau << ','
        << p.fraction << ',' << p.layer << ',' << r.baseline.acc << ',' << r.baseline.conf << ',' << r.baseline.cacc
        << ',' << r.baseline.cconf << ',' << r.delta.acc << ',' << r.delta.conf << ',' << r.delta.cacc << ','
        << r.delta.cconf << '\n';
}

} // namespace

std::string report_csv(std::span<const ErasureReport> reports) {
    std::ostringstream out;
    out.precision(17);
    out << kReportColumns << '\n';
    for (const auto& r : reports) {
        report_row(out, r);
    }
    return out.str();
}

std::string sweep_csv(const SweepResult& sweep) {
    std::ostringstream out;
    out.precision(17);
    out << "variable,value,default," << kReportColumns << '\n';
    for (const auto& p : sweep.points) {
        out << sweep.variable << ',' << p.value << ',' << (p.is_default ? "true" : "false") << ',';
        report_row(out, p.report);
    }
    return out.str();
}

std::string metrics_csv(const MetricsTable& table) {
    std::ostringstream out;
    out.precision(17);
    out << "concept,n,acc,conf\n";
    for (const auto& [c, m] : table) {
        out << c << ',' << m.n << ',' << m.accuracy << ',' << m.confidence << '\n';
    }
    return out.str();
}

} // namespace neuronlens
