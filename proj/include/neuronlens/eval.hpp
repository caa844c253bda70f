#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "neuronlens/intervention.hpp"

namespace neuronlens {

// Acc: fraction of samples labelled c predicted as c. Conf: mean probability
// the model gives class c on those samples.
struct ClassMetrics {
    ConceptId label = 0;
    std::size_t n = 0;
    double accuracy = 0.0;
    double confidence = 0.0;

    bool operator==(const ClassMetrics&) const = default;
};

using MetricsTable = std::map<ConceptId, ClassMetrics>;

// Every class in [0, num_classes) must have at least one sample.
MetricsTable class_metrics(std::span<const LabeledSequence> samples, std::span<const Prediction> predictions,
                           std::size_t num_classes);

MetricsTable baseline_metrics(const Model& model, std::span<const LabeledSequence> samples);

// Metrics with the policy's hook installed.
MetricsTable intervened_metrics(const Model& model, std::span<const LabeledSequence> samples,
                                const InterventionPolicy& policy);

// Acc, Conf of the target and CAcc, CConf as unweighted means over the
// other concepts.
struct ErasureMetrics {
    double acc = 0.0;
    double conf = 0.0;
    double cacc = 0.0;
    double cconf = 0.0;

    bool operator==(const ErasureMetrics&) const = default;
};

ErasureMetrics erasure_metrics(const MetricsTable& table, ConceptId target);

struct ErasureReport {
    ConceptId target = 0;
    InterventionPolicy policy;
    MetricsTable baseline_classes;
    MetricsTable post_classes;
    ErasureMetrics baseline;
    ErasureMetrics post;
    // post - baseline, field by field.
    ErasureMetrics delta;
};

// Refuses policies whose statistics were not estimated on the train split.
// `baseline` may be passed in to skip the unmodified evaluation.
ErasureReport erase_and_evaluate(const Model& model, std::span<const LabeledSequence> samples,
                                 const InterventionPolicy& policy, const MetricsTable* baseline = nullptr);

// Drops floor(trim * k) values from each tail and averages the rest.
double trimmed_mean(std::span<const double> values, double trim = 0.10);

// Trimmed means of each field over several reports (one per target concept).
struct ErasureSummary {
    std::size_t reports = 0;
    ErasureMetrics baseline;
    ErasureMetrics post;
    ErasureMetrics delta;
};

ErasureSummary summarize_reports(std::span<const ErasureReport> reports, double trim = 0.10);

struct SweepPoint {
    double value = 0.0;
    bool is_default = false;
    ErasureReport report;
};

struct SweepResult {
    std::string variable;
    std::vector<SweepPoint> points;
};

// One report per tau, recomputing every correlated range. Taus must be
// strictly ascending.
SweepResult sweep_tau(const Model& model, std::span<const LabeledSequence> samples,
                      const InterventionPolicy& base_policy, std::span<const double> taus);

// Rebuilds the policy from `stats` and `ranking` at each fraction in [0, 1];
// fractions must be strictly ascending.
SweepResult sweep_fraction(const Model& model, std::span<const LabeledSequence> samples, const ActivationSet& stats,
                           std::uint32_t layer, const SaliencyRanking& ranking, const PolicyOptions& options,
                           std::span<const double> fractions);

// Ranks and builds a policy at each layer; layers must be strictly ascending
// and recorded in `stats`. The penultimate layer is flagged as the default.
SweepResult sweep_layer(const Model& model, std::span<const LabeledSequence> samples, const ActivationSet& stats,
                        ConceptId target, SaliencyMethod method, const PolicyOptions& options,
                        std::span<const std::uint32_t> layers, const ProbeConfig& probe = {});

std::uint32_t default_layer(const ModelConfig& config);

void to_json(nlohmann::json& j, const ClassMetrics& m);
void to_json(nlohmann::json& j, const ErasureMetrics& m);
void to_json(nlohmann::json& j, const ErasureReport& r);
void to_json(nlohmann::json& j, const ErasureSummary& s);
void to_json(nlohmann::json& j, const SweepResult& s);
nlohmann::json metrics_table_json(const MetricsTable& table);

// Columns: concept,scope,function,tau,fraction,layer,
// acc,conf,cacc,cconf (baseline), d_acc,d_conf,d_cacc,d_cconf (delta).
std::string report_csv(std::span<const ErasureReport> reports);
// Same columns prefixed by the swept variable, its value and the default flag.
std::string sweep_csv(const SweepResult& sweep);
// concept,n,acc,conf
std::string metrics_csv(const MetricsTable& table);

} // namespace neuronlens
