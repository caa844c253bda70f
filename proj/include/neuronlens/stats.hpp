#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "neuronlens/activation_store.hpp"

namespace neuronlens {

// Population (divide-by-n) moments.
struct GaussianParams {
    double mean = 0.0;
    double stddev = 0.0;
    std::size_t n = 0;
};

GaussianParams gaussian_params(std::span<const double> sample);

// Moment estimators g1 = m3 / m2^1.5 and g2 = m4 / m2^2 (non-excess, so a
// Gaussian sits at 3). Both need n >= 3 and non-zero variance.
double skewness(std::span<const double> sample);
double kurtosis(std::span<const double> sample);

double standard_normal_cdf(double x);

// Kolmogorov-Smirnov distance between the standardised sample and N(0, 1).
double ks_statistic(std::span<const double> sample);

constexpr double kPracticalNormalityThreshold = 0.1;

struct NormalityDiagnostics {
    double skewness = 0.0;
    double kurtosis = 0.0;
    double ks = 1.0;
    bool practically_normal = false;
};

// Zero-variance samples get NaN moments, ks = 1 and practically_normal = false.
NormalityDiagnostics diagnose(std::span<const double> sample, double threshold = kPracticalNormalityThreshold);

struct NeuronConceptStats {
    std::uint32_t layer = 0;
    std::uint32_t neuron = 0;
    ConceptId label = 0;
    GaussianParams params;
    NormalityDiagnostics normality;
};

// One entry per (neuron, concept) pair with at least two records, neuron-major.
std::vector<NeuronConceptStats> layer_statistics(const ActivationSet& set, std::uint32_t layer,
                                                 double threshold = kPracticalNormalityThreshold);

struct LayerSummary {
    std::uint32_t layer = 0;
    std::size_t pairs = 0;
    double mean_abs_skewness = 0.0;
    double mean_kurtosis = 0.0;
    double mean_ks = 0.0;
    double practical_normality = 0.0;
};

LayerSummary summarize(std::span<const NeuronConceptStats> stats);

// Fraction of (neuron, concept) pairs whose KS statistic is below threshold.
double practical_normality_fraction(const ActivationSet& set, std::uint32_t layer,
                                    double threshold = kPracticalNormalityThreshold);

// layer,neuron,concept,mu,sigma,n,skew,kurt,ks,normal
std::string stats_csv(std::span<const NeuronConceptStats> stats);

void to_json(nlohmann::json& j, const LayerSummary& s);
void to_json(nlohmann::json& j, const NeuronConceptStats& s);

// Silverman's rule of thumb, 0.9 * min(sigma, IQR / 1.34) * n^(-1/5).
double silverman_bandwidth(std::span<const double> sample);

// Gaussian kernel density estimate evaluated at each grid point.
std::vector<double> kernel_density(std::span<const double> sample, double bandwidth, std::span<const double> grid);

struct DistributionExport {
    std::uint32_t layer = 0;
    std::uint32_t neuron = 0;
    ConceptId label = 0;
    GaussianParams params;
    std::vector<double> bin_edges;
    std::vector<std::size_t> counts;
    double bandwidth = 0.0;
    std::vector<double> grid;
    std::vector<double> density;
};

void to_json(nlohmann::json& j, const DistributionExport& e);

// concept,neuron,series,x,value with series "hist" (x = bin centre, value =
// count) or "kde" (x = grid point, value = density).
std::string distribution_csv(std::span<const DistributionExport> exports);

// Histogram and KDE of one neuron's activations for each requested concept
// (all concepts when `concepts` is empty). The range is [min - pad, max + pad]
// with pad = max(sigma, 4 * bandwidth) so the density keeps its unit mass.
std::vector<DistributionExport> distribution_export(const ActivationSet& set, std::uint32_t layer,
                                                    std::uint32_t neuron, std::span<const ConceptId> concepts,
                                                    std::size_t bins, std::size_t grid_points = 256);

// Trapezoid rule over a grid.
double trapezoid(std::span<const double> x, std::span<const double> y);

} // namespace neuronlens
