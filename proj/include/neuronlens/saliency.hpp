#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "neuronlens/activation_store.hpp"

namespace neuronlens {

enum class SaliencyMethod : std::uint8_t { max, probe, probeless };

const char* to_string(SaliencyMethod method);
SaliencyMethod saliency_method_from_string(const std::string& name);

struct SaliencyScores {
    ConceptId label = 0;
    SaliencyMethod method = SaliencyMethod::max;
    std::vector<double> scores;
};

// order[0] is the most salient neuron.
struct SaliencyRanking {
    ConceptId label = 0;
    SaliencyMethod method = SaliencyMethod::max;
    std::vector<std::uint32_t> order;
    std::vector<double> scores;
};

void to_json(nlohmann::json& j, const SaliencyRanking& r);
void from_json(const nlohmann::json& j, SaliencyRanking& r);

// concept,method,rank,neuron,score
std::string ranking_csv(std::span<const SaliencyRanking> rankings);

// Column-wise mean of |activation| over the concept's rows.
SaliencyScores max_scores(const ConceptMatrix& matrix);

struct ProbeConfig {
    double l1 = 1e-4;
    double l2 = 1e-4;
    std::uint32_t epochs = 500;
    std::uint64_t seed = 0;
};

// Linear softmax probe over hidden states. weights is |C| x d row-major.
struct ProbeModel {
    std::size_t num_classes = 0;
    std::size_t dim = 0;
    std::vector<double> weights;
    std::vector<double> bias;
    double l1 = 0.0;
    double l2 = 0.0;
    double initial_loss = 0.0;
    double final_loss = 0.0;
    std::vector<double> loss_trace;

    std::span<const double> row(ConceptId c) const { return {weights.data() + c * dim, dim}; }
    ConceptId predict(std::span<const double> x) const;
};

// Flattened training data for the probe.
struct ProbeData {
    std::size_t n = 0;
    std::size_t dim = 0;
    std::size_t num_classes = 0;
    std::vector<double> x;
    std::vector<ConceptId> y;
};

ProbeData probe_data(const std::map<ConceptId, ConceptMatrix>& parts);

// Mean cross-entropy + l1 * sum|W| + l2 * sum W^2 (bias unpenalised).
// When the gradient spans are non-empty they receive the gradient, using
// sign(0) = 0 for the l1 term.
double probe_objective(const ProbeData& data, std::span<const double> weights, std::span<const double> bias,
                       double l1, double l2, std::span<double> grad_weights = {}, std::span<double> grad_bias = {});

// Full-batch proximal gradient descent with a fixed 1/L step.
ProbeModel probe_train(const std::map<ConceptId, ConceptMatrix>& parts, const ProbeConfig& config);

// |W[c, j]| for each neuron j.
SaliencyScores probe_scores(const ProbeModel& probe, ConceptId label);

// r_j = sum over unordered concept pairs of |q(c)_j - q(c')_j|. The result is
// the same for every concept; `label` is only stamped on the output.
SaliencyScores probeless_scores(const std::map<ConceptId, std::vector<double>>& class_means, ConceptId label = 0);

// Descending by score, ties broken by the lower neuron index.
SaliencyRanking rank(const SaliencyScores& scores);

// The first ceil(p * d) neurons of the ranking, p in (0, 1].
std::vector<std::uint32_t> top_fraction(const SaliencyRanking& ranking, double p);
std::size_t top_count(std::size_t d, double p);

// |A n B| / |A| for equal-size, non-empty sets.
double overlap(std::span<const std::uint32_t> a, std::span<const std::uint32_t> b);

// Ranking for one concept at one layer of an activation set.
SaliencyRanking compute_ranking(const ActivationSet& set, std::uint32_t layer, ConceptId label,
                                SaliencyMethod method, const ProbeConfig& probe = {});

} // namespace neuronlens
