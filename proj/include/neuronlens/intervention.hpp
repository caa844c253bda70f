#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "neuronlens/activation_store.hpp"
#include "neuronlens/model.hpp"
#include "neuronlens/saliency.hpp"

namespace neuronlens {

constexpr double kDefaultTau = 2.5;
constexpr double kDefaultAlpha = 0.125;
constexpr double kDefaultBeta = 0.5;

// Closed interval [mu - tau * sigma, mu + tau * sigma].
struct CorrelatedRange {
    double lo = 0.0;
    double hi = 0.0;
    double mu = 0.0;
    double sigma = 0.0;
    double tau = kDefaultTau;

    bool contains(double x) const noexcept { return lo <= x && x <= hi; }
};

CorrelatedRange correlated_range(double mu, double sigma, double tau = kDefaultTau);

// Mass of N(mu, sigma^2) inside the range: 2 * Phi(tau) - 1.
double gaussian_coverage(double tau);

double phi_zero(double x);
double phi_damp(double x, double alpha);
double phi_mean(double x, double mu_ref);
// beta * |x - mu| / (tau * sigma) * x. At the default tau = 2.5 the scale
// reaches beta exactly on the range boundary. sigma must be positive.
double phi_adaptive(double x, double mu, double sigma, double beta, double tau = kDefaultTau);

enum class Scope : std::uint8_t { neuron, range };
enum class InterventionFunction : std::uint8_t { zero, damp, mean, adaptive };

const char* to_string(Scope scope);
const char* to_string(InterventionFunction function);
Scope scope_from_string(const std::string& name);
InterventionFunction intervention_function_from_string(const std::string& name);

struct NeuronParams {
    std::uint32_t j = 0;
    double mu = 0.0;
    double sigma = 0.0;
    // Replacement value for the mean function.
    double mu_ref = 0.0;

    bool operator==(const NeuronParams&) const = default;
};

struct InterventionPolicy {
    Scope scope = Scope::range;
    InterventionFunction function = InterventionFunction::zero;
    double alpha = kDefaultAlpha;
    double beta = kDefaultBeta;
    double tau = kDefaultTau;
    ConceptId label = 0;
    std::uint32_t layer = 1;
    std::uint32_t hidden_dim = 0;
    // Fraction of the ranking the neuron set was cut from; descriptive only.
    double fraction = 0.0;
    std::vector<NeuronParams> neurons;
    // Split the statistics were estimated on.
    Split provenance = Split::train;

    // Throws ValidationError on out-of-range parameters, duplicate or
    // out-of-bounds neurons, and adaptive dampening under neuron scope.
    void validate() const;
    CorrelatedRange range(const NeuronParams& p) const { return correlated_range(p.mu, p.sigma, tau); }

    bool operator==(const InterventionPolicy&) const = default;
};

void to_json(nlohmann::json& j, const InterventionPolicy& p);
void from_json(const nlohmann::json& j, InterventionPolicy& p);

// j,mu,sigma,lo,hi,mu_ref per selected neuron.
std::string policy_csv(const InterventionPolicy& p);

// Value of the policy's function at x for one selected neuron.
double intervene(const InterventionPolicy& policy, const NeuronParams& p, double x);

// Rewrites the selected coordinates in place. Under range scope a coordinate
// is only rewritten when it lies inside its correlated range.
void apply_inplace(std::span<double> h, const InterventionPolicy& policy);
std::vector<double> apply(std::span<const double> h, const InterventionPolicy& policy);

HookSpec intervention_hook(const InterventionPolicy& policy);

struct PolicyOptions {
    Scope scope = Scope::range;
    InterventionFunction function = InterventionFunction::zero;
    double alpha = kDefaultAlpha;
    double beta = kDefaultBeta;
    double tau = kDefaultTau;
    // Top fraction of the ranking to select; 0 selects nothing.
    double fraction = 0.5;
};

// Per-neuron (mu, sigma) come from the target concept's activations in
// `stats`; mu_ref is the per-neuron mean pooled over every concept in it.
InterventionPolicy build_policy(const ActivationSet& stats, std::uint32_t layer, const SaliencyRanking& ranking,
                                const PolicyOptions& options);

// Correlated ranges of the policy's neurons, in selection order.
std::vector<CorrelatedRange> policy_ranges(const InterventionPolicy& policy);

} // namespace neuronlens
