#include "neuronlens/intervention.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "neuronlens/error.hpp"
#include "neuronlens/stats.hpp"

namespace neuronlens {

using nlohmann::json;

CorrelatedRange correlated_range(double mu, double sigma, double tau) {
    if (!(sigma >= 0.0)) {
        throw ValidationError("sigma", "must be non-negative");
    }
    if (!(tau >= 0.0)) {
        throw ValidationError("tau", "must be non-negative");
    }
    return {mu - tau * sigma, mu + tau * sigma, mu, sigma, tau};
}

double gaussian_coverage(double tau) {
    return 2.0 * standard_normal_cdf(tau) - 1.0;
}

double phi_zero(double) {
    return 0.0;
}

double phi_damp(double x, double alpha) {
    return alpha * x;
}

double phi_mean(double, double mu_ref) {
    return mu_ref;
}

double phi_adaptive(double x, double mu, double sigma, double beta, double tau) {
    if (!(sigma > 0.0)) {
        throw NumericalError("adaptive dampening needs sigma > 0");
    }
    if (!(tau > 0.0)) {
        throw ValidationError("tau", "adaptive dampening needs tau > 0");
    }
    return beta * (std::abs(x - mu) / (tau * sigma)) * x;
}

const char* to_string(Scope scope) {
    return scope == Scope::neuron ? "neuron" : "range";
}

const char* to_string(InterventionFunction function) {
    switch (function) {
    case InterventionFunction::zero:
        return "zero";
    case InterventionFunction::damp:
        return "damp";
    case InterventionFunction::mean:
        return "mean";
    case InterventionFunction::adaptive:
        return "adaptive";
    }
    return "?";
}

Scope scope_from_string(const std::string& name) {
    if (name == "neuron") {
        return Scope::neuron;
    }
    if (name == "range") {
        return Scope::range;
    }
    throw ValidationError("scope", "expected neuron or range, got '" + name + "'");
}

InterventionFunction intervention_function_from_string(const std::string& name) {
    if (name == "zero") {
        return InterventionFunction::zero;
    }
    if (name == "damp") {
        return InterventionFunction::damp;
    }
    if (name == "mean") {
        return InterventionFunction::mean;
    }
    if (name == "adaptive") {
        return InterventionFunction::adaptive;
    }
    throw ValidationError("function", "expected zero, damp, mean or adaptive, got '" + name + "'");
}

void InterventionPolicy::validate() const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) {
        throw ValidationError("alpha", "must lie in [0, 1]");
    }
    if (!(beta >= 0.0 && beta <= 1.0)) {
        throw ValidationError("beta", "must lie in [0, 1]");
    }
    if (!(tau >= 0.0) || !std::isfinite(tau)) {
        throw ValidationError("tau", "must be finite and non-negative");
    }
    if (layer < 1) {
        throw ValidationError("layer", "layers are 1-based");
    }
    if (function == InterventionFunction::adaptive) {
        if (scope == Scope::neuron) {
            throw ValidationError("function", "adaptive dampening is only defined under range scope");
        }
        if (!(tau > 0.0)) {
            throw ValidationError("tau", "adaptive dampening needs tau > 0");
        }
    }
    std::unordered_set<std::uint32_t> seen;
    for (const auto& n : neurons) {
        if (hidden_dim != 0 && n.j >= hidden_dim) {
            throw ValidationError("neurons", "neuron " + std::to_string(n.j) + " >= hidden dimension " +
                                                 std::to_string(hidden_dim));
        }
        if (!seen.insert(n.j).second) {
            throw ValidationError("neurons", "neuron " + std::to_string(n.j) + " selected twice");
        }
        if (!std::isfinite(n.mu) || !std::isfinite(n.mu_ref) || !(n.sigma >= 0.0) || !std::isfinite(n.sigma)) {
            throw ValidationError("neurons", "neuron " + std::to_string(n.j) + " has invalid parameters");
        }
        if (function == InterventionFunction::adaptive && !(n.sigma > 0.0)) {
            throw NumericalError("adaptive dampening needs sigma > 0 (neuron " + std::to_string(n.j) + ")");
        }
    }
}

void to_json(json& j, const InterventionPolicy& p) {
    json neurons = json::array();
    for (const auto& n : p.neurons) {
        neurons.push_back({{"j", n.j}, {"mu", n.mu}, {"sigma", n.sigma}, {"mu_ref", n.mu_ref}});
    }
    j = json{{"scope", to_string(p.scope)},
             {"function", to_string(p.function)},
             {"alpha", p.alpha},
             {"beta", p.beta},
             {"tau", p.tau},
             {"concept", p.label},
             {"layer", p.layer},
             {"hidden_dim", p.hidden_dim},
             {"fraction", p.fraction},
             {"provenance", to_string(p.provenance)},
             {"neurons", std::move(neurons)}};
}

void from_json(const json& j, InterventionPolicy& p) {
    p = InterventionPolicy{};
    p.scope = scope_from_string(j.at("scope").get<std::string>());
    p.function = intervention_function_from_string(j.at("function").get<std::string>());
    p.alpha = j.value("alpha", kDefaultAlpha);
    p.beta = j.value("beta", kDefaultBeta);
    p.tau = j.value("tau", kDefaultTau);
    j.at("concept").get_to(p.label);
    p.layer = j.value("layer", 1u);
    p.hidden_dim = j.value("hidden_dim", 0u);
    p.fraction = j.value("fraction", 0.0);
    // A policy without a provenance tag cannot be shown to be train-derived.
    p.provenance = split_from_string(j.value("provenance", std::string("eval")));
    for (const auto& n : j.at("neurons")) {
        NeuronParams np;
        n.at("j").get_to(np.j);
        n.at("mu").get_to(np.mu);
        n.at("sigma").get_to(np.sigma);
        np.mu_ref = n.value("mu_ref", np.mu);
        p.neurons.push_back(np);
    }
    p.validate();
}

std::string policy_csv(const InterventionPolicy& p) {
    std::ostringstream out;
    out.precision(17);
    out << "j,mu,sigma,lo,hi,mu_ref\n";
    for (const auto& n : p.neurons) {
        const auto r = p.range(n);
        out << n.j << ',' << n.mu << ',' << n.sigma << ',' << r.lo << ',' << r.hi << ',' << n.mu_ref << '\n';
    }
    return out.str();
}

double intervene(const InterventionPolicy& policy, const NeuronParams& p, double x) {
    switch (policy.function) {
    case InterventionFunction::zero:
        return phi_zero(x);
    case InterventionFunction::damp:
        return phi_damp(x, policy.alpha);
    case InterventionFunction::mean:
        return phi_mean(x, p.mu_ref);
    case InterventionFunction::adaptive:
        return phi_adaptive(x, p.mu, p.sigma, policy.beta, policy.tau);
    }
    return x;
}

void apply_inplace(std::span<double> h, const InterventionPolicy& policy) {
    if (policy.hidden_dim != 0 && h.size() != policy.hidden_dim) {
        throw ValidationError("hidden_dim", "policy built for d=" + std::to_string(policy.hidden_dim) +
                                                " applied to a vector of length " + std::to_string(h.size()));
    }
    for (const auto& p : policy.neurons) {
        if (p.j >= h.size()) {
            throw ValidationError("neurons", "neuron " + std::to_string(p.j) + " out of range");
        }
        double& x = h[p.j];
        if (policy.scope == Scope::neuron || policy.range(p).contains(x)) {
            x = intervene(policy, p, x);
        }
    }
}

std::vector<double> apply(std::span<const double> h, const InterventionPolicy& policy) {
    std::vector<double> out(h.begin(), h.end());
    apply_inplace(out, policy);
    return out;
}

HookSpec intervention_hook(const InterventionPolicy& policy) {
    policy.validate();
    return HookSpec{policy.layer, [&policy](std::span<double> h) { apply_inplace(h, policy); }};
}

InterventionPolicy build_policy(const ActivationSet& stats, std::uint32_t layer, const SaliencyRanking& ranking,
                                const PolicyOptions& options) {
    if (!(options.fraction >= 0.0 && options.fraction <= 1.0)) {
        throw ValidationError("fraction", "must lie in [0, 1]");
    }
    if (ranking.order.size() != stats.hidden_dim()) {
        throw ValidationError("ranking", "ranking covers " + std::to_string(ranking.order.size()) +
                                             " neurons, activations have " + std::to_string(stats.hidden_dim()));
    }
    if (ranking.label >= stats.num_concepts()) {
        throw ValidationError("concept", "unknown concept " + std::to_string(ranking.label));
    }
    stats.require_coverage(layer);

    InterventionPolicy policy;
    policy.scope = options.scope;
    policy.function = options.function;
    policy.alpha = options.alpha;
    policy.beta = options.beta;
    policy.tau = options.tau;
    policy.label = ranking.label;
    policy.layer = layer;
    policy.hidden_dim = stats.hidden_dim();
    policy.fraction = options.fraction;
    policy.provenance = stats.manifest().split;

    if (options.fraction > 0.0) {
        const auto parts = partition(stats, layer);
        const auto& target = parts.at(ranking.label);
        const auto reference = pooled_mean(stats, layer);
        for (auto j : top_fraction(ranking, options.fraction)) {
            const auto g = gaussian_params(target.column(j));
            policy.neurons.push_back({j, g.mean, g.stddev, reference[j]});
        }
    }
    policy.validate();
    return policy;
}

std::vector<CorrelatedRange> policy_ranges(const InterventionPolicy& policy) {
    std::vector<CorrelatedRange> out;
    out.reserve(policy.neurons.size());
    for (const auto& p : policy.neurons) {
        out.push_back(policy.range(p));
    }
    return out;
}

} // namespace neuronlens
