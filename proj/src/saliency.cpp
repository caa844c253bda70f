#include "neuronlens/saliency.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "neuronlens/error.hpp"

namespace neuronlens {

using nlohmann::json;

const char* to_string(SaliencyMethod method) {
    switch (method) {
    case SaliencyMethod::max:
        return "max";
    case SaliencyMethod::probe:
        return "probe";
    case SaliencyMethod::probeless:
        return "probeless";
    }
    return "?";
}

SaliencyMethod saliency_method_from_string(const std::string& name) {
    if (name == "max") {
        return SaliencyMethod::max;
    }
    if (name == "probe") {
        return SaliencyMethod::probe;
    }
    if (name == "probeless") {
        return SaliencyMethod::probeless;
    }
    throw ValidationError("method", "expected max, probe or probeless, got '" + name + "'");
}

void to_json(json& j, const SaliencyRanking& r) {
    j = json{{"method", to_string(r.method)}, {"concept", r.label}, {"order", r.order}, {"scores", r.scores}};
}

void from_json(const json& j, SaliencyRanking& r) {
    r.method = saliency_method_from_string(j.at("method").get<std::string>());
    j.at("concept").get_to(r.label);
    j.at("order").get_to(r.order);
    j.at("scores").get_to(r.scores);
}

std::string ranking_csv(std::span<const SaliencyRanking> rankings) {
    std::ostringstream out;
    out.precision(17);
    out << "concept,method,rank,neuron,score\n";
    for (const auto& r : rankings) {
        for (std::size_t k = 0; k < r.order.size(); ++k) {
            out << r.label << ',' << to_string(r.method) << ',' << k << ',' << r.order[k] << ','
                << r.scores.at(r.order[k]) << '\n';
        }
    }
    return out.str();
}

SaliencyScores max_scores(const ConceptMatrix& matrix) {
    if (matrix.rows == 0) {
        throw ValidationError("concept", "max saliency of an empty matrix");
    }
    SaliencyScores out{matrix.label, SaliencyMethod::max, std::vector<double>(matrix.cols, 0.0)};
    for (std::size_t i = 0; i < matrix.rows; ++i) {
        const auto row = matrix.row(i);
        for (std::size_t j = 0; j < matrix.cols; ++j) {
            out.scores[j] += std::abs(row[j]);
        }
    }
    for (auto& s : out.scores) {
        s /= static_cast<double>(matrix.rows);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Probe

ConceptId ProbeModel::predict(std::span<const double> x) const {
    ConceptId best = 0;
    double best_logit = -INFINITY;
    for (std::size_t c = 0; c < num_classes; ++c) {
        double z = bias[c];
        const auto w = row(static_cast<ConceptId>(c));
        for (std::size_t j = 0; j < dim; ++j) {
            z += w[j] * x[j];
        }
        if (z > best_logit) {
            best_logit = z;
            best = static_cast<ConceptId>(c);
        }
    }
    return best;
}

ProbeData probe_data(const std::map<ConceptId, ConceptMatrix>& parts) {
    ProbeData data;
    if (parts.size() < 2) {
        throw ValidationError("concepts", "probe needs at least two concepts");
    }
    data.num_classes = parts.rbegin()->first + 1;
    data.dim = parts.begin()->second.cols;
    for (const auto& [c, m] : parts) {
        if (m.cols != data.dim) {
            throw ValidationError("vector", "inconsistent hidden dimension across concepts");
        }
        data.x.insert(data.x.end(), m.values.begin(), m.values.end());
        data.y.insert(data.y.end(), m.rows, c);
        data.n += m.rows;
    }
    if (data.n == 0) {
        throw ValidationError("concepts", "probe needs at least one record");
    }
    return data;
}

double probe_objective(const ProbeData& data, std::span<const double> weights, std::span<const double> bias,
                       double l1, double l2, std::span<double> grad_weights, std::span<double> grad_bias) {
    const std::size_t C = data.num_classes;
    const std::size_t d = data.dim;
    const bool want_grad = !grad_weights.empty();
    if (want_grad) {
        std::fill(grad_weights.begin(), grad_weights.end(), 0.0);
        std::fill(grad_bias.begin(), grad_bias.end(), 0.0);
    }
    const double inv_n = 1.0 / static_cast<double>(data.n);
    std::vector<double> z(C);
    double loss = 0.0;
    for (std::size_t i = 0; i < data.n; ++i) {
        const double* x = data.x.data() + i * d;
        for (std::size_t c = 0; c < C; ++c) {
            double acc = bias[c];
            const double* w = weights.data() + c * d;
            for (std::size_t j = 0; j < d; ++j) {
                acc += w[j] * x[j];
            }
            z[c] = acc;
        }
        const double mx = *std::max_element(z.begin(), z.end());
        double total = 0.0;
        for (auto& v : z) {
            v = std::exp(v - mx);
            total += v;
        }
        const auto y = data.y[i];
        loss -= inv_n * (std::log(z[y] / total));
        if (want_grad) {
            for (std::size_t c = 0; c < C; ++c) {
                const double g = inv_n * (z[c] / total - (c == y ? 1.0 : 0.0));
                grad_bias[c] += g;
                double* gw = grad_weights.data() + c * d;
                for (std::size_t j = 0; j < d; ++j) {
                    gw[j] += g * x[j];
                }
            }
        }
    }
    for (std::size_t k = 0; k < weights.size(); ++k) {
        const double w = weights[k];
        loss += l1 * std::abs(w) + l2 * w * w;
        if (want_grad) {
            const double sign = w > 0.0 ? 1.0 : (w < 0.0 ? -1.0 : 0.0);
            grad_weights[k] += l1 * sign + 2.0 * l2 * w;
        }
    }
    return loss;
}

ProbeModel probe_train(const std::map<ConceptId, ConceptMatrix>& parts, const ProbeConfig& config) {
    if (config.l1 < 0.0 || config.l2 < 0.0) {
        throw ValidationError("lambda", "regularisation strengths must be non-negative");
    }
    const ProbeData data = probe_data(parts);
    const std::size_t C = data.num_classes;
    const std::size_t d = data.dim;

    ProbeModel probe;
    probe.num_classes = C;
    probe.dim = d;
    probe.l1 = config.l1;
    probe.l2 = config.l2;
    probe.weights.resize(C * d);
    probe.bias.assign(C, 0.0);
    std::mt19937_64 rng(config.seed);
    std::normal_distribution<double> normal(0.0, 1e-3);
    for (auto& w : probe.weights) {
        w = normal(rng);
    }

    // The softmax cross-entropy Hessian is bounded by 0.5 * E[x x^T] per
    // class block, so 1/L with L = 0.5 * E|x~|^2 + 2 * l2 guarantees descent.
    double mean_sq = 0.0;
    for (std::size_t i = 0; i < data.n; ++i) {
        double s = 1.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double v = data.x[i * d + j];
            s += v * v;
        }
        mean_sq += s;
    }
    mean_sq /= static_cast<double>(data.n);
    const double step = 1.0 / (0.5 * mean_sq + 2.0 * config.l2);

    std::vector<double> gw(C * d), gb(C);
    probe.initial_loss = probe_objective(data, probe.weights, probe.bias, config.l1, config.l2);
    probe.loss_trace.push_back(probe.initial_loss);
    for (std::uint32_t epoch = 0; epoch < config.epochs; ++epoch) {
        // Gradient of the smooth part only; the l1 term goes through the prox.
        probe_objective(data, probe.weights, probe.bias, 0.0, config.l2, gw, gb);
        const double shrink = step * config.l1;
        for (std::size_t k = 0; k < probe.weights.size(); ++k) {
            const double w = probe.weights[k] - step * gw[k];
            probe.weights[k] = std::copysign(std::max(std::abs(w) - shrink, 0.0), w);
        }
        for (std::size_t c = 0; c < C; ++c) {
            probe.bias[c] -= step * gb[c];
        }
        const double loss = probe_objective(data, probe.weights, probe.bias, config.l1, config.l2);
        if (!std::isfinite(loss)) {
            throw NumericalError("probe training diverged at epoch " + std::to_string(epoch));
        }
        probe.loss_trace.push_back(loss);
    }
    probe.final_loss = probe.loss_trace.back();
    return probe;
}

SaliencyScores probe_scores(const ProbeModel& probe, ConceptId label) {
    if (label >= probe.num_classes) {
        throw ValidationError("concept", "concept " + std::to_string(label) + " not in probe");
    }
    SaliencyScores out{label, SaliencyMethod::probe, {}};
    for (double w : probe.row(label)) {
        out.scores.push_back(std::abs(w));
    }
    return out;
}

SaliencyScores probeless_scores(const std::map<ConceptId, std::vector<double>>& class_means, ConceptId label) {
    if (class_means.size() < 2) {
        throw ValidationError("concepts", "probeless saliency needs at least two concepts");
    }
    const std::size_t d = class_means.begin()->second.size();
    SaliencyScores out{label, SaliencyMethod::probeless, std::vector<double>(d, 0.0)};
    for (auto a = class_means.begin(); a != class_means.end(); ++a) {
        if (a->second.size() != d) {
            throw ValidationError("vector", "class means differ in length");
        }
        for (auto b = std::next(a); b != class_means.end(); ++b) {
            for (std::size_t j = 0; j < d; ++j) {
                out.scores[j] += std::abs(a->second[j] - b->second[j]);
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Rankings

SaliencyRanking rank(const SaliencyScores& scores) {
    for (double s : scores.scores) {
        if (!std::isfinite(s)) {
            throw NumericalError("saliency scores must be finite");
        }
    }
    SaliencyRanking out{scores.label, scores.method, {}, scores.scores};
    out.order.resize(scores.scores.size());
    std::iota(out.order.begin(), out.order.end(), 0u);
    std::stable_sort(out.order.begin(), out.order.end(),
                     [&](std::uint32_t a, std::uint32_t b) { return scores.scores[a] > scores.scores[b]; });
    return out;
}

std::size_t top_count(std::size_t d, double p) {
    if (!(p > 0.0 && p <= 1.0)) {
        throw ValidationError("fraction", "must lie in (0, 1]");
    }
    // Absorb representation error so that e.g. 0.3 * 10 selects 3, not 4.
    const double exact = p * static_cast<double>(d);
    const auto k = static_cast<std::size_t>(std::ceil(exact - 1e-9 * std::max(1.0, exact)));
    return std::clamp<std::size_t>(k, 1, d);
}

std::vector<std::uint32_t> top_fraction(const SaliencyRanking& ranking, double p) {
    const auto k = top_count(ranking.order.size(), p);
    return {ranking.order.begin(), ranking.order.begin() + static_cast<std::ptrdiff_t>(k)};
}

double overlap(std::span<const std::uint32_t> a, std::span<const std::uint32_t> b) {
    if (a.empty() || a.size() != b.size()) {
        throw ValidationError("sets", "overlap needs non-empty sets of equal size");
    }
    std::vector<std::uint32_t> sa(a.begin(), a.end()), sb(b.begin(), b.end());
    std::sort(sa.begin(), sa.end());
    std::sort(sb.begin(), sb.end());
    std::vector<std::uint32_t> common;
    std::set_intersection(sa.begin(), sa.end(), sb.begin(), sb.end(), std::back_inserter(common));
    return static_cast<double>(common.size()) / static_cast<double>(a.size());
}

SaliencyRanking compute_ranking(const ActivationSet& set, std::uint32_t layer, ConceptId label,
                                SaliencyMethod method, const ProbeConfig& probe) {
    if (label >= set.num_concepts()) {
        throw ValidationError("concept", "unknown concept " + std::to_string(label));
    }
    const auto parts = partition(set, layer);
    switch (method) {
    case SaliencyMethod::max:
        return rank(max_scores(parts.at(label)));
    case SaliencyMethod::probe:
        return rank(probe_scores(probe_train(parts, probe), label));
    case SaliencyMethod::probeless: {
        std::map<ConceptId, std::vector<double>> means;
        for (const auto& [c, m] : parts) {
            means[c] = class_mean(m);
        }
        return rank(probeless_scores(means, label));
    }
    }
    throw ValidationError("method", "unknown saliency method");
}

} // namespace neuronlens
