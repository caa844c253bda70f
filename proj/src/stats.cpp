#include "neuronlens/stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include <nlohmann/json.hpp>

#include "neuronlens/error.hpp"

namespace neuronlens {

using nlohmann::json;

namespace {

struct CentralMoments {
    double mean = 0.0;
    double m2 = 0.0;
    double m3 = 0.0;
    double m4 = 0.0;
};

CentralMoments central_moments(std::span<const double> x) {
    CentralMoments m;
    const double n = static_cast<double>(x.size());
    for (double v : x) {
        m.mean += v;
    }
    m.mean /= n;
    for (double v : x) {
        const double c = v - m.mean;
        const double c2 = c * c;
        m.m2 += c2;
        m.m3 += c2 * c;
        m.m4 += c2 * c2;
    }
    m.m2 /= n;
    m.m3 /= n;
    m.m4 /= n;
    return m;
}

void require_shape(std::span<const double> x, std::size_t min_n, const char* what) {
    if (x.size() < min_n) {
        throw ValidationError("sample", std::string(what) + " needs at least " + std::to_string(min_n) +
                                            " values, got " + std::to_string(x.size()));
    }
}

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

} // namespace

GaussianParams gaussian_params(std::span<const double> sample) {
    require_shape(sample, 1, "gaussian_params");
    const auto m = central_moments(sample);
    return {m.mean, std::sqrt(m.m2), sample.size()};
}

double skewness(std::span<const double> sample) {
    require_shape(sample, 3, "skewness");
    const auto m = central_moments(sample);
    if (m.m2 <= 0.0) {
        throw NumericalError("skewness of a zero-variance sample");
    }
    return m.m3 / std::pow(m.m2, 1.5);
}

double kurtosis(std::span<const double> sample) {
    require_shape(sample, 3, "kurtosis");
    const auto m = central_moments(sample);
    if (m.m2 <= 0.0) {
        throw NumericalError("kurtosis of a zero-variance sample");
    }
    return m.m4 / (m.m2 * m.m2);
}

double standard_normal_cdf(double x) {
    return 0.5 * std::erfc(-x / std::numbers::sqrt2);
}

double ks_statistic(std::span<const double> sample) {
    require_shape(sample, 2, "ks_statistic");
    const auto p = gaussian_params(sample);
    if (p.stddev <= 0.0) {
        throw NumericalError("KS statistic of a zero-variance sample");
    }
    std::vector<double> z(sample.begin(), sample.end());
    for (auto& v : z) {
        v = (v - p.mean) / p.stddev;
    }
    std::sort(z.begin(), z.end());
    const double n = static_cast<double>(z.size());
    double d = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        const double cdf = standard_normal_cdf(z[i]);
        const double below = static_cast<double>(i) / n;
        const double above = static_cast<double>(i + 1) / n;
        d = std::max({d, std::abs(cdf - below), std::abs(cdf - above)});
    }
    return std::min(d, 1.0);
}

NormalityDiagnostics diagnose(std::span<const double> sample, double threshold) {
    NormalityDiagnostics out;
    const auto m = central_moments(sample);
    if (sample.size() < 3 || m.m2 <= 0.0) {
        out.skewness = kNaN;
        out.kurtosis = kNaN;
        if (sample.size() >= 2 && m.m2 > 0.0) {
            out.ks = ks_statistic(sample);
        }
    } else {
        out.skewness = m.m3 / std::pow(m.m2, 1.5);
        out.kurtosis = m.m4 / (m.m2 * m.m2);
        out.ks = ks_statistic(sample);
    }
    out.practically_normal = m.m2 > 0.0 && out.ks < threshold;
    return out;
}

std::vector<NeuronConceptStats> layer_statistics(const ActivationSet& set, std::uint32_t layer, double threshold) {
    const auto parts = partition(set, layer);
    std::vector<NeuronConceptStats> out;
    for (std::uint32_t j = 0; j < set.hidden_dim(); ++j) {
        for (const auto& [c, m] : parts) {
            if (m.rows < 2) {
                continue;
            }
            const auto col = m.column(j);
            out.push_back({layer, j, c, gaussian_params(col), diagnose(col, threshold)});
        }
    }
    return out;
}

LayerSummary summarize(std::span<const NeuronConceptStats> stats) {
    LayerSummary s;
    if (stats.empty()) {
        throw ValidationError("layer", "no (neuron, concept) pairs to summarise");
    }
    s.layer = stats.front().layer;
    s.pairs = stats.size();
    std::size_t moments = 0;
    std::size_t normal = 0;
    for (const auto& e : stats) {
        if (std::isfinite(e.normality.skewness)) {
            s.mean_abs_skewness += std::abs(e.normality.skewness);
            s.mean_kurtosis += e.normality.kurtosis;
            ++moments;
        }
        s.mean_ks += e.normality.ks;
        normal += e.normality.practically_normal ? 1 : 0;
    }
    if (moments > 0) {
        s.mean_abs_skewness /= static_cast<double>(moments);
        s.mean_kurtosis /= static_cast<double>(moments);
    } else {
        s.mean_abs_skewness = kNaN;
        s.mean_kurtosis = kNaN;
    }
    s.mean_ks /= static_cast<double>(stats.size());
    s.practical_normality = static_cast<double>(normal) / static_cast<double>(stats.size());
    return s;
}

double practical_normality_fraction(const ActivationSet& set, std::uint32_t layer, double threshold) {
    const auto stats = layer_statistics(set, layer, threshold);
    if (stats.empty()) {
        throw ValidationError("layer", "no (neuron, concept) pairs with at least two records at layer " +
                                           std::to_string(layer));
    }
    return summarize(stats).practical_normality;
}

std::string stats_csv(std::span<const NeuronConceptStats> stats) {
    std::ostringstream out;
    out.precision(17);
    out << "layer,neuron,concept,mu,sigma,n,skew,kurt,ks,normal\n";
    for (const auto& s : stats) {
        out << s.layer << ',' << s.neuron << ',' << s.label << ',' << s.params.mean << ',' << s.params.stddev << ','
            << s.params.n << ',' << s.normality.skewness << ',' << s.normality.kurtosis << ',' << s.normality.ks << ','
            << (s.normality.practically_normal ? "true" : "false") << '\n';
    }
    return out.str();
}

namespace {

json finite_or_null(double v) {
    return std::isfinite(v) ? json(v) : json(nullptr);
}

} // namespace

void to_json(json& j, const LayerSummary& s) {
    j = json{{"layer", s.layer},
             {"pairs", s.pairs},
             {"mean_abs_skewness", finite_or_null(s.mean_abs_skewness)},
             {"mean_kurtosis", finite_or_null(s.mean_kurtosis)},
             {"mean_ks", s.mean_ks},
             {"practical_normality", s.practical_normality}};
}

void to_json(json& j, const NeuronConceptStats& s) {
    j = json{{"layer", s.layer},
             {"neuron", s.neuron},
             {"concept", s.label},
             {"mu", s.params.mean},
             {"sigma", s.params.stddev},
             {"n", s.params.n},
             {"skew", finite_or_null(s.normality.skewness)},
             {"kurt", finite_or_null(s.normality.kurtosis)},
             {"ks", s.normality.ks},
             {"normal", s.normality.practically_normal}};
}

// ---------------------------------------------------------------------------
// Distribution exports

double silverman_bandwidth(std::span<const double> sample) {
    require_shape(sample, 1, "silverman_bandwidth");
    const auto p = gaussian_params(sample);
    std::vector<double> sorted(sample.begin(), sample.end());
    std::sort(sorted.begin(), sorted.end());
    auto quantile = [&](double q) {
        const double pos = q * static_cast<double>(sorted.size() - 1);
        const auto lo = static_cast<std::size_t>(std::floor(pos));
        const auto hi = std::min(lo + 1, sorted.size() - 1);
        return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
    };
    const double iqr = quantile(0.75) - quantile(0.25);
    double spread = p.stddev;
    if (iqr > 0.0) {
        spread = std::min(spread, iqr / 1.34);
    }
    return 0.9 * spread * std::pow(static_cast<double>(sample.size()), -0.2);
}

std::vector<double> kernel_density(std::span<const double> sample, double bandwidth, std::span<const double> grid) {
    if (!(bandwidth > 0.0)) {
        throw ValidationError("bandwidth", "must be positive");
    }
    require_shape(sample, 1, "kernel_density");
    const double norm = 1.0 / (static_cast<double>(sample.size()) * bandwidth * std::sqrt(2.0 * std::numbers::pi));
    std::vector<double> out(grid.size(), 0.0);
    for (std::size_t g = 0; g < grid.size(); ++g) {
        double acc = 0.0;
        for (double x : sample) {
            const double u = (grid[g] - x) / bandwidth;
            acc += std::exp(-0.5 * u * u);
        }
        out[g] = acc * norm;
    }
    return out;
}

double trapezoid(std::span<const double> x, std::span<const double> y) {
    double total = 0.0;
    for (std::size_t i = 1; i < x.size(); ++i) {
        total += 0.5 * (x[i] - x[i - 1]) * (y[i] + y[i - 1]);
    }
    return total;
}

std::vector<DistributionExport> distribution_export(const ActivationSet& set, std::uint32_t layer,
                                                    std::uint32_t neuron, std::span<const ConceptId> concepts,
                                                    std::size_t bins, std::size_t grid_points) {
    if (neuron >= set.hidden_dim()) {
        throw ValidationError("neuron", "neuron " + std::to_string(neuron) + " >= hidden dimension " +
                                            std::to_string(set.hidden_dim()));
    }
    if (bins < 1) {
        throw ValidationError("bins", "must be >= 1");
    }
    if (grid_points < 2) {
        throw ValidationError("grid_points", "must be >= 2");
    }
    const auto parts = partition(set, layer);
    std::vector<ConceptId> wanted(concepts.begin(), concepts.end());
    if (wanted.empty()) {
        for (const auto& [c, m] : parts) {
            wanted.push_back(c);
        }
    }
    std::vector<DistributionExport> out;
    for (auto c : wanted) {
        const auto it = parts.find(c);
        if (it == parts.end()) {
            throw ValidationError("concept", "unknown concept " + std::to_string(c));
        }
        if (it->second.rows == 0) {
            throw ValidationError("concept", "concept " + std::to_string(c) + " has no records");
        }
        const auto col = it->second.column(neuron);
        DistributionExport e;
        e.layer = layer;
        e.neuron = neuron;
        e.label = c;
        e.params = gaussian_params(col);
        // A constant sample gets a unit-scale kernel so the export stays well defined.
        e.bandwidth = e.params.stddev > 0.0 ? silverman_bandwidth(col) : 1.0;
        if (!(e.bandwidth > 0.0)) {
            e.bandwidth = e.params.stddev;
        }
        const auto [lo_it, hi_it] = std::minmax_element(col.begin(), col.end());
        const double pad = std::max(e.params.stddev, 4.0 * e.bandwidth);
        const double lo = *lo_it - pad;
        const double hi = *hi_it + pad;

        e.bin_edges.resize(bins + 1);
        for (std::size_t b = 0; b <= bins; ++b) {
            e.bin_edges[b] = lo + (hi - lo) * static_cast<double>(b) / static_cast<double>(bins);
        }
        e.counts.assign(bins, 0);
        for (double v : col) {
            auto b = static_cast<std::size_t>((v - lo) / (hi - lo) * static_cast<double>(bins));
            ++e.counts[std::min(b, bins - 1)];
        }

        e.grid.resize(grid_points);
        for (std::size_t g = 0; g < grid_points; ++g) {
            e.grid[g] = lo + (hi - lo) * static_cast<double>(g) / static_cast<double>(grid_points - 1);
        }
        e.density = kernel_density(col, e.bandwidth, e.grid);
        out.push_back(std::move(e));
    }
    return out;
}

void to_json(json& j, const DistributionExport& e) {
    j = json{{"layer", e.layer},         {"neuron", e.neuron},       {"concept", e.label},
             {"mu", e.params.mean},      {"sigma", e.params.stddev}, {"n", e.params.n},
             {"bin_edges", e.bin_edges}, {"counts", e.counts},       {"bandwidth", e.bandwidth},
             {"grid", e.grid},           {"density", e.density}};
}

std::string distribution_csv(std::span<const DistributionExport> exports) {
    std::ostringstream out;
    out.precision(17);
    out << "concept,neuron,series,x,value\n";
    for (const auto& e : exports) {
        for (std::size_t b = 0; b < e.counts.size(); ++b) {
            out << e.label << ',' << e.neuron << ",hist," << 0.5 * (e.bin_edges[b] + e.bin_edges[b + 1]) << ','
                << e.counts[b] << '\n';
        }
        for (std::size_t g = 0; g < e.grid.size(); ++g) {
            out << e.label << ',' << e.neuron << ",kde," << e.grid[g] << ',' << e.density[g] << '\n';
        }
    }
    return out.str();
}

} // namespace neuronlens
