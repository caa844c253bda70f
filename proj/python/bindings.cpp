#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <nlohmann/json.hpp>

#include "neuronlens/error.hpp"
#include "neuronlens/eval.hpp"
#include "neuronlens/stats.hpp"

namespace py = pybind11;
using namespace neuronlens;

namespace {

// Structured results cross the boundary as plain dicts through their JSON form.
py::object to_python(const nlohmann::json& j) {
    const py::object loads = py::module_::import("json").attr("loads");
    return loads(j.dump());
}

nlohmann::json from_python(const py::object& o) {
    const py::object dumps = py::module_::import("json").attr("dumps");
    return nlohmann::json::parse(dumps(o).cast<std::string>());
}

template <class T>
py::object as_dict(const T& value) {
    return to_python(nlohmann::json(value));
}

std::vector<std::uint32_t> all_layers(const ActivationSet& set) {
    return set.manifest().layers;
}

py::array_t<double> matrix_array(const ConceptMatrix& m) {
    py::array_t<double> out({m.rows, m.cols});
    std::copy(m.values.begin(), m.values.end(), out.mutable_data());
    return out;
}

} // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Range-based neuron interpretation and concept erasure on a toy transformer";

    auto error = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
    py::register_exception<ValidationError>(m, "ValidationError", error.ptr());
    auto data = py::register_exception<DataError>(m, "DataError", error.ptr());
    py::register_exception<ChecksumError>(m, "ChecksumError", data.ptr());
    py::register_exception<NumericalError>(m, "NumericalError", error.ptr());

    py::enum_<Split>(m, "Split").value("train", Split::train).value("eval", Split::eval);
    py::enum_<Readout>(m, "Readout").value("first_token", Readout::first_token).value("last_token", Readout::last_token);
    py::enum_<SaliencyMethod>(m, "SaliencyMethod")
        .value("max", SaliencyMethod::max)
        .value("probe", SaliencyMethod::probe)
        .value("probeless", SaliencyMethod::probeless);
    py::enum_<Scope>(m, "Scope").value("neuron", Scope::neuron).value("range", Scope::range);
    py::enum_<InterventionFunction>(m, "InterventionFunction")
        .value("zero", InterventionFunction::zero)
        .value("damp", InterventionFunction::damp)
        .value("mean", InterventionFunction::mean)
        .value("adaptive", InterventionFunction::adaptive);

    // dataset
    py::class_<CorpusSpec>(m, "CorpusSpec")
        .def(py::init<>())
        .def_readwrite("num_concepts", &CorpusSpec::num_concepts)
        .def_readwrite("vocab_size", &CorpusSpec::vocab_size)
        .def_readwrite("seq_len", &CorpusSpec::seq_len)
        .def_readwrite("samples_per_concept", &CorpusSpec::samples_per_concept)
        .def_readwrite("separation", &CorpusSpec::separation)
        .def_readwrite("seed", &CorpusSpec::seed)
        .def_readwrite("disjoint_supports", &CorpusSpec::disjoint_supports)
        .def_readwrite("concentration", &CorpusSpec::concentration)
        .def("validate", &CorpusSpec::validate)
        .def("to_dict", &as_dict<CorpusSpec>);

    py::class_<LabeledSequence>(m, "LabeledSequence")
        .def(py::init<>())
        .def(py::init([](std::vector<TokenId> tokens, ConceptId label) { return LabeledSequence{std::move(tokens), label}; }),
             py::arg("tokens"), py::arg("label"))
        .def_readwrite("tokens", &LabeledSequence::tokens)
        .def_readwrite("label", &LabeledSequence::label);

    py::class_<Corpus>(m, "Corpus")
        .def_readonly("spec", &Corpus::spec)
        .def_readonly("class_distributions", &Corpus::class_distributions)
        .def_readonly("train", &Corpus::train)
        .def_readonly("eval", &Corpus::eval);

    m.def("generate", &generate, py::arg("spec"));
    m.def("save_corpus", [](const Corpus& c, const std::string& dir) { save_corpus(c, dir); });
    m.def("load_corpus", [](const std::string& dir) { return load_corpus(dir); });

    // model
    py::class_<ModelConfig>(m, "ModelConfig")
        .def(py::init<>())
        .def_readwrite("num_layers", &ModelConfig::num_layers)
        .def_readwrite("hidden_dim", &ModelConfig::hidden_dim)
        .def_readwrite("num_heads", &ModelConfig::num_heads)
        .def_readwrite("mlp_ratio", &ModelConfig::mlp_ratio)
        .def_readwrite("vocab_size", &ModelConfig::vocab_size)
        .def_readwrite("max_seq_len", &ModelConfig::max_seq_len)
        .def_readwrite("num_classes", &ModelConfig::num_classes)
        .def_readwrite("readout", &ModelConfig::readout)
        .def_readwrite("seed", &ModelConfig::seed)
        .def_readwrite("epochs", &ModelConfig::epochs)
        .def_readwrite("batch_size", &ModelConfig::batch_size)
        .def_readwrite("learning_rate", &ModelConfig::learning_rate)
        .def("validate", &ModelConfig::validate)
        .def("to_dict", &as_dict<ModelConfig>);

    py::class_<Model>(m, "Model")
        .def_static("initialize", &Model::initialize, py::arg("config"))
        .def_property_readonly("config", &Model::config)
        .def_property_readonly("parameters",
                               [](const Model& model) {
                                   const auto p = model.parameters();
                                   return py::array_t<double>(static_cast<py::ssize_t>(p.size()), p.data());
                               })
        .def("checksum", &Model::checksum)
        .def("__eq__", [](const Model& a, const Model& b) { return a == b; });

    py::class_<TrainResult>(m, "TrainResult")
        .def_readonly("model", &TrainResult::model)
        .def_readonly("epoch_loss", &TrainResult::epoch_loss)
        .def_readonly("train_accuracy", &TrainResult::train_accuracy)
        .def_readonly("eval_accuracy", &TrainResult::eval_accuracy);

    m.def("train", &train, py::arg("corpus"), py::arg("config"), py::call_guard<py::gil_scoped_release>());
    m.def("save_model", [](const Model& model, const std::string& path) { save_model(model, path); });
    m.def("load_model", [](const std::string& path) { return load_model(path); });
    m.def(
        "predict_proba",
        [](const Model& model, const std::vector<TokenId>& tokens) {
            const auto p = predict_proba(model, tokens);
            return py::make_tuple(p.label, p.proba);
        },
        py::arg("model"), py::arg("tokens"));
    m.def(
        "forward_with_hook",
        [](const Model& model, const std::vector<TokenId>& tokens, std::uint32_t layer,
           std::function<std::vector<double>(std::vector<double>)> edit) {
            HookSpec hook{layer, {}};
            if (edit) {
                hook.edit = [&edit](std::span<double> row) {
                    const auto out = edit(std::vector<double>(row.begin(), row.end()));
                    if (out.size() != row.size()) {
                        throw ValidationError("edit", "hook must return a vector of the same length");
                    }
                    std::copy(out.begin(), out.end(), row.begin());
                };
            }
            const auto r = forward_with_hook(model, tokens, hook);
            return py::make_tuple(r.prediction.label, r.prediction.proba, r.captured);
        },
        py::arg("model"), py::arg("tokens"), py::arg("layer"), py::arg("edit") = nullptr,
        "Returns (label, proba, captured); `edit` maps the captured row to its replacement.");
    m.def("default_layer", &default_layer, py::arg("config"));

    // activation store
    py::class_<ActivationSet>(m, "ActivationSet")
        .def_property_readonly("hidden_dim", &ActivationSet::hidden_dim)
        .def_property_readonly("num_concepts", &ActivationSet::num_concepts)
        .def_property_readonly("layers", &all_layers)
        .def_property_readonly("split", [](const ActivationSet& s) { return s.manifest().split; })
        .def_property_readonly("model_checksum", [](const ActivationSet& s) { return s.manifest().model_checksum; })
        .def("__len__", [](const ActivationSet& s) { return s.records().size(); })
        .def("__eq__", [](const ActivationSet& a, const ActivationSet& b) { return a == b; })
        .def(
            "matrix",
            [](const ActivationSet& s, std::uint32_t layer, ConceptId label) {
                return matrix_array(partition(s, layer).at(label));
            },
            py::arg("layer"), py::arg("label"), "Activations of one concept at one layer, rows x hidden_dim.");

    m.def(
        "record_corpus",
        [](const Model& model, const std::vector<LabeledSequence>& samples, const std::vector<std::uint32_t>& layers,
           Split split) { return record_corpus(model, samples, layers, split); },
        py::arg("model"), py::arg("samples"), py::arg("layers"), py::arg("split") = Split::train,
        py::call_guard<py::gil_scoped_release>());
    m.def("save_activations", [](const ActivationSet& s, const std::string& path) { save_activations(s, path); });
    m.def("load_activations", [](const std::string& path) { return load_activations(path); });

    // saliency
    py::class_<ProbeConfig>(m, "ProbeConfig")
        .def(py::init<>())
        .def_readwrite("l1", &ProbeConfig::l1)
        .def_readwrite("l2", &ProbeConfig::l2)
        .def_readwrite("epochs", &ProbeConfig::epochs)
        .def_readwrite("seed", &ProbeConfig::seed);

    py::class_<SaliencyRanking>(m, "SaliencyRanking")
        .def_readonly("label", &SaliencyRanking::label)
        .def_readonly("method", &SaliencyRanking::method)
        .def_readonly("order", &SaliencyRanking::order)
        .def_readonly("scores", &SaliencyRanking::scores)
        .def("to_dict", &as_dict<SaliencyRanking>);

    m.def("compute_ranking", &compute_ranking, py::arg("activations"), py::arg("layer"), py::arg("label"),
          py::arg("method") = SaliencyMethod::probeless, py::arg("probe") = ProbeConfig{});
    m.def(
        "probeless_scores",
        [](const std::map<ConceptId, std::vector<double>>& means) { return probeless_scores(means).scores; },
        py::arg("class_means"));
    m.def("top_fraction", &top_fraction, py::arg("ranking"), py::arg("fraction"));
    m.def(
        "overlap",
        [](const std::vector<std::uint32_t>& a, const std::vector<std::uint32_t>& b) { return overlap(a, b); },
        py::arg("a"), py::arg("b"));

    // stats
    m.def("skewness", [](const std::vector<double>& x) { return skewness(x); });
    m.def("kurtosis", [](const std::vector<double>& x) { return kurtosis(x); });
    m.def("ks_statistic", [](const std::vector<double>& x) { return ks_statistic(x); });
    m.def(
        "gaussian_params",
        [](const std::vector<double>& x) {
            const auto g = gaussian_params(x);
            return py::make_tuple(g.mean, g.stddev);
        },
        "Returns (mean, population standard deviation).");
    m.def("practical_normality_fraction", &practical_normality_fraction, py::arg("activations"), py::arg("layer"),
          py::arg("threshold") = kPracticalNormalityThreshold);
    m.def(
        "layer_summary",
        [](const ActivationSet& s, std::uint32_t layer, double threshold) {
            return as_dict(summarize(layer_statistics(s, layer, threshold)));
        },
        py::arg("activations"), py::arg("layer"), py::arg("threshold") = kPracticalNormalityThreshold);
    m.def(
        "distribution_export",
        [](const ActivationSet& s, std::uint32_t layer, std::uint32_t neuron, const std::vector<std::uint32_t>& concepts,
           std::size_t bins, std::size_t grid) {
            return to_python(nlohmann::json(distribution_export(s, layer, neuron, concepts, bins, grid)));
        },
        py::arg("activations"), py::arg("layer"), py::arg("neuron"), py::arg("concepts") = std::vector<std::uint32_t>{},
        py::arg("bins") = 30, py::arg("grid") = 256);

    // intervention
    m.attr("DEFAULT_TAU") = kDefaultTau;
    m.def(
        "correlated_range",
        [](double mu, double sigma, double tau) {
            const auto r = correlated_range(mu, sigma, tau);
            return py::make_tuple(r.lo, r.hi);
        },
        py::arg("mu"), py::arg("sigma"), py::arg("tau") = kDefaultTau);
    m.def("gaussian_coverage", &gaussian_coverage, py::arg("tau"));
    m.def("phi_zero", &phi_zero);
    m.def("phi_damp", &phi_damp, py::arg("x"), py::arg("alpha"));
    m.def("phi_mean", &phi_mean, py::arg("x"), py::arg("mu_ref"));
    m.def("phi_adaptive", &phi_adaptive, py::arg("x"), py::arg("mu"), py::arg("sigma"), py::arg("beta"),
          py::arg("tau") = kDefaultTau);

    py::class_<PolicyOptions>(m, "PolicyOptions")
        .def(py::init<>())
        .def_readwrite("scope", &PolicyOptions::scope)
        .def_readwrite("function", &PolicyOptions::function)
        .def_readwrite("alpha", &PolicyOptions::alpha)
        .def_readwrite("beta", &PolicyOptions::beta)
        .def_readwrite("tau", &PolicyOptions::tau)
        .def_readwrite("fraction", &PolicyOptions::fraction);

    py::class_<InterventionPolicy>(m, "InterventionPolicy")
        .def_static(
            "from_dict", [](const py::object& o) { return from_python(o).get<InterventionPolicy>(); }, py::arg("data"))
        .def_readonly("scope", &InterventionPolicy::scope)
        .def_readonly("function", &InterventionPolicy::function)
        .def_readonly("tau", &InterventionPolicy::tau)
        .def_readonly("label", &InterventionPolicy::label)
        .def_readonly("layer", &InterventionPolicy::layer)
        .def_property_readonly("neurons",
                               [](const InterventionPolicy& p) {
                                   std::vector<std::uint32_t> out;
                                   for (const auto& n : p.neurons) {
                                       out.push_back(n.j);
                                   }
                                   return out;
                               })
        .def("to_dict", &as_dict<InterventionPolicy>)
        .def("__eq__", [](const InterventionPolicy& a, const InterventionPolicy& b) { return a == b; });

    m.def("build_policy", &build_policy, py::arg("activations"), py::arg("layer"), py::arg("ranking"),
          py::arg("options") = PolicyOptions{});
    m.def(
        "apply", [](const std::vector<double>& h, const InterventionPolicy& p) { return neuronlens::apply(h, p); }, py::arg("h"),
        py::arg("policy"));

    // eval
    m.def(
        "baseline_metrics",
        [](const Model& model, const std::vector<LabeledSequence>& samples) {
            return to_python(metrics_table_json(baseline_metrics(model, samples)));
        },
        py::arg("model"), py::arg("samples"));
    m.def(
        "erase_and_evaluate",
        [](const Model& model, const std::vector<LabeledSequence>& samples, const InterventionPolicy& policy) {
            ErasureReport r;
            {
                py::gil_scoped_release release;
                r = erase_and_evaluate(model, samples, policy);
            }
            return as_dict(r);
        },
        py::arg("model"), py::arg("samples"), py::arg("policy"));
    m.def(
        "sweep_tau",
        [](const Model& model, const std::vector<LabeledSequence>& samples, const InterventionPolicy& policy,
           const std::vector<double>& taus) { return as_dict(sweep_tau(model, samples, policy, taus)); },
        py::arg("model"), py::arg("samples"), py::arg("policy"), py::arg("taus"));
    m.def(
        "sweep_fraction",
        [](const Model& model, const std::vector<LabeledSequence>& samples, const ActivationSet& stats,
           std::uint32_t layer, const SaliencyRanking& ranking, const PolicyOptions& options,
           const std::vector<double>& fractions) {
            return as_dict(sweep_fraction(model, samples, stats, layer, ranking, options, fractions));
        },
        py::arg("model"), py::arg("samples"), py::arg("activations"), py::arg("layer"), py::arg("ranking"),
        py::arg("options"), py::arg("fractions"));
    m.def(
        "trimmed_mean", [](const std::vector<double>& v, double trim) { return trimmed_mean(v, trim); },
        py::arg("values"), py::arg("trim") = 0.10);
}
