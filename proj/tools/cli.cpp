#include "cli.hpp"

#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "neuronlens/error.hpp"
#include "neuronlens/eval.hpp"
#include "neuronlens/stats.hpp"

namespace neuronlens::cli {

using nlohmann::json;

struct RunConfig {
    std::uint64_t seed = 0;
    std::string format = "json";
    std::string out;

    std::string data;
    std::string model;
    std::string activations;
    std::string policy;
    std::string ranking;
    std::string split = "train";

    CorpusSpec corpus;
    ModelConfig net;
    std::string readout = "last_token";

    std::vector<std::uint32_t> layers;
    std::uint32_t layer = 0;
    std::optional<std::uint32_t> concept_id;

    std::string method = "probeless";
    ProbeConfig probe;

    std::string scope = "range";
    std::string function = "zero";
    double alpha = kDefaultAlpha;
    double beta = kDefaultBeta;
    double tau = kDefaultTau;
    double fraction = 0.5;

    std::vector<double> taus{0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5};
    std::vector<double> fractions{0.1, 0.3, 0.5, 0.7, 0.9, 1.0};

    double threshold = kPracticalNormalityThreshold;
    std::uint32_t neuron = 0;
    std::vector<std::uint32_t> concepts;
    std::size_t bins = 30;
    std::size_t grid = 256;
    bool baseline = false;
};

Parser::Parser() = default;
Parser::Parser(Parser&&) noexcept = default;
Parser& Parser::operator=(Parser&&) noexcept = default;
Parser::~Parser() = default;

namespace {

void add_seed(CLI::App* sub, RunConfig& c) {
    sub->add_option("--seed", c.seed, "Seed for every random choice (falls back to $NEURONLENS_SEED)")
        ->envname("NEURONLENS_SEED");
}

void add_format(CLI::App* sub, RunConfig& c) {
    sub->add_option("--format", c.format, "Output format")->check(CLI::IsMember({"json", "csv"}));
}

void add_out(CLI::App* sub, RunConfig& c, bool required, const std::string& what) {
    auto* o = sub->add_option("--out", c.out, what);
    if (required) {
        o->required();
    }
}

CLI::Option* add_model(CLI::App* sub, RunConfig& c) {
    return sub->add_option("--model", c.model, "Model checkpoint")->required()->check(CLI::ExistingFile);
}

CLI::Option* add_data(CLI::App* sub, RunConfig& c) {
    return sub->add_option("--data", c.data, "Corpus directory written by gen-data")
        ->required()
        ->check(CLI::ExistingDirectory);
}

CLI::Option* add_activations(CLI::App* sub, RunConfig& c) {
    return sub->add_option("--activations", c.activations, "Activation file written by record (.bin or .jsonl)")
        ->check(CLI::ExistingFile);
}

void add_layer(CLI::App* sub, RunConfig& c) {
    sub->add_option("--layer", c.layer, "Hook layer, 1-based (default: penultimate, or the only recorded layer)")
        ->check(CLI::PositiveNumber);
}

CLI::Option* add_concept(CLI::App* sub, RunConfig& c, const std::string& what) {
    return sub->add_option("--concept", c.concept_id, what);
}

void add_method(CLI::App* sub, RunConfig& c) {
    sub->add_option("--method", c.method, "Saliency method")->check(CLI::IsMember({"max", "probe", "probeless"}));
    sub->add_option("--l1", c.probe.l1, "Probe L1 strength")->check(CLI::NonNegativeNumber);
    sub->add_option("--l2", c.probe.l2, "Probe L2 strength")->check(CLI::NonNegativeNumber);
    sub->add_option("--probe-epochs", c.probe.epochs, "Probe full-batch iterations");
}

// Flags that shape an intervention policy built from activations.
std::vector<CLI::Option*> add_policy_flags(CLI::App* sub, RunConfig& c, bool with_fraction) {
    std::vector<CLI::Option*> opts;
    opts.push_back(sub->add_option("--scope", c.scope, "Intervention scope")->check(CLI::IsMember({"neuron", "range"})));
    opts.push_back(sub->add_option("--function", c.function, "Intervention function")
                       ->check(CLI::IsMember({"zero", "damp", "mean", "adaptive"})));
    opts.push_back(sub->add_option("--alpha", c.alpha, "Dampening factor for damp")->check(CLI::Range(0.0, 1.0)));
    opts.push_back(sub->add_option("--beta", c.beta, "Scale for adaptive dampening")->check(CLI::Range(0.0, 1.0)));
    opts.push_back(sub->add_option("--tau", c.tau, "Correlated range half-width in standard deviations")
                       ->check(CLI::NonNegativeNumber));
    if (with_fraction) {
        opts.push_back(
            sub->add_option("--fraction", c.fraction, "Top fraction of the ranking to select")->check(CLI::Range(0.0, 1.0)));
    }
    opts.push_back(sub->add_option("--ranking", c.ranking, "Ranking JSON from rank (default: compute with --method)")
                       ->check(CLI::ExistingFile));
    return opts;
}

// ---------------------------------------------------------------------------
// Helpers

void emit(const RunConfig& c, std::ostream& out, const std::string& text) {
    if (c.out.empty()) {
        out << text;
        return;
    }
    std::ofstream f(c.out, std::ios::binary | std::ios::trunc);
    if (!f) {
        throw DataError("--out: cannot write " + c.out);
    }
    f << text;
}

std::string dump(const json& j) {
    return j.dump(2) + "\n";
}

json read_json(const std::string& path, const std::string& flag) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError(flag + ": cannot open " + path);
    }
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw DataError(flag + ": " + path + ": " + e.what());
    }
}

std::uint32_t resolve_layer(const RunConfig& c, const ActivationSet& set) {
    if (c.layer != 0) {
        if (!set.has_layer(c.layer)) {
            throw ValidationError("--layer", "layer " + std::to_string(c.layer) + " not recorded in " + c.activations);
        }
        return c.layer;
    }
    if (set.manifest().layers.size() == 1) {
        return set.manifest().layers.front();
    }
    throw ValidationError("--layer", "required when the activations hold several layers");
}

std::uint32_t resolve_layer(const RunConfig& c, const Model& model) {
    return c.layer != 0 ? c.layer : default_layer(model.config());
}

ConceptId require_concept(const RunConfig& c) {
    if (!c.concept_id) {
        throw ValidationError("--concept", "required");
    }
    return *c.concept_id;
}

ActivationSet load_set(const RunConfig& c) {
    if (c.activations.empty()) {
        throw ValidationError("--activations", "required");
    }
    return load_activations(c.activations);
}

PolicyOptions policy_options(const RunConfig& c) {
    PolicyOptions o;
    o.scope = scope_from_string(c.scope);
    o.function = intervention_function_from_string(c.function);
    o.alpha = c.alpha;
    o.beta = c.beta;
    o.tau = c.tau;
    o.fraction = c.fraction;
    return o;
}

SaliencyRanking ranking_for(const RunConfig& c, const ActivationSet& set, std::uint32_t layer, ConceptId target) {
    if (!c.ranking.empty()) {
        auto r = read_json(c.ranking, "--ranking").get<SaliencyRanking>();
        if (r.label != target) {
            throw ValidationError("--ranking", "ranking is for concept " + std::to_string(r.label) + ", not " +
                                                   std::to_string(target));
        }
        return r;
    }
    ProbeConfig probe = c.probe;
    probe.seed = c.seed;
    return compute_ranking(set, layer, target, saliency_method_from_string(c.method), probe);
}

void check_same_model(const ActivationSet& set, const Model& model) {
    if (set.manifest().model_checksum != model.checksum()) {
        throw ValidationError("--activations", "recorded from a different model than --model");
    }
}

// Loads --policy, or builds one from --activations for --concept.
InterventionPolicy policy_for(const RunConfig& c, const Model& model) {
    if (!c.policy.empty()) {
        return read_json(c.policy, "--policy").get<InterventionPolicy>();
    }
    const auto set = load_set(c);
    check_same_model(set, model);
    const auto layer = resolve_layer(c, model);
    const auto target = require_concept(c);
    return build_policy(set, layer, ranking_for(c, set, layer, target), policy_options(c));
}

// ---------------------------------------------------------------------------
// Subcommands

int cmd_gen_data(const RunConfig& c, std::ostream& out) {
    auto spec = c.corpus;
    spec.seed = c.seed;
    const auto corpus = generate(spec);
    save_corpus(corpus, c.out);
    out << dump(json{{"train", corpus.train.size()}, {"eval", corpus.eval.size()}, {"spec", corpus.spec}});
    return kOk;
}

int cmd_train(const RunConfig& c, std::ostream& out) {
    const auto corpus = load_corpus(c.data);
    auto config = c.net;
    config.seed = c.seed;
    config.readout = readout_from_string(c.readout);
    config.vocab_size = corpus.spec.vocab_size;
    config.max_seq_len = corpus.spec.seq_len;
    config.num_classes = corpus.spec.num_concepts;
    const auto result = train(corpus, config);
    save_model(result.model, c.out);
    out << dump(json{{"config", config},
                     {"epoch_loss", result.epoch_loss},
                     {"train_accuracy", result.train_accuracy},
                     {"eval_accuracy", result.eval_accuracy},
                     {"checksum", result.model.checksum()}});
    return kOk;
}

int cmd_record(const RunConfig& c, std::ostream& out) {
    const auto model = load_model(c.model);
    const auto corpus = load_corpus(c.data);
    if (corpus.spec.vocab_size > model.config().vocab_size || corpus.spec.seq_len > model.config().max_seq_len ||
        corpus.spec.num_concepts != model.config().num_classes) {
        throw ValidationError("--data", "corpus does not match the model's vocabulary, length or classes");
    }
    std::vector<std::uint32_t> layers = c.layers;
    if (layers.empty()) {
        for (std::uint32_t l = 1; l <= model.config().num_layers; ++l) {
            layers.push_back(l);
        }
    }
    const auto split = split_from_string(c.split);
    const auto& samples = split == Split::train ? corpus.train : corpus.eval;
    const auto set = record_corpus(model, samples, layers, split);
    save_activations(set, c.out);
    out << dump(json{{"records", set.records().size()}, {"manifest", set.manifest()}});
    return kOk;
}

int cmd_rank(const RunConfig& c, std::ostream& out) {
    const auto set = load_set(c);
    const auto layer = resolve_layer(c, set);
    const auto method = saliency_method_from_string(c.method);
    ProbeConfig probe = c.probe;
    probe.seed = c.seed;
    std::vector<SaliencyRanking> rankings;
    if (c.concept_id) {
        rankings.push_back(compute_ranking(set, layer, *c.concept_id, method, probe));
    } else {
        for (ConceptId k = 0; k < set.num_concepts(); ++k) {
            rankings.push_back(compute_ranking(set, layer, k, method, probe));
        }
    }
    if (c.format == "csv") {
        emit(c, out, ranking_csv(rankings));
    } else if (c.concept_id) {
        emit(c, out, dump(json(rankings.front())));
    } else {
        emit(c, out, dump(json(rankings)));
    }
    return kOk;
}

int cmd_stats(const RunConfig& c, std::ostream& out) {
    const auto set = load_set(c);
    std::vector<std::uint32_t> layers;
    if (c.layer != 0) {
        layers.push_back(resolve_layer(c, set));
    } else {
        layers = set.manifest().layers;
    }
    std::vector<NeuronConceptStats> all;
    json summaries = json::array();
    for (auto l : layers) {
        const auto stats = layer_statistics(set, l, c.threshold);
        summaries.push_back(summarize(stats));
        all.insert(all.end(), stats.begin(), stats.end());
    }
    if (c.format == "csv") {
        emit(c, out, stats_csv(all));
    } else {
        emit(c, out, dump(json{{"threshold", c.threshold}, {"layers", summaries}, {"pairs", all}}));
    }
    return kOk;
}

int cmd_ranges(const RunConfig& c, std::ostream& out) {
    const auto set = load_set(c);
    const auto layer = resolve_layer(c, set);
    const auto target = require_concept(c);
    const auto policy = build_policy(set, layer, ranking_for(c, set, layer, target), policy_options(c));
    emit(c, out, c.format == "csv" ? policy_csv(policy) : dump(json(policy)));
    return kOk;
}

int cmd_erase(const RunConfig& c, std::ostream& out) {
    const auto model = load_model(c.model);
    const auto corpus = load_corpus(c.data);
    const auto policy = policy_for(c, model);
    const auto report = erase_and_evaluate(model, corpus.eval, policy);
    emit(c, out, c.format == "csv" ? report_csv(std::span(&report, 1)) : dump(json(report)));
    return kOk;
}

int cmd_sweep_tau(const RunConfig& c, std::ostream& out) {
    const auto model = load_model(c.model);
    const auto corpus = load_corpus(c.data);
    const auto sweep = sweep_tau(model, corpus.eval, policy_for(c, model), c.taus);
    emit(c, out, c.format == "csv" ? sweep_csv(sweep) : dump(json(sweep)));
    return kOk;
}

int cmd_sweep_fraction(const RunConfig& c, std::ostream& out) {
    const auto model = load_model(c.model);
    const auto corpus = load_corpus(c.data);
    const auto set = load_set(c);
    check_same_model(set, model);
    const auto layer = resolve_layer(c, model);
    const auto target = require_concept(c);
    const auto sweep = sweep_fraction(model, corpus.eval, set, layer, ranking_for(c, set, layer, target),
                                      policy_options(c), c.fractions);
    emit(c, out, c.format == "csv" ? sweep_csv(sweep) : dump(json(sweep)));
    return kOk;
}

int cmd_sweep_layer(const RunConfig& c, std::ostream& out) {
    const auto model = load_model(c.model);
    const auto corpus = load_corpus(c.data);
    const auto set = load_set(c);
    check_same_model(set, model);
    const auto layers = c.layers.empty() ? set.manifest().layers : c.layers;
    ProbeConfig probe = c.probe;
    probe.seed = c.seed;
    const auto sweep = sweep_layer(model, corpus.eval, set, require_concept(c), saliency_method_from_string(c.method),
                                   policy_options(c), layers, probe);
    emit(c, out, c.format == "csv" ? sweep_csv(sweep) : dump(json(sweep)));
    return kOk;
}

int cmd_export_dist(const RunConfig& c, std::ostream& out) {
    const auto set = load_set(c);
    const auto layer = resolve_layer(c, set);
    const auto exports = distribution_export(set, layer, c.neuron, c.concepts, c.bins, c.grid);
    emit(c, out, c.format == "csv" ? distribution_csv(exports) : dump(json(exports)));
    return kOk;
}

int cmd_report(const RunConfig& c, std::ostream& out) {
    if (!c.baseline) {
        throw ValidationError("--baseline", "report currently supports only --baseline");
    }
    const auto model = load_model(c.model);
    const auto corpus = load_corpus(c.data);
    const auto split = split_from_string(c.split);
    const auto table = baseline_metrics(model, split == Split::train ? corpus.train : corpus.eval);
    emit(c, out, c.format == "csv" ? metrics_csv(table) : dump(metrics_table_json(table)));
    return kOk;
}

} // namespace

Parser make_parser() {
    Parser p;
    p.config = std::make_unique<RunConfig>();
    p.app = std::make_unique<CLI::App>("Range-based neuron interpretation and concept erasure on a toy transformer",
                                       "neuronlens");
    auto& app = *p.app;
    auto& c = *p.config;
    app.require_subcommand(1);
    app.fallthrough(false);

    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic labelled corpus");
    gen->add_option("--concepts", c.corpus.num_concepts, "Number of concepts (classes)");
    gen->add_option("--vocab", c.corpus.vocab_size, "Vocabulary size");
    gen->add_option("--seq-len", c.corpus.seq_len, "Tokens per sequence");
    gen->add_option("--samples", c.corpus.samples_per_concept, "Samples per concept before the 80/20 split");
    gen->add_option("--sep", c.corpus.separation, "Class separation in [0, 1]");
    gen->add_flag("--disjoint", c.corpus.disjoint_supports, "Give each concept its own block of the vocabulary");
    gen->add_option("--concentration", c.corpus.concentration, "Dirichlet concentration of concept distributions");
    add_seed(gen, c);
    add_out(gen, c, true, "Output directory");

    auto* tr = app.add_subcommand("train", "Train the toy classifier on a corpus");
    add_data(tr, c);
    tr->add_option("--num-layers", c.net.num_layers, "Transformer blocks");
    tr->add_option("--hidden", c.net.hidden_dim, "Hidden dimension d");
    tr->add_option("--heads", c.net.num_heads, "Attention heads (must divide d)");
    tr->add_option("--mlp-ratio", c.net.mlp_ratio, "MLP width as a multiple of d");
    tr->add_option("--readout", c.readout, "Token read by the head")
        ->check(CLI::IsMember({"first_token", "last_token", "first", "last"}));
    tr->add_option("--epochs", c.net.epochs, "Training epochs");
    tr->add_option("--batch-size", c.net.batch_size, "Mini-batch size");
    tr->add_option("--lr", c.net.learning_rate, "Adam learning rate");
    add_seed(tr, c);
    add_out(tr, c, true, "Checkpoint path");

    auto* rec = app.add_subcommand("record", "Record hidden states at the readout token");
    add_model(rec, c);
    add_data(rec, c);
    rec->add_option("--split", c.split, "Corpus split to traverse")->check(CLI::IsMember({"train", "eval"}));
    rec->add_option("--layers", c.layers, "Layers to record (default: all)")->delimiter(',');
    add_out(rec, c, true, "Activation file (.jsonl for JSONL, anything else binary)");

    auto* rk = app.add_subcommand("rank", "Rank neurons by saliency for each concept");
    add_activations(rk, c)->required();
    add_layer(rk, c);
    add_concept(rk, c, "Concept to rank (default: every concept)");
    add_method(rk, c);
    add_seed(rk, c);
    add_format(rk, c);
    add_out(rk, c, false, "Output file (default: stdout)");

    auto* st = app.add_subcommand("stats", "Per-(neuron, concept) Gaussian fits and normality diagnostics");
    add_activations(st, c)->required();
    add_layer(st, c);
    st->add_option("--threshold", c.threshold, "KS threshold for practical normality");
    add_format(st, c);
    add_out(st, c, false, "Output file (default: stdout)");

    auto* rg = app.add_subcommand("ranges", "Build an intervention policy with correlated ranges");
    add_activations(rg, c)->required();
    add_layer(rg, c);
    add_concept(rg, c, "Target concept")->required();
    add_method(rg, c);
    add_policy_flags(rg, c, true);
    add_seed(rg, c);
    add_format(rg, c);
    add_out(rg, c, false, "Output file (default: stdout)");

    auto add_policy_source = [&](CLI::App* sub, bool with_fraction) {
        auto* pol = sub->add_option("--policy", c.policy, "Policy JSON from ranges")->check(CLI::ExistingFile);
        auto* act = add_activations(sub, c);
        auto* con = add_concept(sub, c, "Target concept (when building the policy from --activations)");
        pol->excludes(act);
        pol->excludes(con);
        for (auto* o : add_policy_flags(sub, c, with_fraction)) {
            pol->excludes(o);
        }
        add_method(sub, c);
        add_layer(sub, c);
    };

    auto* er = app.add_subcommand("erase", "Apply a policy and report the erasure metrics on the eval split");
    add_model(er, c);
    add_data(er, c);
    add_policy_source(er, true);
    add_seed(er, c);
    add_format(er, c);
    add_out(er, c, false, "Output file (default: stdout)");

    auto* swt = app.add_subcommand("sweep-tau", "Erasure metrics across correlated-range widths");
    add_model(swt, c);
    add_data(swt, c);
    add_policy_source(swt, true);
    swt->add_option("--taus", c.taus, "Ascending tau values")->delimiter(',');
    add_seed(swt, c);
    add_format(swt, c);
    add_out(swt, c, false, "Output file (default: stdout)");

    auto* swf = app.add_subcommand("sweep-fraction", "Erasure metrics across selected-neuron fractions");
    add_model(swf, c);
    add_data(swf, c);
    add_activations(swf, c)->required();
    add_concept(swf, c, "Target concept")->required();
    add_method(swf, c);
    add_layer(swf, c);
    add_policy_flags(swf, c, false);
    swf->add_option("--fractions", c.fractions, "Ascending fractions in [0, 1]")->delimiter(',');
    add_seed(swf, c);
    add_format(swf, c);
    add_out(swf, c, false, "Output file (default: stdout)");

    auto* swl = app.add_subcommand("sweep-layer", "Erasure metrics across hook layers");
    add_model(swl, c);
    add_data(swl, c);
    add_activations(swl, c)->required();
    add_concept(swl, c, "Target concept")->required();
    add_method(swl, c);
    auto pf = add_policy_flags(swl, c, true);
    swl->remove_option(pf.back());
    swl->add_option("--layers", c.layers, "Ascending layers (default: every recorded layer)")->delimiter(',');
    add_seed(swl, c);
    add_format(swl, c);
    add_out(swl, c, false, "Output file (default: stdout)");

    auto* ex = app.add_subcommand("export-dist", "Histogram and KDE of one neuron per concept");
    add_activations(ex, c)->required();
    add_layer(ex, c);
    ex->add_option("--neuron", c.neuron, "Neuron index")->required();
    ex->add_option("--concepts", c.concepts, "Concepts to export (default: all)")->delimiter(',');
    ex->add_option("--bins", c.bins, "Histogram bins")->check(CLI::PositiveNumber);
    ex->add_option("--grid", c.grid, "KDE grid points")->check(CLI::Range(2, 1 << 20));
    add_format(ex, c);
    add_out(ex, c, false, "Output file (default: stdout)");

    auto* rp = app.add_subcommand("report", "Per-class metrics of the unmodified model");
    add_model(rp, c);
    add_data(rp, c);
    rp->add_flag("--baseline", c.baseline, "Report baseline Acc/Conf per class")->required();
    rp->add_option("--split", c.split, "Corpus split to score")->check(CLI::IsMember({"train", "eval"}));
    add_format(rp, c);
    add_out(rp, c, false, "Output file (default: stdout)");

    // Eval is the natural default for scoring; record keeps train.
    rp->preparse_callback([&c](std::size_t) { c.split = "eval"; });
    return p;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    auto parser = make_parser();
    auto& app = *parser.app;
    auto& c = *parser.config;
    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err) == 0 ? kOk : kUsage;
    }

    const auto* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();
    try {
        if (name == "gen-data") {
            return cmd_gen_data(c, out);
        }
        if (name == "train") {
            return cmd_train(c, out);
        }
        if (name == "record") {
            return cmd_record(c, out);
        }
        if (name == "rank") {
            return cmd_rank(c, out);
        }
        if (name == "stats") {
            return cmd_stats(c, out);
        }
        if (name == "ranges") {
            return cmd_ranges(c, out);
        }
        if (name == "erase") {
            return cmd_erase(c, out);
        }
        if (name == "sweep-tau") {
            return cmd_sweep_tau(c, out);
        }
        if (name == "sweep-fraction") {
            return cmd_sweep_fraction(c, out);
        }
        if (name == "sweep-layer") {
            return cmd_sweep_layer(c, out);
        }
        if (name == "export-dist") {
            return cmd_export_dist(c, out);
        }
        if (name == "report") {
            return cmd_report(c, out);
        }
        err << "error: unknown subcommand " << name << '\n';
        return kUsage;
    } catch (const ValidationError& e) {
        err << "error: " << e.what() << '\n';
        return kUsage;
    } catch (const DataError& e) {
        err << "error: " << e.what() << '\n';
        return kData;
    } catch (const NumericalError& e) {
        err << "error: " << e.what() << '\n';
        return kNumerical;
    } catch (const json::exception& e) {
        err << "error: malformed input: " << e.what() << '\n';
        return kData;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kInternal;
    }
}

} // namespace neuronlens::cli
