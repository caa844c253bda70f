#include "neuronlens/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include <nlohmann/json.hpp>

#include "neuronlens/error.hpp"

namespace neuronlens {

using nlohmann::json;

void CorpusSpec::validate() const {
    if (num_concepts < 2) {
        throw ValidationError("num_concepts", "must be >= 2");
    }
    if (vocab_size < 8) {
        throw ValidationError("vocab_size", "must be >= 8");
    }
    if (seq_len < 4) {
        throw ValidationError("seq_len", "must be >= 4");
    }
    if (samples_per_concept < 5) {
        // Fewer than 5 leaves the eval split empty for that concept.
        throw ValidationError("samples_per_concept", "must be >= 5");
    }
    if (!(separation >= 0.0 && separation <= 1.0)) {
        throw ValidationError("separation", "must lie in [0, 1]");
    }
    if (!(concentration > 0.0) || !std::isfinite(concentration)) {
        throw ValidationError("concentration", "must be positive");
    }
    if (disjoint_supports && vocab_size < num_concepts) {
        throw ValidationError("vocab_size", "disjoint supports need at least one token per concept");
    }
}

const char* to_string(Split split) {
    return split == Split::train ? "train" : "eval";
}

Split split_from_string(const std::string& name) {
    if (name == "train") {
        return Split::train;
    }
    if (name == "eval") {
        return Split::eval;
    }
    throw ValidationError("split", "expected 'train' or 'eval', got '" + name + "'");
}

namespace {

std::vector<double> dirichlet(std::mt19937_64& rng, std::size_t k, double concentration) {
    std::gamma_distribution<double> gamma(concentration, 1.0);
    std::vector<double> out(k);
    double total = 0.0;
    for (auto& v : out) {
        v = gamma(rng);
        total += v;
    }
    if (total <= 0.0) {
        // All draws underflowed; fall back to uniform.
        std::fill(out.begin(), out.end(), 1.0 / static_cast<double>(k));
        return out;
    }
    for (auto& v : out) {
        v /= total;
    }
    return out;
}

} // namespace

Corpus generate(const CorpusSpec& spec) {
    spec.validate();
    std::mt19937_64 rng(spec.seed);

    const std::size_t vocab = spec.vocab_size;
    const double uniform = 1.0 / static_cast<double>(vocab);

    Corpus corpus;
    corpus.spec = spec;
    corpus.class_distributions.reserve(spec.num_concepts);
    for (std::uint32_t c = 0; c < spec.num_concepts; ++c) {
        std::vector<double> specific(vocab, 0.0);
        if (spec.disjoint_supports) {
            const std::size_t begin = c * vocab / spec.num_concepts;
            const std::size_t end = (c + 1) * vocab / spec.num_concepts;
            auto block = dirichlet(rng, end - begin, spec.concentration);
            std::copy(block.begin(), block.end(), specific.begin() + static_cast<std::ptrdiff_t>(begin));
        } else {
            specific = dirichlet(rng, vocab, spec.concentration);
        }
        std::vector<double> mixed(vocab);
        for (std::size_t t = 0; t < vocab; ++t) {
            mixed[t] = (1.0 - spec.separation) * uniform + spec.separation * specific[t];
        }
        corpus.class_distributions.push_back(std::move(mixed));
    }

    const std::uint32_t n_eval = spec.samples_per_concept / 5;
    const std::uint32_t n_train = spec.samples_per_concept - n_eval;
    for (std::uint32_t c = 0; c < spec.num_concepts; ++c) {
        const auto& dist = corpus.class_distributions[c];
        std::discrete_distribution<TokenId> draw(dist.begin(), dist.end());
        for (std::uint32_t i = 0; i < spec.samples_per_concept; ++i) {
            LabeledSequence seq;
            seq.label = c;
            seq.tokens.resize(spec.seq_len);
            for (auto& tok : seq.tokens) {
                tok = draw(rng);
            }
            (i < n_train ? corpus.train : corpus.eval).push_back(std::move(seq));
        }
    }
    std::shuffle(corpus.train.begin(), corpus.train.end(), rng);
    std::shuffle(corpus.eval.begin(), corpus.eval.end(), rng);
    return corpus;
}

std::map<ConceptId, double> class_prior(std::span<const LabeledSequence> samples) {
    if (samples.empty()) {
        throw ValidationError("corpus", "class prior of an empty corpus");
    }
    std::map<ConceptId, std::size_t> counts;
    for (const auto& s : samples) {
        ++counts[s.label];
    }
    std::map<ConceptId, double> prior;
    const double n = static_cast<double>(samples.size());
    for (const auto& [c, k] : counts) {
        prior[c] = static_cast<double>(k) / n;
    }
    return prior;
}

void to_json(json& j, const CorpusSpec& spec) {
    j = json{{"num_concepts", spec.num_concepts},
             {"vocab_size", spec.vocab_size},
             {"seq_len", spec.seq_len},
             {"samples_per_concept", spec.samples_per_concept},
             {"separation", spec.separation},
             {"seed", spec.seed},
             {"disjoint_supports", spec.disjoint_supports},
             {"concentration", spec.concentration}};
}

void from_json(const json& j, CorpusSpec& spec) {
    j.at("num_concepts").get_to(spec.num_concepts);
    j.at("vocab_size").get_to(spec.vocab_size);
    j.at("seq_len").get_to(spec.seq_len);
    j.at("samples_per_concept").get_to(spec.samples_per_concept);
    j.at("separation").get_to(spec.separation);
    j.at("seed").get_to(spec.seed);
    spec.disjoint_supports = j.value("disjoint_supports", false);
    spec.concentration = j.value("concentration", 0.5);
}

void to_json(json& j, const LabeledSequence& seq) {
    j = json{{"tokens", seq.tokens}, {"concept", seq.label}};
}

void from_json(const json& j, LabeledSequence& seq) {
    j.at("tokens").get_to(seq.tokens);
    j.at("concept").get_to(seq.label);
}

namespace {

void write_jsonl(const std::filesystem::path& path, std::span<const LabeledSequence> samples) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw DataError("cannot open " + path.string() + " for writing");
    }
    for (const auto& s : samples) {
        out << json(s).dump() << '\n';
    }
}

std::vector<LabeledSequence> read_jsonl(const std::filesystem::path& path, const CorpusSpec& spec) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open " + path.string());
    }
    std::vector<LabeledSequence> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) {
            continue;
        }
        LabeledSequence seq;
        try {
            json::parse(line).get_to(seq);
        } catch (const json::exception& e) {
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
        if (seq.label >= spec.num_concepts) {
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": concept out of range");
        }
        for (auto t : seq.tokens) {
            if (t >= spec.vocab_size) {
                throw DataError(path.string() + ":" + std::to_string(lineno) + ": token id out of range");
            }
        }
        if (seq.tokens.size() != spec.seq_len) {
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": wrong sequence length");
        }
        out.push_back(std::move(seq));
    }
    return out;
}

} // namespace

void save_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    json manifest{{"spec", corpus.spec},
                  {"class_distributions", corpus.class_distributions},
                  {"train_size", corpus.train.size()},
                  {"eval_size", corpus.eval.size()}};
    std::ofstream out(dir / "manifest.json", std::ios::binary);
    if (!out) {
        throw DataError("cannot write " + (dir / "manifest.json").string());
    }
    out << manifest.dump(2) << '\n';
    write_jsonl(dir / "train.jsonl", corpus.train);
    write_jsonl(dir / "eval.jsonl", corpus.eval);
}

Corpus load_corpus(const std::filesystem::path& dir) {
    std::ifstream in(dir / "manifest.json", std::ios::binary);
    if (!in) {
        throw DataError("missing corpus manifest " + (dir / "manifest.json").string());
    }
    Corpus corpus;
    try {
        const json manifest = json::parse(in);
        manifest.at("spec").get_to(corpus.spec);
        manifest.at("class_distributions").get_to(corpus.class_distributions);
    } catch (const json::exception& e) {
        throw DataError("bad corpus manifest: " + std::string(e.what()));
    }
    corpus.train = read_jsonl(dir / "train.jsonl", corpus.spec);
    corpus.eval = read_jsonl(dir / "eval.jsonl", corpus.spec);
    return corpus;
}

} // namespace neuronlens
