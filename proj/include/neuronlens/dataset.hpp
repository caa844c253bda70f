#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace neuronlens {

using ConceptId = std::uint32_t;
using TokenId = std::uint32_t;

struct CorpusSpec {
    std::uint32_t num_concepts = 4;
    std::uint32_t vocab_size = 32;
    std::uint32_t seq_len = 16;
    std::uint32_t samples_per_concept = 500;
    // Mixing weight of the concept-specific distribution against the shared
    // uniform base. 0 makes every class identical, 1 uses the concept
    // distribution alone.
    double separation = 0.8;
    std::uint64_t seed = 0;
    // Restrict each concept-specific distribution to its own contiguous
    // block of the vocabulary.
    bool disjoint_supports = false;
    // Symmetric Dirichlet concentration for the concept-specific draws.
    double concentration = 0.5;

    // Throws ValidationError naming the first offending field.
    void validate() const;

    bool operator==(const CorpusSpec&) const = default;
};

struct LabeledSequence {
    std::vector<TokenId> tokens;
    ConceptId label = 0;

    bool operator==(const LabeledSequence&) const = default;
};

struct Corpus {
    CorpusSpec spec;
    // Per-concept unigram distributions the sequences were drawn from.
    std::vector<std::vector<double>> class_distributions;
    std::vector<LabeledSequence> train;
    std::vector<LabeledSequence> eval;

    bool operator==(const Corpus&) const = default;
};

enum class Split : std::uint8_t { train, eval };

const char* to_string(Split split);
Split split_from_string(const std::string& name);

// Stratified 80/20 split: per concept, floor(n/5) samples go to eval.
Corpus generate(const CorpusSpec& spec);

std::map<ConceptId, double> class_prior(std::span<const LabeledSequence> samples);

// <dir>/train.jsonl, <dir>/eval.jsonl and <dir>/manifest.json.
void save_corpus(const Corpus& corpus, const std::filesystem::path& dir);
Corpus load_corpus(const std::filesystem::path& dir);

void to_json(nlohmann::json& j, const CorpusSpec& spec);
void from_json(const nlohmann::json& j, CorpusSpec& spec);
void to_json(nlohmann::json& j, const LabeledSequence& seq);
void from_json(const nlohmann::json& j, LabeledSequence& seq);

} // namespace neuronlens
