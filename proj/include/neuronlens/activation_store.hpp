#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "neuronlens/dataset.hpp"
#include "neuronlens/model.hpp"

namespace neuronlens {

struct ActivationManifest {
    std::uint32_t hidden_dim = 0;
    std::vector<std::uint32_t> layers;
    std::vector<std::string> concepts;
    std::uint32_t model_checksum = 0;
    Readout readout = Readout::last_token;
    // Corpus split the activations were recorded from. Intervention policies
    // carry it forward so evaluation can refuse statistics taken from the
    // split it is scoring.
    Split split = Split::train;

    bool operator==(const ActivationManifest&) const = default;
};

void to_json(nlohmann::json& j, const ActivationManifest& m);
void from_json(const nlohmann::json& j, ActivationManifest& m);

struct ActivationRecord {
    std::uint64_t sample_id = 0;
    ConceptId label = 0;
    std::uint32_t layer = 0;
    std::vector<float> vector;

    bool operator==(const ActivationRecord&) const = default;
};

// Activations of one concept at one layer as an n_c x d row-major f64 matrix.
struct ConceptMatrix {
    ConceptId label = 0;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> values;
    std::vector<std::uint64_t> sample_ids;

    std::span<const double> row(std::size_t i) const { return {values.data() + i * cols, cols}; }
    std::vector<double> column(std::size_t j) const;
};

// H^l for a set of layers. Immutable after construction.
class ActivationSet {
public:
    ActivationSet() = default;
    // Validates vector lengths, finiteness, layers and concept ids.
    ActivationSet(ActivationManifest manifest, std::vector<ActivationRecord> records);

    const ActivationManifest& manifest() const noexcept { return manifest_; }
    std::span<const ActivationRecord> records() const noexcept { return records_; }
    std::span<const ActivationRecord> layer_records(std::uint32_t layer) const;
    std::size_t num_concepts() const noexcept { return manifest_.concepts.size(); }
    std::uint32_t hidden_dim() const noexcept { return manifest_.hidden_dim; }
    bool has_layer(std::uint32_t layer) const;

    // Throws ValidationError unless every concept has at least `min_count`
    // records at `layer`.
    void require_coverage(std::uint32_t layer, std::size_t min_count = 2) const;

    bool operator==(const ActivationSet&) const = default;

private:
    ActivationManifest manifest_;
    // Sorted by layer; within a layer, in recording order.
    std::vector<ActivationRecord> records_;
};

// One record per (sample, layer). sample_id is the index within `samples`.
ActivationSet record_corpus(const Model& model, std::span<const LabeledSequence> samples,
                            std::span<const std::uint32_t> layers, Split split,
                            const std::vector<std::string>& concept_labels = {});

std::map<ConceptId, ConceptMatrix> partition(const ActivationSet& set, std::uint32_t layer);

std::vector<double> class_mean(const ActivationSet& set, std::uint32_t layer, ConceptId label);
std::vector<double> class_mean(const ConceptMatrix& matrix);

// Per-neuron mean over every record at `layer`, all concepts pooled.
std::vector<double> pooled_mean(const ActivationSet& set, std::uint32_t layer);

// Binary container: "NLNS", u16 version, u32 manifest length, manifest JSON,
// then per record u64 sample_id, u32 concept, u32 layer, d x f32; CRC32.
std::vector<std::uint8_t> encode_activations(const ActivationSet& set);
ActivationSet decode_activations(std::span<const std::uint8_t> bytes);

// JSONL: a manifest line followed by one line per record.
std::string encode_activations_jsonl(const ActivationSet& set);
ActivationSet decode_activations_jsonl(const std::string& text);

// Format chosen by extension: ".jsonl" is JSONL, anything else binary.
void save_activations(const ActivationSet& set, const std::filesystem::path& path);
ActivationSet load_activations(const std::filesystem::path& path);

} // namespace neuronlens
