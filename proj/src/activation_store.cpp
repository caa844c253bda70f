#include "neuronlens/activation_store.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <nlohmann/json.hpp>

#include "neuronlens/binary_io.hpp"
#include "neuronlens/error.hpp"

namespace neuronlens {

using nlohmann::json;

namespace {

constexpr std::string_view kMagic = "NLNS";
constexpr std::uint16_t kVersion = 1;

} // namespace

void to_json(json& j, const ActivationManifest& m) {
    j = json{{"hidden_dim", m.hidden_dim},         {"layers", m.layers},
             {"concepts", m.concepts},             {"model_checksum", m.model_checksum},
             {"readout", to_string(m.readout)},    {"split", to_string(m.split)}};
}

void from_json(const json& j, ActivationManifest& m) {
    j.at("hidden_dim").get_to(m.hidden_dim);
    j.at("layers").get_to(m.layers);
    j.at("concepts").get_to(m.concepts);
    j.at("model_checksum").get_to(m.model_checksum);
    m.readout = readout_from_string(j.at("readout").get<std::string>());
    m.split = split_from_string(j.at("split").get<std::string>());
}

std::vector<double> ConceptMatrix::column(std::size_t j) const {
    std::vector<double> out(rows);
    for (std::size_t i = 0; i < rows; ++i) {
        out[i] = values[i * cols + j];
    }
    return out;
}

ActivationSet::ActivationSet(ActivationManifest manifest, std::vector<ActivationRecord> records)
    : manifest_(std::move(manifest)), records_(std::move(records)) {
    auto& layers = manifest_.layers;
    if (!std::is_sorted(layers.begin(), layers.end()) ||
        std::adjacent_find(layers.begin(), layers.end()) != layers.end()) {
        throw ValidationError("layers", "manifest layers must be strictly ascending");
    }
    for (std::size_t i = 0; i < manifest_.concepts.size(); ++i) {
        for (std::size_t k = i + 1; k < manifest_.concepts.size(); ++k) {
            if (manifest_.concepts[i] == manifest_.concepts[k]) {
                throw ValidationError("concepts", "duplicate concept label '" + manifest_.concepts[i] + "'");
            }
        }
    }
    for (const auto& r : records_) {
        if (r.vector.size() != manifest_.hidden_dim) {
            throw ValidationError("vector", "record " + std::to_string(r.sample_id) + " has length " +
                                                std::to_string(r.vector.size()) + ", manifest says " +
                                                std::to_string(manifest_.hidden_dim));
        }
        if (!has_layer(r.layer)) {
            throw ValidationError("layer", "record layer " + std::to_string(r.layer) + " not in manifest");
        }
        if (r.label >= manifest_.concepts.size()) {
            throw ValidationError("concept", "record concept " + std::to_string(r.label) + " not in manifest");
        }
        for (float v : r.vector) {
            if (!std::isfinite(v)) {
                throw CorruptActivation(r.sample_id);
            }
        }
    }
    std::stable_sort(records_.begin(), records_.end(),
                     [](const ActivationRecord& a, const ActivationRecord& b) { return a.layer < b.layer; });
}

bool ActivationSet::has_layer(std::uint32_t layer) const {
    return std::binary_search(manifest_.layers.begin(), manifest_.layers.end(), layer);
}

std::span<const ActivationRecord> ActivationSet::layer_records(std::uint32_t layer) const {
    if (!has_layer(layer)) {
        throw ValidationError("layer", "layer " + std::to_string(layer) + " was not recorded");
    }
    const auto lo = std::lower_bound(records_.begin(), records_.end(), layer,
                                     [](const ActivationRecord& r, std::uint32_t l) { return r.layer < l; });
    const auto hi = std::upper_bound(records_.begin(), records_.end(), layer,
                                     [](std::uint32_t l, const ActivationRecord& r) { return l < r.layer; });
    return {records_.data() + (lo - records_.begin()), static_cast<std::size_t>(hi - lo)};
}

void ActivationSet::require_coverage(std::uint32_t layer, std::size_t min_count) const {
    std::vector<std::size_t> counts(num_concepts(), 0);
    for (const auto& r : layer_records(layer)) {
        ++counts[r.label];
    }
    for (std::size_t c = 0; c < counts.size(); ++c) {
        if (counts[c] < min_count) {
            throw ValidationError("concept", "concept " + std::to_string(c) + " has " + std::to_string(counts[c]) +
                                                 " records at layer " + std::to_string(layer) + ", need " +
                                                 std::to_string(min_count));
        }
    }
}

ActivationSet record_corpus(const Model& model, std::span<const LabeledSequence> samples,
                            std::span<const std::uint32_t> layers, Split split,
                            const std::vector<std::string>& concept_labels) {
    const auto& cfg = model.config();
    ActivationManifest manifest;
    manifest.hidden_dim = cfg.hidden_dim;
    manifest.layers.assign(layers.begin(), layers.end());
    std::sort(manifest.layers.begin(), manifest.layers.end());
    manifest.layers.erase(std::unique(manifest.layers.begin(), manifest.layers.end()), manifest.layers.end());
    if (manifest.layers.empty()) {
        throw ValidationError("layers", "no layers requested");
    }
    if (concept_labels.empty()) {
        for (std::uint32_t c = 0; c < cfg.num_classes; ++c) {
            manifest.concepts.push_back("concept_" + std::to_string(c));
        }
    } else {
        if (concept_labels.size() != cfg.num_classes) {
            throw ValidationError("concepts", "label count does not match the model's class count");
        }
        manifest.concepts = concept_labels;
    }
    manifest.model_checksum = model.checksum();
    manifest.readout = cfg.readout;
    manifest.split = split;

    // Per layer, in sample order.
    std::vector<std::vector<ActivationRecord>> by_layer(manifest.layers.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto& s = samples[i];
        if (s.label >= cfg.num_classes) {
            throw ValidationError("concept", "sample " + std::to_string(i) + " label out of range");
        }
        const auto rows = capture_layers(model, s.tokens, manifest.layers);
        for (std::size_t li = 0; li < rows.size(); ++li) {
            ActivationRecord rec;
            rec.sample_id = i;
            rec.label = s.label;
            rec.layer = manifest.layers[li];
            rec.vector.reserve(rows[li].size());
            for (double v : rows[li]) {
                if (!std::isfinite(v)) {
                    throw CorruptActivation(i);
                }
                rec.vector.push_back(static_cast<float>(v));
            }
            by_layer[li].push_back(std::move(rec));
        }
    }
    std::vector<ActivationRecord> records;
    records.reserve(samples.size() * manifest.layers.size());
    for (auto& layer : by_layer) {
        std::move(layer.begin(), layer.end(), std::back_inserter(records));
    }
    return ActivationSet(std::move(manifest), std::move(records));
}

std::map<ConceptId, ConceptMatrix> partition(const ActivationSet& set, std::uint32_t layer) {
    const auto records = set.layer_records(layer);
    const std::size_t d = set.hidden_dim();
    std::map<ConceptId, ConceptMatrix> out;
    for (ConceptId c = 0; c < set.num_concepts(); ++c) {
        out[c] = ConceptMatrix{c, 0, d, {}, {}};
    }
    for (const auto& r : records) {
        auto& m = out[r.label];
        m.values.insert(m.values.end(), r.vector.begin(), r.vector.end());
        m.sample_ids.push_back(r.sample_id);
        ++m.rows;
    }
    return out;
}

std::vector<double> class_mean(const ConceptMatrix& matrix) {
    if (matrix.rows == 0) {
        throw ValidationError("concept", "class " + std::to_string(matrix.label) + " has no records");
    }
    std::vector<double> mean(matrix.cols, 0.0);
    for (std::size_t i = 0; i < matrix.rows; ++i) {
        const auto row = matrix.row(i);
        for (std::size_t j = 0; j < matrix.cols; ++j) {
            mean[j] += row[j];
        }
    }
    for (auto& m : mean) {
        m /= static_cast<double>(matrix.rows);
    }
    return mean;
}

std::vector<double> class_mean(const ActivationSet& set, std::uint32_t layer, ConceptId label) {
    if (label >= set.num_concepts()) {
        throw ValidationError("concept", "unknown concept " + std::to_string(label));
    }
    ConceptMatrix m{label, 0, set.hidden_dim(), {}, {}};
    for (const auto& r : set.layer_records(layer)) {
        if (r.label == label) {
            m.values.insert(m.values.end(), r.vector.begin(), r.vector.end());
            ++m.rows;
        }
    }
    return class_mean(m);
}

std::vector<double> pooled_mean(const ActivationSet& set, std::uint32_t layer) {
    const auto records = set.layer_records(layer);
    if (records.empty()) {
        throw ValidationError("layer", "no records at layer " + std::to_string(layer));
    }
    std::vector<double> mean(set.hidden_dim(), 0.0);
    for (const auto& r : records) {
        for (std::size_t j = 0; j < mean.size(); ++j) {
            mean[j] += r.vector[j];
        }
    }
    for (auto& m : mean) {
        m /= static_cast<double>(records.size());
    }
    return mean;
}

// ---------------------------------------------------------------------------
// Binary

std::vector<std::uint8_t> encode_activations(const ActivationSet& set) {
    io::Writer w;
    w.bytes(kMagic);
    w.put<std::uint16_t>(kVersion);
    json manifest = set.manifest();
    manifest["records"] = set.records().size();
    const std::string header = manifest.dump();
    w.put<std::uint32_t>(static_cast<std::uint32_t>(header.size()));
    w.bytes(header);
    for (const auto& r : set.records()) {
        w.put<std::uint64_t>(r.sample_id);
        w.put<std::uint32_t>(r.label);
        w.put<std::uint32_t>(r.layer);
        for (float v : r.vector) {
            w.put(v);
        }
    }
    w.finish_with_crc();
    return w.buffer();
}

ActivationSet decode_activations(std::span<const std::uint8_t> bytes) {
    std::size_t expected = 0;
    {
        io::Reader peek(bytes);
        try {
            peek.bytes(4);
            peek.get<std::uint16_t>();
            const auto header_len = peek.get<std::uint32_t>();
            expected = 4 + 2 + 4 + std::size_t{header_len} + 4;
            if (header_len <= peek.remaining()) {
                const auto header = json::parse(peek.bytes(header_len), nullptr, false);
                if (header.is_object() && header.contains("records") && header.contains("hidden_dim")) {
                    const auto n = header["records"].get<std::uint64_t>();
                    const auto d = header["hidden_dim"].get<std::uint64_t>();
                    expected += n * (16 + 4 * d);
                }
            }
        } catch (const TruncatedError&) {
            throw TruncatedError("activation set: file is truncated");
        } catch (const json::exception&) {
            // Left to the checksum.
        }
    }
    const auto body = io::verify_sealed(bytes, expected, "activation set");
    io::Reader r(body);
    if (r.bytes(4) != kMagic) {
        throw FormatError("activation set: bad magic");
    }
    const auto version = r.get<std::uint16_t>();
    if (version != kVersion) {
        throw VersionError("activation set: unsupported version " + std::to_string(version));
    }
    const auto header_len = r.get<std::uint32_t>();
    ActivationManifest manifest;
    std::uint64_t count = 0;
    try {
        const auto header = json::parse(r.bytes(header_len));
        header.get_to(manifest);
        count = header.at("records").get<std::uint64_t>();
    } catch (const json::exception& e) {
        throw FormatError("activation set: bad manifest: " + std::string(e.what()));
    }
    std::vector<ActivationRecord> records(count);
    for (auto& rec : records) {
        rec.sample_id = r.get<std::uint64_t>();
        rec.label = r.get<std::uint32_t>();
        rec.layer = r.get<std::uint32_t>();
        rec.vector.resize(manifest.hidden_dim);
        for (auto& v : rec.vector) {
            v = r.get<float>();
        }
    }
    if (r.remaining() != 0) {
        throw FormatError("activation set: trailing bytes");
    }
    try {
        return ActivationSet(std::move(manifest), std::move(records));
    } catch (const ValidationError& e) {
        throw FormatError(std::string("activation set: ") + e.what());
    }
}

// ---------------------------------------------------------------------------
// JSONL

std::string encode_activations_jsonl(const ActivationSet& set) {
    std::ostringstream out;
    json manifest = set.manifest();
    manifest["records"] = set.records().size();
    out << manifest.dump() << '\n';
    for (const auto& r : set.records()) {
        out << json{{"sample_id", r.sample_id}, {"concept", r.label}, {"layer", r.layer}, {"vector", r.vector}}.dump()
            << '\n';
    }
    return out.str();
}

ActivationSet decode_activations_jsonl(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    ActivationManifest manifest;
    std::vector<ActivationRecord> records;
    std::size_t lineno = 0;
    try {
        if (!std::getline(in, line)) {
            throw FormatError("activation JSONL: missing manifest line");
        }
        ++lineno;
        json::parse(line).get_to(manifest);
        while (std::getline(in, line)) {
            ++lineno;
            if (line.empty()) {
                continue;
            }
            const auto j = json::parse(line);
            ActivationRecord rec;
            j.at("sample_id").get_to(rec.sample_id);
            j.at("concept").get_to(rec.label);
            j.at("layer").get_to(rec.layer);
            j.at("vector").get_to(rec.vector);
            records.push_back(std::move(rec));
        }
    } catch (const json::exception& e) {
        throw FormatError("activation JSONL line " + std::to_string(lineno) + ": " + e.what());
    }
    try {
        return ActivationSet(std::move(manifest), std::move(records));
    } catch (const ValidationError& e) {
        throw FormatError(std::string("activation JSONL: ") + e.what());
    }
}

void save_activations(const ActivationSet& set, const std::filesystem::path& path) {
    if (path.extension() == ".jsonl") {
        const auto text = encode_activations_jsonl(set);
        io::write_file(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
    } else {
        io::write_file(path, encode_activations(set));
    }
}

ActivationSet load_activations(const std::filesystem::path& path) {
    const auto bytes = io::read_file(path);
    if (path.extension() == ".jsonl") {
        return decode_activations_jsonl(std::string(bytes.begin(), bytes.end()));
    }
    return decode_activations(bytes);
}

} // namespace neuronlens
