#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "neuronlens/activation_store.hpp"
#include "neuronlens/dataset.hpp"
#include "neuronlens/model.hpp"

namespace neuronlens::testing {

// Fresh directory under the test's working directory, emptied on creation.
inline std::filesystem::path scratch_dir(const std::string& name) {
    auto dir = std::filesystem::current_path() / ("scratch_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

// 2 layers, d = 8: small enough for finite differences.
inline ModelConfig tiny_config(std::uint64_t seed = 3) {
    ModelConfig c;
    c.num_layers = 2;
    c.hidden_dim = 8;
    c.num_heads = 2;
    c.mlp_ratio = 2;
    c.vocab_size = 8;
    c.max_seq_len = 6;
    c.num_classes = 3;
    c.seed = seed;
    return c;
}

inline std::vector<LabeledSequence> random_sequences(std::size_t n, std::uint32_t vocab, std::uint32_t len,
                                                     std::uint32_t classes, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<TokenId> tok(0, vocab - 1);
    std::uniform_int_distribution<ConceptId> lab(0, classes - 1);
    std::vector<LabeledSequence> out(n);
    for (auto& s : out) {
        s.tokens.resize(len);
        for (auto& t : s.tokens) {
            t = tok(rng);
        }
        s.label = lab(rng);
    }
    return out;
}

// Activations drawn directly from per-(concept, neuron) Gaussians, so every
// (neuron, concept) pair is normal by construction.
inline ActivationSet gaussian_set(std::uint64_t seed, std::uint32_t concepts, std::uint32_t d, std::size_t per_concept,
                                  std::vector<std::uint32_t> layers = {1}, Split split = Split::train) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> loc(-2.0, 2.0);
    std::uniform_real_distribution<double> scale(0.5, 1.5);
    ActivationManifest m;
    m.hidden_dim = d;
    m.layers = layers;
    for (std::uint32_t c = 0; c < concepts; ++c) {
        m.concepts.push_back("concept_" + std::to_string(c));
    }
    m.split = split;
    std::vector<ActivationRecord> records;
    std::uint64_t id = 0;
    for (auto l : layers) {
        std::vector<std::normal_distribution<double>> dists;
        for (std::uint32_t k = 0; k < concepts * d; ++k) {
            dists.emplace_back(loc(rng), scale(rng));
        }
        for (std::uint32_t c = 0; c < concepts; ++c) {
            for (std::size_t i = 0; i < per_concept; ++i) {
                ActivationRecord r{id++, c, l, std::vector<float>(d)};
                for (std::uint32_t j = 0; j < d; ++j) {
                    r.vector[j] = static_cast<float>(dists[c * d + j](rng));
                }
                records.push_back(std::move(r));
            }
        }
    }
    return ActivationSet(m, std::move(records));
}

} // namespace neuronlens::testing
