#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "neuronlens/aligned.hpp"
#include "neuronlens/dataset.hpp"

namespace neuronlens {

// Which token the classification head reads. last_token mirrors a GPT-style
// causal decoder; first_token mirrors a BERT-style CLS readout and switches
// attention to bidirectional so the first position can see the sequence.
enum class Readout : std::uint8_t { first_token, last_token };

const char* to_string(Readout readout);
Readout readout_from_string(const std::string& name);

struct ModelConfig {
    std::uint32_t num_layers = 4;
    std::uint32_t hidden_dim = 64;
    std::uint32_t num_heads = 4;
    std::uint32_t mlp_ratio = 4;
    std::uint32_t vocab_size = 32;
    std::uint32_t max_seq_len = 16;
    std::uint32_t num_classes = 4;
    Readout readout = Readout::last_token;
    std::uint64_t seed = 0;

    std::uint32_t epochs = 8;
    std::uint32_t batch_size = 32;
    double learning_rate = 3e-3;

    void validate() const;
    std::uint32_t ffn_dim() const { return mlp_ratio * hidden_dim; }
    bool causal() const { return readout == Readout::last_token; }

    bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& config);
void from_json(const nlohmann::json& j, ModelConfig& config);

// Offsets of every tensor inside the flat parameter vector. Matrices are
// row-major with shape [in x out].
struct ParameterLayout {
    struct Block {
        std::size_t ln1_gain, ln1_bias;
        std::size_t wq, bq, wk, bk, wv, bv, wo, bo;
        std::size_t ln2_gain, ln2_bias;
        std::size_t w1, b1, w2, b2;
    };

    std::size_t token_embedding = 0;
    std::size_t position_embedding = 0;
    std::vector<Block> blocks;
    std::size_t lnf_gain = 0, lnf_bias = 0;
    std::size_t head = 0, head_bias = 0;
    std::size_t total = 0;

    explicit ParameterLayout(const ModelConfig& config);
};

// An immutable trained (or freshly initialised) classifier. Parameters are
// held at f64 for arithmetic but are always exactly representable as f32,
// so checkpoints round-trip bitwise.
class Model {
public:
    Model(ModelConfig config, std::span<const double> parameters);

    static Model initialize(const ModelConfig& config);

    const ModelConfig& config() const noexcept { return config_; }
    const ParameterLayout& layout() const noexcept { return layout_; }
    std::span<const double> parameters() const noexcept { return params_; }

    // CRC32 of the f32 little-endian parameter blob.
    std::uint32_t checksum() const;

    bool operator==(const Model& other) const {
        return config_ == other.config_ && params_ == other.params_;
    }

private:
    ModelConfig config_;
    ParameterLayout layout_;
    AlignedVector<double> params_;
};

struct Prediction {
    ConceptId label = 0;
    std::vector<double> proba;
};

// Hook on the residual stream after block `layer` (1-based), at the readout
// token. The captured vector is the value before any edit; `edit`, when set,
// rewrites it in place before later blocks consume it.
struct HookSpec {
    std::uint32_t layer = 1;
    std::function<void(std::span<double>)> edit;
};

struct HookedOutput {
    Prediction prediction;
    std::vector<double> captured;
    std::vector<double> logits;
};

std::size_t readout_position(const ModelConfig& config, std::size_t seq_len);

HookedOutput forward_with_hook(const Model& model, std::span<const TokenId> tokens, const HookSpec& hook);
Prediction predict_proba(const Model& model, std::span<const TokenId> tokens);
std::vector<double> logits(const Model& model, std::span<const TokenId> tokens);

// Readout rows of the residual stream after each requested block, from a
// single unmodified forward pass.
std::vector<std::vector<double>> capture_layers(const Model& model, std::span<const TokenId> tokens,
                                                std::span<const std::uint32_t> layers);

// Mean cross-entropy over `batch` and its gradient with respect to the flat
// parameter vector. Exposed for gradient checks.
double loss_and_gradient(const ModelConfig& config, std::span<const double> params,
                         std::span<const LabeledSequence> batch, std::span<double> grad);

struct TrainResult {
    Model model;
    std::vector<double> epoch_loss;
    double train_accuracy = 0.0;
    double eval_accuracy = 0.0;
};

// Deterministic Adam training on corpus.train; accuracy is reported on
// corpus.eval. Throws TrainingDivergence on a non-finite loss.
TrainResult train(const Corpus& corpus, const ModelConfig& config);

double accuracy(const Model& model, std::span<const LabeledSequence> samples);

// Checkpoint: "NLMD", u16 version, u32 config length, config JSON,
// u64 parameter count, f32 parameters, CRC32.
std::vector<std::uint8_t> encode_model(const Model& model);
Model decode_model(std::span<const std::uint8_t> bytes);
void save_model(const Model& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);

} // namespace neuronlens
