#include "neuronlens/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <cstdint>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "neuronlens/binary_io.hpp"
#include "neuronlens/error.hpp"

namespace neuronlens {

using nlohmann::json;

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;
constexpr std::uint16_t kCheckpointVersion = 1;
constexpr std::string_view kCheckpointMagic = "NLMD";

double round_to_f32(double x) {
    return static_cast<double>(static_cast<float>(x));
}

} // namespace

const char* to_string(Readout readout) {
    return readout == Readout::first_token ? "first_token" : "last_token";
}

Readout readout_from_string(const std::string& name) {
    if (name == "first_token" || name == "first") {
        return Readout::first_token;
    }
    if (name == "last_token" || name == "last") {
        return Readout::last_token;
    }
    throw ValidationError("readout", "expected first_token or last_token, got '" + name + "'");
}

void ModelConfig::validate() const {
    if (num_layers < 1) {
        throw ValidationError("num_layers", "must be >= 1");
    }
    if (hidden_dim < 1) {
        throw ValidationError("hidden_dim", "must be >= 1");
    }
    if (num_heads < 1 || hidden_dim % num_heads != 0) {
        throw ValidationError("num_heads", "must divide hidden_dim");
    }
    if (mlp_ratio < 1) {
        throw ValidationError("mlp_ratio", "must be >= 1");
    }
    if (vocab_size < 1) {
        throw ValidationError("vocab_size", "must be >= 1");
    }
    if (max_seq_len < 1) {
        throw ValidationError("max_seq_len", "must be >= 1");
    }
    if (num_classes < 2) {
        throw ValidationError("num_classes", "must be >= 2");
    }
    if (batch_size < 1) {
        throw ValidationError("batch_size", "must be >= 1");
    }
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
        throw ValidationError("learning_rate", "must be positive");
    }
}

void to_json(json& j, const ModelConfig& c) {
    j = json{{"num_layers", c.num_layers},     {"hidden_dim", c.hidden_dim},
             {"num_heads", c.num_heads},       {"mlp_ratio", c.mlp_ratio},
             {"vocab_size", c.vocab_size},     {"max_seq_len", c.max_seq_len},
             {"num_classes", c.num_classes},   {"readout", to_string(c.readout)},
             {"seed", c.seed},                 {"epochs", c.epochs},
             {"batch_size", c.batch_size},     {"learning_rate", c.learning_rate}};
}

void from_json(const json& j, ModelConfig& c) {
    j.at("num_layers").get_to(c.num_layers);
    j.at("hidden_dim").get_to(c.hidden_dim);
    j.at("num_heads").get_to(c.num_heads);
    j.at("mlp_ratio").get_to(c.mlp_ratio);
    j.at("vocab_size").get_to(c.vocab_size);
    j.at("max_seq_len").get_to(c.max_seq_len);
    j.at("num_classes").get_to(c.num_classes);
    c.readout = readout_from_string(j.at("readout").get<std::string>());
    j.at("seed").get_to(c.seed);
    j.at("epochs").get_to(c.epochs);
    j.at("batch_size").get_to(c.batch_size);
    j.at("learning_rate").get_to(c.learning_rate);
}

ParameterLayout::ParameterLayout(const ModelConfig& config) {
    const std::size_t d = config.hidden_dim;
    const std::size_t f = config.ffn_dim();
    std::size_t off = 0;
    auto take = [&off](std::size_t n) {
        const auto at = off;
        off += n;
        return at;
    };
    token_embedding = take(config.vocab_size * d);
    position_embedding = take(config.max_seq_len * d);
    blocks.reserve(config.num_layers);
    for (std::uint32_t l = 0; l < config.num_layers; ++l) {
        Block b{};
        b.ln1_gain = take(d);
        b.ln1_bias = take(d);
        b.wq = take(d * d);
        b.bq = take(d);
        b.wk = take(d * d);
        b.bk = take(d);
        b.wv = take(d * d);
        b.bv = take(d);
        b.wo = take(d * d);
        b.bo = take(d);
        b.ln2_gain = take(d);
        b.ln2_bias = take(d);
        b.w1 = take(d * f);
        b.b1 = take(f);
        b.w2 = take(f * d);
        b.b2 = take(d);
        blocks.push_back(b);
    }
    lnf_gain = take(d);
    lnf_bias = take(d);
    head = take(d * config.num_classes);
    head_bias = take(config.num_classes);
    total = off;
}

Model::Model(ModelConfig config, std::span<const double> parameters)
    : config_(std::move(config)), layout_(config_), params_(parameters.begin(), parameters.end()) {
    config_.validate();
    if (params_.size() != layout_.total) {
        throw ValidationError("parameters", "expected " + std::to_string(layout_.total) + " values, got " +
                                                std::to_string(params_.size()));
    }
    for (auto& p : params_) {
        if (!std::isfinite(p)) {
            throw NumericalError("non-finite model parameter");
        }
        p = round_to_f32(p);
    }
}

Model Model::initialize(const ModelConfig& config) {
    config.validate();
    const ParameterLayout layout(config);
    std::vector<double> p(layout.total, 0.0);
    std::mt19937_64 rng(config.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    auto fill = [&](std::size_t at, std::size_t n, double stddev) {
        for (std::size_t i = 0; i < n; ++i) {
            p[at + i] = stddev * normal(rng);
        }
    };
    auto ones = [&](std::size_t at, std::size_t n) { std::fill_n(p.begin() + static_cast<std::ptrdiff_t>(at), n, 1.0); };

    const std::size_t d = config.hidden_dim;
    const std::size_t f = config.ffn_dim();
    const double in_d = 1.0 / std::sqrt(static_cast<double>(d));
    const double in_f = 1.0 / std::sqrt(static_cast<double>(f));
    const double residual_scale = 1.0 / std::sqrt(2.0 * config.num_layers);

    fill(layout.token_embedding, config.vocab_size * d, 1.0);
    fill(layout.position_embedding, config.max_seq_len * d, 0.1);
    for (const auto& b : layout.blocks) {
        ones(b.ln1_gain, d);
        fill(b.wq, d * d, in_d);
        fill(b.wk, d * d, in_d);
        fill(b.wv, d * d, in_d);
        fill(b.wo, d * d, in_d * residual_scale);
        ones(b.ln2_gain, d);
        fill(b.w1, d * f, in_d);
        fill(b.w2, f * d, in_f * residual_scale);
    }
    ones(layout.lnf_gain, d);
    fill(layout.head, d * config.num_classes, in_d);
    return Model(config, std::move(p));
}

std::uint32_t Model::checksum() const {
    io::Writer w;
    for (double p : params_) {
        w.put(static_cast<float>(p));
    }
    return io::crc32(w.buffer());
}

// ---------------------------------------------------------------------------
// Kernels. Activations are row-major [rows x cols].

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;
using ConstRowVector = Eigen::Map<const Eigen::RowVectorXd>;
using RowVectorMap = Eigen::Map<Eigen::RowVectorXd>;

// y[r, :] = x[r, :] W + b  with W [in x out].
void linear(const double* x, std::size_t rows, std::size_t in, const double* w, const double* b, std::size_t out,
            double* y) {
    const auto r = static_cast<Eigen::Index>(rows);
    const auto n_in = static_cast<Eigen::Index>(in);
    const auto n_out = static_cast<Eigen::Index>(out);
    MatrixMap Y(y, r, n_out);
    Y.noalias() = ConstMatrixMap(x, r, n_in) * ConstMatrixMap(w, n_in, n_out);
    Y.rowwise() += ConstRowVector(b, n_out);
}

// Accumulates dW, db and writes (or adds to) dx.
void linear_backward(const double* x, std::size_t rows, std::size_t in, const double* w, std::size_t out,
                     const double* dy, double* dx, double* dw, double* db, bool accumulate_dx) {
    const auto r = static_cast<Eigen::Index>(rows);
    const auto n_in = static_cast<Eigen::Index>(in);
    const auto n_out = static_cast<Eigen::Index>(out);
    const ConstMatrixMap X(x, r, n_in);
    const ConstMatrixMap W(w, n_in, n_out);
    const ConstMatrixMap dY(dy, r, n_out);
    MatrixMap(dw, n_in, n_out).noalias() += X.transpose() * dY;
    RowVectorMap(db, n_out) += dY.colwise().sum();
    MatrixMap dX(dx, r, n_in);
    if (accumulate_dx) {
        dX.noalias() += dY * W.transpose();
    } else {
        dX.noalias() = dY * W.transpose();
    }
}

void layer_norm(const double* x, std::size_t rows, std::size_t d, const double* gain, const double* bias, double* y,
                double* mean_out, double* rstd_out) {
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x + r * d;
        double mean = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            mean += xr[i];
        }
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            const double c = xr[i] - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
        double* yr = y + r * d;
        for (std::size_t i = 0; i < d; ++i) {
            yr[i] = (xr[i] - mean) * rstd * gain[i] + bias[i];
        }
        mean_out[r] = mean;
        rstd_out[r] = rstd;
    }
}

// Adds the input gradient to dx.
void layer_norm_backward(const double* x, std::size_t rows, std::size_t d, const double* gain, const double* mean,
                         const double* rstd, const double* dy, double* dx, double* dgain, double* dbias) {
    const double inv_d = 1.0 / static_cast<double>(d);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x + r * d;
        const double* dyr = dy + r * d;
        double sum_dxhat = 0.0;
        double sum_dxhat_xhat = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            const double xhat = (xr[i] - mean[r]) * rstd[r];
            const double dxhat = dyr[i] * gain[i];
            dgain[i] += dyr[i] * xhat;
            dbias[i] += dyr[i];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
        }
        double* dxr = dx + r * d;
        for (std::size_t i = 0; i < d; ++i) {
            const double xhat = (xr[i] - mean[r]) * rstd[r];
            const double dxhat = dyr[i] * gain[i];
            dxr[i] += rstd[r] * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
        }
    }
}

constexpr double kGeluC = 0.7978845608028654; // sqrt(2/pi)

double gelu(double u) {
    return 0.5 * u * (1.0 + std::tanh(kGeluC * (u + 0.044715 * u * u * u)));
}

double gelu_grad(double u) {
    const double t = std::tanh(kGeluC * (u + 0.044715 * u * u * u));
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * 0.044715 * u * u);
}

struct BlockTrace {
    AlignedVector<double> x_in, a, ln1_mean, ln1_rstd;
    AlignedVector<double> q, k, v, probs, attn;
    AlignedVector<double> x_mid, m, ln2_mean, ln2_rstd;
    AlignedVector<double> u, g;
};

struct Trace {
    std::size_t seq = 0;
    std::size_t pos = 0;
    std::vector<BlockTrace> blocks;
    AlignedVector<double> x_out;
    double lnf_mean = 0.0, lnf_rstd = 0.0;
    AlignedVector<double> z, logits, proba;
};

void softmax_inplace(std::span<double> v) {
    const double mx = *std::max_element(v.begin(), v.end());
    double total = 0.0;
    for (auto& e : v) {
        e = std::exp(e - mx);
        total += e;
    }
    for (auto& e : v) {
        e /= total;
    }
}

void check_tokens(const ModelConfig& cfg, std::span<const TokenId> tokens) {
    if (tokens.empty() || tokens.size() > cfg.max_seq_len) {
        throw ValidationError("tokens", "sequence length " + std::to_string(tokens.size()) + " outside [1, " +
                                            std::to_string(cfg.max_seq_len) + "]");
    }
    for (auto t : tokens) {
        if (t >= cfg.vocab_size) {
            throw ValidationError("tokens", "token id " + std::to_string(t) + " >= vocab_size");
        }
    }
}

// Called with the 1-based block index and the readout row of the residual
// stream after that block; the row may be edited in place.
using BlockVisitor = std::function<void(std::uint32_t, std::span<double>)>;

void run_forward(const ModelConfig& cfg, const ParameterLayout& lay, std::span<const double> params,
                 std::span<const TokenId> tokens, Trace& tr, const BlockVisitor* visit) {
    const double* P = params.data();
    const std::size_t T = tokens.size();
    const std::size_t d = cfg.hidden_dim;
    const std::size_t f = cfg.ffn_dim();
    const std::size_t H = cfg.num_heads;
    const std::size_t dh = d / H;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const bool causal = cfg.causal();

    tr.seq = T;
    tr.pos = readout_position(cfg, T);
    tr.blocks.resize(cfg.num_layers);

    AlignedVector<double> x(T * d);
    for (std::size_t t = 0; t < T; ++t) {
        const double* e = P + lay.token_embedding + tokens[t] * d;
        const double* p = P + lay.position_embedding + t * d;
        for (std::size_t i = 0; i < d; ++i) {
            x[t * d + i] = e[i] + p[i];
        }
    }

    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        const auto& b = lay.blocks[l];
        auto& bt = tr.blocks[l];
        bt.x_in = x;
        bt.a.resize(T * d);
        bt.ln1_mean.resize(T);
        bt.ln1_rstd.resize(T);
        layer_norm(x.data(), T, d, P + b.ln1_gain, P + b.ln1_bias, bt.a.data(), bt.ln1_mean.data(),
                   bt.ln1_rstd.data());
        bt.q.resize(T * d);
        bt.k.resize(T * d);
        bt.v.resize(T * d);
        linear(bt.a.data(), T, d, P + b.wq, P + b.bq, d, bt.q.data());
        linear(bt.a.data(), T, d, P + b.wk, P + b.bk, d, bt.k.data());
        linear(bt.a.data(), T, d, P + b.wv, P + b.bv, d, bt.v.data());

        bt.probs.assign(H * T * T, 0.0);
        bt.attn.assign(T * d, 0.0);
        for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t i = 0; i < T; ++i) {
                const std::size_t limit = causal ? i + 1 : T;
                double* row = bt.probs.data() + (h * T + i) * T;
                const double* qi = bt.q.data() + i * d + h * dh;
                for (std::size_t j = 0; j < limit; ++j) {
                    const double* kj = bt.k.data() + j * d + h * dh;
                    double s = 0.0;
                    for (std::size_t e = 0; e < dh; ++e) {
                        s += qi[e] * kj[e];
                    }
                    row[j] = s * scale;
                }
                softmax_inplace(std::span<double>(row, limit));
                double* oi = bt.attn.data() + i * d + h * dh;
                for (std::size_t j = 0; j < limit; ++j) {
                    const double* vj = bt.v.data() + j * d + h * dh;
                    for (std::size_t e = 0; e < dh; ++e) {
                        oi[e] += row[j] * vj[e];
                    }
                }
            }
        }

        AlignedVector<double> proj(T * d);
        linear(bt.attn.data(), T, d, P + b.wo, P + b.bo, d, proj.data());
        for (std::size_t i = 0; i < T * d; ++i) {
            x[i] += proj[i];
        }
        bt.x_mid = x;

        bt.m.resize(T * d);
        bt.ln2_mean.resize(T);
        bt.ln2_rstd.resize(T);
        layer_norm(x.data(), T, d, P + b.ln2_gain, P + b.ln2_bias, bt.m.data(), bt.ln2_mean.data(),
                   bt.ln2_rstd.data());
        bt.u.resize(T * f);
        bt.g.resize(T * f);
        linear(bt.m.data(), T, d, P + b.w1, P + b.b1, f, bt.u.data());
        for (std::size_t i = 0; i < T * f; ++i) {
            bt.g[i] = gelu(bt.u[i]);
        }
        linear(bt.g.data(), T, f, P + b.w2, P + b.b2, d, proj.data());
        for (std::size_t i = 0; i < T * d; ++i) {
            x[i] += proj[i];
        }

        if (visit != nullptr) {
            (*visit)(static_cast<std::uint32_t>(l + 1), std::span<double>(x.data() + tr.pos * d, d));
        }
    }

    tr.x_out = x;
    const double* xr = x.data() + tr.pos * d;
    tr.z.resize(d);
    layer_norm(xr, 1, d, P + lay.lnf_gain, P + lay.lnf_bias, tr.z.data(), &tr.lnf_mean, &tr.lnf_rstd);
    tr.logits.resize(cfg.num_classes);
    linear(tr.z.data(), 1, d, P + lay.head, P + lay.head_bias, cfg.num_classes, tr.logits.data());
    tr.proba = tr.logits;
    softmax_inplace(tr.proba);
}

// Accumulates scale * dLoss/dparams for one traced sample into grad.
void run_backward(const ModelConfig& cfg, const ParameterLayout& lay, std::span<const double> params,
                  std::span<const TokenId> tokens, const Trace& tr, ConceptId label, double scale,
                  std::span<double> grad) {
    const double* P = params.data();
    double* G = grad.data();
    const std::size_t T = tr.seq;
    const std::size_t d = cfg.hidden_dim;
    const std::size_t f = cfg.ffn_dim();
    const std::size_t H = cfg.num_heads;
    const std::size_t dh = d / H;
    const std::size_t C = cfg.num_classes;
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const bool causal = cfg.causal();

    AlignedVector<double> dlogits(C);
    for (std::size_t c = 0; c < C; ++c) {
        dlogits[c] = scale * (tr.proba[c] - (c == label ? 1.0 : 0.0));
    }
    AlignedVector<double> dz(d);
    linear_backward(tr.z.data(), 1, d, P + lay.head, C, dlogits.data(), dz.data(), G + lay.head, G + lay.head_bias,
                    false);

    AlignedVector<double> dx(T * d, 0.0);
    layer_norm_backward(tr.x_out.data() + tr.pos * d, 1, d, P + lay.lnf_gain, &tr.lnf_mean, &tr.lnf_rstd,
                        dz.data(), dx.data() + tr.pos * d, G + lay.lnf_gain, G + lay.lnf_bias);

    AlignedVector<double> dg(T * f), dm(T * d), dattn(T * d), dq(T * d), dk(T * d), dv(T * d), da(T * d);
    AlignedVector<double> dp(T);
    for (std::size_t l = cfg.num_layers; l-- > 0;) {
        const auto& b = lay.blocks[l];
        const auto& bt = tr.blocks[l];

        // MLP branch: x_out = x_mid + gelu(m W1 + b1) W2 + b2.
        linear_backward(bt.g.data(), T, f, P + b.w2, d, dx.data(), dg.data(), G + b.w2, G + b.b2, false);
        for (std::size_t i = 0; i < T * f; ++i) {
            dg[i] *= gelu_grad(bt.u[i]);
        }
        linear_backward(bt.m.data(), T, d, P + b.w1, f, dg.data(), dm.data(), G + b.w1, G + b.b1, false);
        layer_norm_backward(bt.x_mid.data(), T, d, P + b.ln2_gain, bt.ln2_mean.data(), bt.ln2_rstd.data(),
                            dm.data(), dx.data(), G + b.ln2_gain, G + b.ln2_bias);

        // Attention branch: x_mid = x_in + attn Wo + bo.
        linear_backward(bt.attn.data(), T, d, P + b.wo, d, dx.data(), dattn.data(), G + b.wo, G + b.bo, false);
        std::fill(dq.begin(), dq.end(), 0.0);
        std::fill(dk.begin(), dk.end(), 0.0);
        std::fill(dv.begin(), dv.end(), 0.0);
        for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t i = 0; i < T; ++i) {
                const std::size_t limit = causal ? i + 1 : T;
                const double* row = bt.probs.data() + (h * T + i) * T;
                const double* doi = dattn.data() + i * d + h * dh;
                double dot = 0.0;
                for (std::size_t j = 0; j < limit; ++j) {
                    const double* vj = bt.v.data() + j * d + h * dh;
                    double* dvj = dv.data() + j * d + h * dh;
                    double s = 0.0;
                    for (std::size_t e = 0; e < dh; ++e) {
                        s += doi[e] * vj[e];
                        dvj[e] += row[j] * doi[e];
                    }
                    dp[j] = s;
                    dot += row[j] * s;
                }
                const double* qi = bt.q.data() + i * d + h * dh;
                double* dqi = dq.data() + i * d + h * dh;
                for (std::size_t j = 0; j < limit; ++j) {
                    const double ds = row[j] * (dp[j] - dot) * att_scale;
                    const double* kj = bt.k.data() + j * d + h * dh;
                    double* dkj = dk.data() + j * d + h * dh;
                    for (std::size_t e = 0; e < dh; ++e) {
                        dqi[e] += ds * kj[e];
                        dkj[e] += ds * qi[e];
                    }
                }
            }
        }
        linear_backward(bt.a.data(), T, d, P + b.wq, d, dq.data(), da.data(), G + b.wq, G + b.bq, false);
        linear_backward(bt.a.data(), T, d, P + b.wk, d, dk.data(), da.data(), G + b.wk, G + b.bk, true);
        linear_backward(bt.a.data(), T, d, P + b.wv, d, dv.data(), da.data(), G + b.wv, G + b.bv, true);
        layer_norm_backward(bt.x_in.data(), T, d, P + b.ln1_gain, bt.ln1_mean.data(), bt.ln1_rstd.data(),
                            da.data(), dx.data(), G + b.ln1_gain, G + b.ln1_bias);
    }

    for (std::size_t t = 0; t < T; ++t) {
        double* ge = G + lay.token_embedding + tokens[t] * d;
        double* gp = G + lay.position_embedding + t * d;
        for (std::size_t i = 0; i < d; ++i) {
            ge[i] += dx[t * d + i];
            gp[i] += dx[t * d + i];
        }
    }
}

ConceptId argmax(std::span<const double> v) {
    return static_cast<ConceptId>(std::max_element(v.begin(), v.end()) - v.begin());
}

} // namespace

std::size_t readout_position(const ModelConfig& config, std::size_t seq_len) {
    return config.readout == Readout::first_token ? 0 : seq_len - 1;
}

HookedOutput forward_with_hook(const Model& model, std::span<const TokenId> tokens, const HookSpec& hook) {
    const auto& cfg = model.config();
    check_tokens(cfg, tokens);
    if (hook.layer < 1 || hook.layer > cfg.num_layers) {
        throw ValidationError("layer", "hook layer " + std::to_string(hook.layer) + " outside [1, " +
                                           std::to_string(cfg.num_layers) + "]");
    }
    Trace tr;
    HookedOutput out;
    const BlockVisitor visit = [&](std::uint32_t layer, std::span<double> row) {
        if (layer != hook.layer) {
            return;
        }
        out.captured.assign(row.begin(), row.end());
        if (hook.edit) {
            hook.edit(row);
        }
    };
    run_forward(cfg, model.layout(), model.parameters(), tokens, tr, &visit);
    out.prediction.proba.assign(tr.proba.begin(), tr.proba.end());
    out.prediction.label = argmax(tr.proba);
    out.logits.assign(tr.logits.begin(), tr.logits.end());
    return out;
}

Prediction predict_proba(const Model& model, std::span<const TokenId> tokens) {
    check_tokens(model.config(), tokens);
    Trace tr;
    run_forward(model.config(), model.layout(), model.parameters(), tokens, tr, nullptr);
    return Prediction{argmax(tr.proba), {tr.proba.begin(), tr.proba.end()}};
}

std::vector<double> logits(const Model& model, std::span<const TokenId> tokens) {
    check_tokens(model.config(), tokens);
    Trace tr;
    run_forward(model.config(), model.layout(), model.parameters(), tokens, tr, nullptr);
    return {tr.logits.begin(), tr.logits.end()};
}

std::vector<std::vector<double>> capture_layers(const Model& model, std::span<const TokenId> tokens,
                                                std::span<const std::uint32_t> layers) {
    const auto& cfg = model.config();
    check_tokens(cfg, tokens);
    std::vector<std::vector<double>> out(layers.size());
    for (auto l : layers) {
        if (l < 1 || l > cfg.num_layers) {
            throw ValidationError("layer", "layer " + std::to_string(l) + " outside [1, " +
                                               std::to_string(cfg.num_layers) + "]");
        }
    }
    const BlockVisitor visit = [&](std::uint32_t layer, std::span<double> row) {
        for (std::size_t i = 0; i < layers.size(); ++i) {
            if (layers[i] == layer) {
                out[i].assign(row.begin(), row.end());
            }
        }
    };
    Trace tr;
    run_forward(cfg, model.layout(), model.parameters(), tokens, tr, &visit);
    return out;
}

double loss_and_gradient(const ModelConfig& config, std::span<const double> params,
                         std::span<const LabeledSequence> batch, std::span<double> grad) {
    const ParameterLayout lay(config);
    if (params.size() != lay.total || grad.size() != lay.total) {
        throw ValidationError("parameters", "size does not match the model layout");
    }
    if (batch.empty()) {
        throw ValidationError("batch", "empty batch");
    }
    const auto aligned = [](const void* p) {
        return reinterpret_cast<std::uintptr_t>(p) % kBufferAlignment == 0;
    };
    if (!aligned(params.data()) || !aligned(grad.data())) {
        const AlignedVector<double> p(params.begin(), params.end());
        AlignedVector<double> g(grad.size());
        const double loss = loss_and_gradient(config, p, batch, g);
        std::copy(g.begin(), g.end(), grad.begin());
        return loss;
    }
    std::fill(grad.begin(), grad.end(), 0.0);
    const double scale = 1.0 / static_cast<double>(batch.size());
    double loss = 0.0;
    Trace tr;
    for (const auto& s : batch) {
        check_tokens(config, s.tokens);
        if (s.label >= config.num_classes) {
            throw ValidationError("concept", "label " + std::to_string(s.label) + " >= num_classes");
        }
        run_forward(config, lay, params, s.tokens, tr, nullptr);
        loss -= scale * std::log(std::max(tr.proba[s.label], 1e-300));
        run_backward(config, lay, params, s.tokens, tr, s.label, scale, grad);
    }
    return loss;
}

double accuracy(const Model& model, std::span<const LabeledSequence> samples) {
    if (samples.empty()) {
        return 0.0;
    }
    std::size_t correct = 0;
    for (const auto& s : samples) {
        correct += predict_proba(model, s.tokens).label == s.label ? 1 : 0;
    }
    return static_cast<double>(correct) / static_cast<double>(samples.size());
}

TrainResult train(const Corpus& corpus, const ModelConfig& config) {
    config.validate();
    if (config.num_classes != corpus.spec.num_concepts) {
        throw ValidationError("num_classes", "must equal the corpus concept count");
    }
    if (config.vocab_size < corpus.spec.vocab_size) {
        throw ValidationError("vocab_size", "smaller than the corpus vocabulary");
    }
    if (corpus.train.empty()) {
        throw ValidationError("corpus", "empty training split");
    }

    const Model init = Model::initialize(config);
    AlignedVector<double> params(init.parameters().begin(), init.parameters().end());
    AlignedVector<double> grad(params.size()), m1(params.size(), 0.0), m2(params.size(), 0.0);

    std::vector<std::size_t> order(corpus.train.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(config.seed ^ 0x9e3779b97f4a7c15ULL);

    TrainResult result{init, {}, 0.0, 0.0};
    std::vector<LabeledSequence> batch;
    std::size_t step = 0;
    const std::size_t batches_per_epoch = (order.size() + config.batch_size - 1) / config.batch_size;
    const double total_steps = static_cast<double>(batches_per_epoch) * config.epochs;
    for (std::uint32_t epoch = 0; epoch < config.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_loss = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t end = std::min(order.size(), start + config.batch_size);
            batch.clear();
            for (std::size_t i = start; i < end; ++i) {
                batch.push_back(corpus.train[order[i]]);
            }
            const double loss = loss_and_gradient(config, params, batch, grad);
            if (!std::isfinite(loss)) {
                throw TrainingDivergence(step, "loss is not finite");
            }
            // Linear decay to a tenth of the base rate over the run.
            const double lr = config.learning_rate * (1.0 - 0.9 * static_cast<double>(step) / total_steps);
            ++step;
            const double bc1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(step));
            const double bc2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(step));
            for (std::size_t i = 0; i < params.size(); ++i) {
                m1[i] = kAdamBeta1 * m1[i] + (1.0 - kAdamBeta1) * grad[i];
                m2[i] = kAdamBeta2 * m2[i] + (1.0 - kAdamBeta2) * grad[i] * grad[i];
                params[i] -= lr * (m1[i] / bc1) / (std::sqrt(m2[i] / bc2) + kAdamEps);
            }
            epoch_loss += loss;
            ++batches;
        }
        result.epoch_loss.push_back(epoch_loss / static_cast<double>(batches));
    }

    result.model = Model(config, params);
    result.train_accuracy = accuracy(result.model, corpus.train);
    result.eval_accuracy = accuracy(result.model, corpus.eval);
    return result;
}

// ---------------------------------------------------------------------------
// Checkpoints

std::vector<std::uint8_t> encode_model(const Model& model) {
    io::Writer w;
    w.bytes(kCheckpointMagic);
    w.put<std::uint16_t>(kCheckpointVersion);
    const std::string header = json(model.config()).dump();
    w.put<std::uint32_t>(static_cast<std::uint32_t>(header.size()));
    w.bytes(header);
    w.put<std::uint64_t>(model.parameters().size());
    for (double p : model.parameters()) {
        w.put(static_cast<float>(p));
    }
    w.finish_with_crc();
    return w.buffer();
}

Model decode_model(std::span<const std::uint8_t> bytes) {
    // Declared size, read leniently so truncation can be told apart from
    // corruption before the checksum is checked.
    std::size_t expected = 0;
    {
        io::Reader peek(bytes);
        try {
            peek.bytes(4);
            peek.get<std::uint16_t>();
            const auto header_len = peek.get<std::uint32_t>();
            if (header_len <= peek.remaining()) {
                peek.bytes(header_len);
                const auto count = peek.get<std::uint64_t>();
                if (count < (std::uint64_t{1} << 40)) {
                    expected = 4 + 2 + 4 + header_len + 8 + 4 * count + 4;
                }
            } else {
                expected = 4 + 2 + 4 + std::size_t{header_len} + 8 + 4;
            }
        } catch (const TruncatedError&) {
            throw TruncatedError("model checkpoint: file is truncated");
        }
    }
    const auto body = io::verify_sealed(bytes, expected, "model checkpoint");
    io::Reader r(body);
    if (r.bytes(4) != kCheckpointMagic) {
        throw FormatError("model checkpoint: bad magic");
    }
    const auto version = r.get<std::uint16_t>();
    if (version != kCheckpointVersion) {
        throw VersionError("model checkpoint: unsupported version " + std::to_string(version));
    }
    const auto header_len = r.get<std::uint32_t>();
    ModelConfig config;
    try {
        json::parse(r.bytes(header_len)).get_to(config);
    } catch (const json::exception& e) {
        throw FormatError("model checkpoint: bad config header: " + std::string(e.what()));
    }
    const auto count = r.get<std::uint64_t>();
    std::vector<double> params(count);
    for (auto& p : params) {
        p = static_cast<double>(r.get<float>());
    }
    if (r.remaining() != 0) {
        throw FormatError("model checkpoint: trailing bytes");
    }
    return Model(config, std::move(params));
}

void save_model(const Model& model, const std::filesystem::path& path) {
    io::write_file(path, encode_model(model));
}

Model load_model(const std::filesystem::path& path) {
    return decode_model(io::read_file(path));
}

} // namespace neuronlens
