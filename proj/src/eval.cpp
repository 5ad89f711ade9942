#include "lora/eval.hpp"

#include <cmath>
#include <fstream>
#include <numbers>

#include <json.hpp>

#include "lora/parallel.hpp"

namespace lora {

void TokenDataset::validate() const {
    if (max_seq_len < 2) throw InputError("dataset max_seq_len must be >= 2");
    if (vocab_bound < 1) throw InputError("dataset vocab_bound must be >= 1");
    for (std::size_t i = 0; i < sequences.size(); ++i) {
        const auto& seq = sequences[i];
        if (seq.size() < 2 || seq.size() > static_cast<std::size_t>(max_seq_len)) {
            throw InputError("sequence " + std::to_string(i) + " has length " + std::to_string(seq.size()) +
                             ", expected 2.." + std::to_string(max_seq_len));
        }
        for (std::size_t j = 0; j < seq.size(); ++j) {
            if (seq[j] < 0 || seq[j] >= vocab_bound) {
                throw InputError("sequence " + std::to_string(i) + " position " + std::to_string(j) + ": token " +
                                 std::to_string(seq[j]) + " outside [0, " + std::to_string(vocab_bound) + ")");
            }
        }
    }
}

TokenDataset load_dataset(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open dataset " + path.string());
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError("malformed dataset " + path.string() + ": " + e.what(), e.byte);
    }
    TokenDataset data;
    try {
        data.max_seq_len = doc.at("max_seq_len").get<int>();
        data.vocab_bound = doc.at("vocab_bound").get<int>();
        data.sequences = doc.at("sequences").get<std::vector<std::vector<int>>>();
    } catch (const nlohmann::json::exception& e) {
        throw InputError("dataset " + path.string() + ": " + e.what());
    }
    data.validate();
    return data;
}

namespace {

MatrixD layer_norm(const MatrixD& x, const RowVectorD& gamma, const RowVectorD& beta) {
    MatrixD out(x.rows(), x.cols());
    for (Eigen::Index t = 0; t < x.rows(); ++t) {
        const double mean = x.row(t).mean();
        const double var = (x.row(t).array() - mean).square().mean();
        const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
        out.row(t) = ((x.row(t).array() - mean) * inv * gamma.array() + beta.array()).matrix();
    }
    return out;
}

double gelu(double v) {
    return 0.5 * v * (1.0 + std::erf(v / std::numbers::sqrt2));
}

MatrixD causal_attention(const MatrixD& qkv, Eigen::Index d, Eigen::Index heads) {
    const Eigen::Index len = qkv.rows();
    const Eigen::Index hd = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    MatrixD out(len, d);
    for (Eigen::Index h = 0; h < heads; ++h) {
        const MatrixD q = qkv.middleCols(h * hd, hd);
        const MatrixD k = qkv.middleCols(d + h * hd, hd);
        const MatrixD v = qkv.middleCols(2 * d + h * hd, hd);
        MatrixD probs = (q * k.transpose()) * scale;
        for (Eigen::Index t = 0; t < len; ++t) {
            const double max = probs.row(t).head(t + 1).maxCoeff();
            double sum = 0.0;
            for (Eigen::Index j = 0; j <= t; ++j) {
                probs(t, j) = std::exp(probs(t, j) - max);
                sum += probs(t, j);
            }
            probs.row(t).head(t + 1) /= sum;
            probs.row(t).tail(len - t - 1).setZero();
        }
        out.middleCols(h * hd, hd) = probs * v;
    }
    return out;
}

void require_finite(const MatrixD& x, const std::string& where) {
    if (!is_finite(x)) throw NumericError("non-finite activations in " + where);
}

}  // namespace

MatrixD forward(const ModelWeights& w, std::span<const int> tokens) {
    const ModelDims& dims = w.dims;
    if (tokens.empty()) throw InputError("forward: empty token list");
    if (static_cast<Eigen::Index>(tokens.size()) > dims.n_positions) {
        throw InputError("forward: " + std::to_string(tokens.size()) + " tokens exceed n_positions " +
                         std::to_string(dims.n_positions));
    }
    if (dims.d_model % dims.n_head != 0) {
        throw ValidationError("n_embd " + std::to_string(dims.d_model) + " is not divisible by n_head " +
                              std::to_string(dims.n_head));
    }
    const auto len = static_cast<Eigen::Index>(tokens.size());
    MatrixD x(len, dims.d_model);
    for (Eigen::Index t = 0; t < len; ++t) {
        const int id = tokens[static_cast<std::size_t>(t)];
        if (id < 0 || id >= dims.n_vocab) {
            throw InputError("forward: token " + std::to_string(id) + " at position " + std::to_string(t) +
                             " outside vocabulary [0, " + std::to_string(dims.n_vocab) + ")");
        }
        x.row(t) = w.token_embedding.row(id) + w.position_embedding.row(t);
    }

    for (std::size_t i = 0; i < w.blocks.size(); ++i) {
        const BlockWeights& b = w.blocks[i];
        MatrixD qkv = layer_norm(x, b.ln1_gamma, b.ln1_beta) * b.attn_qkv;
        qkv.rowwise() += b.attn_qkv_bias;
        MatrixD attn = causal_attention(qkv, dims.d_model, dims.n_head) * b.attn_proj;
        attn.rowwise() += b.attn_proj_bias;
        x += attn;

        MatrixD hidden = layer_norm(x, b.ln2_gamma, b.ln2_beta) * b.mlp_fc;
        hidden.rowwise() += b.mlp_fc_bias;
        hidden = hidden.unaryExpr(&gelu);
        MatrixD mlp = hidden * b.mlp_proj;
        mlp.rowwise() += b.mlp_proj_bias;
        x += mlp;
        require_finite(x, "block " + std::to_string(i));
    }

    MatrixD logits = layer_norm(x, w.lnf_gamma, w.lnf_beta) * w.token_embedding.transpose();
    require_finite(logits, "output logits");
    return logits;
}

PerplexityResult mean_nll(const ModelWeights& weights, const TokenDataset& data, Weighting weighting) {
    data.validate();
    if (data.sequences.empty()) throw InputError("dataset has no sequences");

    struct Partial {
        double nll_sum = 0.0;
        std::int64_t count = 0;
    };
    std::vector<Partial> partials(data.sequences.size());
    parallel_for(partials.size(), [&](std::size_t s) {
        const auto& seq = data.sequences[s];
        MatrixD logits;
        try {
            logits = forward(weights, seq);
        } catch (const InputError& e) {
            throw InputError("sequence " + std::to_string(s) + ": " + e.what());
        }
        Partial p;
        for (std::size_t t = 0; t + 1 < seq.size(); ++t) {
            const auto row = logits.row(static_cast<Eigen::Index>(t));
            const double max = row.maxCoeff();
            const double log_sum = max + std::log((row.array() - max).exp().sum());
            p.nll_sum += log_sum - row(seq[t + 1]);
            ++p.count;
        }
        partials[s] = p;
    });

    PerplexityResult result;
    double total = 0.0;
    for (const auto& p : partials) {
        total += weighting == Weighting::Token ? p.nll_sum : p.nll_sum / static_cast<double>(p.count);
        result.token_count += p.count;
    }
    result.mean_nll = weighting == Weighting::Token ? total / static_cast<double>(result.token_count)
                                                    : total / static_cast<double>(partials.size());
    result.perplexity = std::exp(result.mean_nll);
    return result;
}

PerplexityResult eval_composed(const ModelWeights& base, std::span<const ComposeTerm> terms, const TokenDataset& data,
                               const ComposeOptions& options, Weighting weighting) {
    if (terms.empty()) throw CompositionError("eval_composed: empty composition list");
    return mean_nll(apply_to_base(base, compose(terms, options)), data, weighting);
}

}  // namespace lora
