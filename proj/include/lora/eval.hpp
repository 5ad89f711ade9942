#pragma once

// Perplexity of a GPT-2 style decoder over pre-tokenized sequences.

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "lora/delta.hpp"

namespace lora {

struct TokenDataset {
    std::vector<std::vector<int>> sequences;
    int max_seq_len = 64;
    int vocab_bound = 0;

    /// Every id in [0, vocab_bound), every length in [2, max_seq_len].
    void validate() const;
};

/// JSON: {"max_seq_len": int, "vocab_bound": int, "sequences": [[int, ...], ...]}
TokenDataset load_dataset(const std::filesystem::path& path);

struct PerplexityResult {
    double mean_nll = 0.0;  // nats per predicted token
    double perplexity = 0.0;
    std::int64_t token_count = 0;
};

enum class Weighting { Token, Sequence };

inline constexpr double kLayerNormEps = 1e-5;

/// Pre-norm decoder stack with causal fused-QKV attention, exact-erf GELU and
/// tied output embedding. Returns logits of shape (tokens, vocab).
MatrixD forward(const ModelWeights& weights, std::span<const int> tokens);

/// Mean next-token negative log-likelihood and exp(mean). Sequences are
/// evaluated independently; Weighting::Token averages over all predicted
/// positions, Weighting::Sequence averages per-sequence means.
PerplexityResult mean_nll(const ModelWeights& weights, const TokenDataset& data,
                          Weighting weighting = Weighting::Token);

/// mean_nll(apply_to_base(base, compose(terms)), data).
PerplexityResult eval_composed(const ModelWeights& base, std::span<const ComposeTerm> terms,
                               const TokenDataset& data, const ComposeOptions& options = {},
                               Weighting weighting = Weighting::Token);

}  // namespace lora
