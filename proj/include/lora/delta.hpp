#pragma once

// Delta algebra: reconstruct full LoRA deltas from their factors, compose them
// by signed addition, add them onto base weights, and certify their ranks.
//
// A delta is stored in the base checkpoint's (in, out) orientation,
//     dW = ((alpha / r) * B * A)^T,   shape (m, n),
// so applying it to a base projection is plain addition.

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lora/adapter_io.hpp"

namespace lora {

struct DeltaSet {
    std::vector<std::string> sources;  // signed contributor names, e.g. "+math", "-med"
    std::map<LayerKey, MatrixD> layers;
    int level = 1;                     // number of fundamental blocks summed
    int rank = 0;                      // per-block LoRA rank r
    std::optional<double> alpha;       // unset once blocks with different alpha are forced together
};

/// ((alpha/r) * B*A)^T via one matrix product.
MatrixD reconstruct_delta(const LoraLayerPair& pair, const LoraConfig& config);

/// Same delta as a sum of r rank-1 outer products, (alpha/r) * sum_i A[i,:]^T B[:,i]^T.
/// Kept as an independent evaluation path for cross-checking.
MatrixD reconstruct_delta_outer(const LoraLayerPair& pair, const LoraConfig& config);

DeltaSet build_delta_set(const AdapterBundle& bundle);

struct ComposeTerm {
    const DeltaSet* set = nullptr;
    double coefficient = 1.0;
};

struct ComposeOptions {
    /// Compose blocks whose rank or alpha differ. The deltas are already scaled,
    /// so this only waives the consistency guard.
    bool force = false;
};

/// Per-layer sum of c_i * dW_i, accumulated in list order.
DeltaSet compose(std::span<const ComposeTerm> terms, const ComposeOptions& options = {});

/// W' = W + dW on every layer in the set; all other tensors are copied unchanged.
ModelWeights apply_to_base(ModelWeights weights, const DeltaSet& set);

struct LayerRank {
    LayerKey key;
    int rank = 0;
    int bound = 0;
    bool satisfied = true;
};

struct RankCertificate {
    std::vector<LayerRank> layers;
    bool satisfied = true;
};

/// Numerical rank of every layer against min(level * r, rows, cols).
RankCertificate rank_certificate(const DeltaSet& set, int r, double rel_tol = kDefaultRankTolerance);

// ---------------------------------------------------------------------------
// Bundle-level paths used when full delta sets would not fit comfortably in
// memory (GPT-2 Small sized models). Results match the DeltaSet path exactly.
// ---------------------------------------------------------------------------

struct BundleTerm {
    const AdapterBundle* bundle = nullptr;
    double coefficient = 1.0;
};

/// Throws CompositionError/ShapeError if the bundles cannot be summed.
void check_compatible(std::span<const BundleTerm> terms, const ComposeOptions& options = {});

/// apply_to_base(weights, compose(build_delta_set(b_i), c_i)) one layer at a time.
ModelWeights apply_composed(ModelWeights weights, std::span<const BundleTerm> terms,
                            const ComposeOptions& options = {});

/// Rank certificate of the composed delta computed from the stacked factors:
/// dW = P Q^T with P = [c_i s_i A_i^T], Q = [B_i]; thin QR of both leaves a
/// small core R_P R_Q^T with the same singular values as dW.
RankCertificate rank_certificate_factored(std::span<const BundleTerm> terms,
                                          double rel_tol = kDefaultRankTolerance);

}  // namespace lora
