#pragma once

// Monte-Carlo checks of near-orthogonality for independent random low-rank
// deltas, and rank growth of their sums.
//
// Factors are i.i.d. Gaussian rather than LoRA's zero-initialized B: the
// simulator probes the geometry of independent low-rank matrices, not training.

#include <cstdint>
#include <vector>

#include <json.hpp>

#include "lora/tensor.hpp"

namespace lora {

inline constexpr std::uint64_t kDefaultSimSeed = 20240611;

struct SimSpec {
    Eigen::Index n = 768;
    Eigen::Index m = 2304;
    int r = 4;
    int trials = 200;
    std::uint64_t seed = kDefaultSimSeed;
    double init_std = 0.02;

    void validate() const;
};

/// transpose(B * A) with A (r x m), B (n x r) drawn from N(0, std^2); shape (m, n).
MatrixD gen_random_delta(Eigen::Index n, Eigen::Index m, int r, std::uint64_t seed, double std_dev);

struct RankStep {
    int j = 0;
    int rank = 0;
    int bound = 0;
};

struct SimResult {
    std::vector<double> cosine_samples;  // signed, one per trial
    double mean_abs_cosine = 0.0;
    double rms_cosine = 0.0;
    double max_abs_cosine = 0.0;
    std::vector<RankStep> rank_saturation;
};

/// Statistics over signed cosine samples.
SimResult summarize_cosines(std::vector<double> samples);

/// Cosine between independent deltas for each of `trials` pairs.
SimResult orthogonality_stats(const SimSpec& spec);

/// Numerical rank of the sum of j independent deltas, j = 1..j_max, against
/// min(j * r, min(n, m)).
std::vector<RankStep> rank_saturation_sweep(Eigen::Index n, Eigen::Index m, int r, int j_max, std::uint64_t seed,
                                            double std_dev = 1.0, double rel_tol = kDefaultRankTolerance);

std::string sweep_csv(const std::vector<RankStep>& steps);
std::string cosines_csv(const SimResult& result);
nlohmann::json to_json(const SimSpec& spec, const SimResult& result);

}  // namespace lora
