#pragma once

// Interference metrics between delta sets: per-layer cosine similarity, the
// RMS of those cosines, and the least-squares line relating RMS to the
// perplexity change of a composition.

#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "lora/delta.hpp"

namespace lora {

/// <a, b>_F / (|a|_F |b|_F). Throws DegenerateInputError if either side is zero.
double cosine_layer(const MatrixD& a, const MatrixD& b);

/// sqrt(mean(cos^2)); invariant to sign flips and permutation of the inputs.
double rms_score(std::span<const double> cosines);

struct SimilarityRow {
    LayerKey key;
    double cosine = 0.0;
};

struct SimilarityReport {
    std::string name_a;
    std::string name_b;
    std::vector<SimilarityRow> rows;  // canonical layer order
    double rms = 0.0;
};

SimilarityReport cosine_report(const DeltaSet& a, const DeltaSet& b);

/// `layer,module,cosine` rows followed by a `# rms,<value>` line.
std::string to_csv(const SimilarityReport& report);
nlohmann::json to_json(const SimilarityReport& report);

struct FitResult {
    double slope = 0.0;
    double intercept = 0.0;
    std::vector<std::pair<double, double>> points;
};

/// Ordinary least squares y = slope * x + intercept. Needs two distinct x values.
FitResult linear_fit(std::span<const std::pair<double, double>> points);

/// 100 * (candidate - baseline) / baseline; baseline must be positive.
double percent_change(double baseline, double candidate);

/// Two decimals, ties to even, explicit sign: "+49.72%".
std::string format_percent(double percent);

}  // namespace lora
