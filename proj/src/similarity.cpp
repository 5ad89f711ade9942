#include "lora/similarity.hpp"

#include <cfenv>
#include <cmath>
#include <cstdio>

#include "lora/format.hpp"
#include "lora/parallel.hpp"

namespace lora {

double cosine_layer(const MatrixD& a, const MatrixD& b) {
    const double dot = frobenius_inner(a, b);
    const double na = frobenius_norm(a);
    const double nb = frobenius_norm(b);
    if (na == 0.0) throw DegenerateInputError("cosine: first operand has zero norm");
    if (nb == 0.0) throw DegenerateInputError("cosine: second operand has zero norm");
    return dot / (na * nb);
}

double rms_score(std::span<const double> cosines) {
    if (cosines.empty()) throw DegenerateInputError("rms_score: empty cosine list");
    double sum = 0.0;
    for (double c : cosines) {
        if (!(std::abs(c) <= 1.0 + 1e-12)) {
            throw DegenerateInputError("rms_score: cosine " + format_exact(c) + " outside [-1, 1]");
        }
        sum += c * c;
    }
    return std::sqrt(sum / static_cast<double>(cosines.size()));
}

namespace {

std::string label(const DeltaSet& set) {
    std::string out;
    for (const auto& s : set.sources) out += s;
    return out;
}

}  // namespace

SimilarityReport cosine_report(const DeltaSet& a, const DeltaSet& b) {
    std::vector<std::string> diff;
    for (const auto& [k, _] : a.layers) {
        if (!b.layers.contains(k)) diff.push_back(canonical_name(k));
    }
    for (const auto& [k, _] : b.layers) {
        if (!a.layers.contains(k)) diff.push_back(canonical_name(k));
    }
    if (!diff.empty()) {
        std::string list;
        for (const auto& d : diff) list += (list.empty() ? "" : ", ") + d;
        throw CompositionError("similarity: layer sets differ: " + list);
    }

    SimilarityReport report;
    report.name_a = label(a);
    report.name_b = label(b);
    for (const auto& [k, _] : a.layers) report.rows.push_back({k, 0.0});
    parallel_for(report.rows.size(), [&](std::size_t i) {
        const LayerKey key = report.rows[i].key;
        try {
            report.rows[i].cosine = cosine_layer(a.layers.at(key), b.layers.at(key));
        } catch (const DegenerateInputError& e) {
            throw DegenerateInputError("layer " + canonical_name(key) + ": " + e.what());
        }
    });
    std::vector<double> cosines;
    for (const auto& row : report.rows) cosines.push_back(row.cosine);
    report.rms = rms_score(cosines);
    return report;
}

std::string to_csv(const SimilarityReport& report) {
    std::string out = "layer,module,cosine\n";
    for (const auto& row : report.rows) {
        out += std::to_string(row.key.block) + "," + std::string(to_string(row.key.kind)) + "," +
               format_exact(row.cosine) + "\n";
    }
    out += "# rms," + format_exact(report.rms) + "\n";
    return out;
}

nlohmann::json to_json(const SimilarityReport& report) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& row : report.rows) {
        rows.push_back({{"layer", row.key.block}, {"module", to_string(row.key.kind)}, {"cosine", row.cosine}});
    }
    return {{"pair", {report.name_a, report.name_b}}, {"rows", rows}, {"rms", report.rms}};
}

FitResult linear_fit(std::span<const std::pair<double, double>> points) {
    if (points.size() < 2) throw DegenerateInputError("linear_fit: need at least two points");
    const double n = static_cast<double>(points.size());
    double mean_x = 0.0, mean_y = 0.0;
    for (const auto& [x, y] : points) {
        mean_x += x;
        mean_y += y;
    }
    mean_x /= n;
    mean_y /= n;
    double sxx = 0.0, sxy = 0.0;
    for (const auto& [x, y] : points) {
        sxx += (x - mean_x) * (x - mean_x);
        sxy += (x - mean_x) * (y - mean_y);
    }
    if (sxx == 0.0) throw DegenerateInputError("linear_fit: all x values are identical");
    FitResult fit;
    fit.slope = sxy / sxx;
    fit.intercept = mean_y - fit.slope * mean_x;
    fit.points.assign(points.begin(), points.end());
    return fit;
}

double percent_change(double baseline, double candidate) {
    if (!(baseline > 0.0)) throw DegenerateInputError("percent_change: baseline must be positive");
    return 100.0 * (candidate - baseline) / baseline;
}

std::string format_percent(double percent) {
    // nearbyint honours the default round-to-nearest-even mode
    const double hundredths = std::nearbyint(percent * 100.0);
    char buf[48];
    std::snprintf(buf, sizeof buf, "%+.2f%%", hundredths / 100.0);
    return buf;
}

}  // namespace lora
