#include "lora/superposition.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "lora/format.hpp"
#include "lora/parallel.hpp"
#include "lora/random.hpp"
#include "lora/similarity.hpp"

namespace lora {

double GaussianStream::uniform_open() {
    // 53 random mantissa bits, shifted off zero so log() stays finite
    return (static_cast<double>(engine_() >> 11) + 1.0) * 0x1.0p-53;
}

double GaussianStream::next() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    const double radius = std::sqrt(-2.0 * std::log(uniform_open()));
    const double angle = 2.0 * std::numbers::pi * uniform_open();
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
}

void SimSpec::validate() const {
    if (n < 1 || m < 1) throw SpecError("simulation dims must be positive");
    if (r < 1 || r > std::min(n, m)) {
        throw SpecError("rank " + std::to_string(r) + " must lie in [1, min(n, m) = " +
                        std::to_string(std::min(n, m)) + "]");
    }
    if (trials < 1) throw SpecError("trials must be >= 1");
    if (!(init_std > 0.0) || !std::isfinite(init_std)) throw SpecError("init_std must be positive");
}

MatrixD gen_random_delta(Eigen::Index n, Eigen::Index m, int r, std::uint64_t seed, double std_dev) {
    if (n < 1 || m < 1) throw SpecError("gen_random_delta: dims must be positive");
    if (r < 1 || r > std::min(n, m)) {
        throw SpecError("gen_random_delta: rank " + std::to_string(r) + " exceeds min(n, m) = " +
                        std::to_string(std::min(n, m)));
    }
    if (!(std_dev >= 0.0) || !std::isfinite(std_dev)) throw SpecError("gen_random_delta: std must be >= 0");

    GaussianStream rng(seed, 0);
    MatrixD a(r, m);
    MatrixD b(n, r);
    for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = std_dev * rng.next();
    for (Eigen::Index i = 0; i < b.size(); ++i) b.data()[i] = std_dev * rng.next();
    return matmul(a.transpose(), b.transpose());  // (B A)^T without a transpose copy
}

SimResult summarize_cosines(std::vector<double> samples) {
    SimResult result;
    double abs_sum = 0.0;
    for (double c : samples) {
        abs_sum += std::abs(c);
        result.max_abs_cosine = std::max(result.max_abs_cosine, std::abs(c));
    }
    if (!samples.empty()) {
        result.mean_abs_cosine = abs_sum / static_cast<double>(samples.size());
        result.rms_cosine = rms_score(samples);
    }
    result.cosine_samples = std::move(samples);
    return result;
}

SimResult orthogonality_stats(const SimSpec& spec) {
    spec.validate();
    std::vector<double> samples(static_cast<std::size_t>(spec.trials));
    parallel_for(samples.size(), [&](std::size_t t) {
        const MatrixD a = gen_random_delta(spec.n, spec.m, spec.r, mix_seed(spec.seed, 2 * t), spec.init_std);
        const MatrixD b = gen_random_delta(spec.n, spec.m, spec.r, mix_seed(spec.seed, 2 * t + 1), spec.init_std);
        samples[t] = cosine_layer(a, b);
    });
    return summarize_cosines(std::move(samples));
}

std::vector<RankStep> rank_saturation_sweep(Eigen::Index n, Eigen::Index m, int r, int j_max, std::uint64_t seed,
                                            double std_dev, double rel_tol) {
    if (j_max < 1) throw SpecError("rank_saturation_sweep: j_max must be >= 1");
    std::vector<RankStep> steps;
    MatrixD sum;
    for (int j = 1; j <= j_max; ++j) {
        const MatrixD delta = gen_random_delta(n, m, r, mix_seed(seed, static_cast<std::uint64_t>(j)), std_dev);
        if (j == 1) {
            sum = delta;
        } else {
            sum += delta;
        }
        const int bound = static_cast<int>(std::min<Eigen::Index>(static_cast<Eigen::Index>(j) * r, std::min(n, m)));
        steps.push_back({j, numerical_rank(sum, rel_tol), bound});
    }
    return steps;
}

std::string sweep_csv(const std::vector<RankStep>& steps) {
    std::string out = "j,rank,bound\n";
    for (const auto& s : steps) {
        out += std::to_string(s.j) + "," + std::to_string(s.rank) + "," + std::to_string(s.bound) + "\n";
    }
    return out;
}

std::string cosines_csv(const SimResult& result) {
    std::string out = "trial,cosine\n";
    for (std::size_t t = 0; t < result.cosine_samples.size(); ++t) {
        out += std::to_string(t) + "," + format_exact(result.cosine_samples[t]) + "\n";
    }
    return out;
}

nlohmann::json to_json(const SimSpec& spec, const SimResult& result) {
    nlohmann::json sweep = nlohmann::json::array();
    for (const auto& s : result.rank_saturation) sweep.push_back({{"j", s.j}, {"rank", s.rank}, {"bound", s.bound}});
    return {
        {"spec",
         {{"n", spec.n}, {"m", spec.m}, {"r", spec.r}, {"trials", spec.trials}, {"seed", spec.seed},
          {"init_std", spec.init_std}}},
        {"mean_abs_cosine", result.mean_abs_cosine},
        {"rms_cosine", result.rms_cosine},
        {"max_abs_cosine", result.max_abs_cosine},
        {"rank_saturation", sweep},
    };
}

}  // namespace lora
