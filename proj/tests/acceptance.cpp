// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <thread>

#include <json.hpp>

#include "lora/cli.hpp"
#include "lora/delta.hpp"
#include "lora/eval.hpp"
#include "lora/similarity.hpp"
#include "lora/superposition.hpp"
#include "reference_values.hpp"
#include "test_support.hpp"

namespace {

using namespace lora;
using nlohmann::json;
namespace fs = std::filesystem;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

struct Outcome {
    bool pass = false;
    std::string detail;
};

int failures = 0;

void report(const std::string& name, const std::function<Outcome()>& check) {
    Outcome o;
    try {
        o = check();
    } catch (const std::exception& e) {
        o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failures;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << name << ": " << o.detail << std::endl;
}

std::string fmt(const char* format, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, format, args...);
    return buf;
}

json read_json(const fs::path& p) {
    std::ifstream in(p);
    return json::parse(in);
}

Outcome rms_from_reference_cosines() {
    const auto values = testing::flat_math_medicine_cosines();
    const auto start = Clock::now();
    const double rms = rms_score(values);
    const double elapsed = seconds_since(start);
    const bool ok = std::abs(rms - 0.0514) <= 0.0005 && elapsed < 1e-3;
    return {ok, fmt("rms=%.6f (target 0.0514 +/- 0.0005), %.1f us (limit 1 ms)", rms, elapsed * 1e6)};
}

Outcome regression_line() {
    const auto start = Clock::now();
    const FitResult fit = linear_fit(testing::kFitPoints);
    const double elapsed = seconds_since(start);
    const bool ok = std::abs(fit.slope - 1883.89) <= 1.0 && std::abs(fit.intercept - (-105.68)) <= 0.1 && elapsed < 1e-3;
    return {ok, fmt("slope=%.4f (1883.89 +/- 1.0), intercept=%.4f (-105.68 +/- 0.1), %.1f us (limit 1 ms)", fit.slope,
                    fit.intercept, elapsed * 1e6)};
}

Outcome perplexity_convention() {
    const double a = std::exp(6.1798), b = std::exp(6.0844);
    const bool ok = a >= 482.82 && a <= 482.92 && b >= 438.89 && b <= 438.99;
    return {ok, fmt("exp(6.1798)=%.4f in [482.82, 482.92], exp(6.0844)=%.4f in [438.89, 438.99]", a, b)};
}

Outcome percent_changes() {
    const double x = percent_change(482.87, 438.94);
    const double y = percent_change(93.83, 98.09);
    const double z = percent_change(205.62, 262.29);
    const bool ok = std::abs(x - (-9.10)) <= 0.02 && std::abs(y - 4.54) <= 0.02 && std::abs(z - 27.56) <= 0.02;
    return {ok, fmt("%.4f (-9.10), %+.4f (+4.54), %+.4f (+27.56), tolerance 0.02", x, y, z)};
}

Outcome dual_path() {
    const auto start = Clock::now();
    std::mt19937_64 rng(20240611);
    LoraConfig cfg;
    cfg.rank = 4;
    cfg.alpha = 64.0;
    double worst = 0.0;
    int pairs = 0;
    for (ModuleKind kind : kModuleKinds) {
        const ModuleShape s = module_shape(kind, 768);
        for (int i = 0; i < 100; ++i) {
            const LoraLayerPair p{{0, kind}, testing::random_matrix(4, s.in, rng, 0.02),
                                  testing::random_matrix(s.out, 4, rng, 0.02)};
            worst = std::max(worst, testing::relative_frobenius_error(reconstruct_delta_outer(p, cfg),
                                                                      reconstruct_delta(p, cfg)));
            ++pairs;
        }
    }
    const double elapsed = seconds_since(start);
    return {worst < 1e-5 && elapsed < 10.0,
            fmt("%d pairs over 3 shapes, max relative discrepancy %.3e (limit 1e-5), %.2f s (limit 10 s)", pairs, worst,
                elapsed)};
}

Outcome rank_certificates() {
    const auto start = Clock::now();
    int cases = 0, bound_ok = 0, equality_expected = 0, equality_ok = 0, factored_agree = 0;
    std::mt19937_64 coin(99);
    for (int r : {1, 2, 4}) {
        std::vector<AdapterBundle> bundles;
        for (int i = 0; i < 5; ++i) bundles.push_back(testing::random_bundle("b", 768, 1, r, 2.0 * r, 1000 + 10 * r + i));
        for (int j = 1; j <= 5; ++j) {
            std::vector<DeltaSet> sets;
            sets.reserve(static_cast<std::size_t>(j));
            std::vector<ComposeTerm> terms;
            std::vector<BundleTerm> bterms;
            for (int i = 0; i < j; ++i) {
                const double c = (coin() & 1) ? 1.0 : -1.0;
                sets.push_back(build_delta_set(bundles[static_cast<std::size_t>(i)]));
                terms.push_back({&sets.back(), c});
                bterms.push_back({&bundles[static_cast<std::size_t>(i)], c});
            }
            const DeltaSet composed = compose(terms);
            const RankCertificate fact = rank_certificate_factored(bterms);
            std::size_t idx = 0;
            for (const auto& [key, m] : composed.layers) {
                const int rank = numerical_rank(m);
                const int bound = static_cast<int>(std::min<Eigen::Index>({Eigen::Index(j) * r, m.rows(), m.cols()}));
                ++cases;
                bound_ok += rank <= bound;
                if (j * r <= std::min(m.rows(), m.cols())) {
                    ++equality_expected;
                    equality_ok += rank == j * r;
                }
                factored_agree += fact.layers[idx++].rank == rank;
            }
        }
    }
    const double elapsed = seconds_since(start);
    const bool ok = bound_ok == cases && equality_ok == equality_expected && factored_agree == cases && elapsed < 60.0;
    return {ok, fmt("%d/%d within bound, %d/%d at equality, factored route agrees %d/%d, %.1f s (limit 60 s)", bound_ok,
                    cases, equality_ok, equality_expected, factored_agree, cases, elapsed)};
}

Outcome unlearning_inverse() {
    const ModelWeights base = load_checkpoint(testing::kFixtureDir / "base.safetensors");
    double worst = 0.0;
    for (const char* name : {"math", "med", "fin", "mathmed"}) {
        const DeltaSet d = build_delta_set(load_adapter(testing::kFixtureDir / (std::string(name) + ".safetensors"), name));
        const std::vector<ComposeTerm> terms{{&d, 1.0}, {&d, -1.0}};
        ModelWeights back = apply_to_base(base, compose(terms));
        for_each_tensor(back, [&](const std::string& tensor_name, auto& t, const auto&) {
            // locate the matching base tensor by walking the base with the same name
            for_each_tensor(base, [&](const std::string& n2, const auto& t2, const auto&) {
                if (n2 == tensor_name) worst = std::max(worst, (t - t2).cwiseAbs().maxCoeff());
            });
        });
    }
    return {worst <= 1e-6, fmt("4 fixture adapters, max |W - base| = %.3e over every tensor (limit 1e-6)", worst)};
}

Outcome superposition() {
    const auto start = Clock::now();
    const json g = read_json(testing::kGoldenDir / "superposition.json");
    SimSpec spec;
    spec.n = g["spec"]["n"];
    spec.m = g["spec"]["m"];
    spec.r = g["spec"]["r"];
    spec.trials = g["spec"]["trials"];
    spec.seed = g["spec"]["seed"];
    spec.init_std = g["spec"]["init_std"];
    const SimResult r = orthogonality_stats(spec);
    const double threshold = g["thresholds"]["mean_abs_cosine"];
    const auto sweep = rank_saturation_sweep(16, 16, 4, 6, g["sweep"]["seed"].get<std::uint64_t>());
    std::string ranks;
    std::vector<int> got;
    for (const auto& s : sweep) {
        got.push_back(s.rank);
        ranks += (ranks.empty() ? "" : ",") + std::to_string(s.rank);
    }
    const double elapsed = seconds_since(start);
    const bool ok = r.mean_abs_cosine < threshold && threshold < 0.02 &&
                    got == std::vector<int>{4, 8, 12, 16, 16, 16} && elapsed < 120.0;
    return {ok, fmt("mean |cos|=%.3e < golden %.3g, sweep ranks (%s), %.1f s (limit 120 s)", r.mean_abs_cosine,
                    threshold, ranks.c_str(), elapsed)};
}

Outcome evaluator_oracle() {
    const json ref = read_json(testing::kFixtureDir / "reference.json");
    const ModelWeights base = load_checkpoint(testing::kFixtureDir / "base.safetensors");
    const std::vector<int> probe = ref["probe_tokens"];
    const MatrixD logits = forward(base, probe);
    double worst_logit = 0.0;
    for (Eigen::Index t = 0; t < logits.rows(); ++t) {
        for (Eigen::Index v = 0; v < logits.cols(); ++v) {
            worst_logit = std::max(worst_logit, std::abs(logits(t, v) - ref["logits"][t][v].get<double>()));
        }
    }
    const auto bundle = [](const std::string& n) {
        return build_delta_set(load_adapter(testing::kFixtureDir / (n + ".safetensors"), n));
    };
    const auto data = [](const std::string& n) { return load_dataset(testing::kFixtureDir / (n + "_test.json")); };
    std::map<std::string, DeltaSet> sets;
    for (const char* n : {"math", "med", "fin", "mathmed"}) sets.emplace(n, bundle(n));
    const std::vector<std::tuple<std::string, std::vector<std::string>, std::string>> cases = {
        {"base_on_math", {}, "math"},          {"base_on_med", {}, "med"},
        {"base_on_fin", {}, "fin"},            {"base_on_mathmed", {}, "mathmed"},
        {"math_on_math", {"math"}, "math"},    {"med_on_med", {"med"}, "med"},
        {"fin_on_fin", {"fin"}, "fin"},        {"merged_on_mathmed", {"mathmed"}, "mathmed"},
        {"summed_on_mathmed", {"math", "med"}, "mathmed"},
    };
    double worst_rel = 0.0;
    for (const auto& [key, adapters, ds] : cases) {
        double nll = 0.0;
        if (adapters.empty()) {
            nll = mean_nll(base, data(ds)).mean_nll;
        } else {
            std::vector<ComposeTerm> terms;
            for (const auto& a : adapters) terms.push_back({&sets.at(a), 1.0});
            nll = eval_composed(base, terms, data(ds)).mean_nll;
        }
        const double expected = ref["mean_nll"][key];
        worst_rel = std::max(worst_rel, std::abs(nll - expected) / expected);
    }
    return {worst_logit <= 1e-3 && worst_rel <= 1e-4,
            fmt("probe logits max |diff| %.3e (limit 1e-3), %zu mean_nll values max rel diff %.3e (limit 1e-4)",
                worst_logit, cases.size(), worst_rel)};
}

Outcome compose_speed() {
    testing::TempDir dir("accept");
    const ModelDims dims{768, 50257, 1024, 12, 12};
    {
        const ModelWeights base = testing::random_model(dims, 5);
        save_checkpoint(base, dir / "gpt2.safetensors");
    }
    save_adapter(testing::random_bundle("a", 768, 12, 4, 64.0, 6), dir / "a.safetensors");
    save_adapter(testing::random_bundle("b", 768, 12, 4, 64.0, 7), dir / "b.safetensors");

    std::ostringstream out, err;
    const auto start = Clock::now();
    const int code = run_cli({"compose", "+" + (dir / "a.safetensors").string(), "+" + (dir / "b.safetensors").string(),
                              "--base", (dir / "gpt2.safetensors").string(), "-o", (dir / "out.safetensors").string()},
                             out, err);
    const double elapsed = seconds_since(start);
    const bool certified = out.str().find("36/36 layers within bound, max rank 8") != std::string::npos;
    return {code == 0 && certified && elapsed < 10.0,
            fmt("exit %d, certificate %s, %.2f s on %u hardware thread(s) (limit 10 s)", code,
                certified ? "36/36 ok" : "missing", elapsed, std::thread::hardware_concurrency())};
}

Outcome fixture_report() {
    const auto bundle = [](const std::string& n) {
        return build_delta_set(load_adapter(testing::kFixtureDir / (n + ".safetensors"), n));
    };
    const ModelWeights base = load_checkpoint(testing::kFixtureDir / "base.safetensors");
    const TokenDataset data = load_dataset(testing::kFixtureDir / "mathmed_test.json");
    const DeltaSet math = bundle("math"), med = bundle("med"), merged = bundle("mathmed");
    const std::vector<ComposeTerm> merged_terms{{&merged, 1.0}};
    const std::vector<ComposeTerm> summed_terms{{&math, 1.0}, {&med, 1.0}};
    const PerplexityResult pm = eval_composed(base, merged_terms, data);
    const PerplexityResult ps = eval_composed(base, summed_terms, data);
    const SimilarityReport sim = cosine_report(math, med);
    const double change = percent_change(pm.perplexity, ps.perplexity);

    double lo = 1.0, hi = 0.0;
    for (const auto& row : sim.rows) {
        lo = std::min(lo, std::abs(row.cosine));
        hi = std::max(hi, std::abs(row.cosine));
    }
    const bool finite = std::isfinite(pm.perplexity) && std::isfinite(ps.perplexity) && std::isfinite(change) &&
                        std::isfinite(sim.rms);
    const bool consistent = std::abs(pm.perplexity - std::exp(pm.mean_nll)) <= 1e-9 * pm.perplexity &&
                            std::abs(ps.perplexity - std::exp(ps.mean_nll)) <= 1e-9 * ps.perplexity &&
                            std::abs(change - 100.0 * (ps.perplexity - pm.perplexity) / pm.perplexity) <= 1e-12 &&
                            sim.rms >= lo && sim.rms <= hi && pm.token_count == ps.token_count;
    return {finite && consistent,
            fmt("math+med: merged ppl %.3f, summed ppl %.3f, change %s, rms %.4f", pm.perplexity, ps.perplexity,
                format_percent(change).c_str(), sim.rms)};
}

}  // namespace

int main() {
    report("rms of reference layer cosines", rms_from_reference_cosines);
    report("regression line through three domain pairs", regression_line);
    report("loss/perplexity convention", perplexity_convention);
    report("percent change reproduction", percent_changes);
    report("dual-path delta reconstruction", dual_path);
    report("rank certificates for random compositions", rank_certificates);
    report("unlearning inverse on fixture base", unlearning_inverse);
    report("superposition statistics (golden)", superposition);
    report("evaluator cross-implementation oracle", evaluator_oracle);
    report("compose speed at GPT-2 Small scale", compose_speed);
    report("end-to-end fixture report", fixture_report);
    std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criterion(s) failed") << std::endl;
    return failures == 0 ? 0 : 1;
}
