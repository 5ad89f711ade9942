#include "lora/cli.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>

#include <openssl/evp.h>

#include <CLI11.hpp>

#include "lora/adapter_io.hpp"
#include "lora/atomic_file.hpp"
#include "lora/delta.hpp"
#include "lora/eval.hpp"
#include "lora/format.hpp"
#include "lora/parallel.hpp"
#include "lora/similarity.hpp"
#include "lora/superposition.hpp"

namespace lora {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

std::string sha256_file(const fs::path& path) {
    std::vector<fs::path> files;
    if (fs::is_directory(path)) {
        for (const auto& entry : fs::recursive_directory_iterator(path)) {
            if (entry.is_regular_file()) files.push_back(entry.path());
        }
        std::sort(files.begin(), files.end());
    } else {
        files.push_back(path);
    }

    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
    EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr);
    std::vector<char> buffer(1 << 20);
    for (const auto& file : files) {
        std::ifstream in(file, std::ios::binary);
        if (!in) throw IoError("cannot open " + file.string());
        while (in) {
            in.read(buffer.data(), static_cast<std::streamsize>(buffer.size()));
            EVP_DigestUpdate(ctx.get(), buffer.data(), static_cast<std::size_t>(in.gcount()));
        }
    }
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx.get(), digest, &len);
    std::ostringstream hex;
    for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
    return hex.str();
}

void RunManifest::add_input(const fs::path& path) {
    inputs.emplace_back(path.string(), sha256_file(path));
}

json RunManifest::to_json() const {
    json in = json::array();
    for (const auto& [path, digest] : inputs) in.push_back({{"path", path}, {"sha256", digest}});
    return {{"command", command}, {"inputs", in}, {"parameters", parameters},
            {"tool_version", tool_version}, {"outputs", outputs}};
}

namespace {

struct Context {
    std::ostream& out;
    std::ostream& err;
    bool json = false;
    std::uint64_t seed = kDefaultSimSeed;
    double tol = kDefaultRankTolerance;
    ConfigOverride fallback;
};

struct SignedPath {
    fs::path path;
    double coefficient = 1.0;
};

std::string adapter_name(const fs::path& path) {
    const fs::path clean = path.has_filename() ? path : path.parent_path();
    return fs::is_directory(clean) ? clean.filename().string() : clean.stem().string();
}

void write_manifest_sidecar(const fs::path& output, const RunManifest& manifest) {
    fs::path sidecar = output;
    sidecar += ".manifest.json";
    write_file_atomic(sidecar, manifest.to_json().dump(2) + "\n");
}

std::string format_shape(const MatrixD& m) { return shape_string(m.rows(), m.cols()); }

json preview(const MatrixD& m, std::size_t count = 5) {
    json values = json::array();
    for (Eigen::Index i = 0; i < std::min<Eigen::Index>(static_cast<Eigen::Index>(count), m.size()); ++i) {
        values.push_back(static_cast<double>(static_cast<float>(m.data()[i])));
    }
    return values;
}

std::string preview_text(const MatrixD& m) {
    std::ostringstream s;
    s << '[';
    for (Eigen::Index i = 0; i < std::min<Eigen::Index>(5, m.size()); ++i) {
        s << (i ? ", " : "") << std::fixed << std::setprecision(4) << m.data()[i];
    }
    s << ']';
    return s.str();
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

int cmd_inspect(Context& ctx, const fs::path& path) {
    const AdapterBundle bundle = load_adapter(path, adapter_name(path), ctx.fallback);
    if (ctx.json) {
        json rows = json::array();
        for (const auto& [key, pair] : bundle.layers) {
            rows.push_back({{"layer", canonical_name(key)},
                            {"block", key.block},
                            {"module", to_string(key.kind)},
                            {"lora_A", {{"shape", {pair.a.rows(), pair.a.cols()}}, {"first_values", preview(pair.a)}}},
                            {"lora_B", {{"shape", {pair.b.rows(), pair.b.cols()}}, {"first_values", preview(pair.b)}}}});
        }
        ctx.out << rows.dump(2) << "\n";
        return 0;
    }
    ctx.out << "adapter " << bundle.name << ": r=" << bundle.config.rank << " alpha=" << format_exact(bundle.config.alpha)
            << " blocks=" << bundle.config.num_blocks << " layers=" << bundle.layers.size() << "\n";
    for (const auto& [key, pair] : bundle.layers) {
        ctx.out << canonical_name(key) << "  A " << format_shape(pair.a) << " " << preview_text(pair.a) << "  B "
                << format_shape(pair.b) << " " << preview_text(pair.b) << "\n";
    }
    return 0;
}

std::vector<AdapterBundle> load_terms(const Context& ctx, const std::vector<SignedPath>& terms) {
    std::vector<AdapterBundle> bundles;
    bundles.reserve(terms.size());
    for (const auto& t : terms) bundles.push_back(load_adapter(t.path, adapter_name(t.path), ctx.fallback));
    return bundles;
}

json certificate_json(const RankCertificate& cert) {
    json layers = json::array();
    for (const auto& l : cert.layers) {
        layers.push_back({{"layer", canonical_name(l.key)}, {"rank", l.rank}, {"bound", l.bound},
                          {"satisfied", l.satisfied}});
    }
    return {{"satisfied", cert.satisfied}, {"layers", layers}};
}

int cmd_compose(Context& ctx, const std::vector<SignedPath>& terms, const fs::path& base_path, const fs::path& out_path,
                bool force, bool full_rank_check) {
    if (terms.empty()) throw InputError("compose: give at least one +adapter or -adapter");
    const auto start = std::chrono::steady_clock::now();

    RunManifest manifest;
    manifest.command = "compose";
    json term_list = json::array();
    for (const auto& t : terms) {
        manifest.add_input(t.path);
        term_list.push_back({{"path", t.path.string()}, {"coefficient", t.coefficient}});
    }
    manifest.add_input(base_path);
    manifest.parameters = {{"terms", term_list}, {"base", base_path.string()}, {"force", force},
                           {"tol", ctx.tol}, {"full_rank_check", full_rank_check}};
    manifest.outputs = {out_path.string()};

    const std::vector<AdapterBundle> bundles = load_terms(ctx, terms);
    std::vector<BundleTerm> bundle_terms;
    for (std::size_t i = 0; i < bundles.size(); ++i) bundle_terms.push_back({&bundles[i], terms[i].coefficient});
    const ComposeOptions options{.force = force};
    check_compatible(bundle_terms, options);

    RankCertificate cert;
    if (full_rank_check) {
        std::vector<DeltaSet> sets;
        for (const auto& b : bundles) sets.push_back(build_delta_set(b));
        std::vector<ComposeTerm> compose_terms;
        for (std::size_t i = 0; i < sets.size(); ++i) compose_terms.push_back({&sets[i], terms[i].coefficient});
        const DeltaSet composed = compose(compose_terms, options);
        int r = 1;
        for (const auto& b : bundles) r = std::max(r, b.config.rank);
        cert = rank_certificate(composed, r, ctx.tol);
    } else {
        cert = rank_certificate_factored(bundle_terms, ctx.tol);
    }

    ModelWeights merged = apply_composed(load_checkpoint(base_path), bundle_terms, options);
    save_checkpoint(merged, out_path);
    write_manifest_sidecar(out_path, manifest);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

    if (ctx.json) {
        ctx.out << json{{"output", out_path.string()}, {"certificate", certificate_json(cert)},
                        {"manifest", manifest.to_json()}}
                       .dump(2)
                << "\n";
    } else {
        int max_rank = 0;
        std::size_t ok = 0;
        for (const auto& l : cert.layers) {
            max_rank = std::max(max_rank, l.rank);
            ok += l.satisfied ? 1 : 0;
        }
        ctx.out << "wrote " << out_path.string() << "\n";
        ctx.out << "rank certificate: " << ok << "/" << cert.layers.size() << " layers within bound, max rank "
                << max_rank << (cert.satisfied ? "" : " (VIOLATED)") << "\n";
        for (const auto& l : cert.layers) {
            if (!l.satisfied) {
                ctx.out << "  " << canonical_name(l.key) << ": rank " << l.rank << " > bound " << l.bound << "\n";
            }
        }
        ctx.err << "compose finished in " << std::fixed << std::setprecision(2) << seconds << " s\n";
    }
    return 0;
}

int cmd_similarity(Context& ctx, const fs::path& a_path, const fs::path& b_path, const fs::path& out_csv,
                   const std::optional<fs::path>& report_json, bool force) {
    const AdapterBundle a = load_adapter(a_path, adapter_name(a_path), ctx.fallback);
    const AdapterBundle b = load_adapter(b_path, adapter_name(b_path), ctx.fallback);
    const std::vector<BundleTerm> terms{{&a, 1.0}, {&b, 1.0}};
    check_compatible(terms, ComposeOptions{.force = force});
    const SimilarityReport report = cosine_report(build_delta_set(a), build_delta_set(b));

    RunManifest manifest;
    manifest.command = "similarity";
    manifest.add_input(a_path);
    manifest.add_input(b_path);
    manifest.parameters = {{"a", a_path.string()}, {"b", b_path.string()}, {"force", force}};
    manifest.outputs = {out_csv.string()};
    if (report_json) manifest.outputs.push_back(report_json->string());

    write_file_atomic(out_csv, to_csv(report));
    write_manifest_sidecar(out_csv, manifest);
    json payload = to_json(report);
    payload["manifest"] = manifest.to_json();
    if (report_json) write_file_atomic(*report_json, payload.dump(2) + "\n");

    if (ctx.json) {
        ctx.out << payload.dump(2) << "\n";
    } else {
        ctx.out << "rms " << format_exact(report.rms) << "\n";
    }
    return 0;
}

int cmd_eval(Context& ctx, const fs::path& model_path, const fs::path& data_path, const std::vector<SignedPath>& terms,
             bool seq_weighted, bool force) {
    RunManifest manifest;
    manifest.command = "eval";
    manifest.add_input(model_path);
    manifest.add_input(data_path);
    json term_list = json::array();
    for (const auto& t : terms) {
        manifest.add_input(t.path);
        term_list.push_back({{"path", t.path.string()}, {"coefficient", t.coefficient}});
    }
    manifest.parameters = {{"model", model_path.string()}, {"dataset", data_path.string()}, {"terms", term_list},
                           {"weighting", seq_weighted ? "sequence" : "token"}};

    const ModelWeights model = load_checkpoint(model_path);
    const TokenDataset data = load_dataset(data_path);
    const Weighting weighting = seq_weighted ? Weighting::Sequence : Weighting::Token;

    PerplexityResult result;
    if (terms.empty()) {
        result = mean_nll(model, data, weighting);
    } else {
        const std::vector<AdapterBundle> bundles = load_terms(ctx, terms);
        std::vector<DeltaSet> sets;
        for (const auto& b : bundles) sets.push_back(build_delta_set(b));
        std::vector<ComposeTerm> compose_terms;
        for (std::size_t i = 0; i < sets.size(); ++i) compose_terms.push_back({&sets[i], terms[i].coefficient});
        result = eval_composed(model, compose_terms, data, ComposeOptions{.force = force}, weighting);
    }
    ctx.out << json{{"mean_nll", result.mean_nll}, {"perplexity", result.perplexity},
                    {"token_count", result.token_count}, {"manifest", manifest.to_json()}}
                   .dump(2)
            << "\n";
    return 0;
}

struct SimulateArgs {
    SimSpec spec;
    int j_max = 6;
    std::optional<fs::path> out_dir;
};

int cmd_simulate(Context& ctx, SimulateArgs args) {
    args.spec.seed = ctx.seed;
    args.spec.validate();
    if (args.j_max < 1) throw SpecError("--j-max must be >= 1");

    SimResult result = orthogonality_stats(args.spec);
    result.rank_saturation = rank_saturation_sweep(args.spec.n, args.spec.m, args.spec.r, args.j_max, args.spec.seed,
                                                   args.spec.init_std, ctx.tol);

    RunManifest manifest;
    manifest.command = "simulate";
    manifest.parameters = {{"n", args.spec.n},         {"m", args.spec.m},       {"r", args.spec.r},
                           {"trials", args.spec.trials}, {"seed", args.spec.seed}, {"std", args.spec.init_std},
                           {"j_max", args.j_max},        {"tol", ctx.tol}};
    json summary = to_json(args.spec, result);
    if (args.out_dir) {
        fs::create_directories(*args.out_dir);
        const fs::path sweep = *args.out_dir / "sweep.csv";
        const fs::path cosines = *args.out_dir / "cosines.csv";
        const fs::path summary_path = *args.out_dir / "summary.json";
        manifest.outputs = {sweep.string(), cosines.string(), summary_path.string()};
        write_file_atomic(sweep, sweep_csv(result.rank_saturation));
        write_file_atomic(cosines, cosines_csv(result));
        summary["manifest"] = manifest.to_json();
        write_file_atomic(summary_path, summary.dump(2) + "\n");
        write_file_atomic(*args.out_dir / "manifest.json", manifest.to_json().dump(2) + "\n");
    } else {
        summary["manifest"] = manifest.to_json();
    }

    if (ctx.json) {
        ctx.out << summary.dump(2) << "\n";
    } else {
        ctx.out << "mean_abs_cosine " << format_exact(result.mean_abs_cosine) << "\n"
                << "rms_cosine " << format_exact(result.rms_cosine) << "\n"
                << "max_abs_cosine " << format_exact(result.max_abs_cosine) << "\n"
                << sweep_csv(result.rank_saturation);
    }
    return 0;
}

std::vector<std::pair<double, double>> read_points(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    std::vector<std::pair<double, double>> points;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        std::replace(line.begin(), line.end(), ',', ' ');
        std::istringstream fields(line);
        double x = 0, y = 0;
        if (!(fields >> x >> y)) {
            if (points.empty() && line_no == 1) continue;  // header row
            throw InputError(path.string() + ":" + std::to_string(line_no) + ": expected 'rms,percent_change'");
        }
        points.emplace_back(x, y);
    }
    return points;
}

int cmd_fit(Context& ctx, const fs::path& path) {
    RunManifest manifest;
    manifest.command = "fit";
    manifest.add_input(path);
    manifest.parameters = {{"points", path.string()}};
    const FitResult fit = linear_fit(read_points(path));
    json points = json::array();
    for (const auto& [x, y] : fit.points) points.push_back({x, y});
    ctx.out << json{{"slope", fit.slope}, {"intercept", fit.intercept}, {"points", points},
                    {"manifest", manifest.to_json()}}
                   .dump(2)
            << "\n";
    return 0;
}

/// `+file` / `-file` terms cannot go through the option parser: `-file` would
/// look like a short flag. Short options are exactly two characters, so any
/// longer single-dash token is a subtraction.
std::vector<SignedPath> extract_terms(std::vector<std::string>& args) {
    std::vector<SignedPath> terms;
    std::vector<std::string> rest;
    bool in_term_command = false;
    bool after_value_flag = false;
    for (const std::string& a : args) {
        const bool plus = a.size() > 1 && a[0] == '+';
        const bool minus = a.size() > 2 && a[0] == '-' && a[1] != '-';
        if (in_term_command && !after_value_flag && (plus || minus)) {
            terms.push_back({a.substr(1), plus ? 1.0 : -1.0});
        } else {
            if (!after_value_flag && (a == "compose" || a == "eval")) in_term_command = true;
            rest.push_back(a);
        }
        after_value_flag = a == "-o" || a == "--out" || a == "--base" || a == "--seed" || a == "--tol" ||
                           a == "--threads" || a == "--lora-rank" || a == "--lora-alpha" || a == "--num-blocks";
    }
    args = std::move(rest);
    return terms;
}

}  // namespace

int run_cli(const std::vector<std::string>& raw_args, std::ostream& out, std::ostream& err) {
    std::vector<std::string> args = raw_args;
    const std::vector<SignedPath> terms = extract_terms(args);

    CLI::App app{"Algebra on LoRA adapter deltas: compose, compare, evaluate.", "lora-compose"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kToolVersion);

    Context ctx{out, err, false, kDefaultSimSeed, kDefaultRankTolerance, {}};
    int threads = 0;
    std::optional<int> r_flag, blocks_flag;
    std::optional<double> alpha_flag;
    app.add_flag("--json", ctx.json, "Machine-readable output on stdout");
    app.add_option("--seed", ctx.seed, "Random seed for simulate");
    app.add_option("--threads", threads, "Worker threads (default: LORA_COMPOSE_THREADS or 1)")->check(CLI::NonNegativeNumber);
    app.add_option("--tol", ctx.tol, "Relative singular-value tolerance for rank checks")->check(CLI::Range(0.0, 1.0));
    app.add_option("--lora-rank", r_flag, "LoRA rank when the adapter carries no config");
    app.add_option("--lora-alpha", alpha_flag, "LoRA alpha when the adapter carries no config");
    app.add_option("--num-blocks", blocks_flag, "Block count when the adapter carries no config");

    auto* inspect = app.add_subcommand("inspect", "List adapter layers with shapes and leading values");
    fs::path inspect_path;
    inspect->add_option("adapter", inspect_path)->required();

    auto* compose_cmd = app.add_subcommand("compose", "Add (+file) or subtract (-file) adapters onto a base checkpoint");
    fs::path base_path, compose_out;
    bool force = false, full_rank = false;
    compose_cmd->add_option("--base", base_path, "Base checkpoint")->required();
    compose_cmd->add_option("-o,--out", compose_out, "Output checkpoint")->required();
    compose_cmd->add_flag("--force", force, "Allow adapters with different rank/alpha");
    compose_cmd->add_flag("--full-rank-check", full_rank, "Certify ranks by SVD of the full deltas");

    auto* similarity = app.add_subcommand("similarity", "Layer-wise cosine similarity between two adapters");
    fs::path sim_a, sim_b, sim_out;
    std::optional<fs::path> sim_json;
    similarity->add_option("a", sim_a)->required();
    similarity->add_option("b", sim_b)->required();
    similarity->add_option("-o,--out", sim_out, "CSV report")->required();
    similarity->add_option("--report-json", sim_json, "Also write the JSON report here");
    similarity->add_flag("--force", force, "Allow adapters with different rank/alpha");

    auto* eval = app.add_subcommand("eval", "Perplexity of a checkpoint (optionally plus +/- adapters)");
    fs::path model_path, data_path;
    bool seq_weighted = false;
    eval->add_option("model", model_path)->required();
    eval->add_option("dataset", data_path)->required();
    eval->add_flag("--seq-weighted", seq_weighted, "Average per-sequence means instead of per-token");
    eval->add_flag("--force", force, "Allow adapters with different rank/alpha");

    auto* simulate = app.add_subcommand("simulate", "Monte-Carlo orthogonality and rank saturation of random deltas");
    SimulateArgs sim;
    simulate->add_option("--n", sim.spec.n, "Output dimension n");
    simulate->add_option("--m", sim.spec.m, "Input dimension m");
    simulate->add_option("--rank", sim.spec.r, "Rank of each random delta");
    simulate->add_option("--trials", sim.spec.trials, "Independent pairs to sample");
    simulate->add_option("--std", sim.spec.init_std, "Factor entry standard deviation");
    simulate->add_option("--j-max", sim.j_max, "Largest number of summed deltas in the rank sweep");
    simulate->add_option("--out-dir", sim.out_dir, "Directory for sweep.csv, cosines.csv, summary.json");

    auto* fit = app.add_subcommand("fit", "Least-squares line through (rms, percent_change) points");
    fs::path fit_path;
    fit->add_option("points", fit_path)->required();

    for (auto* sub : {inspect, compose_cmd, similarity, eval, simulate, fit}) sub->fallthrough();

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : 2;
    }

    if (threads > 0) set_thread_count(threads);
    ctx.fallback = {r_flag, alpha_flag, blocks_flag};
    if (!terms.empty() && !compose_cmd->parsed() && !eval->parsed()) {
        err << "error: +file/-file terms are only accepted by compose and eval\n";
        return 2;
    }

    try {
        if (inspect->parsed()) return cmd_inspect(ctx, inspect_path);
        if (compose_cmd->parsed()) return cmd_compose(ctx, terms, base_path, compose_out, force, full_rank);
        if (similarity->parsed()) return cmd_similarity(ctx, sim_a, sim_b, sim_out, sim_json, force);
        if (eval->parsed()) return cmd_eval(ctx, model_path, data_path, terms, seq_weighted, force);
        if (simulate->parsed()) return cmd_simulate(ctx, sim);
        if (fit->parsed()) return cmd_fit(ctx, fit_path);
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return e.exit_code();
    } catch (const fs::filesystem_error& e) {
        err << "error: " << e.what() << "\n";
        return static_cast<int>(ErrorClass::Input);
    }
    return 0;
}

}  // namespace lora
