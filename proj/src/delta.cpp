#include "lora/delta.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "lora/parallel.hpp"

namespace lora {

namespace {

void check_pair(const LoraLayerPair& pair, const LoraConfig& config) {
    if (pair.a.rows() != config.rank || pair.b.cols() != config.rank) {
        throw ShapeError("layer " + canonical_name(pair.key) + ": factors " + shape_of(pair.a) + " and " +
                         shape_of(pair.b) + " do not match rank " + std::to_string(config.rank));
    }
}

void check_finite(const MatrixD& delta, const LayerKey& key) {
    if (!is_finite(delta)) throw NumericError("layer " + canonical_name(key) + ": reconstructed delta is not finite");
}

std::string signed_source(const std::string& source, double coefficient) {
    char sign = '+';
    std::string name = source;
    if (!name.empty() && (name[0] == '+' || name[0] == '-')) {
        sign = name[0];
        name.erase(0, 1);
    }
    if (coefficient < 0) sign = sign == '+' ? '-' : '+';
    std::ostringstream out;
    out << sign;
    if (std::abs(coefficient) != 1.0) out << std::abs(coefficient) << '*';
    out << name;
    return out.str();
}

std::vector<LayerKey> keys_of(const std::map<LayerKey, MatrixD>& layers) {
    std::vector<LayerKey> keys;
    keys.reserve(layers.size());
    for (const auto& [k, _] : layers) keys.push_back(k);
    return keys;
}

template <typename MapA, typename MapB>
void require_same_keys(const MapA& a, const MapB& b, const std::string& name_a, const std::string& name_b) {
    std::vector<std::string> diff;
    for (const auto& [k, _] : a) {
        if (!b.contains(k)) diff.push_back(canonical_name(k) + " (only in " + name_a + ")");
    }
    for (const auto& [k, _] : b) {
        if (!a.contains(k)) diff.push_back(canonical_name(k) + " (only in " + name_b + ")");
    }
    if (!diff.empty()) {
        std::string list;
        for (const auto& d : diff) list += (list.empty() ? "" : ", ") + d;
        throw CompositionError("layer sets differ: " + list);
    }
}

std::string joined(const std::vector<std::string>& names) {
    std::string out;
    for (const auto& n : names) out += (out.empty() ? "" : " ") + n;
    return out;
}

}  // namespace

MatrixD reconstruct_delta(const LoraLayerPair& pair, const LoraConfig& config) {
    check_pair(pair, config);
    // (s B A)^T formed directly as s A^T B^T; a row-major transpose copy of the
    // full product costs more than the product itself.
    MatrixD delta = matmul(pair.a.transpose(), pair.b.transpose());
    delta *= config.scale();
    check_finite(delta, pair.key);
    return delta;
}

MatrixD reconstruct_delta_outer(const LoraLayerPair& pair, const LoraConfig& config) {
    check_pair(pair, config);
    // Sum of r rank-1 terms, outer(row i of A, column i of B), accumulated in
    // term order. Row p of the sum is sum_i A(i, p) * (column i of B).
    const MatrixD b_cols = pair.b.transpose();  // row i = column i of B
    const double scale = config.scale();
    MatrixD delta(pair.a.cols(), pair.b.rows());
    for (Eigen::Index p = 0; p < delta.rows(); ++p) {
        auto row = delta.row(p);
        row = pair.a(0, p) * b_cols.row(0);
        for (Eigen::Index i = 1; i < b_cols.rows(); ++i) row += pair.a(i, p) * b_cols.row(i);
        row *= scale;
    }
    check_finite(delta, pair.key);
    return delta;
}

DeltaSet build_delta_set(const AdapterBundle& bundle) {
    DeltaSet set;
    set.sources = {"+" + bundle.name};
    set.level = 1;
    set.rank = bundle.config.rank;
    set.alpha = bundle.config.alpha;

    std::vector<const LoraLayerPair*> pairs;
    for (const auto& [key, pair] : bundle.layers) pairs.push_back(&pair);
    std::vector<MatrixD> deltas(pairs.size());
    parallel_for(pairs.size(), [&](std::size_t i) { deltas[i] = reconstruct_delta(*pairs[i], bundle.config); });
    for (std::size_t i = 0; i < pairs.size(); ++i) set.layers.emplace(pairs[i]->key, std::move(deltas[i]));
    return set;
}

DeltaSet compose(std::span<const ComposeTerm> terms, const ComposeOptions& options) {
    if (terms.empty()) throw CompositionError("compose needs at least one delta set");
    const DeltaSet& first = *terms.front().set;
    for (const auto& t : terms) {
        if (!std::isfinite(t.coefficient)) throw CompositionError("compose: non-finite coefficient");
        require_same_keys(first.layers, t.set->layers, joined(first.sources), joined(t.set->sources));
        for (const auto& [key, m] : t.set->layers) {
            const MatrixD& ref = first.layers.at(key);
            if (ref.rows() != m.rows() || ref.cols() != m.cols()) {
                throw ShapeError("layer " + canonical_name(key) + ": " + shape_of(ref) + " vs " + shape_of(m));
            }
        }
        if (!options.force && (t.set->rank != first.rank || t.set->alpha != first.alpha)) {
            std::ostringstream msg;
            msg << "delta sets use different LoRA scale: [" << joined(first.sources) << "] r=" << first.rank
                << " alpha=" << first.alpha.value_or(NAN) << " vs [" << joined(t.set->sources)
                << "] r=" << t.set->rank << " alpha=" << t.set->alpha.value_or(NAN) << " (use force to override)";
            throw CompositionError(msg.str());
        }
    }

    DeltaSet out;
    out.level = 0;
    out.rank = 0;
    out.alpha = first.alpha;
    for (const auto& t : terms) {
        if (t.coefficient != 0.0) {
            out.level += t.set->level;
            for (const auto& s : t.set->sources) out.sources.push_back(signed_source(s, t.coefficient));
        }
        out.rank = std::max(out.rank, t.set->rank);
        if (t.set->alpha != first.alpha) out.alpha.reset();
    }

    const std::vector<LayerKey> keys = keys_of(first.layers);
    std::vector<MatrixD> sums(keys.size());
    parallel_for(keys.size(), [&](std::size_t i) {
        MatrixD acc = terms[0].coefficient * terms[0].set->layers.at(keys[i]);
        for (std::size_t t = 1; t < terms.size(); ++t) {
            acc += terms[t].coefficient * terms[t].set->layers.at(keys[i]);
        }
        sums[i] = std::move(acc);
    });
    for (std::size_t i = 0; i < keys.size(); ++i) out.layers.emplace(keys[i], std::move(sums[i]));
    return out;
}

namespace {

MatrixD& target_tensor(ModelWeights& weights, const LayerKey& key, Eigen::Index rows, Eigen::Index cols) {
    if (key.block < 0 || static_cast<std::size_t>(key.block) >= weights.blocks.size()) {
        throw ApplicationError("layer " + canonical_name(key) + " has no base block (model has " +
                               std::to_string(weights.blocks.size()) + " blocks)");
    }
    MatrixD& w = weights.blocks[static_cast<std::size_t>(key.block)].projection(key.kind);
    if (w.rows() != rows || w.cols() != cols) {
        throw ApplicationError("layer " + canonical_name(key) + ": base weight is " + shape_of(w) +
                               " but delta is " + shape_string(rows, cols));
    }
    return w;
}

}  // namespace

ModelWeights apply_to_base(ModelWeights weights, const DeltaSet& set) {
    std::vector<std::pair<MatrixD*, const MatrixD*>> targets;
    for (const auto& [key, delta] : set.layers) targets.emplace_back(&target_tensor(weights, key, delta.rows(), delta.cols()), &delta);
    parallel_for(targets.size(), [&](std::size_t i) { *targets[i].first += *targets[i].second; });
    return weights;
}

RankCertificate rank_certificate(const DeltaSet& set, int r, double rel_tol) {
    if (r < 1) throw ValidationError("rank_certificate: r must be >= 1");
    const std::vector<LayerKey> keys = keys_of(set.layers);
    RankCertificate cert;
    cert.layers.resize(keys.size());
    parallel_for(keys.size(), [&](std::size_t i) {
        const MatrixD& m = set.layers.at(keys[i]);
        LayerRank& row = cert.layers[i];
        row.key = keys[i];
        try {
            row.rank = numerical_rank(m, rel_tol);
        } catch (const NumericError& e) {
            throw NumericError("layer " + canonical_name(keys[i]) + ": " + e.what());
        }
        row.bound = static_cast<int>(std::min<Eigen::Index>({static_cast<Eigen::Index>(set.level) * r, m.rows(), m.cols()}));
        row.satisfied = row.rank <= row.bound;
    });
    cert.satisfied = std::all_of(cert.layers.begin(), cert.layers.end(), [](const LayerRank& l) { return l.satisfied; });
    return cert;
}

void check_compatible(std::span<const BundleTerm> terms, const ComposeOptions& options) {
    if (terms.empty()) throw CompositionError("compose needs at least one adapter");
    const AdapterBundle& first = *terms.front().bundle;
    for (const auto& t : terms) {
        const AdapterBundle& b = *t.bundle;
        if (!std::isfinite(t.coefficient)) throw CompositionError("compose: non-finite coefficient");
        require_same_keys(first.layers, b.layers, first.name, b.name);
        if (b.model_width() != first.model_width()) {
            throw ShapeError("adapters '" + first.name + "' and '" + b.name + "' target different model widths (" +
                             std::to_string(first.model_width()) + " vs " + std::to_string(b.model_width()) + ")");
        }
        if (!options.force && (b.config.rank != first.config.rank || b.config.alpha != first.config.alpha)) {
            std::ostringstream msg;
            msg << "adapters use different LoRA scale: '" << first.name << "' r=" << first.config.rank
                << " alpha=" << first.config.alpha << " vs '" << b.name << "' r=" << b.config.rank
                << " alpha=" << b.config.alpha << " (use --force to override)";
            throw CompositionError(msg.str());
        }
    }
}

ModelWeights apply_composed(ModelWeights weights, std::span<const BundleTerm> terms, const ComposeOptions& options) {
    check_compatible(terms, options);
    std::vector<LayerKey> keys;
    for (const auto& [k, _] : terms.front().bundle->layers) keys.push_back(k);
    std::vector<MatrixD*> targets(keys.size());
    for (std::size_t i = 0; i < keys.size(); ++i) {
        // the delta is (m, n) = (A.cols, B.rows)
        const auto& pair = terms.front().bundle->layers.at(keys[i]);
        targets[i] = &target_tensor(weights, keys[i], pair.a.cols(), pair.b.rows());
    }
    parallel_for(keys.size(), [&](std::size_t i) {
        const auto delta_of = [&](const BundleTerm& t) {
            return reconstruct_delta(t.bundle->layers.at(keys[i]), t.bundle->config);
        };
        MatrixD acc = terms[0].coefficient * delta_of(terms[0]);
        for (std::size_t t = 1; t < terms.size(); ++t) acc += terms[t].coefficient * delta_of(terms[t]);
        *targets[i] += acc;
    });
    return weights;
}

RankCertificate rank_certificate_factored(std::span<const BundleTerm> terms, double rel_tol) {
    check_compatible(terms, ComposeOptions{.force = true});
    std::vector<const BundleTerm*> active;
    int r = 1;
    for (const auto& t : terms) {
        r = std::max(r, t.bundle->config.rank);
        if (t.coefficient != 0.0) active.push_back(&t);
    }
    const int level = static_cast<int>(active.size());

    std::vector<LayerKey> keys;
    for (const auto& [k, _] : terms.front().bundle->layers) keys.push_back(k);
    RankCertificate cert;
    cert.layers.resize(keys.size());
    parallel_for(keys.size(), [&](std::size_t i) {
        const LayerKey key = keys[i];
        const auto& ref = terms.front().bundle->layers.at(key);
        const Eigen::Index m = ref.a.cols();
        const Eigen::Index n = ref.b.rows();
        LayerRank& row = cert.layers[i];
        row.key = key;
        row.bound = static_cast<int>(std::min<Eigen::Index>({static_cast<Eigen::Index>(level) * r, m, n}));

        Eigen::Index k = 0;
        for (const auto* t : active) k += t->bundle->config.rank;
        if (k == 0) {
            row.rank = 0;
            row.satisfied = true;
            return;
        }
        MatrixD p(m, k);
        MatrixD q(n, k);
        Eigen::Index col = 0;
        for (const auto* t : active) {
            const auto& pair = t->bundle->layers.at(key);
            const Eigen::Index ri = t->bundle->config.rank;
            p.middleCols(col, ri) = (t->coefficient * t->bundle->config.scale()) * pair.a.transpose();
            q.middleCols(col, ri) = pair.b;
            col += ri;
        }
        const auto upper = [](const MatrixD& x) -> MatrixD {
            Eigen::HouseholderQR<MatrixD> qr(x);
            const Eigen::Index top = std::min(x.rows(), x.cols());
            return qr.matrixQR().topRows(top).triangularView<Eigen::Upper>();
        };
        const MatrixD core = upper(p) * upper(q).transpose();
        // Terms that cancel exactly (e.g. +D and -D) leave only rounding noise in
        // the core; a relative cutoff would count that noise as rank.
        double magnitude = 0.0;
        for (Eigen::Index c = 0; c < k; ++c) magnitude += p.col(c).norm() * q.col(c).norm();
        if (core.norm() <= 64.0 * std::numeric_limits<double>::epsilon() * magnitude) {
            row.rank = 0;
            row.satisfied = true;
            return;
        }
        try {
            row.rank = numerical_rank(core, rel_tol);
        } catch (const NumericError& e) {
            throw NumericError("layer " + canonical_name(key) + ": " + e.what());
        }
        row.satisfied = row.rank <= row.bound;
    });
    cert.satisfied = std::all_of(cert.layers.begin(), cert.layers.end(), [](const LayerRank& l) { return l.satisfied; });
    return cert;
}

}  // namespace lora
