#pragma once

// Shared helpers for the test suites: seeded random matrices, brute-force
// oracles, temporary directories and synthetic bundles.

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>

#include "lora/adapter_io.hpp"
#include "lora/delta.hpp"

namespace lora::testing {

inline const std::filesystem::path kFixtureDir = LORA_FIXTURE_DIR;
inline const std::filesystem::path kGoldenDir = LORA_GOLDEN_DIR;

/// Entries drawn from N(0, std^2) and rounded through float, so they survive an
/// F32 round trip unchanged.
inline MatrixD random_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng, double std_dev = 1.0) {
    std::normal_distribution<double> dist(0.0, std_dev);
    MatrixD m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(dist(rng));
    return m;
}

inline MatrixD naive_matmul(const MatrixD& a, const MatrixD& b) {
    MatrixD out(a.rows(), b.cols());
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
        for (Eigen::Index j = 0; j < b.cols(); ++j) {
            double acc = 0.0;
            for (Eigen::Index k = 0; k < a.cols(); ++k) acc += a(i, k) * b(k, j);
            out(i, j) = acc;
        }
    }
    return out;
}

inline double scalar_inner(const MatrixD& a, const MatrixD& b) {
    double acc = 0.0;
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
        for (Eigen::Index j = 0; j < a.cols(); ++j) acc += a(i, j) * b(i, j);
    }
    return acc;
}

inline double relative_frobenius_error(const MatrixD& actual, const MatrixD& expected) {
    const double denom = expected.norm();
    return denom == 0.0 ? actual.norm() : (actual - expected).norm() / denom;
}

/// Complete bundle for a model of width d with random Gaussian factors.
inline AdapterBundle random_bundle(const std::string& name, Eigen::Index d, int num_blocks, int rank, double alpha,
                                   std::uint64_t seed, double std_dev = 0.02) {
    std::mt19937_64 rng(seed);
    AdapterBundle bundle;
    bundle.name = name;
    bundle.config.rank = rank;
    bundle.config.alpha = alpha;
    bundle.config.num_blocks = num_blocks;
    for (int blk = 0; blk < num_blocks; ++blk) {
        for (ModuleKind kind : kModuleKinds) {
            const ModuleShape s = module_shape(kind, d);
            const LayerKey key{blk, kind};
            bundle.layers.emplace(key, LoraLayerPair{key, random_matrix(rank, s.in, rng, std_dev),
                                                     random_matrix(s.out, rank, rng, std_dev)});
        }
    }
    return bundle;
}

/// Model with every tensor filled from N(0, std^2) (layer-norm gains around 1).
inline ModelWeights random_model(const ModelDims& dims, std::uint64_t seed, double std_dev = 0.02) {
    std::mt19937_64 rng(seed);
    ModelWeights w = make_model(dims);
    for_each_tensor(w, [&](const std::string& name, auto& tensor, const std::vector<std::int64_t>&) {
        const MatrixD values = random_matrix(tensor.rows(), tensor.cols(), rng, std_dev);
        tensor = values;
        if (name.find("ln_") != std::string::npos && name.ends_with(".weight")) {
            tensor = (tensor.array() + 1.0).template cast<float>().template cast<double>();
        }
    });
    return w;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() / ("lora-" + tag + "-" + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

}  // namespace lora::testing
