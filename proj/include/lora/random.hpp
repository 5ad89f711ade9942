#pragma once

#include <cstdint>
#include <random>

namespace lora {

/// splitmix64 finalizer over (seed, stream): every stream index yields an
/// independent, reproducible generator seed regardless of evaluation order.
constexpr std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

/// Standard normal variates from mt19937_64 via Box-Muller. The transform is
/// spelled out so sequences are identical across standard library vendors.
class GaussianStream {
public:
    GaussianStream(std::uint64_t seed, std::uint64_t stream) : engine_(mix_seed(seed, stream)) {}

    double next();

private:
    double uniform_open();  // (0, 1]

    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace lora
