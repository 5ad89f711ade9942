#pragma once

// Adapter bundles and base checkpoints: layer naming, validation, and
// (de)serialization through the safetensors container.

#include <array>
#include <compare>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "lora/tensor.hpp"

namespace lora {

/// LoRA-targeted projections of a GPT-2 block, in canonical report order.
enum class ModuleKind { AttnCAttn, AttnCProj, MlpCProj };

inline constexpr std::array<ModuleKind, 3> kModuleKinds = {ModuleKind::AttnCAttn, ModuleKind::AttnCProj,
                                                           ModuleKind::MlpCProj};

std::string_view to_string(ModuleKind kind);
std::optional<ModuleKind> parse_module_kind(std::string_view text);

struct LoraConfig {
    int rank = 4;
    double alpha = 64.0;
    std::set<ModuleKind> target_modules{kModuleKinds.begin(), kModuleKinds.end()};
    int num_blocks = 12;

    double scale() const { return alpha / rank; }
    void validate() const;
    bool operator==(const LoraConfig&) const = default;
};

struct LayerKey {
    int block = 0;
    ModuleKind kind = ModuleKind::AttnCAttn;

    auto operator<=>(const LayerKey&) const = default;
};

/// `transformer.h.<block>.<module_kind>`
std::string canonical_name(const LayerKey& key);

enum class Factor { A, B };

struct ParsedLayerName {
    LayerKey key;
    Factor factor = Factor::A;
    bool operator==(const ParsedLayerName&) const = default;
};

/// Accepts `[base_model.model.]transformer.h.<i>.<kind>.lora_{A,B}[.default].weight`.
ParsedLayerName parse_layer_name(std::string_view raw);

/// Name written by save_adapter: `transformer.h.<i>.<kind>.lora_<F>.weight`.
std::string factor_tensor_name(const LayerKey& key, Factor factor);

/// Base-weight geometry of a module kind for model width d: `out` is n, `in` is m.
struct ModuleShape {
    Eigen::Index out = 0;
    Eigen::Index in = 0;
};
ModuleShape module_shape(ModuleKind kind, Eigen::Index d_model);

struct LoraLayerPair {
    LayerKey key;
    MatrixD a;  // (r, m)
    MatrixD b;  // (n, r)
    bool operator==(const LoraLayerPair& other) const {
        return key == other.key && a == other.a && b == other.b;
    }
};

struct AdapterBundle {
    std::string name;
    LoraConfig config;
    std::map<LayerKey, LoraLayerPair> layers;

    /// Model width implied by the factor shapes (throws if there are no layers).
    Eigen::Index model_width() const;
    /// Checks every structural invariant; throws the matching error class.
    void validate() const;
    bool operator==(const AdapterBundle&) const = default;
};

/// Fallback values used only when neither a sidecar config nor header metadata
/// provides them.
struct ConfigOverride {
    std::optional<int> rank;
    std::optional<double> alpha;
    std::optional<int> num_blocks;
};

AdapterBundle load_adapter(const std::filesystem::path& path, const std::string& name,
                           const ConfigOverride& fallback = {});
void save_adapter(const AdapterBundle& bundle, const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Base checkpoints
// ---------------------------------------------------------------------------

struct ModelDims {
    Eigen::Index d_model = 0;
    Eigen::Index n_vocab = 0;
    Eigen::Index n_positions = 0;
    Eigen::Index n_layer = 0;
    Eigen::Index n_head = 0;

    void validate() const;
    bool operator==(const ModelDims&) const = default;
};

/// Projection weights are stored (in, out) so that x * W applies them.
struct BlockWeights {
    RowVectorD ln1_gamma, ln1_beta;
    MatrixD attn_qkv;
    RowVectorD attn_qkv_bias;
    MatrixD attn_proj;
    RowVectorD attn_proj_bias;
    RowVectorD ln2_gamma, ln2_beta;
    MatrixD mlp_fc;
    RowVectorD mlp_fc_bias;
    MatrixD mlp_proj;
    RowVectorD mlp_proj_bias;

    MatrixD& projection(ModuleKind kind);
    const MatrixD& projection(ModuleKind kind) const;
    bool operator==(const BlockWeights&) const = default;
};

struct ModelWeights {
    ModelDims dims;
    MatrixD token_embedding;     // (V, d)
    MatrixD position_embedding;  // (P, d)
    std::vector<BlockWeights> blocks;
    RowVectorD lnf_gamma, lnf_beta;

    bool operator==(const ModelWeights&) const = default;
};

/// Calls fn(name, tensor, shape) for every tensor in checkpoint order.
template <typename Weights, typename Fn>
void for_each_tensor(Weights& w, Fn&& fn) {
    const auto d = w.dims.d_model;
    using Shape = std::vector<std::int64_t>;
    fn(std::string("wte.weight"), w.token_embedding, Shape{w.dims.n_vocab, d});
    fn(std::string("wpe.weight"), w.position_embedding, Shape{w.dims.n_positions, d});
    for (std::size_t i = 0; i < w.blocks.size(); ++i) {
        auto& b = w.blocks[i];
        const std::string p = "h." + std::to_string(i) + ".";
        fn(p + "ln_1.weight", b.ln1_gamma, Shape{d});
        fn(p + "ln_1.bias", b.ln1_beta, Shape{d});
        fn(p + "attn.c_attn.weight", b.attn_qkv, Shape{d, 3 * d});
        fn(p + "attn.c_attn.bias", b.attn_qkv_bias, Shape{3 * d});
        fn(p + "attn.c_proj.weight", b.attn_proj, Shape{d, d});
        fn(p + "attn.c_proj.bias", b.attn_proj_bias, Shape{d});
        fn(p + "ln_2.weight", b.ln2_gamma, Shape{d});
        fn(p + "ln_2.bias", b.ln2_beta, Shape{d});
        fn(p + "mlp.c_fc.weight", b.mlp_fc, Shape{d, 4 * d});
        fn(p + "mlp.c_fc.bias", b.mlp_fc_bias, Shape{4 * d});
        fn(p + "mlp.c_proj.weight", b.mlp_proj, Shape{4 * d, d});
        fn(p + "mlp.c_proj.bias", b.mlp_proj_bias, Shape{d});
    }
    fn(std::string("ln_f.weight"), w.lnf_gamma, Shape{d});
    fn(std::string("ln_f.bias"), w.lnf_beta, Shape{d});
}

/// Tensor name -> shape table implied by the dims, in checkpoint order.
std::vector<std::pair<std::string, std::vector<std::int64_t>>> checkpoint_layout(const ModelDims& dims);

/// Zero-initialized weights with every tensor sized for `dims`.
ModelWeights make_model(const ModelDims& dims);

ModelWeights load_checkpoint(const std::filesystem::path& path);
void save_checkpoint(const ModelWeights& weights, const std::filesystem::path& path);

}  // namespace lora
