#include "lora/adapter_io.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "lora/format.hpp"
#include "lora/safetensors.hpp"

namespace lora {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view to_string(ModuleKind kind) {
    switch (kind) {
        case ModuleKind::AttnCAttn: return "attn.c_attn";
        case ModuleKind::AttnCProj: return "attn.c_proj";
        case ModuleKind::MlpCProj: return "mlp.c_proj";
    }
    return "?";
}

std::optional<ModuleKind> parse_module_kind(std::string_view text) {
    for (ModuleKind k : kModuleKinds) {
        if (to_string(k) == text) return k;
    }
    return std::nullopt;
}

void LoraConfig::validate() const {
    if (rank < 1) throw ValidationError("LoRA rank must be >= 1, got " + std::to_string(rank));
    if (!(alpha > 0.0) || !std::isfinite(alpha)) {
        throw ValidationError("LoRA alpha must be a positive finite number");
    }
    if (target_modules.empty()) throw ValidationError("LoRA config has no target modules");
    if (num_blocks < 1) throw ValidationError("num_blocks must be >= 1");
}

std::string canonical_name(const LayerKey& key) {
    return "transformer.h." + std::to_string(key.block) + "." + std::string(to_string(key.kind));
}

std::string factor_tensor_name(const LayerKey& key, Factor factor) {
    return canonical_name(key) + (factor == Factor::A ? ".lora_A.weight" : ".lora_B.weight");
}

namespace {

bool consume(std::string_view& s, std::string_view prefix) {
    if (!s.starts_with(prefix)) return false;
    s.remove_prefix(prefix.size());
    return true;
}

}  // namespace

ParsedLayerName parse_layer_name(std::string_view raw) {
    const auto fail = [&](const std::string& why) {
        return NamingError("unrecognized LoRA tensor name '" + std::string(raw) + "': " + why);
    };
    std::string_view s = raw;
    consume(s, "base_model.model.");
    if (!consume(s, "transformer.h.")) throw fail("expected 'transformer.h.<block>.' prefix");

    int block = -1;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), block);
    if (ec != std::errc() || ptr == s.data() || block < 0) throw fail("missing block index");
    s.remove_prefix(static_cast<std::size_t>(ptr - s.data()));
    if (!consume(s, ".")) throw fail("missing '.' after block index");

    std::optional<ModuleKind> kind;
    for (ModuleKind k : kModuleKinds) {
        const std::string prefix = std::string(to_string(k)) + ".";
        if (s.starts_with(prefix)) {
            kind = k;
            s.remove_prefix(prefix.size());
            break;
        }
    }
    if (!kind) throw fail("module is not one of attn.c_attn, attn.c_proj, mlp.c_proj");

    Factor factor;
    if (consume(s, "lora_A")) {
        factor = Factor::A;
    } else if (consume(s, "lora_B")) {
        factor = Factor::B;
    } else {
        throw fail("no lora_A/lora_B marker");
    }
    consume(s, ".default");
    if (s == ".bias") throw fail("LoRA bias tensors are not supported");
    if (s != ".weight") throw fail("expected '.weight' suffix");
    return {LayerKey{block, *kind}, factor};
}

ModuleShape module_shape(ModuleKind kind, Eigen::Index d) {
    switch (kind) {
        case ModuleKind::AttnCAttn: return {3 * d, d};
        case ModuleKind::AttnCProj: return {d, d};
        case ModuleKind::MlpCProj: return {d, 4 * d};
    }
    return {};
}

Eigen::Index AdapterBundle::model_width() const {
    if (layers.empty()) throw ValidationError("adapter '" + name + "' has no layers");
    const LoraLayerPair& first = layers.begin()->second;
    return first.key.kind == ModuleKind::MlpCProj ? first.a.cols() / 4 : first.a.cols();
}

void AdapterBundle::validate() const {
    config.validate();
    if (layers.empty()) throw ValidationError("adapter '" + name + "' has no layers");
    const Eigen::Index d = model_width();
    const Eigen::Index r = config.rank;
    for (const auto& [key, pair] : layers) {
        const std::string layer = canonical_name(key);
        if (!(pair.key == key)) throw ValidationError("layer entry " + layer + " carries a different key");
        if (key.block >= config.num_blocks) {
            throw ValidationError("layer " + layer + " exceeds num_blocks " + std::to_string(config.num_blocks));
        }
        if (!config.target_modules.contains(key.kind)) {
            throw ValidationError("layer " + layer + " is not a configured target module");
        }
        const ModuleShape shape = module_shape(key.kind, d);
        if (pair.a.rows() != r || pair.a.cols() != shape.in) {
            throw ValidationError("layer " + layer + ": lora_A is " + shape_of(pair.a) + ", expected " +
                                  shape_string(r, shape.in));
        }
        if (pair.b.rows() != shape.out || pair.b.cols() != r) {
            throw ValidationError("layer " + layer + ": lora_B is " + shape_of(pair.b) + ", expected " +
                                  shape_string(shape.out, r));
        }
    }
    std::vector<std::string> missing;
    for (int blk = 0; blk < config.num_blocks; ++blk) {
        for (ModuleKind kind : config.target_modules) {
            if (!layers.contains(LayerKey{blk, kind})) missing.push_back(canonical_name({blk, kind}));
        }
    }
    if (!missing.empty()) {
        std::string list;
        for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
        throw CompletenessError("adapter '" + name + "' is missing " + std::to_string(missing.size()) +
                                " layer(s): " + list);
    }
}

namespace {

/// PEFT configs name modules by suffix: `c_proj` covers both attention and MLP
/// output projections.
std::set<ModuleKind> parse_target_modules(const json& list) {
    std::set<ModuleKind> out;
    for (const auto& item : list) {
        if (!item.is_string()) throw ValidationError("target_modules entries must be strings");
        const std::string m = item.get<std::string>();
        if (auto kind = parse_module_kind(m)) {
            out.insert(*kind);
        } else if (m == "c_attn") {
            out.insert(ModuleKind::AttnCAttn);
        } else if (m == "c_proj") {
            out.insert(ModuleKind::AttnCProj);
            out.insert(ModuleKind::MlpCProj);
        } else {
            throw NamingError("unsupported target module '" + m + "'");
        }
    }
    return out;
}

struct PartialConfig {
    std::optional<int> rank;
    std::optional<double> alpha;
    std::optional<std::set<ModuleKind>> targets;
    std::optional<int> num_blocks;
};

PartialConfig read_sidecar(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open sidecar config " + path.string());
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ParseError("malformed sidecar config " + path.string() + ": " + e.what(), e.byte);
    }
    PartialConfig cfg;
    try {
        if (doc.contains("r")) cfg.rank = doc.at("r").get<int>();
        if (doc.contains("lora_alpha")) cfg.alpha = doc.at("lora_alpha").get<double>();
        if (doc.contains("target_modules")) cfg.targets = parse_target_modules(doc.at("target_modules"));
        if (doc.contains("num_blocks")) cfg.num_blocks = doc.at("num_blocks").get<int>();
    } catch (const json::exception& e) {
        throw ValidationError("sidecar config " + path.string() + ": " + e.what());
    }
    return cfg;
}

template <typename T>
std::optional<T> metadata_number(const safetensors::Metadata& md, const std::string& key) {
    auto it = md.find(key);
    if (it == md.end()) return std::nullopt;
    std::istringstream in(it->second);
    T value{};
    if (!(in >> value)) throw ValidationError("metadata '" + key + "' is not a number: " + it->second);
    return value;
}

PartialConfig read_metadata(const safetensors::Metadata& md) {
    PartialConfig cfg;
    cfg.rank = metadata_number<int>(md, "r");
    cfg.alpha = metadata_number<double>(md, "lora_alpha");
    cfg.num_blocks = metadata_number<int>(md, "num_blocks");
    if (auto it = md.find("target_modules"); it != md.end()) {
        try {
            cfg.targets = parse_target_modules(json::parse(it->second));
        } catch (const json::exception& e) {
            throw ValidationError(std::string("metadata target_modules: ") + e.what());
        }
    }
    return cfg;
}

template <typename T>
std::optional<T> first_of(std::initializer_list<std::optional<T>> options) {
    for (const auto& o : options) {
        if (o) return o;
    }
    return std::nullopt;
}


}  // namespace

AdapterBundle load_adapter(const fs::path& path, const std::string& name, const ConfigOverride& fallback) {
    fs::path file = path;
    fs::path sidecar;
    if (fs::is_directory(path)) {
        file = path / "adapter_model.safetensors";
        sidecar = path / "adapter_config.json";
    } else {
        sidecar = fs::path(path).replace_extension(".json");
    }
    safetensors::Reader reader(file);

    const PartialConfig side = !sidecar.empty() && fs::exists(sidecar) && sidecar != file
                                   ? read_sidecar(sidecar)
                                   : PartialConfig{};
    const PartialConfig meta = read_metadata(reader.metadata());

    AdapterBundle bundle;
    bundle.name = name;

    int max_block = -1;
    std::set<ModuleKind> present;
    std::map<LayerKey, std::pair<std::optional<MatrixD>, std::optional<MatrixD>>> factors;
    for (const auto& info : reader.tensors()) {
        const ParsedLayerName parsed = parse_layer_name(info.name);
        if (info.shape.size() != 2) {
            throw ValidationError("tensor '" + info.name + "' must be 2-D");
        }
        MatrixD m = reader.read_matrix(info);
        if (!is_finite(m)) throw NumericError("tensor '" + info.name + "' has non-finite entries");
        auto& slot = factors[parsed.key];
        auto& dst = parsed.factor == Factor::A ? slot.first : slot.second;
        if (dst) throw ValidationError("duplicate tensor for " + canonical_name(parsed.key) + " after name normalization");
        dst = std::move(m);
        max_block = std::max(max_block, parsed.key.block);
        present.insert(parsed.key.kind);
    }

    const auto rank = first_of({side.rank, meta.rank, fallback.rank});
    const auto alpha = first_of({side.alpha, meta.alpha, fallback.alpha});
    if (!rank) throw ValidationError("adapter '" + name + "': LoRA rank unknown (no sidecar, metadata or flag)");
    if (!alpha) throw ValidationError("adapter '" + name + "': lora_alpha unknown (no sidecar, metadata or flag)");
    bundle.config.rank = *rank;
    bundle.config.alpha = *alpha;
    bundle.config.target_modules = side.targets ? *side.targets : meta.targets ? *meta.targets : present;
    bundle.config.num_blocks = first_of({side.num_blocks, meta.num_blocks, fallback.num_blocks}).value_or(max_block + 1);

    for (auto& [key, ab] : factors) {
        if (!ab.first || !ab.second) {
            throw CompletenessError("adapter '" + name + "': layer " + canonical_name(key) + " lacks lora_" +
                                    (ab.first ? "B" : "A"));
        }
        bundle.layers.emplace(key, LoraLayerPair{key, std::move(*ab.first), std::move(*ab.second)});
    }
    bundle.validate();
    return bundle;
}

void save_adapter(const AdapterBundle& bundle, const fs::path& path) {
    bundle.validate();
    std::vector<safetensors::TensorRef> refs;
    for (const auto& [key, pair] : bundle.layers) {
        refs.push_back({factor_tensor_name(key, Factor::A), {pair.a.rows(), pair.a.cols()},
                        std::span<const double>(pair.a.data(), static_cast<std::size_t>(pair.a.size()))});
        refs.push_back({factor_tensor_name(key, Factor::B), {pair.b.rows(), pair.b.cols()},
                        std::span<const double>(pair.b.data(), static_cast<std::size_t>(pair.b.size()))});
    }
    json targets = json::array();
    for (ModuleKind k : bundle.config.target_modules) targets.push_back(std::string(to_string(k)));
    const safetensors::Metadata md{
        {"format", "pt"},
        {"r", std::to_string(bundle.config.rank)},
        {"lora_alpha", format_exact(bundle.config.alpha)},
        {"target_modules", targets.dump()},
        {"num_blocks", std::to_string(bundle.config.num_blocks)},
    };
    safetensors::write(path, std::move(refs), md);
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

void ModelDims::validate() const {
    if (d_model < 1 || n_vocab < 1 || n_positions < 1 || n_layer < 1 || n_head < 1) {
        throw ValidationError("model dims must all be positive");
    }
    if (d_model % n_head != 0) {
        throw ValidationError("n_embd " + std::to_string(d_model) + " is not divisible by n_head " +
                              std::to_string(n_head));
    }
}

MatrixD& BlockWeights::projection(ModuleKind kind) {
    return const_cast<MatrixD&>(std::as_const(*this).projection(kind));
}

const MatrixD& BlockWeights::projection(ModuleKind kind) const {
    switch (kind) {
        case ModuleKind::AttnCAttn: return attn_qkv;
        case ModuleKind::AttnCProj: return attn_proj;
        case ModuleKind::MlpCProj: return mlp_proj;
    }
    return attn_qkv;
}

ModelWeights make_model(const ModelDims& dims) {
    dims.validate();
    ModelWeights w;
    w.dims = dims;
    w.blocks.resize(static_cast<std::size_t>(dims.n_layer));
    for_each_tensor(w, [](const std::string&, auto& tensor, const std::vector<std::int64_t>& shape) {
        if (shape.size() == 2) {
            tensor.setZero(shape[0], shape[1]);
        } else {
            tensor.setZero(1, shape[0]);
        }
    });
    return w;
}

std::vector<std::pair<std::string, std::vector<std::int64_t>>> checkpoint_layout(const ModelDims& dims) {
    struct Shell {
        ModelDims dims;
        MatrixD token_embedding, position_embedding;
        std::vector<BlockWeights> blocks;
        RowVectorD lnf_gamma, lnf_beta;
    } shell{dims, {}, {}, std::vector<BlockWeights>(static_cast<std::size_t>(dims.n_layer)), {}, {}};
    std::vector<std::pair<std::string, std::vector<std::int64_t>>> out;
    for_each_tensor(shell, [&](const std::string& name, auto&, const std::vector<std::int64_t>& shape) {
        out.emplace_back(name, shape);
    });
    return out;
}

namespace {

std::string shape_text(const std::vector<std::int64_t>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? ", " : "") + std::to_string(shape[i]);
    return s + "]";
}

}  // namespace

ModelWeights load_checkpoint(const fs::path& path) {
    safetensors::Reader reader(path);
    const auto& md = reader.metadata();
    ModelDims dims;
    const std::pair<const char*, Eigen::Index*> fields[] = {{"n_embd", &dims.d_model},
                                                            {"n_vocab", &dims.n_vocab},
                                                            {"n_positions", &dims.n_positions},
                                                            {"n_layer", &dims.n_layer},
                                                            {"n_head", &dims.n_head}};
    for (const auto& [key, dst] : fields) {
        auto v = metadata_number<long long>(md, key);
        if (!v) throw ValidationError("checkpoint " + path.string() + " lacks metadata '" + key + "'");
        *dst = static_cast<Eigen::Index>(*v);
    }
    dims.validate();

    ModelWeights w;
    w.dims = dims;
    w.blocks.resize(static_cast<std::size_t>(dims.n_layer));
    std::vector<std::string> missing;
    for_each_tensor(w, [&](const std::string& name, auto& tensor, const std::vector<std::int64_t>& shape) {
        const safetensors::TensorInfo* info = reader.find(name);
        if (!info) info = reader.find("transformer." + name);
        if (!info) {
            missing.push_back(name);
            return;
        }
        if (info->shape != shape) {
            throw ValidationError("checkpoint tensor '" + name + "' is " + shape_text(info->shape) + ", expected " +
                                  shape_text(shape));
        }
        MatrixD m = reader.read_matrix(*info);
        if (!is_finite(m)) throw NumericError("checkpoint tensor '" + name + "' has non-finite entries");
        tensor = std::move(m);
    });
    if (!missing.empty()) {
        std::string list;
        for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
        throw CompletenessError("checkpoint " + path.string() + " is missing " + std::to_string(missing.size()) +
                                " tensor(s): " + list);
    }
    return w;
}

void save_checkpoint(const ModelWeights& weights, const fs::path& path) {
    std::vector<safetensors::TensorRef> refs;
    for_each_tensor(weights, [&](const std::string& name, const auto& tensor, const std::vector<std::int64_t>& shape) {
        refs.push_back({name, shape, std::span<const double>(tensor.data(), static_cast<std::size_t>(tensor.size()))});
    });
    const auto& d = weights.dims;
    const safetensors::Metadata md{
        {"format", "pt"},
        {"n_embd", std::to_string(d.d_model)},
        {"n_vocab", std::to_string(d.n_vocab)},
        {"n_positions", std::to_string(d.n_positions)},
        {"n_layer", std::to_string(d.n_layer)},
        {"n_head", std::to_string(d.n_head)},
    };
    safetensors::write(path, std::move(refs), md);
}

}  // namespace lora
