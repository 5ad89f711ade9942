#pragma once

// Reader/writer for the safetensors container: an 8-byte little-endian header
// length, a JSON header mapping tensor name -> {dtype, shape, data_offsets},
// then a raw little-endian payload. Reads F32/F16/BF16, writes F32.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lora/tensor.hpp"

namespace lora::safetensors {

enum class DType { F32, F16, BF16 };

std::size_t dtype_size(DType dtype);

struct TensorInfo {
    std::string name;
    DType dtype = DType::F32;
    std::vector<std::int64_t> shape;
    std::uint64_t begin = 0;  // relative to the start of the payload
    std::uint64_t end = 0;

    std::int64_t numel() const;
};

using Metadata = std::map<std::string, std::string>;

class Reader {
public:
    explicit Reader(const std::filesystem::path& path);

    const std::filesystem::path& path() const { return path_; }
    const Metadata& metadata() const { return metadata_; }
    /// Tensor entries sorted by name.
    const std::vector<TensorInfo>& tensors() const { return tensors_; }
    const TensorInfo* find(const std::string& name) const;

    std::vector<float> read_values(const TensorInfo& info);
    /// 2-D tensors keep their shape; 1-D tensors become a single row.
    MatrixD read_matrix(const TensorInfo& info);

private:
    std::filesystem::path path_;
    std::ifstream in_;
    std::uint64_t file_size_ = 0;
    std::uint64_t data_start_ = 0;
    Metadata metadata_;
    std::vector<TensorInfo> tensors_;
};

/// A tensor to serialize. `data` is row-major with prod(shape) entries.
struct TensorRef {
    std::string name;
    std::vector<std::int64_t> shape;
    std::span<const double> data;
};

/// Serialize tensors (sorted by name) as F32 with a padded header. The file is
/// written to a temporary sibling and renamed into place.
void write(const std::filesystem::path& path, std::vector<TensorRef> tensors,
           const Metadata& metadata = {});

float half_to_float(std::uint16_t bits);
float bfloat16_to_float(std::uint16_t bits);

}  // namespace lora::safetensors
