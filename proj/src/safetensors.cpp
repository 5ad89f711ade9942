#include "lora/safetensors.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <numeric>

#include <json.hpp>

#include "lora/atomic_file.hpp"

static_assert(std::endian::native == std::endian::little, "container payloads are little-endian");

namespace lora::safetensors {

using nlohmann::json;

std::size_t dtype_size(DType dtype) {
    return dtype == DType::F32 ? 4 : 2;
}

std::int64_t TensorInfo::numel() const {
    return std::accumulate(shape.begin(), shape.end(), std::int64_t{1}, std::multiplies<>());
}

float half_to_float(std::uint16_t h) {
    const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
    std::uint32_t exp = (h >> 10) & 0x1Fu;
    std::uint32_t mant = h & 0x3FFu;
    std::uint32_t bits;
    if (exp == 0) {
        if (mant == 0) {
            bits = sign;
        } else {
            // subnormal: renormalize
            exp = 127 - 15 + 1;
            while ((mant & 0x400u) == 0) {
                mant <<= 1;
                --exp;
            }
            mant &= 0x3FFu;
            bits = sign | (exp << 23) | (mant << 13);
        }
    } else if (exp == 0x1F) {
        bits = sign | 0x7F800000u | (mant << 13);
    } else {
        bits = sign | ((exp + 127 - 15) << 23) | (mant << 13);
    }
    return std::bit_cast<float>(bits);
}

float bfloat16_to_float(std::uint16_t bits) {
    return std::bit_cast<float>(static_cast<std::uint32_t>(bits) << 16);
}

namespace {

DType parse_dtype(const std::string& s, std::uint64_t offset) {
    if (s == "F32") return DType::F32;
    if (s == "F16") return DType::F16;
    if (s == "BF16") return DType::BF16;
    throw ParseError("unsupported dtype '" + s + "'", offset);
}

}  // namespace

Reader::Reader(const std::filesystem::path& path) : path_(path) {
    in_.open(path, std::ios::binary);
    if (!in_) throw IoError("cannot open " + path.string());
    in_.seekg(0, std::ios::end);
    file_size_ = static_cast<std::uint64_t>(in_.tellg());
    in_.seekg(0);

    if (file_size_ < 8) throw ParseError("file too short for header length in " + path.string(), file_size_);
    std::uint64_t header_len = 0;
    in_.read(reinterpret_cast<char*>(&header_len), 8);
    if (header_len > file_size_ - 8) {
        throw ParseError("header length " + std::to_string(header_len) + " exceeds file size " +
                             std::to_string(file_size_) + " in " + path.string(),
                         0);
    }
    std::string header(header_len, '\0');
    in_.read(header.data(), static_cast<std::streamsize>(header_len));
    data_start_ = 8 + header_len;

    json doc;
    try {
        doc = json::parse(header);
    } catch (const json::parse_error& e) {
        throw ParseError("malformed JSON header in " + path.string() + ": " + e.what(), 8 + e.byte);
    }
    if (!doc.is_object()) throw ParseError("header is not a JSON object", 8);

    const std::uint64_t data_size = file_size_ - data_start_;
    for (auto it = doc.begin(); it != doc.end(); ++it) {
        if (it.key() == "__metadata__") {
            if (!it->is_object()) throw ParseError("__metadata__ is not an object", 8);
            for (auto m = it->begin(); m != it->end(); ++m) {
                if (!m->is_string()) throw ParseError("__metadata__ value for '" + m.key() + "' is not a string", 8);
                metadata_[m.key()] = m->get<std::string>();
            }
            continue;
        }
        const json& entry = *it;
        const auto bad = [&](const std::string& what) {
            return ParseError("tensor '" + it.key() + "': " + what, 8);
        };
        if (!entry.is_object() || !entry.contains("dtype") || !entry.contains("shape") ||
            !entry.contains("data_offsets")) {
            throw bad("entry needs dtype, shape and data_offsets");
        }
        TensorInfo info;
        info.name = it.key();
        if (!entry["dtype"].is_string()) throw bad("dtype is not a string");
        info.dtype = parse_dtype(entry["dtype"].get<std::string>(), 8);
        if (!entry["shape"].is_array()) throw bad("shape is not an array");
        for (const auto& d : entry["shape"]) {
            if (!d.is_number_integer() || d.get<std::int64_t>() < 0) throw bad("shape has a non-integer or negative entry");
            info.shape.push_back(d.get<std::int64_t>());
        }
        const json& offs = entry["data_offsets"];
        if (!offs.is_array() || offs.size() != 2 || !offs[0].is_number_unsigned() ||
            !offs[1].is_number_unsigned()) {
            throw bad("data_offsets must be two unsigned integers");
        }
        info.begin = offs[0].get<std::uint64_t>();
        info.end = offs[1].get<std::uint64_t>();
        if (info.end < info.begin) throw bad("data_offsets are reversed");
        const auto expected = static_cast<std::uint64_t>(info.numel()) * dtype_size(info.dtype);
        if (info.end - info.begin != expected) {
            throw bad("payload is " + std::to_string(info.end - info.begin) + " bytes, shape needs " +
                      std::to_string(expected));
        }
        if (info.end > data_size) {
            throw ParseError("tensor '" + info.name + "' payload ends at byte " +
                                 std::to_string(data_start_ + info.end) + " but file has " +
                                 std::to_string(file_size_) + " bytes (truncated?)",
                             file_size_);
        }
        tensors_.push_back(std::move(info));
    }

    std::vector<const TensorInfo*> by_offset;
    for (const auto& t : tensors_) by_offset.push_back(&t);
    std::sort(by_offset.begin(), by_offset.end(),
              [](const TensorInfo* a, const TensorInfo* b) { return a->begin < b->begin; });
    for (std::size_t i = 1; i < by_offset.size(); ++i) {
        if (by_offset[i]->begin < by_offset[i - 1]->end) {
            throw ParseError("tensors '" + by_offset[i - 1]->name + "' and '" + by_offset[i]->name +
                                 "' overlap",
                             data_start_ + by_offset[i]->begin);
        }
    }
    std::sort(tensors_.begin(), tensors_.end(),
              [](const TensorInfo& a, const TensorInfo& b) { return a.name < b.name; });
}

const TensorInfo* Reader::find(const std::string& name) const {
    auto it = std::lower_bound(tensors_.begin(), tensors_.end(), name,
                               [](const TensorInfo& t, const std::string& n) { return t.name < n; });
    return it != tensors_.end() && it->name == name ? &*it : nullptr;
}

std::vector<float> Reader::read_values(const TensorInfo& info) {
    const auto n = static_cast<std::size_t>(info.numel());
    std::vector<float> out(n);
    in_.clear();
    in_.seekg(static_cast<std::streamoff>(data_start_ + info.begin));
    if (info.dtype == DType::F32) {
        in_.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(n * 4));
    } else {
        std::vector<std::uint16_t> raw(n);
        in_.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n * 2));
        const auto convert = info.dtype == DType::F16 ? half_to_float : bfloat16_to_float;
        std::transform(raw.begin(), raw.end(), out.begin(), convert);
    }
    if (!in_) throw ParseError("short read for tensor '" + info.name + "'", data_start_ + info.begin);
    return out;
}

MatrixD Reader::read_matrix(const TensorInfo& info) {
    Eigen::Index rows = 1, cols = 1;
    if (info.shape.size() == 2) {
        rows = info.shape[0];
        cols = info.shape[1];
    } else if (info.shape.size() == 1) {
        cols = info.shape[0];
    } else {
        throw ValidationError("tensor '" + info.name + "' has rank " + std::to_string(info.shape.size()) +
                              ", expected 1 or 2");
    }
    const std::vector<float> values = read_values(info);
    return Eigen::Map<const MatrixF>(values.data(), rows, cols).cast<double>();
}

void write(const std::filesystem::path& path, std::vector<TensorRef> tensors, const Metadata& metadata) {
    std::sort(tensors.begin(), tensors.end(),
              [](const TensorRef& a, const TensorRef& b) { return a.name < b.name; });

    json header = json::object();
    if (!metadata.empty()) header["__metadata__"] = metadata;
    std::uint64_t offset = 0;
    for (const auto& t : tensors) {
        const auto numel = std::accumulate(t.shape.begin(), t.shape.end(), std::int64_t{1}, std::multiplies<>());
        if (static_cast<std::size_t>(numel) != t.data.size()) {
            throw ShapeError("tensor '" + t.name + "' has " + std::to_string(t.data.size()) +
                             " values for " + std::to_string(numel) + " shape entries");
        }
        const std::uint64_t bytes = static_cast<std::uint64_t>(numel) * 4;
        header[t.name] = {{"dtype", "F32"}, {"shape", t.shape}, {"data_offsets", {offset, offset + bytes}}};
        offset += bytes;
    }
    std::string text = header.dump();
    text.append((8 - text.size() % 8) % 8, ' ');
    const std::uint64_t header_len = text.size();

    AtomicFile file(path);
    auto& out = file.stream();
    out.write(reinterpret_cast<const char*>(&header_len), 8);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));

    constexpr std::size_t kChunk = 1 << 16;
    std::vector<float> buffer(kChunk);
    for (const auto& t : tensors) {
        for (std::size_t i = 0; i < t.data.size(); i += kChunk) {
            const std::size_t n = std::min(kChunk, t.data.size() - i);
            for (std::size_t k = 0; k < n; ++k) buffer[k] = static_cast<float>(t.data[i + k]);
            out.write(reinterpret_cast<const char*>(buffer.data()), static_cast<std::streamsize>(n * 4));
        }
    }
    file.commit();
}

}  // namespace lora::safetensors
