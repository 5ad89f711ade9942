#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>

namespace lora {

/// Output stream backed by a temporary sibling file; commit() renames it onto
/// the destination. Destroying an uncommitted AtomicFile removes the temporary.
class AtomicFile {
public:
    explicit AtomicFile(std::filesystem::path target);
    ~AtomicFile();

    AtomicFile(const AtomicFile&) = delete;
    AtomicFile& operator=(const AtomicFile&) = delete;

    std::ofstream& stream() { return out_; }
    void commit();

private:
    std::filesystem::path target_;
    std::filesystem::path temp_;
    std::ofstream out_;
    bool committed_ = false;
};

void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

}  // namespace lora
