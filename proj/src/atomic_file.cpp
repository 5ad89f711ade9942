#include "lora/atomic_file.hpp"

#include <unistd.h>

#include "lora/errors.hpp"

namespace lora {

AtomicFile::AtomicFile(std::filesystem::path target) : target_(std::move(target)) {
    temp_ = target_;
    temp_ += ".tmp." + std::to_string(::getpid());
    out_.open(temp_, std::ios::binary | std::ios::trunc);
    if (!out_) throw IoError("cannot open " + temp_.string() + " for writing");
}

AtomicFile::~AtomicFile() {
    if (!committed_) {
        out_.close();
        std::error_code ec;
        std::filesystem::remove(temp_, ec);
    }
}

void AtomicFile::commit() {
    out_.flush();
    if (!out_) throw IoError("write failed for " + temp_.string());
    out_.close();
    std::error_code ec;
    std::filesystem::rename(temp_, target_, ec);
    if (ec) throw IoError("cannot rename " + temp_.string() + " to " + target_.string() + ": " + ec.message());
    committed_ = true;
}

void write_file_atomic(const std::filesystem::path& path, std::string_view contents) {
    AtomicFile file(path);
    file.stream().write(contents.data(), static_cast<std::streamsize>(contents.size()));
    file.commit();
}

}  // namespace lora
