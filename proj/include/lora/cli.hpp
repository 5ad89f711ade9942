#pragma once

#include <filesystem>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

namespace lora {

inline constexpr const char* kToolVersion = "0.1.0";

/// Provenance record attached to every report the CLI emits.
struct RunManifest {
    std::string command;
    std::vector<std::pair<std::string, std::string>> inputs;  // path, sha256
    nlohmann::json parameters = nlohmann::json::object();
    std::string tool_version = kToolVersion;
    std::vector<std::string> outputs;

    void add_input(const std::filesystem::path& path);
    nlohmann::json to_json() const;
};

/// Hex SHA-256 of a file, or of every regular file under a directory.
std::string sha256_file(const std::filesystem::path& path);

/// Entry point behind the `lora-compose` binary. `args` excludes the program
/// name. Returns the process exit code: 0 ok, 2 input, 3 incompatible, 4 numeric.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace lora
