#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace sml {

// One per CLI invocation: what ran, with which knobs, what came out.
struct RunManifest {
    std::string command;
    nlohmann::json config;
    std::vector<std::uint64_t> seeds;
    std::vector<std::string> inputs;
    std::vector<std::pair<std::string, std::string>> outputs;  // (path, content hash)
    double wall_seconds = 0;
};

// Hash of a file's bytes in git blob form: sha1("blob <size>\0" + bytes), hex.
std::string git_blob_sha1(const std::string& path);

void write_manifest(const std::string& path, const RunManifest& m);

}  // namespace sml
