#include "sml/manifest.hpp"

#include <fstream>
#include <iterator>
#include <sstream>

#include <openssl/evp.h>

#include "sml/errors.hpp"

namespace sml {

std::string git_blob_sha1(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot hash missing file: " + path);
    std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    std::string header = "blob " + std::to_string(bytes.size());
    header.push_back('\0');

    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) != 1 ||
        EVP_DigestUpdate(ctx, header.data(), header.size()) != 1 ||
        EVP_DigestUpdate(ctx, bytes.data(), bytes.size()) != 1 ||
        EVP_DigestFinal_ex(ctx, digest, &len) != 1) {
        EVP_MD_CTX_free(ctx);
        throw NumericError("sha1 digest failure");
    }
    EVP_MD_CTX_free(ctx);

    static const char* hex = "0123456789abcdef";
    std::string out;
    out.reserve(2 * len);
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 0xf]);
    }
    return out;
}

void write_manifest(const std::string& path, const RunManifest& m) {
    nlohmann::json outs = nlohmann::json::array();
    for (const auto& [p, h] : m.outputs) outs.push_back({{"path", p}, {"hash", h}});
    nlohmann::json j{{"command", m.command}, {"config", m.config},   {"seeds", m.seeds},
                     {"inputs", m.inputs},   {"outputs", outs},      {"wall_seconds", m.wall_seconds}};
    std::ofstream os(path);
    if (!os) throw DataError("cannot open for writing: " + path);
    os << j.dump(2) << "\n";
    if (!os) throw DataError("write failed: " + path);
}

}  // namespace sml
