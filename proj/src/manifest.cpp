#include "dila/manifest.hpp"

#include <openssl/evp.h>

#include <filesystem>
#include <memory>
#include <stdexcept>

#include "dila/io.hpp"
#include "json.hpp"

namespace dila {

using nlohmann::json;

std::string sha256_hex(const std::string& bytes) {
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
        EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) != 1 ||
        EVP_DigestFinal_ex(ctx.get(), digest, &len) != 1) {
        throw std::runtime_error("sha256 failed");
    }
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[digest[i] >> 4];
        out += hex[digest[i] & 15];
    }
    return out;
}

std::string sha256_file(const std::string& path) { return sha256_hex(read_file(path)); }

ManifestFile hash_file(const std::string& path, bool deterministic) {
    return {path, sha256_file(path), deterministic};
}

namespace {

json files_json(const std::vector<ManifestFile>& files) {
    json arr = json::array();
    for (const auto& f : files) arr.push_back({{"path", f.path}, {"sha256", f.sha256}, {"deterministic", f.deterministic}});
    return arr;
}

std::vector<ManifestFile> files_from(const json& arr) {
    std::vector<ManifestFile> out;
    for (const auto& f : arr)
        out.push_back({f.at("path").get<std::string>(), f.at("sha256").get<std::string>(), f.value("deterministic", true)});
    return out;
}

}  // namespace

void append_manifest(const std::string& dir, const ManifestRun& run) {
    std::filesystem::create_directories(dir);
    const std::string path = dir + "/manifest.json";
    json doc = {{"runs", json::array()}};
    if (std::filesystem::exists(path)) doc = json::parse(read_file(path));
    doc["runs"].push_back({{"command", run.command},
                           {"argv", run.argv},
                           {"config", run.config},
                           {"inputs", files_json(run.inputs)},
                           {"outputs", files_json(run.outputs)}});
    write_file(path, doc.dump(1) + "\n");
}

std::vector<ManifestRun> read_manifest(const std::string& dir) {
    const std::string path = dir + "/manifest.json";
    try {
        const json doc = json::parse(read_file(path));
        std::vector<ManifestRun> out;
        for (const auto& r : doc.at("runs")) {
            out.push_back({r.at("command").get<std::string>(), r.at("argv").get<std::vector<std::string>>(),
                           r.at("config").get<std::string>(), files_from(r.at("inputs")), files_from(r.at("outputs"))});
        }
        return out;
    } catch (const json::exception& e) {
        throw FormatError("manifest '" + path + "': " + e.what());
    }
}

}  // namespace dila
