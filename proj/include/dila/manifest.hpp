#pragma once

// Run manifests: the resolved configuration plus SHA-256 digests of every
// input and output file, appended to <run dir>/manifest.json.

#include <string>
#include <vector>

namespace dila {

std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const std::string& path);

struct ManifestFile {
    std::string path;
    std::string sha256;
    bool deterministic = true;  // false for reports carrying wall-clock timings
};

struct ManifestRun {
    std::string command;
    std::vector<std::string> argv;
    std::string config;  // resolved configuration, TOML
    std::vector<ManifestFile> inputs;
    std::vector<ManifestFile> outputs;
};

ManifestFile hash_file(const std::string& path, bool deterministic = true);
// Appends `run` to the "runs" array of manifest.json in `dir`.
void append_manifest(const std::string& dir, const ManifestRun& run);
std::vector<ManifestRun> read_manifest(const std::string& dir);

}  // namespace dila
