#pragma once

// On-disk formats.
//
// Checkpoint (little-endian):
//   "DILA" | u32 version | u32 tensor count |
//   per tensor: u32 name length | UTF-8 name | u32 rank | u32 dim × rank | f32 payload
// A full model adds a JSON sidecar next to the checkpoint holding the ordered
// code table: [{"code": ..., "description": ...}, ...].
//
// EMB1 embeddings (little-endian):
//   "EMB1" | u32 version | u32 d | u64 note count |
//   per note: u32 id length | UTF-8 id | u32 s | s×d f32

#include <cstdint>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "dila/model.hpp"
#include "dila/numerics.hpp"
#include "dila/sae.hpp"

namespace dila {

class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint32_t kEmb1Version = 1;

struct NamedTensor {
    std::string name;
    std::vector<std::uint32_t> dims;
    std::vector<float> data;
};

void write_tensors(std::ostream& out, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_tensors(std::istream& in);

NamedTensor to_tensor(const std::string& name, const Matrix& m, bool as_vector = false);
Matrix from_tensor(const NamedTensor& t);

void save_sae(const std::string& path, const SaeParams& sae);
// Accepts an SAE-only checkpoint or a full model checkpoint.
SaeParams load_sae(const std::string& path);

std::string codes_sidecar_path(const std::string& checkpoint_path);
void save_model(const std::string& path, const DilaModel& model);
DilaModel load_model(const std::string& path);

// Rounds every parameter through f32, i.e. the values a saved-then-loaded model holds.
DilaModel quantize_to_f32(const DilaModel& model);

struct Emb1File {
    std::size_t d = 0;
    std::vector<std::pair<std::string, Matrix>> notes;
};

void write_emb1(std::ostream& out, const Emb1File& file);
void write_emb1(const std::string& path, const Emb1File& file);
Emb1File read_emb1(std::istream& in);
Emb1File read_emb1(const std::string& path);

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& contents);

}  // namespace dila
