#include "dila/io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <unordered_map>

#include "json.hpp"

namespace dila {

namespace {

static_assert(sizeof(float) == 4, "f32 payloads require 32-bit float");

void put_u32(std::ostream& out, std::uint32_t v) {
    const char b[4] = {static_cast<char>(v & 0xFF), static_cast<char>((v >> 8) & 0xFF),
                       static_cast<char>((v >> 16) & 0xFF), static_cast<char>((v >> 24) & 0xFF)};
    out.write(b, 4);
}

void put_u64(std::ostream& out, std::uint64_t v) {
    put_u32(out, static_cast<std::uint32_t>(v & 0xFFFFFFFFULL));
    put_u32(out, static_cast<std::uint32_t>(v >> 32));
}

void put_f32(std::ostream& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

void read_exact(std::istream& in, char* buf, std::size_t n, const char* what) {
    in.read(buf, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n) {
        throw FormatError(std::string("truncated input while reading ") + what);
    }
}

std::uint32_t get_u32(std::istream& in, const char* what) {
    unsigned char b[4];
    read_exact(in, reinterpret_cast<char*>(b), 4, what);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::uint64_t get_u64(std::istream& in, const char* what) {
    const std::uint64_t lo = get_u32(in, what);
    const std::uint64_t hi = get_u32(in, what);
    return lo | (hi << 32);
}

float get_f32(std::istream& in, const char* what) { return std::bit_cast<float>(get_u32(in, what)); }

std::string get_string(std::istream& in, std::uint32_t limit, const char* what) {
    const std::uint32_t len = get_u32(in, what);
    if (len > limit) throw FormatError(std::string("implausible string length in ") + what);
    std::string s(len, '\0');
    read_exact(in, s.data(), len, what);
    return s;
}

void expect_magic(std::istream& in, const char* magic) {
    char buf[4];
    read_exact(in, buf, 4, "magic");
    if (std::memcmp(buf, magic, 4) != 0) throw FormatError(std::string("bad magic, expected ") + magic);
}

const NamedTensor& find_tensor(const std::vector<NamedTensor>& ts, const std::string& name) {
    for (const auto& t : ts)
        if (t.name == name) return t;
    throw FormatError("checkpoint is missing tensor '" + name + "'");
}

SaeParams sae_from(const std::vector<NamedTensor>& ts) {
    SaeParams p;
    p.w_enc = from_tensor(find_tensor(ts, "sae.w_enc"));
    p.b_enc = from_tensor(find_tensor(ts, "sae.b_enc"));
    p.w_dec = from_tensor(find_tensor(ts, "sae.w_dec"));
    p.b_dec = from_tensor(find_tensor(ts, "sae.b_dec"));
    try {
        p.validate();
    } catch (const std::exception& e) {
        throw FormatError(std::string("checkpoint: ") + e.what());
    }
    return p;
}

std::vector<NamedTensor> sae_tensors(const SaeParams& sae) {
    return {to_tensor("sae.w_enc", sae.w_enc), to_tensor("sae.b_enc", sae.b_enc, true),
            to_tensor("sae.w_dec", sae.w_dec), to_tensor("sae.b_dec", sae.b_dec, true)};
}

std::ofstream open_out(const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    return out;
}

std::ifstream open_in(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open '" + path + "'");
    return in;
}

Matrix round_f32(const Matrix& m) {
    Matrix out = m;
    for (double& v : out.values()) v = static_cast<double>(static_cast<float>(v));
    return out;
}

}  // namespace

void write_tensors(std::ostream& out, const std::vector<NamedTensor>& tensors) {
    out.write("DILA", 4);
    put_u32(out, kCheckpointVersion);
    put_u32(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& t : tensors) {
        put_u32(out, static_cast<std::uint32_t>(t.name.size()));
        out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
        put_u32(out, static_cast<std::uint32_t>(t.dims.size()));
        for (auto d : t.dims) put_u32(out, d);
        for (float f : t.data) put_f32(out, f);
    }
    if (!out) throw std::runtime_error("write_tensors: stream error");
}

std::vector<NamedTensor> read_tensors(std::istream& in) {
    expect_magic(in, "DILA");
    const std::uint32_t version = get_u32(in, "version");
    if (version != kCheckpointVersion) {
        throw FormatError("unsupported checkpoint version " + std::to_string(version));
    }
    const std::uint32_t count = get_u32(in, "tensor count");
    std::vector<NamedTensor> out;
    for (std::uint32_t i = 0; i < count; ++i) {
        NamedTensor t;
        t.name = get_string(in, 1u << 16, "tensor name");
        const std::uint32_t rank = get_u32(in, "rank");
        if (rank > 8) throw FormatError("tensor '" + t.name + "': implausible rank " + std::to_string(rank));
        std::uint64_t n = 1;
        for (std::uint32_t r = 0; r < rank; ++r) {
            t.dims.push_back(get_u32(in, "dims"));
            n *= t.dims.back();
        }
        if (n > (1ULL << 32)) throw FormatError("tensor '" + t.name + "': implausible size");
        t.data.resize(n);
        for (auto& f : t.data) f = get_f32(in, "tensor payload");
        out.push_back(std::move(t));
    }
    return out;
}

NamedTensor to_tensor(const std::string& name, const Matrix& m, bool as_vector) {
    NamedTensor t;
    t.name = name;
    if (as_vector) {
        t.dims = {static_cast<std::uint32_t>(m.size())};
    } else {
        t.dims = {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())};
    }
    t.data.reserve(m.size());
    for (double v : m.values()) t.data.push_back(static_cast<float>(v));
    return t;
}

Matrix from_tensor(const NamedTensor& t) {
    std::size_t rows = 1, cols = 1;
    if (t.dims.size() == 1) {
        cols = t.dims[0];
    } else if (t.dims.size() == 2) {
        rows = t.dims[0];
        cols = t.dims[1];
    } else {
        throw FormatError("tensor '" + t.name + "': expected rank 1 or 2");
    }
    std::vector<double> data(t.data.begin(), t.data.end());
    return Matrix(rows, cols, std::move(data));
}

void save_sae(const std::string& path, const SaeParams& sae) {
    auto out = open_out(path);
    write_tensors(out, sae_tensors(sae));
}

SaeParams load_sae(const std::string& path) {
    auto in = open_in(path);
    return sae_from(read_tensors(in));
}

std::string codes_sidecar_path(const std::string& checkpoint_path) {
    const auto dot = checkpoint_path.rfind('.');
    const auto slash = checkpoint_path.find_last_of('/');
    if (dot == std::string::npos || (slash != std::string::npos && dot < slash)) return checkpoint_path + ".codes.json";
    return checkpoint_path.substr(0, dot) + ".codes.json";
}

void save_model(const std::string& path, const DilaModel& model) {
    model.validate();
    auto tensors = sae_tensors(model.sae);
    tensors.push_back(to_tensor("a_ficd", model.a_ficd));
    tensors.push_back(to_tensor("decision_w", model.decision_w));
    tensors.push_back(to_tensor("decision_b", model.decision_b, true));
    {
        auto out = open_out(path);
        write_tensors(out, tensors);
    }
    nlohmann::json codes = nlohmann::json::array();
    for (const auto& c : model.codes) codes.push_back({{"code", c.code}, {"description", c.description}});
    write_file(codes_sidecar_path(path), codes.dump(2) + "\n");
}

DilaModel load_model(const std::string& path) {
    auto in = open_in(path);
    const auto tensors = read_tensors(in);
    DilaModel model;
    model.sae = sae_from(tensors);
    model.a_ficd = from_tensor(find_tensor(tensors, "a_ficd"));
    model.decision_w = from_tensor(find_tensor(tensors, "decision_w"));
    model.decision_b = from_tensor(find_tensor(tensors, "decision_b"));

    const std::string sidecar = codes_sidecar_path(path);
    nlohmann::json codes;
    try {
        codes = nlohmann::json::parse(read_file(sidecar));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("code table '" + sidecar + "': " + e.what());
    }
    if (!codes.is_array()) throw FormatError("code table '" + sidecar + "' is not an array");
    for (const auto& c : codes) {
        if (!c.contains("code") || !c["code"].is_string()) throw FormatError("code table entry without 'code'");
        model.codes.push_back({c["code"].get<std::string>(), c.value("description", std::string{})});
    }
    try {
        model.validate();
    } catch (const std::exception& e) {
        throw FormatError(std::string("checkpoint '") + path + "': " + e.what());
    }
    return model;
}

DilaModel quantize_to_f32(const DilaModel& model) {
    DilaModel q = model;
    q.sae.w_enc = round_f32(model.sae.w_enc);
    q.sae.b_enc = round_f32(model.sae.b_enc);
    q.sae.w_dec = round_f32(model.sae.w_dec);
    q.sae.b_dec = round_f32(model.sae.b_dec);
    q.a_ficd = round_f32(model.a_ficd);
    q.decision_w = round_f32(model.decision_w);
    q.decision_b = round_f32(model.decision_b);
    return q;
}

void write_emb1(std::ostream& out, const Emb1File& file) {
    out.write("EMB1", 4);
    put_u32(out, kEmb1Version);
    put_u32(out, static_cast<std::uint32_t>(file.d));
    put_u64(out, file.notes.size());
    for (const auto& [id, m] : file.notes) {
        if (m.cols() != file.d) {
            throw ShapeError("write_emb1: note '" + id + "' has width " + std::to_string(m.cols()));
        }
        put_u32(out, static_cast<std::uint32_t>(id.size()));
        out.write(id.data(), static_cast<std::streamsize>(id.size()));
        put_u32(out, static_cast<std::uint32_t>(m.rows()));
        for (double v : m.values()) put_f32(out, static_cast<float>(v));
    }
    if (!out) throw std::runtime_error("write_emb1: stream error");
}

void write_emb1(const std::string& path, const Emb1File& file) {
    auto out = open_out(path);
    write_emb1(out, file);
}

Emb1File read_emb1(std::istream& in) {
    expect_magic(in, "EMB1");
    const std::uint32_t version = get_u32(in, "version");
    if (version != kEmb1Version) throw FormatError("unsupported EMB1 version " + std::to_string(version));
    Emb1File f;
    f.d = get_u32(in, "d");
    const std::uint64_t count = get_u64(in, "note count");
    for (std::uint64_t n = 0; n < count; ++n) {
        std::string id = get_string(in, 1u << 16, "note id");
        const std::uint32_t s = get_u32(in, "token count");
        if (static_cast<std::uint64_t>(s) * f.d > (1ULL << 31)) throw FormatError("note '" + id + "': implausible size");
        Matrix m(s, f.d);
        for (double& v : m.values()) {
            v = static_cast<double>(get_f32(in, "embedding payload"));
            if (!std::isfinite(v)) throw FormatError("note '" + id + "': non-finite embedding value");
        }
        f.notes.emplace_back(std::move(id), std::move(m));
    }
    return f;
}

Emb1File read_emb1(const std::string& path) {
    auto in = open_in(path);
    return read_emb1(in);
}

std::string read_file(const std::string& path) {
    auto in = open_in(path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, const std::string& contents) {
    auto out = open_out(path);
    out << contents;
    if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

}  // namespace dila
