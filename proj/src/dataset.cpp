#include "dila/dataset.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <unordered_map>

#include "dila/io.hpp"
#include "json.hpp"

namespace dila {

using nlohmann::json;

std::string corpus_record_line(const CorpusRecord& r) {
    json j = {{"id", r.id}, {"tokens", r.tokens}, {"tags", r.tags}, {"codes", r.codes}};
    return j.dump();
}

void write_corpus_jsonl(const std::string& path, const std::vector<CorpusRecord>& records) {
    std::string out;
    for (const auto& r : records) out += corpus_record_line(r) + "\n";
    write_file(path, out);
}

std::vector<CorpusRecord> read_corpus_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open '" + path + "'");
    std::vector<CorpusRecord> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            const json j = json::parse(line);
            CorpusRecord r;
            r.id = j.at("id").get<std::string>();
            r.tokens = j.at("tokens").get<std::vector<std::string>>();
            if (j.contains("tags")) r.tags = j.at("tags").get<std::vector<int>>();
            r.codes = j.at("codes").get<std::vector<std::string>>();
            if (!r.tags.empty() && r.tags.size() != r.tokens.size()) {
                throw FormatError("tags/tokens length mismatch");
            }
            out.push_back(std::move(r));
        } catch (const std::exception& e) {
            throw FormatError(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

std::vector<CorpusRecord> to_records(const std::vector<SynthNote>& notes, const PlantedWorld& world) {
    std::vector<CorpusRecord> out;
    out.reserve(notes.size());
    for (const auto& n : notes) {
        CorpusRecord r{n.id, n.tokens, n.tags, {}};
        for (std::size_t j = 0; j < n.target.size(); ++j)
            if (n.target[j] > 0.5) r.codes.push_back(world.code_ids[j]);
        out.push_back(std::move(r));
    }
    return out;
}

namespace {

json matrix_json(const Matrix& m) {
    return {{"rows", m.rows()}, {"cols", m.cols()},
            {"data", std::vector<double>(m.values().begin(), m.values().end())}};
}

Matrix matrix_from_json(const json& j) {
    return Matrix(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>(),
                  j.at("data").get<std::vector<double>>());
}

}  // namespace

void save_world(const std::string& path, const PlantedWorld& w) {
    json j = {{"d", w.d},
              {"noise", w.noise},
              {"seed", w.seed},
              {"directions", matrix_json(w.directions)},
              {"concept_code", matrix_json(w.concept_code)},
              {"concept_names", w.concept_names},
              {"vocab", w.vocab},
              {"amplitudes", w.amplitudes},
              {"filler", w.filler},
              {"code_ids", w.code_ids}};
    write_file(path, j.dump(1) + "\n");
}

PlantedWorld load_world(const std::string& path) {
    try {
        const json j = json::parse(read_file(path));
        PlantedWorld w;
        w.d = j.at("d").get<std::size_t>();
        w.noise = j.at("noise").get<double>();
        w.seed = j.at("seed").get<std::uint64_t>();
        w.directions = matrix_from_json(j.at("directions"));
        w.concept_code = matrix_from_json(j.at("concept_code"));
        w.concept_names = j.at("concept_names").get<std::vector<std::string>>();
        w.vocab = j.at("vocab").get<std::vector<std::vector<std::string>>>();
        w.amplitudes = j.at("amplitudes").get<std::vector<std::vector<double>>>();
        w.filler = j.at("filler").get<std::vector<std::string>>();
        w.code_ids = j.at("code_ids").get<std::vector<std::string>>();
        w.rebuild_index();
        return w;
    } catch (const json::exception& e) {
        throw FormatError("world '" + path + "': " + e.what());
    }
}

void save_confound(const std::string& path, const LabelConfound& c) {
    json j = {{"concept", c.concept_index}, {"code", c.code}, {"rate", c.rate}};
    write_file(path, j.dump(1) + "\n");
}

LabelConfound load_confound(const std::string& path) {
    try {
        const json j = json::parse(read_file(path));
        return {j.at("concept").get<std::size_t>(), j.at("code").get<std::size_t>(), j.at("rate").get<double>()};
    } catch (const json::exception& e) {
        throw FormatError("confound '" + path + "': " + e.what());
    }
}

void save_code_table(const std::string& path, const std::vector<CodeEntry>& codes) {
    json arr = json::array();
    for (const auto& c : codes) arr.push_back({{"code", c.code}, {"description", c.description}});
    write_file(path, arr.dump(2) + "\n");
}

std::vector<CodeEntry> load_code_table(const std::string& path) {
    try {
        const json arr = json::parse(read_file(path));
        std::vector<CodeEntry> out;
        for (const auto& c : arr) out.push_back({c.at("code").get<std::string>(), c.value("description", "")});
        return out;
    } catch (const json::exception& e) {
        throw FormatError("code table '" + path + "': " + e.what());
    }
}

std::vector<double> Dataset::target_of(const CorpusRecord& record) const {
    std::vector<double> t(codes.size(), 0.0);
    for (const auto& code : record.codes) {
        bool found = false;
        for (std::size_t j = 0; j < codes.size(); ++j)
            if (codes[j].code == code) {
                t[j] = 1.0;
                found = true;
            }
        if (!found) throw FormatError("note '" + record.id + "' references unknown code '" + code + "'");
    }
    return t;
}

LabeledNote Dataset::labeled(std::size_t index) const {
    const CorpusRecord& r = records.at(index);
    if (!embeddings) throw std::runtime_error("dataset has no embeddings");
    Matrix x = embeddings->embed(r.id);
    if (x.rows() != r.tokens.size()) {
        throw FormatError("note '" + r.id + "': " + std::to_string(r.tokens.size()) + " tokens but " +
                          std::to_string(x.rows()) + " embedding rows");
    }
    return {r.id, std::move(x), target_of(r)};
}

std::vector<LabeledNote> Dataset::labeled_range(std::size_t begin, std::size_t end) const {
    std::vector<LabeledNote> out;
    for (std::size_t i = begin; i < end && i < records.size(); ++i) out.push_back(labeled(i));
    return out;
}

Matrix Dataset::all_token_rows() const {
    if (!embeddings) throw std::runtime_error("dataset has no embeddings");
    std::size_t rows = 0;
    for (const auto& [id, m] : embeddings->entries()) rows += m.rows();
    Matrix out(rows, embeddings->dim());
    std::size_t r = 0;
    for (const auto& [id, m] : embeddings->entries())
        for (std::size_t t = 0; t < m.rows(); ++t, ++r) {
            const auto src = m.row(t);
            std::copy(src.begin(), src.end(), out.row(r).begin());
        }
    return out;
}

std::size_t Dataset::split_point(double eval_fraction) const {
    const auto n = static_cast<double>(records.size());
    return static_cast<std::size_t>(std::llround(n * (1.0 - eval_fraction)));
}

std::optional<std::size_t> Dataset::find(const std::string& note_id) const {
    for (std::size_t i = 0; i < records.size(); ++i)
        if (records[i].id == note_id) return i;
    return std::nullopt;
}

void save_dataset(const std::string& dir, const PlantedWorld& world, const std::vector<SynthNote>& notes) {
    std::filesystem::create_directories(dir);
    save_world(dir + "/world.json", world);
    write_corpus_jsonl(dir + "/corpus.jsonl", to_records(notes, world));

    Emb1File emb;
    emb.d = world.d;
    for (const auto& n : notes) emb.notes.emplace_back(n.id, n.embeddings);
    write_emb1(dir + "/embeddings.emb1", emb);

    const CodeDescriptions desc = code_descriptions(world);
    save_code_table(dir + "/codes.json", desc.codes);
    Emb1File demb;
    demb.d = world.d;
    for (std::size_t j = 0; j < desc.codes.size(); ++j) demb.notes.emplace_back(desc.codes[j].code, desc.embeddings[j]);
    write_emb1(dir + "/descriptions.emb1", demb);
}

Dataset load_dataset(const std::string& dir) {
    Dataset ds;
    ds.dir = dir;
    ds.records = read_corpus_jsonl(dir + "/corpus.jsonl");
    ds.codes = load_code_table(dir + "/codes.json");
    ds.embeddings = TableEmbeddingProvider::from_emb1(dir + "/embeddings.emb1");
    const Emb1File desc = read_emb1(dir + "/descriptions.emb1");
    std::unordered_map<std::string, const Matrix*> by_code;
    for (const auto& [id, m] : desc.notes) by_code[id] = &m;
    for (const auto& c : ds.codes) {
        const auto it = by_code.find(c.code);
        if (it == by_code.end()) throw FormatError("no description embeddings for code '" + c.code + "'");
        ds.description_embeddings.push_back(*it->second);
    }
    if (std::filesystem::exists(dir + "/world.json")) ds.world = load_world(dir + "/world.json");
    if (std::filesystem::exists(dir + "/confound.json")) ds.confound = load_confound(dir + "/confound.json");
    return ds;
}

std::vector<DictionaryEntry> build_dictionary(const SaeParams& sae, const Dataset& dataset, std::size_t begin,
                                              std::size_t end, const DictionaryOptions& options) {
    if (!dataset.embeddings) throw std::runtime_error("dataset has no embeddings");
    DictionaryBuilder builder(sae, options);
    for (std::size_t i = begin; i < end && i < dataset.records.size(); ++i) {
        const CorpusRecord& r = dataset.records[i];
        builder.add_document(r.id, r.tokens, dataset.embeddings->embed(r.id));
    }
    return builder.finish();
}

}  // namespace dila
