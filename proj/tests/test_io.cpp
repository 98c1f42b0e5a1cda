#include <cstring>
#include <sstream>

#include "doctest.h"
#include "dila/dataset.hpp"
#include "dila/io.hpp"
#include "oracles.hpp"
#include "tmpdir.hpp"

using namespace dila;

namespace {

template <class T>
void put(std::string& s, T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    s.append(buf, sizeof(T));
}

}  // namespace

TEST_CASE("EMB1: two-note file matches hand-assembled bytes") {
    Emb1File f;
    f.d = 2;
    f.notes = {{"a", Matrix::from_rows({{1.0, -2.0}})}, {"bc", Matrix::from_rows({{0.5, 0.25}, {3.0, 4.0}})}};
    std::ostringstream out;
    write_emb1(out, f);

    std::string expect = "EMB1";
    put<std::uint32_t>(expect, 1);
    put<std::uint32_t>(expect, 2);
    put<std::uint64_t>(expect, 2);
    put<std::uint32_t>(expect, 1);
    expect += "a";
    put<std::uint32_t>(expect, 1);
    for (float v : {1.0f, -2.0f}) put(expect, v);
    put<std::uint32_t>(expect, 2);
    expect += "bc";
    put<std::uint32_t>(expect, 2);
    for (float v : {0.5f, 0.25f, 3.0f, 4.0f}) put(expect, v);
    CHECK(out.str() == expect);

    std::istringstream in(expect);
    const Emb1File back = read_emb1(in);
    CHECK(back.d == 2);
    REQUIRE(back.notes.size() == 2);
    CHECK(back.notes[1].first == "bc");
    CHECK(back.notes[1].second == f.notes[1].second);
}

TEST_CASE("EMB1: malformed input") {
    std::istringstream bad_magic(std::string("EMB2") + std::string(20, '\0'));
    CHECK_THROWS_AS(read_emb1(bad_magic), FormatError);

    Emb1File f;
    f.d = 3;
    f.notes = {{"x", Matrix(2, 3, 1.0)}};
    std::ostringstream out;
    write_emb1(out, f);
    const std::string full = out.str();
    std::istringstream truncated(full.substr(0, full.size() - 3));
    CHECK_THROWS_AS(read_emb1(truncated), FormatError);

    std::string nan_file = full;
    const float nan = std::nanf("");
    std::memcpy(nan_file.data() + nan_file.size() - 4, &nan, 4);
    std::istringstream with_nan(nan_file);
    CHECK_THROWS_AS(read_emb1(with_nan), FormatError);

    Emb1File wrong;
    wrong.d = 2;
    wrong.notes = {{"x", Matrix(1, 3)}};
    std::ostringstream sink;
    CHECK_THROWS_AS(write_emb1(sink, wrong), ShapeError);
}

TEST_CASE("checkpoint: tensors round-trip and bad headers are rejected") {
    const std::vector<NamedTensor> ts = {{"w", {2, 3}, {1, 2, 3, 4, 5, 6}}, {"b", {3}, {0.5f, -1, 2}}};
    std::stringstream s;
    write_tensors(s, ts);
    const auto back = read_tensors(s);
    REQUIRE(back.size() == 2);
    CHECK(back[0].name == "w");
    CHECK(back[0].dims == ts[0].dims);
    CHECK(back[1].data == ts[1].data);

    std::istringstream junk("NOPE");
    CHECK_THROWS_AS(read_tensors(junk), FormatError);
    std::string bumped = "DILA";
    put<std::uint32_t>(bumped, 99);
    put<std::uint32_t>(bumped, 0);
    std::istringstream future(bumped);
    CHECK_THROWS_AS(read_tensors(future), FormatError);
}

TEST_CASE("to_tensor / from_tensor") {
    const Matrix m = Matrix::from_rows({{1, 2}, {3, 4}});
    CHECK(from_tensor(to_tensor("m", m)) == m);
    const NamedTensor v = to_tensor("v", Matrix::from_rows({{1, 2, 3}}), true);
    CHECK(v.dims == std::vector<std::uint32_t>{3});
    CHECK(from_tensor(v) == Matrix::from_rows({{1, 2, 3}}));
}

TEST_CASE("model checkpoint: f32 round-trip") {
    testing::TempDir dir;
    oracle::Gen g(60);
    const DilaModel model = g.model(5, 9, 3);
    const std::string path = dir / "model.dila";
    save_model(path, model);
    const DilaModel back = load_model(path);
    CHECK(back == quantize_to_f32(model));
    CHECK(back.codes == model.codes);
    for (std::size_t i = 0; i < model.a_ficd.size(); ++i)
        CHECK(std::abs(back.a_ficd.values()[i] - model.a_ficd.values()[i]) < 1e-7);
    save_model(dir / "again.dila", back);
    CHECK(load_model(dir / "again.dila") == back);
    CHECK(read_file(path) == read_file(dir / "again.dila"));

    CHECK(load_sae(path) == back.sae);
    save_sae(dir / "sae.dila", model.sae);
    CHECK(load_sae(dir / "sae.dila") == quantize_to_f32(model).sae);
    CHECK_THROWS_AS(load_model(dir / "sae.dila"), FormatError);
    CHECK_THROWS(load_model(dir / "missing.dila"));
}

TEST_CASE("dataset: save and load round-trip") {
    testing::TempDir dir;
    const PlantedWorld world = gen_world(8, 6, 3, 0.05, 4);
    const auto notes = gen_corpus(world, 20, 4, 8, 5);
    save_dataset(dir.str(), world, notes);
    const Dataset ds = load_dataset(dir.str());
    REQUIRE(ds.records.size() == 20);
    REQUIRE(ds.world.has_value());
    CHECK(ds.world->vocab == world.vocab);
    CHECK(ds.world->concept_code == world.concept_code);
    CHECK(ds.codes.size() == 3);
    CHECK_FALSE(ds.confound.has_value());
    for (std::size_t n = 0; n < notes.size(); ++n) {
        CHECK(ds.records[n].id == notes[n].id);
        CHECK(ds.records[n].tokens == notes[n].tokens);
        CHECK(ds.records[n].tags == notes[n].tags);
        const LabeledNote l = ds.labeled(n);
        CHECK(l.target == notes[n].target);
        CHECK(l.embeddings.rows() == notes[n].embeddings.rows());
        for (std::size_t i = 0; i < l.embeddings.size(); ++i)
            CHECK(l.embeddings.values()[i] == static_cast<double>(static_cast<float>(notes[n].embeddings.values()[i])));
    }
    CHECK(ds.find(notes[7].id) == 7u);
    CHECK_FALSE(ds.find("nope").has_value());
    CHECK(ds.split_point(0.2) == 16);
    CHECK(ds.all_token_rows().rows() == stack_embeddings(notes).rows());
}

TEST_CASE("confound and code table files round-trip") {
    testing::TempDir dir;
    save_confound(dir / "confound.json", {5, 2, 0.75});
    const LabelConfound cf = load_confound(dir / "confound.json");
    CHECK(cf.concept_index == 5);
    CHECK(cf.code == 2);
    CHECK(cf.rate == 0.75);

    const std::vector<CodeEntry> codes = {{"401.9", "hypertension"}, {"E11", "type 2 \"diabetes\""}};
    save_code_table(dir / "codes.json", codes);
    CHECK(load_code_table(dir / "codes.json") == codes);
}

TEST_CASE("corpus jsonl round-trip") {
    testing::TempDir dir;
    const std::vector<CorpusRecord> recs = {{"n1", {"a", "b"}, {0, -1}, {"X"}}, {"n2", {"c"}, {}, {}}};
    write_corpus_jsonl(dir / "c.jsonl", recs);
    const auto back = read_corpus_jsonl(dir / "c.jsonl");
    REQUIRE(back.size() == 2);
    CHECK(back[0].tokens == recs[0].tokens);
    CHECK(back[0].tags == recs[0].tags);
    CHECK(back[0].codes == recs[0].codes);
    CHECK(back[1].tags.empty());
    write_file(dir / "bad.jsonl", "{\"id\": 3}\n");
    CHECK_THROWS(read_corpus_jsonl(dir / "bad.jsonl"));
}
