#include <map>

#include "doctest.h"
#include "dila/dictionary.hpp"
#include "dila/io.hpp"
#include "oracles.hpp"
#include "tmpdir.hpp"

using namespace dila;

namespace {

struct Doc {
    std::string id;
    std::vector<std::string> tokens;
    Matrix x;
};

std::vector<Doc> random_docs(oracle::Gen& g, std::size_t n, std::size_t d) {
    std::vector<Doc> docs;
    for (std::size_t k = 0; k < n; ++k) {
        Doc doc;
        doc.id = "doc-" + std::to_string(100 + k);
        const std::size_t s = g.between(1, 12);
        for (std::size_t t = 0; t < s; ++t) doc.tokens.push_back("w" + std::to_string(g.index(30)));
        doc.x = g.matrix(s, d);
        // Duplicate rows produce exact activation ties across positions.
        if (s > 2 && g.coin(0.3)) {
            for (std::size_t i = 0; i < d; ++i) doc.x(1, i) = doc.x(0, i);
        }
        docs.push_back(std::move(doc));
    }
    return docs;
}

// Every positive activation, fully sorted, top 10 per feature.
std::map<std::size_t, std::vector<ContextToken>> brute_force(const SaeParams& sae, const std::vector<Doc>& docs) {
    std::map<std::size_t, std::vector<ContextToken>> all;
    for (const auto& doc : docs) {
        const Matrix f = oracle::encode(sae, doc.x);
        for (std::size_t t = 0; t < f.rows(); ++t)
            for (std::size_t i = 0; i < f.cols(); ++i)
                if (f(t, i) > 0) all[i].push_back({doc.tokens[t], doc.id, t, f(t, i), ""});
    }
    for (auto& [i, list] : all) {
        std::sort(list.begin(), list.end(), [](const ContextToken& a, const ContextToken& b) {
            if (a.act != b.act) return a.act > b.act;
            if (a.doc != b.doc) return a.doc < b.doc;
            return a.pos < b.pos;
        });
        if (list.size() > kMaxContexts) list.resize(kMaxContexts);
    }
    return all;
}

void check_against(const std::vector<DictionaryEntry>& entries,
                   const std::map<std::size_t, std::vector<ContextToken>>& ref) {
    REQUIRE(entries.size() == ref.size());
    for (const auto& e : entries) {
        const auto& want = ref.at(e.feature);
        REQUIRE(e.contexts.size() == want.size());
        for (std::size_t r = 0; r < want.size(); ++r) {
            CHECK(e.contexts[r].doc == want[r].doc);
            CHECK(e.contexts[r].pos == want[r].pos);
            CHECK(e.contexts[r].token == want[r].token);
            CHECK(std::abs(e.contexts[r].act - want[r].act) < 1e-12);
        }
        CHECK_NOTHROW(e.validate());
    }
}

SaeParams identity_sae(std::size_t d) {
    SaeParams p;
    p.w_enc = Matrix::identity(d);
    p.b_enc = Matrix(1, d);
    p.w_dec = Matrix::identity(d);
    p.b_dec = Matrix(1, d);
    return p;
}

}  // namespace

TEST_CASE("streaming top-k equals the full sort, single pass and merged shards") {
    oracle::Gen g(70);
    for (int rep = 0; rep < 15; ++rep) {
        const std::size_t d = g.between(2, 5), m = g.between(2, 10);
        const SaeParams sae = g.sae(d, m);
        const auto docs = random_docs(g, g.between(5, 40), d);
        const auto ref = brute_force(sae, docs);

        DictionaryBuilder single(sae);
        for (const auto& doc : docs) single.add_document(doc.id, doc.tokens, doc.x);
        check_against(single.finish(), ref);

        DictionaryBuilder a(sae), b(sae), c(sae);
        for (std::size_t k = 0; k < docs.size(); ++k) {
            DictionaryBuilder& shard = k % 3 == 0 ? a : k % 3 == 1 ? b : c;
            shard.add_document(docs[k].id, docs[k].tokens, docs[k].x);
        }
        c.merge(a);
        c.merge(b);
        check_against(c.finish(), ref);
        CHECK(c.tokens_seen() == single.tokens_seen());
    }
}

TEST_CASE("single feature tied to one word") {
    // Feature 0 fires only on "insulin", feature 1 on everything else.
    SaeParams sae = identity_sae(2);
    const std::vector<std::string> tokens = {"the", "insulin", "dose", "insulin", "was"};
    const Matrix x = Matrix::from_rows({{0, 0.2}, {0.9, 0}, {0, 0.5}, {1.4, 0}, {0, 0.1}});
    DictionaryBuilder b(sae);
    b.add_document("note-1", tokens, x);
    const auto entries = b.finish();
    REQUIRE(entries.size() == 2);
    const DictionaryEntry& e = entries[0];
    CHECK(e.feature == 0);
    REQUIRE(e.contexts.size() == 2);
    CHECK(e.contexts[0].token == "insulin");
    CHECK(e.contexts[0].pos == 3);
    CHECK(e.contexts[0].act == 1.4);
    CHECK(e.contexts[1].pos == 1);
    CHECK(e.verdict == Verdict::InsufficientContexts);
    for (const auto& c : entries[1].contexts) CHECK(c.token != "insulin");
}

TEST_CASE("pads are skipped and dropped from windows") {
    const SaeParams sae = identity_sae(1);
    const std::vector<std::string> tokens = {"a", "<pad>", "b", "[PAD]"};
    const Matrix x = Matrix::from_rows({{1}, {5}, {2}, {7}});
    DictionaryBuilder b(sae);
    b.add_document("d", tokens, x);
    CHECK(b.tokens_seen() == 2);
    const auto entries = b.finish();
    REQUIRE(entries.size() == 1);
    REQUIRE(entries[0].contexts.size() == 2);
    CHECK(entries[0].contexts[0].token == "b");
    CHECK(entries[0].contexts[0].window == "a b");
}

TEST_CASE("context_window radius") {
    const std::vector<std::string> t = {"a", "b", "c", "d", "e"};
    CHECK(context_window(t, 2, 1, {}) == "b c d");
    CHECK(context_window(t, 0, 2, {}) == "a b c");
    CHECK(context_window(t, 4, 10, {"c"}) == "a b d e");
}

TEST_CASE("add_document: shape checks") {
    const SaeParams sae = identity_sae(2);
    DictionaryBuilder b(sae);
    const std::vector<std::string> t = {"a"};
    CHECK_THROWS_AS(b.add_document("d", t, Matrix(1, 3)), ShapeError);
    CHECK_THROWS_AS(b.add_document("d", t, Matrix(2, 2)), ShapeError);
    DictionaryBuilder other(identity_sae(3));
    CHECK_THROWS_AS(b.merge(other), ShapeError);
}

TEST_CASE("top_contexts and verdict rules") {
    DictionaryEntry e;
    e.feature = 4;
    for (int i = 0; i < 6; ++i) e.contexts.push_back({"t", "d", static_cast<std::size_t>(i), 6.0 - i, ""});
    e.verdict = context_verdict(6);
    CHECK(e.verdict == Verdict::Unidentified);
    const TopContexts top = top_contexts(e);
    CHECK(top.contexts.size() == 4);
    CHECK_FALSE(top.shortfall);
    CHECK(top.contexts[3].act == 3.0);
    CHECK(top_contexts(e, 8).shortfall);
    CHECK_THROWS_AS(top_contexts(e, 11), std::invalid_argument);
    CHECK(context_verdict(3) == Verdict::InsufficientContexts);

    DictionaryEntry bad = e;
    std::swap(bad.contexts[0], bad.contexts[1]);
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = e;
    bad.verdict = Verdict::InsufficientContexts;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = e;
    bad.contexts.back().act = 0.0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("dictionary lines: hand fixture and round-trip") {
    DictionaryEntry a;
    a.feature = 2;
    a.contexts = {{"insulin", "n1", 3, 1.5, "the insulin dose"}};
    a.verdict = Verdict::InsufficientContexts;
    DictionaryEntry b;
    b.feature = 7;
    for (int i = 0; i < 4; ++i) b.contexts.push_back({"x", "n2", static_cast<std::size_t>(i), 1.0, "x"});
    b.summary = "dosage words";
    b.verdict = Verdict::Identified;
    b.provenance = Provenance::Llm;
    b.classes = {{"E11", 0.25}};

    CHECK(dictionary_line(a) ==
          R"({"contexts":[{"act":1.5,"doc":"n1","pos":3,"token":"insulin","window":"the insulin dose"}],)"
          R"("feature":2,"provenance":"oracle","summary":null,"verdict":"insufficient-contexts"})");
    CHECK(parse_dictionary_line(dictionary_line(a)) == a);
    CHECK(parse_dictionary_line(dictionary_line(b)) == b);

    testing::TempDir dir;
    save_dictionary(dir / "dict.jsonl", {a, b});
    CHECK(load_dictionary(dir / "dict.jsonl") == std::vector<DictionaryEntry>{a, b});

    write_file(dir / "broken.jsonl", dictionary_line(a) + "\n{\"feature\": 1}\n");
    try {
        (void)load_dictionary(dir / "broken.jsonl");
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find(":2:") != std::string::npos);
    }
    CHECK_THROWS_AS(parse_verdict("maybe"), std::invalid_argument);
    CHECK_THROWS_AS(parse_provenance("nobody"), std::invalid_argument);
}

TEST_CASE("attach_code_drops: zeroing a feature lowers the codes that read it") {
    // Feature i drives code i only; a note with both features.
    DilaModel model;
    model.sae = identity_sae(2);
    model.a_ficd = Matrix::from_rows({{4, 0}, {0, 4}});
    model.decision_w = Matrix::from_rows({{3, 0}, {0, 3}});
    model.decision_b = Matrix(1, 2);
    model.codes = {{"A", ""}, {"B", ""}};
    const Matrix x = Matrix::from_rows({{1, 0}, {0, 1}, {0.2, 0.2}});
    TableEmbeddingProvider table(2, {{"n", x}});
    std::vector<DictionaryEntry> entries(1);
    entries[0].feature = 0;
    entries[0].contexts = {{"a", "n", 0, 1.0, ""}};
    attach_code_drops(entries, model, table);
    REQUIRE_FALSE(entries[0].classes.empty());
    CHECK(entries[0].classes[0].code == "A");
    CHECK(entries[0].classes[0].drop > 0.0);
    for (const auto& c : entries[0].classes) CHECK(c.code != "B");

    entries[0].feature = 9;
    CHECK_THROWS_AS(attach_code_drops(entries, model, table), std::out_of_range);
}
