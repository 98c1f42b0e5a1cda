#include <cmath>
#include <set>

#include "doctest.h"
#include "dila/synth.hpp"
#include "oracles.hpp"

using namespace dila;

namespace {

double binomial(std::size_t n, std::size_t k) {
    if (k > n) return 0.0;
    double r = 1.0;
    for (std::size_t i = 0; i < k; ++i) r = r * static_cast<double>(n - i) / static_cast<double>(i + 1);
    return r;
}

}  // namespace

TEST_CASE("gen_world: deterministic, unit directions, coherence below the bound") {
    const PlantedWorld a = gen_world(16, 12, 6, 0.05, 7);
    const PlantedWorld b = gen_world(16, 12, 6, 0.05, 7);
    CHECK(a.directions == b.directions);
    CHECK(a.concept_code == b.concept_code);
    CHECK(a.vocab == b.vocab);
    CHECK_FALSE(gen_world(16, 12, 6, 0.05, 8).directions == a.directions);
    CHECK(a.num_concepts() == 12);
    CHECK(a.num_codes() == 6);
    for (std::size_t i = 0; i < 12; ++i) {
        double n = 0;
        for (std::size_t k = 0; k < 16; ++k) n += a.directions(i, k) * a.directions(i, k);
        CHECK(std::abs(n - 1.0) < 1e-12);
        for (std::size_t j = i + 1; j < 12; ++j) {
            double c = 0;
            for (std::size_t k = 0; k < 16; ++k) c += a.directions(i, k) * a.directions(j, k);
            CHECK(std::abs(c) < 0.5);
        }
    }
    for (std::size_t j = 0; j < 6; ++j) CHECK(a.concept_code(j, j) == 1.0);
}

TEST_CASE("gen_world: orthogonal option") {
    WorldOptions opt;
    opt.orthogonal = true;
    const PlantedWorld w = gen_world(8, 8, 4, 0.0, 1, opt);
    const Matrix gram = oracle::matmul(w.directions, transpose(w.directions));
    CHECK(oracle::max_abs_diff(gram, Matrix::identity(8)) < 1e-12);
}

TEST_CASE("gen_world: token index and vocab are disjoint") {
    const PlantedWorld w = gen_world(16, 10, 5, 0.05, 3);
    std::set<std::string> seen;
    for (std::size_t k = 0; k < w.num_concepts(); ++k)
        for (const auto& t : w.vocab[k]) {
            CHECK(seen.insert(t).second);
            CHECK(w.concept_of(t) == static_cast<int>(k));
        }
    for (const auto& f : w.filler) {
        CHECK(seen.insert(f).second);
        CHECK(w.concept_of(f) == kFillerTag);
    }
    CHECK(w.concept_of("no-such-token") == kFillerTag);
    CHECK(w.noise_floor() == doctest::Approx(16 * 0.05 * 0.05));
}

TEST_CASE("gen_corpus: deterministic with ids, lengths, tags and targets consistent") {
    const PlantedWorld w = gen_world(16, 10, 5, 0.05, 3);
    const auto a = gen_corpus(w, 50, 8, 12, 9);
    const auto b = gen_corpus(w, 50, 8, 12, 9);
    REQUIRE(a.size() == 50);
    CHECK(a.front().id == "note-00000");
    for (std::size_t n = 0; n < a.size(); ++n) {
        const auto& note = a[n];
        CHECK(note.tokens == b[n].tokens);
        CHECK(note.embeddings == b[n].embeddings);
        CHECK(note.tokens.size() >= 8);
        CHECK(note.tokens.size() <= 12);
        CHECK(note.embeddings.rows() == note.tokens.size());
        CHECK(note.target == w.targets_for(note.concepts));
        std::set<std::size_t> present;
        for (std::size_t t = 0; t < note.tokens.size(); ++t) {
            CHECK(note.tags[t] == w.concept_of(note.tokens[t]));
            if (note.tags[t] != kFillerTag) present.insert(static_cast<std::size_t>(note.tags[t]));
        }
        CHECK(present == std::set<std::size_t>(note.concepts.begin(), note.concepts.end()));
    }
    CHECK_FALSE(gen_corpus(w, 50, 8, 12, 10)[0].tokens == a[0].tokens);
    CHECK_THROWS_AS(gen_corpus(w, 0, 8, 12, 9), std::invalid_argument);
    CHECK_THROWS_AS(gen_corpus(w, 5, 9, 8, 9), std::invalid_argument);
}

TEST_CASE("gen_corpus: code marginals within 3 sigma over 10k notes") {
    const PlantedWorld w = gen_world(8, 10, 5, 0.0, 21);
    const std::size_t n = 10000;
    const auto notes = gen_corpus(w, n, 1, 2, 22);
    const std::size_t m = w.num_concepts();
    for (std::size_t j = 0; j < w.num_codes(); ++j) {
        std::size_t linked = 0;
        for (std::size_t k = 0; k < m; ++k)
            if (w.concept_code(k, j) >= 0.5) ++linked;
        // Concepts per note uniform over 1..4, drawn without replacement.
        double p_neg = 0;
        for (std::size_t k = 1; k <= 4; ++k) p_neg += 0.25 * binomial(m - linked, k) / binomial(m, k);
        const double p = 1.0 - p_neg;
        double hits = 0;
        for (const auto& note : notes) hits += note.target[j];
        const double sigma = std::sqrt(p * (1 - p) / static_cast<double>(n));
        CAPTURE(j);
        CHECK(std::abs(hits / static_cast<double>(n) - p) < 3 * sigma);
    }
}

TEST_CASE("embed_tokens: zero noise puts every token on its concept direction") {
    const PlantedWorld w = gen_world(12, 6, 3, 0.0, 5);
    const auto notes = gen_corpus(w, 20, 10, 14, 6);
    for (const auto& note : notes)
        for (std::size_t t = 0; t < note.tokens.size(); ++t) {
            const int k = note.tags[t];
            for (std::size_t i = 0; i < 12; ++i) {
                const double expect =
                    k == kFillerTag ? 0.0
                                    : w.amplitudes[static_cast<std::size_t>(k)][w.token_index().at(note.tokens[t]).second] *
                                          w.directions(static_cast<std::size_t>(k), i);
                CHECK(note.embeddings(t, i) == expect);
            }
        }
}

TEST_CASE("embed_tokens: noise has the configured scale") {
    const PlantedWorld w = gen_world(16, 4, 2, 0.1, 5);
    std::vector<std::string> filler(4000, w.filler.front());
    const Matrix x = embed_tokens(w, filler, "noise-check");
    double ss = 0;
    for (double v : x.values()) ss += v * v;
    const double var = ss / static_cast<double>(x.size());
    CHECK(var == doctest::Approx(0.01).epsilon(0.05));
    CHECK(embed_tokens(w, filler, "noise-check") == x);
    CHECK_FALSE(embed_tokens(w, filler, "other") == x);
}

TEST_CASE("amplitudes stay in range") {
    const PlantedWorld w = gen_world(16, 8, 4, 0.05, 2);
    for (const auto& row : w.amplitudes)
        for (double a : row) {
            CHECK(a >= 0.75);
            CHECK(a <= 1.25);
        }
}

TEST_CASE("code_descriptions: one entry per code from its own vocabulary") {
    const PlantedWorld w = gen_world(16, 8, 4, 0.05, 2);
    const CodeDescriptions d = code_descriptions(w);
    REQUIRE(d.codes.size() == 4);
    for (std::size_t j = 0; j < 4; ++j) {
        CHECK(d.codes[j].code == w.code_ids[j]);
        CHECK(d.tokens[j].size() == 3);
        for (const auto& t : d.tokens[j]) CHECK(w.concept_of(t) == static_cast<int>(j));
        CHECK(d.embeddings[j].rows() == 3);
    }
}

TEST_CASE("label confound: picks an unlinked pair and flips only its notes") {
    const PlantedWorld w = gen_world(16, 16, 8, 0.05, 7);
    const LabelConfound cf = pick_confound(w);
    CHECK(w.concept_code(cf.concept_index, cf.code) == 0.0);
    CHECK(cf.concept_index >= w.num_codes());
    auto notes = gen_corpus(w, 200, 8, 12, 11);
    const auto clean = notes;
    apply_label_confound(notes, cf, 3);
    std::size_t flipped = 0;
    for (std::size_t n = 0; n < notes.size(); ++n) {
        const bool has = std::find(clean[n].concepts.begin(), clean[n].concepts.end(), cf.concept_index) !=
                         clean[n].concepts.end();
        for (std::size_t j = 0; j < w.num_codes(); ++j) {
            if (j == cf.code && has) CHECK(notes[n].target[j] == 1.0);
            else CHECK(notes[n].target[j] == clean[n].target[j]);
        }
        if (notes[n].target != clean[n].target) ++flipped;
    }
    CHECK(flipped > 0);

    auto half = clean;
    apply_label_confound(half, {cf.concept_index, cf.code, 0.0}, 3);
    for (std::size_t n = 0; n < half.size(); ++n) CHECK(half[n].target == clean[n].target);
}

TEST_CASE("TableEmbeddingProvider") {
    const PlantedWorld w = gen_world(8, 4, 2, 0.05, 1);
    const auto notes = gen_corpus(w, 5, 3, 5, 2);
    const auto table = TableEmbeddingProvider::from_corpus(notes);
    CHECK(table.dim() == 8);
    CHECK(table.embed(notes[3].id) == notes[3].embeddings);
    CHECK_THROWS_AS(table.embed("missing"), std::out_of_range);
    CHECK_THROWS_AS(TableEmbeddingProvider(8, {{"a", Matrix(1, 8)}, {"a", Matrix(1, 8)}}), std::invalid_argument);
    CHECK_THROWS_AS(TableEmbeddingProvider(8, {{"a", Matrix(1, 7)}}), ShapeError);
}

TEST_CASE("stack_embeddings keeps note order") {
    const PlantedWorld w = gen_world(8, 4, 2, 0.05, 1);
    const auto notes = gen_corpus(w, 3, 2, 4, 2);
    const Matrix s = stack_embeddings(notes);
    std::size_t r = 0;
    for (const auto& n : notes)
        for (std::size_t t = 0; t < n.embeddings.rows(); ++t, ++r)
            for (std::size_t i = 0; i < 8; ++i) CHECK(s(r, i) == n.embeddings(t, i));
    CHECK(r == s.rows());
}
