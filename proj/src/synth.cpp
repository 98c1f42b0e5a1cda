#include "dila/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <stdexcept>

#include "dila/io.hpp"
#include "dila/random.hpp"

namespace dila {

namespace {

constexpr const char* kCommonFillers[] = {"the", "and", "of",   "patient", "was",  "with",  "on",   "for",
                                          "to",  "in",  "is",   "at",      "by",   "no",    "per",  "day",
                                          "noted", "given", "seen", "also", "after", "prior", "will", "had"};

std::string pseudo_word(CounterRng& rng) {
    static constexpr char consonants[] = "bdfgklmnprstvz";
    static constexpr char vowels[] = "aeiou";
    std::string w;
    for (int i = 0; i < 3; ++i) {
        w += consonants[rng.below(sizeof(consonants) - 1)];
        w += vowels[rng.below(sizeof(vowels) - 1)];
    }
    return w;
}

std::string padded(std::size_t v, int width) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%0*zu", width, v);
    return buf;
}

}  // namespace

int PlantedWorld::concept_of(const std::string& token) const {
    const auto it = token_index_.find(token);
    return it == token_index_.end() ? kFillerTag : it->second.first;
}

const std::unordered_map<std::string, std::pair<int, std::size_t>>& PlantedWorld::token_index() const {
    return token_index_;
}

void PlantedWorld::rebuild_index() {
    token_index_.clear();
    for (std::size_t k = 0; k < vocab.size(); ++k)
        for (std::size_t v = 0; v < vocab[k].size(); ++v) token_index_[vocab[k][v]] = {static_cast<int>(k), v};
}

std::vector<double> PlantedWorld::targets_for(const std::vector<std::size_t>& concepts) const {
    std::vector<double> t(num_codes(), 0.0);
    for (std::size_t j = 0; j < num_codes(); ++j) {
        double s = 0.0;
        for (std::size_t k : concepts) s += concept_code(k, j);
        t[j] = s >= 0.5 ? 1.0 : 0.0;
    }
    return t;
}

PlantedWorld gen_world(std::size_t d, std::size_t num_concepts, std::size_t num_codes, double noise,
                       std::uint64_t seed, const WorldOptions& options) {
    if (d == 0 || num_codes == 0 || num_concepts < num_codes) {
        throw std::invalid_argument("gen_world: need d >= 1 and m* >= c >= 1 (got d=" + std::to_string(d) +
                                    ", m*=" + std::to_string(num_concepts) + ", c=" + std::to_string(num_codes) + ")");
    }
    if (noise < 0.0) throw std::invalid_argument("gen_world: negative noise level");
    if (options.orthogonal && num_concepts > d) {
        throw std::invalid_argument("gen_world: orthogonal directions need m* <= d");
    }
    if (options.vocab_per_concept == 0) throw std::invalid_argument("gen_world: empty concept vocabulary");

    PlantedWorld w;
    w.d = d;
    w.noise = noise;
    w.seed = seed;
    w.directions = Matrix(num_concepts, d);

    CounterRng dir_rng(seed, {hash_string("world.directions")});
    for (std::size_t k = 0; k < num_concepts; ++k) {
        bool accepted = false;
        for (int attempt = 0; attempt < 10000 && !accepted; ++attempt) {
            auto row = w.directions.row(k);
            for (double& v : row) v = dir_rng.gaussian();
            if (options.orthogonal) {
                for (std::size_t prev = 0; prev < k; ++prev) {
                    const double proj = dot(row, w.directions.row(prev));
                    for (std::size_t i = 0; i < d; ++i) row[i] -= proj * w.directions(prev, i);
                }
            }
            const double norm = std::sqrt(dot(row, row));
            if (norm < 1e-8) continue;
            for (double& v : row) v /= norm;
            accepted = true;
            if (!options.orthogonal) {
                for (std::size_t prev = 0; prev < k && accepted; ++prev)
                    if (std::abs(dot(row, w.directions.row(prev))) >= options.max_coherence) accepted = false;
            }
        }
        if (!accepted) {
            throw std::invalid_argument("gen_world: could not place concept " + std::to_string(k) +
                                        " under max coherence " + std::to_string(options.max_coherence));
        }
    }

    w.concept_code = Matrix(num_concepts, num_codes);
    CounterRng link_rng(seed, {hash_string("world.links")});
    for (std::size_t k = 0; k < num_concepts; ++k) {
        if (k < num_codes) {
            w.concept_code(k, k) = 1.0;
        } else if (link_rng.bernoulli(options.extra_link_prob)) {
            w.concept_code(k, link_rng.below(num_codes)) = 1.0;
        }
    }

    CounterRng word_rng(seed, {hash_string("world.words")});
    std::set<std::string> used;
    for (const char* f : kCommonFillers) used.insert(f);
    auto fresh = [&] {
        for (;;) {
            std::string wd = pseudo_word(word_rng);
            if (used.insert(wd).second) return wd;
        }
    };
    const std::size_t width = num_concepts < 100 ? 2 : 4;
    for (std::size_t k = 0; k < num_concepts; ++k) {
        w.concept_names.push_back("concept-" + padded(k, static_cast<int>(width)));
        std::vector<std::string> words;
        std::vector<double> amps;
        for (std::size_t v = 0; v < options.vocab_per_concept; ++v) {
            words.push_back(fresh());
            amps.push_back(word_rng.uniform(options.min_amplitude, options.max_amplitude));
        }
        w.vocab.push_back(std::move(words));
        w.amplitudes.push_back(std::move(amps));
    }
    for (const char* f : kCommonFillers) {
        if (w.filler.size() >= options.filler_pool) break;
        w.filler.emplace_back(f);
    }
    while (w.filler.size() < options.filler_pool) w.filler.push_back(fresh());
    for (std::size_t j = 0; j < num_codes; ++j) w.code_ids.push_back("C" + padded(j, num_codes < 100 ? 2 : 4));
    w.rebuild_index();
    return w;
}

Matrix embed_tokens(const PlantedWorld& world, const std::vector<std::string>& tokens, const std::string& stream_id) {
    Matrix x(tokens.size(), world.d);
    const std::uint64_t stream = hash_string(stream_id);
    const auto& index = world.token_index();
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        auto row = x.row(t);
        const auto it = index.find(tokens[t]);
        if (it != index.end()) {
            const auto [k, v] = it->second;
            const double amp = world.amplitudes[static_cast<std::size_t>(k)][v];
            const auto dir = world.directions.row(static_cast<std::size_t>(k));
            for (std::size_t i = 0; i < world.d; ++i) row[i] = amp * dir[i];
        }
        if (world.noise > 0.0) {
            CounterRng noise(world.seed, {hash_string("embed.noise"), stream, t});
            for (double& v : row) v += world.noise * noise.gaussian();
        }
    }
    return x;
}

std::vector<SynthNote> gen_corpus(const PlantedWorld& world, std::size_t n_notes, std::size_t s_min,
                                  std::size_t s_max, std::uint64_t seed, const CorpusOptions& options) {
    if (n_notes == 0) throw std::invalid_argument("gen_corpus: need at least one note");
    if (s_min == 0 || s_max < s_min) throw std::invalid_argument("gen_corpus: invalid length range");
    if (options.min_concepts == 0 || options.max_concepts < options.min_concepts) {
        throw std::invalid_argument("gen_corpus: invalid concepts-per-note range");
    }
    const std::size_t m_star = world.num_concepts();
    std::vector<SynthNote> notes;
    notes.reserve(n_notes);
    const int width = n_notes <= 100000 ? 5 : 8;
    for (std::size_t n = 0; n < n_notes; ++n) {
        CounterRng rng(seed, {hash_string("corpus.note"), n});
        SynthNote note;
        note.id = options.id_prefix + padded(n, width);

        const std::size_t lo = std::min(options.min_concepts, m_star);
        const std::size_t hi = std::min(options.max_concepts, m_star);
        const std::size_t k = lo + rng.below(hi - lo + 1);
        std::vector<std::size_t> pool(m_star);
        for (std::size_t i = 0; i < m_star; ++i) pool[i] = i;
        for (std::size_t i = 0; i < k; ++i) std::swap(pool[i], pool[i + rng.below(m_star - i)]);
        note.concepts.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k));

        const std::size_t s = std::max(k, s_min + rng.below(s_max - s_min + 1));
        note.tokens.assign(s, {});
        note.tags.assign(s, kFillerTag);

        // One guaranteed occurrence per concept at distinct positions.
        std::vector<std::size_t> positions(s);
        for (std::size_t i = 0; i < s; ++i) positions[i] = i;
        for (std::size_t i = 0; i < k; ++i) std::swap(positions[i], positions[i + rng.below(s - i)]);
        std::vector<bool> fixed(s, false);
        for (std::size_t i = 0; i < k; ++i) {
            const std::size_t c = note.concepts[i];
            const std::size_t pos = positions[i];
            note.tokens[pos] = world.vocab[c][rng.below(world.vocab[c].size())];
            note.tags[pos] = static_cast<int>(c);
            fixed[pos] = true;
        }
        for (std::size_t t = 0; t < s; ++t) {
            if (fixed[t]) continue;
            if (rng.bernoulli(options.concept_token_prob)) {
                const std::size_t c = note.concepts[rng.below(k)];
                note.tokens[t] = world.vocab[c][rng.below(world.vocab[c].size())];
                note.tags[t] = static_cast<int>(c);
            } else {
                note.tokens[t] = world.filler[rng.below(world.filler.size())];
            }
        }
        note.target = world.targets_for(note.concepts);
        note.embeddings = embed_tokens(world, note.tokens, std::to_string(seed) + "/" + note.id);
        notes.push_back(std::move(note));
    }
    return notes;
}

CodeDescriptions code_descriptions(const PlantedWorld& world, std::size_t tokens_per_code) {
    CodeDescriptions out;
    for (std::size_t j = 0; j < world.num_codes(); ++j) {
        const auto& vocab = world.vocab[j];
        std::vector<std::string> toks(vocab.begin(),
                                      vocab.begin() + static_cast<std::ptrdiff_t>(std::min(tokens_per_code, vocab.size())));
        std::string text;
        for (const auto& t : toks) text += (text.empty() ? "" : " ") + t;
        out.codes.push_back({world.code_ids[j], text});
        out.embeddings.push_back(embed_tokens(world, toks, "description/" + world.code_ids[j]));
        out.tokens.push_back(std::move(toks));
    }
    return out;
}

LabelConfound pick_confound(const PlantedWorld& world) {
    const std::size_t c = world.num_codes();
    for (std::size_t k = c; k < world.num_concepts(); ++k)
        for (std::size_t j = 0; j < c; ++j)
            if (world.concept_code(k, j) == 0.0) return {k, j, 1.0};
    for (std::size_t k = 0; k < world.num_concepts(); ++k)
        for (std::size_t j = 0; j < c; ++j)
            if (world.concept_code(k, j) == 0.0) return {k, j, 1.0};
    throw std::invalid_argument("pick_confound: every concept links to every code");
}

void apply_label_confound(std::vector<SynthNote>& notes, const LabelConfound& confound, std::uint64_t seed) {
    for (auto& n : notes) {
        if (confound.code >= n.target.size()) throw std::out_of_range("apply_label_confound: code out of range");
        if (std::find(n.concepts.begin(), n.concepts.end(), confound.concept_index) == n.concepts.end()) continue;
        CounterRng rng(seed, {hash_string("confound"), hash_string(n.id)});
        if (rng.uniform() < confound.rate) n.target[confound.code] = 1.0;
    }
}

std::vector<LabeledNote> to_labeled(const std::vector<SynthNote>& notes) {
    std::vector<LabeledNote> out;
    out.reserve(notes.size());
    for (const auto& n : notes) out.push_back({n.id, n.embeddings, n.target});
    return out;
}

Matrix stack_embeddings(const std::vector<SynthNote>& notes) {
    std::size_t rows = 0;
    std::size_t d = notes.empty() ? 0 : notes.front().embeddings.cols();
    for (const auto& n : notes) rows += n.embeddings.rows();
    Matrix out(rows, d);
    std::size_t r = 0;
    for (const auto& n : notes)
        for (std::size_t t = 0; t < n.embeddings.rows(); ++t, ++r) {
            const auto src = n.embeddings.row(t);
            std::copy(src.begin(), src.end(), out.row(r).begin());
        }
    return out;
}

TableEmbeddingProvider::TableEmbeddingProvider(std::size_t d, std::vector<std::pair<std::string, Matrix>> entries)
    : d_(d), entries_(std::move(entries)) {
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        if (entries_[i].second.cols() != d_) {
            throw ShapeError("embedding table: note '" + entries_[i].first + "' has width " +
                             std::to_string(entries_[i].second.cols()) + ", expected " + std::to_string(d_));
        }
        if (!index_.emplace(entries_[i].first, i).second) {
            throw std::invalid_argument("embedding table: duplicate note id '" + entries_[i].first + "'");
        }
    }
}

TableEmbeddingProvider TableEmbeddingProvider::from_corpus(const std::vector<SynthNote>& notes) {
    std::vector<std::pair<std::string, Matrix>> entries;
    const std::size_t d = notes.empty() ? 0 : notes.front().embeddings.cols();
    for (const auto& n : notes) entries.emplace_back(n.id, n.embeddings);
    return TableEmbeddingProvider(d, std::move(entries));
}

TableEmbeddingProvider TableEmbeddingProvider::from_emb1(const std::string& path) {
    Emb1File f = read_emb1(path);
    return TableEmbeddingProvider(f.d, std::move(f.notes));
}

Matrix TableEmbeddingProvider::embed(const std::string& note_id) const {
    const auto it = index_.find(note_id);
    if (it == index_.end()) throw std::out_of_range("embedding provider: unknown note id '" + note_id + "'");
    return entries_[it->second].second;
}

}  // namespace dila
