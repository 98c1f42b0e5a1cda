#include "dila/recovery.hpp"

#include <cmath>

namespace dila {

Recovery match_features(const SaeParams& sae, const PlantedWorld& world, double min_cos) {
    if (sae.input_dim() != world.d) throw std::invalid_argument("SAE input dim does not match the world");
    const std::size_t m = sae.dict_size();
    const std::size_t k = world.num_concepts();
    Recovery r;
    r.min_cos = min_cos;
    r.feature_concept.assign(m, std::nullopt);
    r.concept_best_cos.assign(k, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        const auto row = sae.w_dec.row(i);
        double norm = 0;
        for (double v : row) norm += v * v;
        norm = std::sqrt(norm);
        if (norm == 0.0) continue;
        double best = 0;
        std::size_t best_k = 0;
        for (std::size_t c = 0; c < k; ++c) {
            const auto dir = world.directions.row(c);
            double dot = 0, dn = 0;
            for (std::size_t t = 0; t < row.size(); ++t) {
                dot += row[t] * dir[t];
                dn += dir[t] * dir[t];
            }
            const double cos = std::abs(dot) / (norm * std::sqrt(dn));
            if (cos > r.concept_best_cos[c]) r.concept_best_cos[c] = cos;
            if (cos > best) {
                best = cos;
                best_k = c;
            }
        }
        if (best >= min_cos) r.feature_concept[i] = best_k;
    }
    for (double c : r.concept_best_cos)
        if (c >= min_cos) ++r.directions_recovered;
    return r;
}

double reconstruction_mse(const SaeParams& sae, const Matrix& x) {
    if (x.rows() == 0) throw std::invalid_argument("reconstruction_mse of an empty matrix");
    const Matrix xhat = decode(sae, encode(sae, x));
    double total = 0;
    for (std::size_t r = 0; r < x.rows(); ++r)
        for (std::size_t c = 0; c < x.cols(); ++c) {
            const double e = x(r, c) - xhat(r, c);
            total += e * e;
        }
    return total / static_cast<double>(x.rows());
}

Purity context_purity(const std::vector<DictionaryEntry>& entries, const Recovery& recovery, const PlantedWorld& world) {
    Purity p;
    for (const auto& e : entries) {
        if (e.feature >= recovery.feature_concept.size() || !recovery.feature_concept[e.feature]) continue;
        ++p.recovered;
        const auto top = top_contexts(e, kEvalContexts);
        if (top.shortfall) continue;
        const int k = static_cast<int>(*recovery.feature_concept[e.feature]);
        bool pure = true;
        for (const auto& c : top.contexts) pure = pure && world.concept_of(c.token) == k;
        if (pure) ++p.pure;
    }
    return p;
}

}  // namespace dila
