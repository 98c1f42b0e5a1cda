#pragma once

// Test-only reference implementations. Written from the formulas directly
// with plain loops and std:: facilities; nothing here calls the kernels
// under test except for reading Matrix storage.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <tuple>
#include <vector>

#include "dila/model.hpp"
#include "dila/numerics.hpp"
#include "dila/sae.hpp"

namespace oracle {

using dila::Matrix;

// ---- generators ------------------------------------------------------------

struct Gen {
    std::mt19937_64 eng;
    explicit Gen(std::uint64_t seed) : eng(seed) {}
    double uniform(double lo = -1.0, double hi = 1.0) { return std::uniform_real_distribution<double>(lo, hi)(eng); }
    double normal() { return std::normal_distribution<double>(0.0, 1.0)(eng); }
    std::size_t index(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(eng); }
    std::size_t between(std::size_t lo, std::size_t hi) {
        return std::uniform_int_distribution<std::size_t>(lo, hi)(eng);
    }
    bool coin(double p = 0.5) { return uniform(0.0, 1.0) < p; }

    Matrix matrix(std::size_t r, std::size_t c, double lo = -1.0, double hi = 1.0) {
        Matrix m(r, c);
        for (double& v : m.values()) v = uniform(lo, hi);
        return m;
    }

    // Small random SAE whose pre-activations stay clear of the ReLU kink.
    dila::SaeParams sae(std::size_t d, std::size_t m) {
        dila::SaeParams p;
        p.w_enc = matrix(d, m);
        p.b_enc = matrix(1, m, -0.3, 0.3);
        p.w_dec = matrix(m, d);
        p.b_dec = matrix(1, d, -0.2, 0.2);
        return p;
    }

    dila::DilaModel model(std::size_t d, std::size_t m, std::size_t c) {
        dila::DilaModel model;
        model.sae = sae(d, m);
        model.a_ficd = matrix(m, c, 0.0, 1.0);
        model.decision_w = matrix(c, d);
        model.decision_b = matrix(1, c, -0.5, 0.5);
        for (std::size_t j = 0; j < c; ++j) model.codes.push_back({"C" + std::to_string(j), "code " + std::to_string(j)});
        return model;
    }

    std::vector<double> targets(std::size_t c) {
        std::vector<double> t(c);
        for (double& v : t) v = coin() ? 1.0 : 0.0;
        return t;
    }
};

// ---- linear algebra --------------------------------------------------------

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    Matrix out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.cols(); ++j) {
            double s = 0;
            for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
            out(i, j) = s;
        }
    return out;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.values()[i] - b.values()[i]));
    return m;
}

inline double max_abs(const Matrix& a) {
    double m = 0;
    for (double v : a.values()) m = std::max(m, std::abs(v));
    return m;
}

inline double rel_diff(const Matrix& a, const Matrix& b) {
    return max_abs_diff(a, b) / std::max({max_abs(a), max_abs(b), 1e-300});
}

// exp(x_i) / Σ exp(x_k) down each column, no stabilization.
inline Matrix softmax_columns(const Matrix& a) {
    Matrix out(a.rows(), a.cols());
    for (std::size_t c = 0; c < a.cols(); ++c) {
        double z = 0;
        for (std::size_t r = 0; r < a.rows(); ++r) z += std::exp(a(r, c));
        for (std::size_t r = 0; r < a.rows(); ++r) out(r, c) = std::exp(a(r, c)) / z;
    }
    return out;
}

// ---- SAE -------------------------------------------------------------------

inline Matrix encode(const dila::SaeParams& p, const Matrix& x) {
    const std::size_t d = p.w_enc.rows(), m = p.w_enc.cols();
    Matrix f(x.rows(), m);
    for (std::size_t t = 0; t < x.rows(); ++t)
        for (std::size_t i = 0; i < m; ++i) {
            double s = p.b_enc(0, i);
            for (std::size_t k = 0; k < d; ++k) s += (x(t, k) - p.b_dec(0, k)) * p.w_enc(k, i);
            f(t, i) = s > 0 ? s : 0;
        }
    return f;
}

inline Matrix decode(const dila::SaeParams& p, const Matrix& f) {
    const std::size_t d = p.w_dec.cols(), m = p.w_dec.rows();
    Matrix x(f.rows(), d);
    for (std::size_t t = 0; t < f.rows(); ++t)
        for (std::size_t k = 0; k < d; ++k) {
            double s = p.b_dec(0, k);
            for (std::size_t i = 0; i < m; ++i) s += f(t, i) * p.w_dec(i, k);
            x(t, k) = s;
        }
    return x;
}

// Every term averaged over rows.
inline std::tuple<double, double, double, double> sae_loss(const dila::SaeParams& p, const Matrix& x, double l1w,
                                                           double l2w) {
    const Matrix f = oracle::encode(p, x);
    const Matrix xh = oracle::decode(p, f);
    double rec = 0, l1 = 0, l2 = 0;
    for (std::size_t t = 0; t < x.rows(); ++t) {
        for (std::size_t k = 0; k < x.cols(); ++k) rec += (x(t, k) - xh(t, k)) * (x(t, k) - xh(t, k));
        for (std::size_t i = 0; i < f.cols(); ++i) {
            l1 += std::abs(f(t, i));
            l2 += f(t, i) * f(t, i);
        }
    }
    const double n = static_cast<double>(x.rows());
    rec /= n;
    l1 /= n;
    l2 /= n;
    return {rec, l1, l2, rec + l1w * l1 + l2w * l2};
}

// ---- DILA ------------------------------------------------------------------

struct Forward {
    Matrix f, a_laat, x_att;
    std::vector<double> p;
};

inline Forward forward(const dila::DilaModel& model, const Matrix& x) {
    Forward out;
    out.f = oracle::encode(model.sae, x);
    const std::size_t s = x.rows(), c = model.a_ficd.cols(), d = x.cols(), m = out.f.cols();
    Matrix logits(s, c);
    for (std::size_t t = 0; t < s; ++t)
        for (std::size_t j = 0; j < c; ++j) {
            double v = 0;
            for (std::size_t i = 0; i < m; ++i) v += out.f(t, i) * model.a_ficd(i, j);
            logits(t, j) = v;
        }
    out.a_laat = softmax_columns(logits);
    out.x_att = Matrix(c, d);
    for (std::size_t j = 0; j < c; ++j)
        for (std::size_t k = 0; k < d; ++k) {
            double v = 0;
            for (std::size_t t = 0; t < s; ++t) v += out.a_laat(t, j) * x(t, k);
            out.x_att(j, k) = v;
        }
    for (std::size_t j = 0; j < c; ++j) {
        double z = model.decision_b(0, j);
        for (std::size_t k = 0; k < d; ++k) z += model.decision_w(j, k) * out.x_att(j, k);
        out.p.push_back(1.0 / (1.0 + std::exp(-z)));
    }
    return out;
}

inline double bce(const std::vector<double>& p, const std::vector<double>& y) {
    double s = 0;
    for (std::size_t j = 0; j < p.size(); ++j) {
        const double q = std::min(std::max(p[j], 1e-7), 1.0 - 1e-7);
        s += -(y[j] * std::log(q) + (1.0 - y[j]) * std::log(1.0 - q));
    }
    return s / static_cast<double>(p.size());
}

// ---- metrics ---------------------------------------------------------------

// All positive/negative pairs; ties count one half.
inline double pair_auc(const std::vector<double>& scores, const std::vector<double>& labels) {
    double wins = 0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (labels[i] < 0.5) continue;
        for (std::size_t j = 0; j < scores.size(); ++j) {
            if (labels[j] > 0.5) continue;
            ++pairs;
            if (scores[i] > scores[j]) wins += 1.0;
            else if (scores[i] == scores[j]) wins += 0.5;
        }
    }
    return pairs == 0 ? -1.0 : wins / static_cast<double>(pairs);
}

inline double f1(double tp, double fp, double fn) {
    const double denom = 2 * tp + fp + fn;
    return denom == 0 ? 0.0 : 2 * tp / denom;
}

// ---- misc ------------------------------------------------------------------

// Sort, then interpolate between the neighbours of position q·(n-1).
inline double quantile(std::vector<double> v, double q) {
    std::sort(v.begin(), v.end());
    const double h = q * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

struct ScalarAdamW {
    double m = 0, v = 0;
    int t = 0;
    double step(double theta, double g, double lr, double b1 = 0.9, double b2 = 0.999, double eps = 1e-8,
                double wd = 0.01) {
        ++t;
        theta *= 1.0 - lr * wd;
        m = b1 * m + (1 - b1) * g;
        v = b2 * v + (1 - b2) * g * g;
        const double mh = m / (1 - std::pow(b1, t));
        const double vh = v / (1 - std::pow(b2, t));
        return theta - lr * mh / (std::sqrt(vh) + eps);
    }
};

}  // namespace oracle
