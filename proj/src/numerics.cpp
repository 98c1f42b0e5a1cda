#include "dila/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "dila/random.hpp"

namespace dila {

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
        throw ShapeError("Matrix: " + std::to_string(data_.size()) + " values for shape " +
                         std::to_string(rows_) + "x" + std::to_string(cols_));
    }
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
        if (row.size() != c) throw ShapeError("Matrix::from_rows: ragged rows");
        data.insert(data.end(), row.begin(), row.end());
    }
    return Matrix(r, c, std::move(data));
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Matrix Matrix::row_vector(std::span<const double> values) {
    return Matrix(1, values.size(), std::vector<double>(values.begin(), values.end()));
}

std::string Matrix::shape() const {
    return std::to_string(rows_) + "x" + std::to_string(cols_);
}

bool Matrix::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void Matrix::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ShapeError(std::string(what) + ": shape mismatch " + a.shape() + " vs " + b.shape());
    }
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: " + a.shape() + " * " + b.shape());
    }
    Matrix out(a.rows(), b.cols());
    const std::size_t n = b.cols();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double* o = out.row(i).data();
        const double* ar = a.row(i).data();
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double av = ar[k];
            if (av == 0.0) continue;
            const double* br = b.row(k).data();
            for (std::size_t j = 0; j < n; ++j) o[j] += av * br[j];
        }
    }
    return out;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) {
        throw ShapeError("matmul_tn: (" + a.shape() + ")^T * " + b.shape());
    }
    Matrix out(a.cols(), b.cols());
    const std::size_t n = b.cols();
    for (std::size_t k = 0; k < a.rows(); ++k) {
        const double* ar = a.row(k).data();
        const double* br = b.row(k).data();
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const double av = ar[i];
            if (av == 0.0) continue;
            double* o = out.row(i).data();
            for (std::size_t j = 0; j < n; ++j) o[j] += av * br[j];
        }
    }
    return out;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) {
        throw ShapeError("matmul_nt: " + a.shape() + " * (" + b.shape() + ")^T");
    }
    Matrix out(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const auto ar = a.row(i);
        for (std::size_t j = 0; j < b.rows(); ++j) out(i, j) = dot(ar, b.row(j));
    }
    return out;
}

Matrix transpose(const Matrix& a) {
    Matrix t(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
    return t;
}

Matrix softmax_over_rows(const Matrix& a) {
    Matrix out(a.rows(), a.cols());
    for (std::size_t j = 0; j < a.cols(); ++j) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t t = 0; t < a.rows(); ++t) mx = std::max(mx, a(t, j));
        double sum = 0.0;
        for (std::size_t t = 0; t < a.rows(); ++t) {
            const double e = std::exp(a(t, j) - mx);
            out(t, j) = e;
            sum += e;
        }
        for (std::size_t t = 0; t < a.rows(); ++t) out(t, j) /= sum;
    }
    return out;
}

Matrix relu(const Matrix& a) {
    Matrix out = a;
    for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
    return out;
}

double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

Matrix add(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "add");
    Matrix out = a;
    auto o = out.values();
    auto bv = b.values();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
    return out;
}

Matrix subtract(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "subtract");
    Matrix out = a;
    auto o = out.values();
    auto bv = b.values();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bv[i];
    return out;
}

Matrix scale(const Matrix& a, double s) {
    Matrix out = a;
    for (double& v : out.values()) v *= s;
    return out;
}

Matrix add_row(const Matrix& a, const Matrix& row) {
    if (row.rows() != 1 || row.cols() != a.cols()) {
        throw ShapeError("add_row: " + a.shape() + " + " + row.shape());
    }
    Matrix out = a;
    for (std::size_t i = 0; i < out.rows(); ++i) {
        auto r = out.row(i);
        for (std::size_t j = 0; j < r.size(); ++j) r[j] += row(0, j);
    }
    return out;
}

Matrix sub_row(const Matrix& a, const Matrix& row) {
    if (row.rows() != 1 || row.cols() != a.cols()) {
        throw ShapeError("sub_row: " + a.shape() + " - " + row.shape());
    }
    Matrix out = a;
    for (std::size_t i = 0; i < out.rows(); ++i) {
        auto r = out.row(i);
        for (std::size_t j = 0; j < r.size(); ++j) r[j] -= row(0, j);
    }
    return out;
}

Matrix column_sums(const Matrix& a) {
    Matrix out(1, a.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const auto r = a.row(i);
        for (std::size_t j = 0; j < r.size(); ++j) out(0, j) += r[j];
    }
    return out;
}

Matrix column_means(const Matrix& a) {
    if (a.rows() == 0) throw ShapeError("column_means: no rows");
    return scale(column_sums(a), 1.0 / static_cast<double>(a.rows()));
}

double frobenius_norm(const Matrix& a) {
    double s = 0.0;
    for (double v : a.values()) s += v * v;
    return std::sqrt(s);
}

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

void adamw_step(Matrix& params, const Matrix& grads, AdamWState& state) {
    require_same_shape(params, grads, "adamw_step");
    require_same_shape(params, state.first_moment, "adamw_step (first moment)");
    require_same_shape(params, state.second_moment, "adamw_step (second moment)");
    const AdamWConfig& h = state.hyper;
    state.step += 1;
    const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
    const double decay = 1.0 - h.lr * h.weight_decay;

    auto p = params.values();
    auto g = grads.values();
    auto m = state.first_moment.values();
    auto v = state.second_moment.values();
    for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        p[i] = p[i] * decay - h.lr * mhat / (std::sqrt(vhat) + h.eps);
    }
}

double linear_warmup_lr(std::uint64_t step, std::uint64_t warmup_steps, std::uint64_t total_steps,
                        double base_lr) {
    if (warmup_steps > total_steps) {
        throw std::invalid_argument("linear_warmup_lr: warmup_steps " + std::to_string(warmup_steps) +
                                    " exceeds total_steps " + std::to_string(total_steps));
    }
    if (step > total_steps) {
        throw std::invalid_argument("linear_warmup_lr: step beyond total_steps");
    }
    if (step < warmup_steps) {
        return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
    }
    if (total_steps == warmup_steps) return base_lr;
    return base_lr * static_cast<double>(total_steps - step) /
           static_cast<double>(total_steps - warmup_steps);
}

Matrix finite_diff_grad(const ScalarFn& loss_fn, const Matrix& params, double eps) {
    Matrix grad(params.rows(), params.cols());
    Matrix probe = params;
    auto pv = probe.values();
    auto gv = grad.values();
    for (std::size_t i = 0; i < pv.size(); ++i) {
        const double orig = pv[i];
        pv[i] = orig + eps;
        const double up = loss_fn(probe);
        pv[i] = orig - eps;
        const double down = loss_fn(probe);
        pv[i] = orig;
        if (!std::isfinite(up) || !std::isfinite(down)) {
            std::ostringstream os;
            os << "finite_diff_grad: non-finite loss at coordinate (" << i / params.cols() << ", "
               << i % params.cols() << ")";
            throw NumericError(os.str());
        }
        gv[i] = (up - down) / (2.0 * eps);
    }
    return grad;
}

double relative_error(const Matrix& a, const Matrix& b, double floor) {
    require_same_shape(a, b, "relative_error");
    const double denom = std::max({frobenius_norm(a), frobenius_norm(b), floor});
    return frobenius_norm(subtract(a, b)) / denom;
}

namespace {

// Top eigenvector of a symmetric PSD matrix by power iteration.
std::vector<double> power_iterate(const Matrix& cov, CounterRng& rng, double& eigenvalue) {
    const std::size_t n = cov.rows();
    std::vector<double> v(n), next(n);
    for (double& x : v) x = rng.gaussian();
    double norm = std::sqrt(dot(v, v));
    for (double& x : v) x /= norm;
    eigenvalue = 0.0;
    for (int iter = 0; iter < 1000; ++iter) {
        for (std::size_t i = 0; i < n; ++i) next[i] = dot(cov.row(i), v);
        norm = std::sqrt(dot(next, next));
        if (norm < 1e-300) {
            eigenvalue = 0.0;
            return v;
        }
        for (double& x : next) x /= norm;
        double diff = 0.0;
        for (std::size_t i = 0; i < n; ++i) diff = std::max(diff, std::abs(next[i] - v[i]));
        v.swap(next);
        eigenvalue = norm;
        if (diff < 1e-13) break;
    }
    return v;
}

}  // namespace

Pca2Result pca2(const Matrix& points, std::uint64_t seed) {
    if (points.rows() < 2) throw ShapeError("pca2: need at least 2 rows, got " + points.shape());
    const Matrix centered = sub_row(points, column_means(points));
    Matrix cov = scale(matmul_tn(centered, centered), 1.0 / static_cast<double>(points.rows() - 1));

    Pca2Result result;
    result.coords = Matrix(points.rows(), 2);
    for (std::size_t i = 0; i < cov.rows(); ++i) result.total_variance += cov(i, i);
    if (result.total_variance <= 1e-300) {
        result.degenerate = true;
        return result;
    }

    CounterRng rng(seed, {hash_string("pca2")});
    for (int comp = 0; comp < 2 && comp < static_cast<int>(cov.rows()); ++comp) {
        double lambda = 0.0;
        auto v = power_iterate(cov, rng, lambda);
        // Sign convention: largest-magnitude coordinate positive.
        std::size_t arg = 0;
        for (std::size_t i = 1; i < v.size(); ++i)
            if (std::abs(v[i]) > std::abs(v[arg])) arg = i;
        if (v[arg] < 0)
            for (double& x : v) x = -x;
        result.variance[comp] = lambda;
        for (std::size_t r = 0; r < centered.rows(); ++r) result.coords(r, comp) = dot(centered.row(r), v);
        // Deflate.
        for (std::size_t i = 0; i < cov.rows(); ++i)
            for (std::size_t j = 0; j < cov.cols(); ++j) cov(i, j) -= lambda * v[i] * v[j];
    }
    return result;
}

}  // namespace dila
