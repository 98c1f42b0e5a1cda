#pragma once

// Dense row-major matrices and the handful of kernels the model needs:
// products, column softmax, ReLU, AdamW, the warmup schedule, a central
// finite-difference gradient and a two-component PCA.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dila {

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

    static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
    static Matrix identity(std::size_t n);
    static Matrix row_vector(std::span<const double> values);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::span<double> values() { return data_; }
    std::span<const double> values() const { return data_; }

    std::string shape() const;
    bool all_finite() const;
    void fill(double v);

    bool operator==(const Matrix& other) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

Matrix matmul(const Matrix& a, const Matrix& b);
// aᵀ·b without materializing the transpose.
Matrix matmul_tn(const Matrix& a, const Matrix& b);
// a·bᵀ without materializing the transpose.
Matrix matmul_nt(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);

// Softmax down each column: every column is normalized over the rows.
Matrix softmax_over_rows(const Matrix& a);
Matrix relu(const Matrix& a);
double sigmoid(double x);

Matrix add(const Matrix& a, const Matrix& b);
Matrix subtract(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& a, double s);
// Adds a 1×cols row vector to every row.
Matrix add_row(const Matrix& a, const Matrix& row);
Matrix sub_row(const Matrix& a, const Matrix& row);
// Sum over rows, returned as 1×cols.
Matrix column_sums(const Matrix& a);
Matrix column_means(const Matrix& a);
double frobenius_norm(const Matrix& a);
double dot(std::span<const double> a, std::span<const double> b);
void require_same_shape(const Matrix& a, const Matrix& b, const char* what);

struct AdamWConfig {
    double lr = 5e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

struct AdamWState {
    AdamWConfig hyper;
    Matrix first_moment;
    Matrix second_moment;
    std::uint64_t step = 0;

    AdamWState() = default;
    AdamWState(const Matrix& like, AdamWConfig cfg)
        : hyper(cfg), first_moment(like.rows(), like.cols()), second_moment(like.rows(), like.cols()) {}
};

// One decoupled-weight-decay Adam update. Decay multiplies params by
// (1 - lr*wd) before the bias-corrected moment step.
void adamw_step(Matrix& params, const Matrix& grads, AdamWState& state);

// Linear ramp 0 -> base_lr over warmup_steps, then linear decay to 0 at total_steps.
double linear_warmup_lr(std::uint64_t step, std::uint64_t warmup_steps, std::uint64_t total_steps,
                        double base_lr);

using ScalarFn = std::function<double(const Matrix&)>;

// Central differences (f(θ+ε) - f(θ-ε)) / 2ε for every coordinate of params.
Matrix finite_diff_grad(const ScalarFn& loss_fn, const Matrix& params, double eps);

// Relative error ‖a-b‖ / max(‖a‖, ‖b‖, floor).
double relative_error(const Matrix& a, const Matrix& b, double floor = 1e-12);

struct Pca2Result {
    Matrix coords;                 // n×2
    double variance[2] = {0, 0};   // variance captured by each component
    double total_variance = 0;
    bool degenerate = false;       // rank-0 input
};

Pca2Result pca2(const Matrix& points, std::uint64_t seed = 7);

}  // namespace dila
