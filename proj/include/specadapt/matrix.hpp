#ifndef SPECADAPT_MATRIX_HPP
#define SPECADAPT_MATRIX_HPP

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <vector>

namespace specadapt {

class Rng;

/// Dense row-major float64 matrix, the universal value carrier.
///
/// Shapes with zero rows or columns are permitted in-memory (they arise
/// from rank-0 adapters); the file container format rejects them.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
    Matrix(std::initializer_list<std::initializer_list<double>> rows);

    static Matrix identity(std::size_t n);
    static Matrix diagonal(std::span<const double> values);
    static Matrix column_vector(std::span<const double> values);
    static Matrix random_gaussian(std::size_t rows, std::size_t cols, Rng& rng, double stddev = 1.0);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }

    std::span<const double> data() const { return data_; }
    std::span<double> data() { return data_; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }

    std::vector<double> column(std::size_t c) const;
    void set_column(std::size_t c, std::span<const double> values);

    /// Copy of columns [start, start+count).
    Matrix columns(std::size_t start, std::size_t count) const;
    /// Overwrites columns [start, start+count) with src (same row count).
    void set_columns(std::size_t start, const Matrix& src);
    /// Adds src into columns [start, start+count).
    void add_columns(std::size_t start, const Matrix& src);

    Matrix& operator+=(const Matrix& other);
    Matrix& operator-=(const Matrix& other);
    Matrix& operator*=(double scalar);
    void add_scaled(const Matrix& other, double scale);

    bool operator==(const Matrix& other) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

Matrix operator+(Matrix lhs, const Matrix& rhs);
Matrix operator-(Matrix lhs, const Matrix& rhs);
Matrix operator*(Matrix m, double scalar);
Matrix operator*(double scalar, Matrix m);
Matrix operator*(const Matrix& a, const Matrix& b);

Matrix transpose(const Matrix& m);
/// a * b^T without forming the transpose.
Matrix multiply_bt(const Matrix& a, const Matrix& b);
/// a^T * b without forming the transpose.
Matrix multiply_at(const Matrix& a, const Matrix& b);

std::vector<double> multiply_vec(const Matrix& a, std::span<const double> x);

double frobenius_norm(const Matrix& m);
double max_abs(const Matrix& m);
double norm2(std::span<const double> v);
double dot(std::span<const double> a, std::span<const double> b);

bool all_finite(const Matrix& m);
/// Throws FormatError when any entry is NaN/Inf; `what` names the source.
void require_finite(const Matrix& m, const char* what);

/// Solves a x = rhs column-by-column via LU with partial pivoting.
/// Throws NumericalError when a is singular to working precision.
Matrix solve(const Matrix& a, const Matrix& rhs);
double determinant(const Matrix& m);

/// FNV-1a over shape and raw entry bytes; used as a base fingerprint.
std::uint64_t fingerprint(const Matrix& m);

} // namespace specadapt

#endif // SPECADAPT_MATRIX_HPP
