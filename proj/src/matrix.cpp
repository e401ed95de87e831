#include "specadapt/matrix.hpp"

#include "specadapt/errors.hpp"
#include "specadapt/rng.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <string>

namespace specadapt {

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
        throw std::invalid_argument("Matrix: data length " + std::to_string(data_.size()) +
                                    " does not match shape " + std::to_string(rows_) + "x" + std::to_string(cols_));
    }
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
        if (r.size() != cols_) {
            throw std::invalid_argument("Matrix: ragged initializer rows");
        }
        data_.insert(data_.end(), r.begin(), r.end());
    }
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        m(i, i) = 1.0;
    }
    return m;
}

Matrix Matrix::diagonal(std::span<const double> values) {
    Matrix m(values.size(), values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        m(i, i) = values[i];
    }
    return m;
}

Matrix Matrix::column_vector(std::span<const double> values) {
    return Matrix(values.size(), 1, std::vector<double>(values.begin(), values.end()));
}

Matrix Matrix::random_gaussian(std::size_t rows, std::size_t cols, Rng& rng, double stddev) {
    Matrix m(rows, cols);
    for (double& x : m.data_) {
        x = stddev * rng.normal();
    }
    return m;
}

std::vector<double> Matrix::column(std::size_t c) const {
    std::vector<double> out(rows_);
    for (std::size_t i = 0; i < rows_; ++i) {
        out[i] = (*this)(i, c);
    }
    return out;
}

void Matrix::set_column(std::size_t c, std::span<const double> values) {
    if (values.size() != rows_) {
        throw std::invalid_argument("set_column: length mismatch");
    }
    for (std::size_t i = 0; i < rows_; ++i) {
        (*this)(i, c) = values[i];
    }
}

Matrix Matrix::columns(std::size_t start, std::size_t count) const {
    if (start + count > cols_) {
        throw std::invalid_argument("columns: range [" + std::to_string(start) + ", " +
                                    std::to_string(start + count) + ") exceeds " + std::to_string(cols_) + " columns");
    }
    Matrix out(rows_, count);
    for (std::size_t i = 0; i < rows_; ++i) {
        for (std::size_t j = 0; j < count; ++j) {
            out(i, j) = (*this)(i, start + j);
        }
    }
    return out;
}

void Matrix::set_columns(std::size_t start, const Matrix& src) {
    if (src.rows() != rows_ || start + src.cols() > cols_) {
        throw std::invalid_argument("set_columns: shape mismatch");
    }
    for (std::size_t i = 0; i < rows_; ++i) {
        for (std::size_t j = 0; j < src.cols(); ++j) {
            (*this)(i, start + j) = src(i, j);
        }
    }
}

void Matrix::add_columns(std::size_t start, const Matrix& src) {
    if (src.rows() != rows_ || start + src.cols() > cols_) {
        throw std::invalid_argument("add_columns: shape mismatch");
    }
    for (std::size_t i = 0; i < rows_; ++i) {
        for (std::size_t j = 0; j < src.cols(); ++j) {
            (*this)(i, start + j) += src(i, j);
        }
    }
}

namespace {

void check_same_shape(const Matrix& a, const Matrix& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                                    std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                                    std::to_string(b.cols()));
    }
}

} // namespace

Matrix& Matrix::operator+=(const Matrix& other) {
    check_same_shape(*this, other, "operator+=");
    for (std::size_t i = 0; i < data_.size(); ++i) {
        data_[i] += other.data_[i];
    }
    return *this;
}

Matrix& Matrix::operator-=(const Matrix& other) {
    check_same_shape(*this, other, "operator-=");
    for (std::size_t i = 0; i < data_.size(); ++i) {
        data_[i] -= other.data_[i];
    }
    return *this;
}

Matrix& Matrix::operator*=(double scalar) {
    for (double& x : data_) {
        x *= scalar;
    }
    return *this;
}

void Matrix::add_scaled(const Matrix& other, double scale) {
    check_same_shape(*this, other, "add_scaled");
    for (std::size_t i = 0; i < data_.size(); ++i) {
        data_[i] += scale * other.data_[i];
    }
}

Matrix operator+(Matrix lhs, const Matrix& rhs) {
    lhs += rhs;
    return lhs;
}

Matrix operator-(Matrix lhs, const Matrix& rhs) {
    lhs -= rhs;
    return lhs;
}

Matrix operator*(Matrix m, double scalar) {
    m *= scalar;
    return m;
}

Matrix operator*(double scalar, Matrix m) {
    m *= scalar;
    return m;
}

Matrix operator*(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw std::invalid_argument("operator*: inner dimensions " + std::to_string(a.cols()) + " vs " +
                                    std::to_string(b.rows()));
    }
    Matrix out(a.rows(), b.cols());
    // ikj order keeps the inner loop contiguous in both b and out
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) {
                continue;
            }
            const std::span<const double> brow = b.row(k);
            const std::span<double> orow = out.row(i);
            for (std::size_t j = 0; j < b.cols(); ++j) {
                orow[j] += aik * brow[j];
            }
        }
    }
    return out;
}

Matrix transpose(const Matrix& m) {
    Matrix out(m.cols(), m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i) {
        for (std::size_t j = 0; j < m.cols(); ++j) {
            out(j, i) = m(i, j);
        }
    }
    return out;
}

Matrix multiply_bt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) {
        throw std::invalid_argument("multiply_bt: inner dimensions mismatch");
    }
    Matrix out(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < b.rows(); ++j) {
            out(i, j) = dot(a.row(i), b.row(j));
        }
    }
    return out;
}

Matrix multiply_at(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) {
        throw std::invalid_argument("multiply_at: inner dimensions mismatch");
    }
    Matrix out(a.cols(), b.cols());
    for (std::size_t k = 0; k < a.rows(); ++k) {
        const std::span<const double> arow = a.row(k);
        const std::span<const double> brow = b.row(k);
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const double aki = arow[i];
            if (aki == 0.0) {
                continue;
            }
            const std::span<double> orow = out.row(i);
            for (std::size_t j = 0; j < b.cols(); ++j) {
                orow[j] += aki * brow[j];
            }
        }
    }
    return out;
}

std::vector<double> multiply_vec(const Matrix& a, std::span<const double> x) {
    if (a.cols() != x.size()) {
        throw std::invalid_argument("multiply_vec: dimension mismatch");
    }
    std::vector<double> out(a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        out[i] = dot(a.row(i), x);
    }
    return out;
}

double frobenius_norm(const Matrix& m) {
    return norm2(m.data());
}

double max_abs(const Matrix& m) {
    double best = 0.0;
    for (double x : m.data()) {
        best = std::max(best, std::abs(x));
    }
    return best;
}

double norm2(std::span<const double> v) {
    double sum = 0.0;
    for (double x : v) {
        sum += x * x;
    }
    return std::sqrt(sum);
}

double dot(std::span<const double> a, std::span<const double> b) {
    double sum = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sum += a[i] * b[i];
    }
    return sum;
}

bool all_finite(const Matrix& m) {
    for (double x : m.data()) {
        if (!std::isfinite(x)) {
            return false;
        }
    }
    return true;
}

void require_finite(const Matrix& m, const char* what) {
    if (!all_finite(m)) {
        throw FormatError(std::string(what) + ": non-finite entries in " + std::to_string(m.rows()) + "x" +
                          std::to_string(m.cols()) + " matrix");
    }
}

Matrix solve(const Matrix& a, const Matrix& rhs) {
    const std::size_t n = a.rows();
    if (a.cols() != n) {
        throw std::invalid_argument("solve: matrix must be square");
    }
    if (rhs.rows() != n) {
        throw std::invalid_argument("solve: rhs row count mismatch");
    }

    Matrix lu = a;
    Matrix x = rhs;
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) {
        perm[i] = i;
    }

    for (std::size_t col = 0; col < n; ++col) {
        std::size_t pivot = col;
        double best = std::abs(lu(col, col));
        for (std::size_t r = col + 1; r < n; ++r) {
            const double v = std::abs(lu(r, col));
            if (v > best) {
                best = v;
                pivot = r;
            }
        }
        if (best == 0.0) {
            throw NumericalError("solve: singular " + std::to_string(n) + "x" + std::to_string(n) +
                                 " system (zero pivot at column " + std::to_string(col) + ")");
        }
        if (pivot != col) {
            for (std::size_t j = 0; j < n; ++j) {
                std::swap(lu(col, j), lu(pivot, j));
            }
            for (std::size_t j = 0; j < x.cols(); ++j) {
                std::swap(x(col, j), x(pivot, j));
            }
        }
        const double d = lu(col, col);
        for (std::size_t r = col + 1; r < n; ++r) {
            const double f = lu(r, col) / d;
            if (f == 0.0) {
                continue;
            }
            lu(r, col) = f;
            for (std::size_t j = col + 1; j < n; ++j) {
                lu(r, j) -= f * lu(col, j);
            }
            for (std::size_t j = 0; j < x.cols(); ++j) {
                x(r, j) -= f * x(col, j);
            }
        }
    }

    // back substitution
    for (std::size_t col = n; col-- > 0;) {
        const double d = lu(col, col);
        for (std::size_t j = 0; j < x.cols(); ++j) {
            x(col, j) /= d;
        }
        for (std::size_t r = 0; r < col; ++r) {
            const double f = lu(r, col);
            if (f == 0.0) {
                continue;
            }
            for (std::size_t j = 0; j < x.cols(); ++j) {
                x(r, j) -= f * x(col, j);
            }
        }
    }
    return x;
}

double determinant(const Matrix& m) {
    const std::size_t n = m.rows();
    if (m.cols() != n) {
        throw std::invalid_argument("determinant: matrix must be square");
    }
    Matrix lu = m;
    double det = 1.0;
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t pivot = col;
        double best = std::abs(lu(col, col));
        for (std::size_t r = col + 1; r < n; ++r) {
            if (std::abs(lu(r, col)) > best) {
                best = std::abs(lu(r, col));
                pivot = r;
            }
        }
        if (best == 0.0) {
            return 0.0;
        }
        if (pivot != col) {
            for (std::size_t j = 0; j < n; ++j) {
                std::swap(lu(col, j), lu(pivot, j));
            }
            det = -det;
        }
        det *= lu(col, col);
        for (std::size_t r = col + 1; r < n; ++r) {
            const double f = lu(r, col) / lu(col, col);
            for (std::size_t j = col + 1; j < n; ++j) {
                lu(r, j) -= f * lu(col, j);
            }
        }
    }
    return det;
}

std::uint64_t fingerprint(const Matrix& m) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](std::uint64_t v) {
        for (int i = 0; i < 8; ++i) {
            h ^= (v >> (8 * i)) & 0xffULL;
            h *= 0x100000001b3ULL;
        }
    };
    mix(m.rows());
    mix(m.cols());
    for (double x : m.data()) {
        mix(std::bit_cast<std::uint64_t>(x));
    }
    return h;
}

} // namespace specadapt
