#ifndef SPECADAPT_SVD_HPP
#define SPECADAPT_SVD_HPP

#include "specadapt/matrix.hpp"

#include <cstdint>
#include <optional>
#include <vector>

namespace specadapt {

/// Thin SVD triple w = u * diag(s) * v^T with k = min(rows, cols).
///
/// Invariants: u (n x k) and v (m x k) have orthonormal columns, s is
/// non-increasing and nonnegative, and each u column's largest-magnitude
/// entry is nonnegative (sign canonicalization, v negated in tandem).
struct SpectralDecomposition {
    Matrix u;
    std::vector<double> s;
    Matrix v;
    /// False when factors are valid but not in the canonical sign/alignment
    /// form (e.g. after an in-place rotation of a degenerate block).
    bool canonical = true;

    std::size_t k() const { return s.size(); }
    std::size_t rows() const { return u.rows(); }
    std::size_t cols() const { return v.rows(); }
};

/// Contiguous column range [start, start + count) of a decomposition;
/// start = 0 selects the top singular directions.
struct ColumnSelect {
    std::size_t start = 0;
    std::size_t count = 0;

    bool operator==(const ColumnSelect&) const = default;
};

inline ColumnSelect top_columns(std::size_t count) { return {0, count}; }
inline ColumnSelect bottom_columns(std::size_t k, std::size_t count) { return {k - count, count}; }

/// Instrumentation of one decomposition: workspace bytes allocated along
/// the SVD path (allocation-counter estimate, not RSS) and QR sweep count.
struct SvdStats {
    std::uint64_t workspace_bytes = 0;
    std::size_t qr_iterations = 0;
};

/// Thin SVD via Householder bidiagonalization and implicit-shift QR.
/// Deterministic: identical input bits yield identical output bits.
/// Throws NumericalError if the QR iteration exceeds its sweep cap.
SpectralDecomposition svd_thin(const Matrix& w, SvdStats* stats = nullptr);

/// Truncated randomized SVD (Gaussian sketch + subspace projection);
/// optional fast path for large matrices with small requested rank.
SpectralDecomposition svd_randomized(const Matrix& w, std::size_t rank, std::uint64_t seed,
                                     std::size_t oversample = 8, SvdStats* stats = nullptr);

/// Applies the sign convention in place; idempotent.
void canonicalize(SpectralDecomposition& d);

/// u * diag(s) * v^T.
Matrix reconstruct(const SpectralDecomposition& d);

/// Count of singular values above tol; default tol = max(rows, cols) * s[0] * 2^-52.
std::size_t numerical_rank(const Matrix& w, std::optional<double> tol = std::nullopt);

/// ||m^T m - I||_F for square-or-tall m.
double orthogonality_defect(const Matrix& m);

/// Canonical angles (radians, non-decreasing, within [0, pi/2]) between the
/// column spans of a and b. Both inputs must have orthonormal columns
/// (defect <= 1e-8) and equal row counts.
std::vector<double> principal_angles(const Matrix& a, const Matrix& b);

std::uint64_t fingerprint(const SpectralDecomposition& d);

} // namespace specadapt

#endif // SPECADAPT_SVD_HPP
