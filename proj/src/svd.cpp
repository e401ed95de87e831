#include "specadapt/svd.hpp"

#include "specadapt/errors.hpp"
#include "specadapt/rng.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace specadapt {

namespace {

constexpr double kEps = std::numeric_limits<double>::epsilon();

struct Workspace {
    std::uint64_t bytes = 0;
    void count(std::size_t doubles) { bytes += static_cast<std::uint64_t>(doubles) * sizeof(double); }
};

// Householder vector for x: returns beta with H x = beta * e1,
// H = I - tau * v * v^T, v[0] = 1 implicit, tail written back into x[1..].
// A zero tail leaves x untouched (tau = 0), which keeps diagonal and
// triangular inputs bit-exact through the bidiagonalization.
double make_householder(double* x, std::size_t len, double& tau) {
    tau = 0.0;
    if (len == 0) {
        return 0.0;
    }
    double sigma = 0.0;
    for (std::size_t i = 1; i < len; ++i) {
        sigma += x[i] * x[i];
    }
    if (sigma == 0.0) {
        return x[0];
    }
    const double mu = std::sqrt(x[0] * x[0] + sigma);
    const double beta = (x[0] >= 0.0) ? -mu : mu;
    const double v0 = x[0] - beta;
    tau = 2.0 * v0 * v0 / (sigma + v0 * v0);
    const double inv = 1.0 / v0;
    for (std::size_t i = 1; i < len; ++i) {
        x[i] *= inv;
    }
    x[0] = 1.0;
    return beta;
}

// Core decomposition for m >= n. Produces u (m x n), d (n), v (n x n).
// The singular-vector factors are accumulated transposed (rows = vectors)
// so that plane rotations and reflector updates run on contiguous memory.
void golub_kahan_reinsch(Matrix a, Matrix& u_out, std::vector<double>& d, Matrix& v_out, Workspace& ws,
                         std::size_t& qr_iterations) {
    const std::size_t m = a.rows();
    const std::size_t n = a.cols();
    ws.count(m * n); // working copy

    d.assign(n, 0.0);
    std::vector<double> e(n, 0.0);
    std::vector<double> tau_left(n, 0.0);
    std::vector<double> tau_right(n, 0.0);
    std::vector<double> col(m, 0.0);
    std::vector<double> w(n, 0.0);
    ws.count(5 * n + m);

    // Householder bidiagonalization; reflector tails stay stored in a.
    for (std::size_t k = 0; k < n; ++k) {
        const std::size_t col_len = m - k;
        for (std::size_t i = 0; i < col_len; ++i) {
            col[i] = a(k + i, k);
        }
        d[k] = make_householder(col.data(), col_len, tau_left[k]);
        for (std::size_t i = 0; i < col_len; ++i) {
            a(k + i, k) = col[i];
        }
        if (tau_left[k] != 0.0 && k + 1 < n) {
            // rank-1 update in two row-contiguous phases: w = A^T v, A -= tau v w^T
            for (std::size_t j = k + 1; j < n; ++j) {
                w[j] = a(k, j);
            }
            for (std::size_t i = 1; i < col_len; ++i) {
                const double vi = a(k + i, k);
                const double* arow = &a(k + i, k + 1);
                for (std::size_t j = k + 1; j < n; ++j) {
                    w[j] += vi * arow[j - k - 1];
                }
            }
            for (std::size_t j = k + 1; j < n; ++j) {
                a(k, j) -= tau_left[k] * w[j];
            }
            for (std::size_t i = 1; i < col_len; ++i) {
                const double f = tau_left[k] * a(k + i, k);
                double* arow = &a(k + i, k + 1);
                for (std::size_t j = k + 1; j < n; ++j) {
                    arow[j - k - 1] -= f * w[j];
                }
            }
        }

        if (k + 1 < n) {
            const std::size_t row_len = n - k - 1;
            e[k] = make_householder(&a(k, k + 1), row_len, tau_right[k]);
            if (tau_right[k] != 0.0) {
                const double* v = &a(k, k + 1);
                for (std::size_t i = k + 1; i < m; ++i) {
                    double* arow = &a(i, k + 1);
                    double acc = arow[0];
                    for (std::size_t j = 1; j < row_len; ++j) {
                        acc += v[j] * arow[j];
                    }
                    const double f = tau_right[k] * acc;
                    arow[0] -= f;
                    for (std::size_t j = 1; j < row_len; ++j) {
                        arow[j] -= f * v[j];
                    }
                }
            }
        }
    }

    // accumulate u^T (n x m): rows are left singular vectors
    Matrix ut(n, m);
    ws.count(n * m);
    for (std::size_t i = 0; i < n; ++i) {
        ut(i, i) = 1.0;
    }
    for (std::size_t k = n; k-- > 0;) {
        if (tau_left[k] == 0.0) {
            continue;
        }
        const std::size_t col_len = m - k;
        for (std::size_t r = k; r < n; ++r) {
            double* row = &ut(r, k);
            double acc = row[0];
            for (std::size_t i = 1; i < col_len; ++i) {
                acc += a(k + i, k) * row[i];
            }
            const double f = tau_left[k] * acc;
            row[0] -= f;
            for (std::size_t i = 1; i < col_len; ++i) {
                row[i] -= f * a(k + i, k);
            }
        }
    }

    // accumulate v^T (n x n): rows are right singular vectors
    Matrix vt = Matrix::identity(n);
    ws.count(n * n);
    if (n >= 2) {
        for (std::size_t k = n - 1; k-- > 0;) {
            if (tau_right[k] == 0.0) {
                continue;
            }
            const std::size_t row_len = n - k - 1;
            const double* v = &a(k, k + 1);
            for (std::size_t r = k + 1; r < n; ++r) {
                double* row = &vt(r, k + 1);
                double acc = row[0];
                for (std::size_t i = 1; i < row_len; ++i) {
                    acc += v[i] * row[i];
                }
                const double f = tau_right[k] * acc;
                row[0] -= f;
                for (std::size_t i = 1; i < row_len; ++i) {
                    row[i] -= f * v[i];
                }
            }
        }
    }

    // implicit-shift QR on the bidiagonal (d, e), rotations folded into u, v
    const double tiny = std::pow(2.0, -966.0);
    const std::size_t iteration_cap = 200 + 30 * n;
    std::size_t total_iter = 0;
    std::size_t iter = 0;
    std::size_t p = n;

    // factors are stored transposed, so a rotation of two singular vectors
    // is a contiguous two-row sweep
    auto rotate_rows = [](Matrix& mat, std::size_t ra, std::size_t rb, double cs, double sn) {
        double* pa = mat.row(ra).data();
        double* pb = mat.row(rb).data();
        const std::size_t len = mat.cols();
        for (std::size_t i = 0; i < len; ++i) {
            const double t = cs * pa[i] + sn * pb[i];
            pb[i] = -sn * pa[i] + cs * pb[i];
            pa[i] = t;
        }
    };

    while (p > 0) {
        std::ptrdiff_t split = -1;
        for (std::ptrdiff_t k = static_cast<std::ptrdiff_t>(p) - 2; k >= 0; --k) {
            const auto ku = static_cast<std::size_t>(k);
            if (std::abs(e[ku]) <= tiny + kEps * (std::abs(d[ku]) + std::abs(d[ku + 1]))) {
                e[ku] = 0.0;
                split = k;
                break;
            }
        }

        int kase;
        std::ptrdiff_t k = split;
        if (split == static_cast<std::ptrdiff_t>(p) - 2) {
            kase = 4;
        } else {
            std::ptrdiff_t ks;
            for (ks = static_cast<std::ptrdiff_t>(p) - 1; ks > split; --ks) {
                const auto ku = static_cast<std::size_t>(ks);
                // e[p-1] is always zero here (sentinel or zeroed at deflation)
                const double t = std::abs(e[ku]) + (ks != split + 1 ? std::abs(e[ku - 1]) : 0.0);
                if (std::abs(d[ku]) <= tiny + kEps * t) {
                    d[ku] = 0.0;
                    break;
                }
            }
            if (ks == split) {
                kase = 3;
            } else if (ks == static_cast<std::ptrdiff_t>(p) - 1) {
                kase = 1;
            } else {
                kase = 2;
                k = ks;
            }
        }
        const std::size_t lo = static_cast<std::size_t>(k + 1);

        switch (kase) {
        case 1: { // d[p-1] is zero: chase e[p-2] away with right rotations
            double f = e[p - 2];
            e[p - 2] = 0.0;
            for (std::size_t j = p - 1; j-- > lo;) {
                double t = std::hypot(d[j], f);
                const double cs = d[j] / t;
                const double sn = f / t;
                d[j] = t;
                if (j != lo) {
                    f = -sn * e[j - 1];
                    e[j - 1] = cs * e[j - 1];
                }
                rotate_rows(vt, j, p - 1, cs, sn);
            }
            break;
        }
        case 2: { // d[lo-1] is zero: annihilate e[lo-1] with left rotations
            double f = e[lo - 1];
            e[lo - 1] = 0.0;
            for (std::size_t j = lo; j < p; ++j) {
                double t = std::hypot(d[j], f);
                const double cs = d[j] / t;
                const double sn = f / t;
                d[j] = t;
                f = -sn * e[j];
                e[j] = cs * e[j];
                rotate_rows(ut, j, lo - 1, cs, sn);
            }
            break;
        }
        case 3: { // one implicit-shift QR step on the block [lo, p)
            const double scale = std::max({std::abs(d[p - 1]), std::abs(d[p - 2]), std::abs(e[p - 2]),
                                           std::abs(d[lo]), std::abs(e[lo])});
            const double sp = d[p - 1] / scale;
            const double spm1 = d[p - 2] / scale;
            const double epm1 = e[p - 2] / scale;
            const double sk = d[lo] / scale;
            const double ek = e[lo] / scale;
            const double b = ((spm1 + sp) * (spm1 - sp) + epm1 * epm1) / 2.0;
            const double c = (sp * epm1) * (sp * epm1);
            double shift = 0.0;
            if (b != 0.0 || c != 0.0) {
                shift = std::sqrt(b * b + c);
                if (b < 0.0) {
                    shift = -shift;
                }
                shift = c / (b + shift);
            }
            double f = (sk + sp) * (sk - sp) + shift;
            double g = sk * ek;

            for (std::size_t j = lo; j + 1 < p; ++j) {
                double t = std::hypot(f, g);
                double cs = f / t;
                double sn = g / t;
                if (j != lo) {
                    e[j - 1] = t;
                }
                f = cs * d[j] + sn * e[j];
                e[j] = cs * e[j] - sn * d[j];
                g = sn * d[j + 1];
                d[j + 1] = cs * d[j + 1];
                rotate_rows(vt, j, j + 1, cs, sn);

                t = std::hypot(f, g);
                cs = f / t;
                sn = g / t;
                d[j] = t;
                f = cs * e[j] + sn * d[j + 1];
                d[j + 1] = -sn * e[j] + cs * d[j + 1];
                g = sn * e[j + 1];
                e[j + 1] = cs * e[j + 1];
                rotate_rows(ut, j, j + 1, cs, sn);
            }
            e[p - 2] = f;
            ++iter;
            ++total_iter;
            if (iter > iteration_cap) {
                throw NumericalError("svd_thin: QR iteration did not converge for " + std::to_string(m) + "x" +
                                     std::to_string(n) + " matrix after " + std::to_string(total_iter) + " sweeps");
            }
            break;
        }
        case 4: { // d[lo] converged: fix sign, bubble into sorted position
            std::size_t j = lo;
            if (d[j] <= 0.0) {
                d[j] = (d[j] < 0.0) ? -d[j] : 0.0;
                for (double& x : vt.row(j)) {
                    x = -x;
                }
            }
            while (j + 1 < n) {
                if (d[j] >= d[j + 1]) {
                    break;
                }
                std::swap(d[j], d[j + 1]);
                std::swap_ranges(vt.row(j).begin(), vt.row(j).end(), vt.row(j + 1).begin());
                std::swap_ranges(ut.row(j).begin(), ut.row(j).end(), ut.row(j + 1).begin());
                ++j;
            }
            iter = 0;
            --p;
            break;
        }
        }
    }

    qr_iterations = total_iter;
    u_out = transpose(ut);
    v_out = transpose(vt);
}

} // namespace

void canonicalize(SpectralDecomposition& d) {
    const std::size_t k = d.k();
    for (std::size_t j = 0; j < k; ++j) {
        std::size_t arg = 0;
        double best = std::abs(d.u(0, j));
        for (std::size_t i = 1; i < d.u.rows(); ++i) {
            const double v = std::abs(d.u(i, j));
            if (v > best) {
                best = v;
                arg = i;
            }
        }
        if (d.u(arg, j) < 0.0) {
            for (std::size_t i = 0; i < d.u.rows(); ++i) {
                d.u(i, j) = -d.u(i, j);
            }
            for (std::size_t i = 0; i < d.v.rows(); ++i) {
                d.v(i, j) = -d.v(i, j);
            }
        }
    }
    d.canonical = true;
}

SpectralDecomposition svd_thin(const Matrix& w, SvdStats* stats) {
    if (w.rows() == 0 || w.cols() == 0) {
        throw std::invalid_argument("svd_thin: empty matrix");
    }

    Workspace ws;
    std::size_t iterations = 0;
    SpectralDecomposition out;

    if (w.rows() >= w.cols()) {
        golub_kahan_reinsch(w, out.u, out.s, out.v, ws, iterations);
    } else {
        Matrix wt = transpose(w);
        ws.count(wt.size());
        Matrix ut;
        Matrix vt;
        golub_kahan_reinsch(std::move(wt), ut, out.s, vt, ws, iterations);
        out.u = std::move(vt);
        out.v = std::move(ut);
    }
    canonicalize(out);

    if (stats != nullptr) {
        stats->workspace_bytes = ws.bytes;
        stats->qr_iterations = iterations;
    }
    return out;
}

SpectralDecomposition svd_randomized(const Matrix& w, std::size_t rank, std::uint64_t seed, std::size_t oversample,
                                     SvdStats* stats) {
    const std::size_t k_full = std::min(w.rows(), w.cols());
    if (rank == 0 || rank > k_full) {
        throw std::invalid_argument("svd_randomized: rank must be in [1, min(rows, cols)]");
    }
    const std::size_t sketch = std::min(k_full, rank + oversample);

    Workspace ws;
    Rng rng(Rng::derive(seed, 0x5ad));
    Matrix omega = Matrix::random_gaussian(w.cols(), sketch, rng);
    Matrix y = w * omega;
    ws.count(omega.size() + y.size());

    // two-pass modified Gram-Schmidt for a stable orthonormal range basis
    for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t j = 0; j < y.cols(); ++j) {
            std::vector<double> col = y.column(j);
            for (std::size_t i = 0; i < j; ++i) {
                const std::vector<double> prev = y.column(i);
                const double proj = dot(col, prev);
                for (std::size_t t = 0; t < col.size(); ++t) {
                    col[t] -= proj * prev[t];
                }
            }
            const double nrm = norm2(col);
            if (nrm > 0.0) {
                for (double& x : col) {
                    x /= nrm;
                }
            }
            y.set_column(j, col);
        }
    }

    Matrix b = multiply_at(y, w); // sketch x cols
    ws.count(b.size());
    SvdStats inner;
    SpectralDecomposition small = svd_thin(b, &inner);
    ws.bytes += inner.workspace_bytes;

    SpectralDecomposition out;
    Matrix u_full = y * small.u;
    out.u = u_full.columns(0, rank);
    out.v = small.v.columns(0, rank);
    out.s.assign(small.s.begin(), small.s.begin() + static_cast<std::ptrdiff_t>(rank));
    canonicalize(out);

    if (stats != nullptr) {
        stats->workspace_bytes = ws.bytes;
        stats->qr_iterations = inner.qr_iterations;
    }
    return out;
}

Matrix reconstruct(const SpectralDecomposition& d) {
    Matrix us = d.u;
    for (std::size_t i = 0; i < us.rows(); ++i) {
        for (std::size_t j = 0; j < us.cols(); ++j) {
            us(i, j) *= d.s[j];
        }
    }
    return multiply_bt(us, d.v);
}

std::size_t numerical_rank(const Matrix& w, std::optional<double> tol) {
    const SpectralDecomposition d = svd_thin(w);
    const double threshold =
        tol.value_or(static_cast<double>(std::max(w.rows(), w.cols())) * (d.s.empty() ? 0.0 : d.s[0]) * kEps);
    std::size_t rank = 0;
    for (double s : d.s) {
        if (s > threshold) {
            ++rank;
        }
    }
    return rank;
}

double orthogonality_defect(const Matrix& m) {
    Matrix g = multiply_at(m, m);
    for (std::size_t i = 0; i < g.rows(); ++i) {
        g(i, i) -= 1.0;
    }
    return frobenius_norm(g);
}

std::vector<double> principal_angles(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) {
        throw std::invalid_argument("principal_angles: row counts differ");
    }
    constexpr double kDefectLimit = 1e-8;
    const double defect_a = orthogonality_defect(a);
    if (defect_a > kDefectLimit) {
        throw std::invalid_argument("principal_angles: first basis is not orthonormal (defect " +
                                    std::to_string(defect_a) + ")");
    }
    const double defect_b = orthogonality_defect(b);
    if (defect_b > kDefectLimit) {
        throw std::invalid_argument("principal_angles: second basis is not orthonormal (defect " +
                                    std::to_string(defect_b) + ")");
    }

    const Matrix cross = multiply_at(a, b);
    const SpectralDecomposition d = svd_thin(cross);
    std::vector<double> angles(d.s.size());
    for (std::size_t i = 0; i < d.s.size(); ++i) {
        angles[i] = std::acos(std::clamp(d.s[i], 0.0, 1.0));
    }
    // cosines are non-increasing, so angles come out non-decreasing
    return angles;
}

std::uint64_t fingerprint(const SpectralDecomposition& d) {
    std::uint64_t h = fingerprint(d.u);
    h ^= 0x9e3779b97f4a7c15ULL + fingerprint(d.v) + (h << 6) + (h >> 2);
    std::uint64_t hs = 0xcbf29ce484222325ULL;
    for (double x : d.s) {
        const auto bits = std::bit_cast<std::uint64_t>(x);
        for (int i = 0; i < 8; ++i) {
            hs ^= (bits >> (8 * i)) & 0xffULL;
            hs *= 0x100000001b3ULL;
        }
    }
    h ^= 0x9e3779b97f4a7c15ULL + hs + (h << 6) + (h >> 2);
    return h;
}

} // namespace specadapt
