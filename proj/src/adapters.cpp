#include "specadapt/adapters.hpp"

#include "specadapt/errors.hpp"
#include "specadapt/rng.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <set>
#include <stdexcept>
#include <string>

namespace specadapt {

namespace {

void check_shape(bool ok, const std::string& what) {
    if (!ok) {
        throw std::invalid_argument(what);
    }
}

} // namespace

std::string_view kind_name(AdapterKind kind) {
    switch (kind) {
    case AdapterKind::SpectralA:
        return "spectral_a";
    case AdapterKind::SpectralR:
        return "spectral_r";
    case AdapterKind::LoRA:
        return "lora";
    case AdapterKind::OFT:
        return "oft";
    case AdapterKind::SVDiff:
        return "svdiff";
    case AdapterKind::VeRA:
        return "vera";
    case AdapterKind::LiDB:
        return "lidb";
    case AdapterKind::DoRAVector:
        return "dora_vector";
    }
    throw std::invalid_argument("kind_name: unknown kind");
}

AdapterKind kind_from_name(std::string_view name) {
    for (AdapterKind kind : kAllKinds) {
        if (kind_name(kind) == name) {
            return kind;
        }
    }
    throw FormatError("unknown adapter kind tag: '" + std::string(name) + "'");
}

BaseWeight BaseWeight::dense(Matrix w) {
    BaseWeight base;
    base.w = std::move(w);
    return base;
}

BaseWeight BaseWeight::spectral(const Matrix& w) {
    BaseWeight base;
    base.w = w;
    base.decomposition = svd_thin(w);
    return base;
}

BaseWeight BaseWeight::from_decomposition(SpectralDecomposition d) {
    BaseWeight base;
    base.w = reconstruct(d);
    base.decomposition = std::move(d);
    return base;
}

const SpectralDecomposition& BaseWeight::svd() const {
    if (!decomposition.has_value()) {
        throw std::invalid_argument("BaseWeight: spectral adapter requires a decomposed base");
    }
    return *decomposition;
}

std::uint64_t BaseWeight::fingerprint() const {
    return decomposition.has_value() ? specadapt::fingerprint(*decomposition) : specadapt::fingerprint(w);
}

std::vector<std::size_t> oft_block_sizes(std::size_t n, std::size_t num_blocks) {
    check_shape(num_blocks >= 1 && num_blocks <= n, "oft: num_blocks must be in [1, n]");
    const std::size_t block = (n + num_blocks - 1) / num_blocks; // ceil(n / r)
    if ((num_blocks - 1) * block >= n) {
        throw std::invalid_argument("oft: " + std::to_string(num_blocks) + " blocks not achievable for n = " +
                                    std::to_string(n) + " (final block would be empty)");
    }
    std::vector<std::size_t> sizes(num_blocks, block);
    sizes.back() = n - (num_blocks - 1) * block;
    return sizes;
}

AdapterState init_adapter(AdapterKind kind, const BaseWeight& base, std::size_t rank, ColumnSelect columns,
                          std::uint64_t seed, const AdapterOptions& options) {
    const std::size_t n = base.rows();
    const std::size_t m = base.cols();

    AdapterState state;
    state.kind = kind;
    state.rank = rank;
    state.base_rows = n;
    state.base_cols = m;
    state.seed = seed;
    state.base_fingerprint = base.fingerprint();
    state.options = options;

    switch (kind) {
    case AdapterKind::SpectralA: {
        const std::size_t k = base.svd().k();
        check_shape(columns.count == rank, "spectral_a: columns.count must equal rank");
        check_shape(columns.start + columns.count <= k, "spectral_a: column range exceeds k");
        if (2 * rank > std::min(n, m)) {
            std::cerr << "warning: spectral_a with 2*rank > min(n, m) loses the rank-capacity guarantee (rank="
                      << rank << ", base " << n << "x" << m << ")\n";
        }
        state.payload = SpectralAState{Matrix(n, rank), Matrix(m, rank), columns};
        break;
    }
    case AdapterKind::SpectralR: {
        const std::size_t k = base.svd().k();
        check_shape(columns.count == rank, "spectral_r: columns.count must equal rank");
        check_shape(columns.start + columns.count <= k, "spectral_r: column range exceeds k");
        state.payload = SpectralRState{Matrix(rank, rank), Matrix(rank, rank), columns};
        break;
    }
    case AdapterKind::LoRA: {
        LoRAState lora;
        Rng rng(Rng::derive(seed, 1));
        const double stddev = rank > 0 ? 1.0 / std::sqrt(static_cast<double>(rank)) : 1.0;
        lora.a = Matrix::random_gaussian(n, rank, rng, stddev);
        lora.b = Matrix(m, rank);
        lora.scale = options.lora_alpha.has_value() && rank > 0
                         ? *options.lora_alpha / static_cast<double>(rank)
                         : 1.0;
        state.payload = std::move(lora);
        break;
    }
    case AdapterKind::OFT: {
        check_shape(rank >= 1, "oft: num_blocks must be >= 1");
        OFTState oft;
        oft.num_blocks = rank;
        oft.shared = options.oft_shared;
        oft.block_sizes = oft_block_sizes(n, rank);
        const std::size_t lead = oft.block_sizes.front();
        if (oft.shared) {
            oft.raw_blocks.emplace_back(lead, lead);
        } else {
            for (std::size_t b : oft.block_sizes) {
                oft.raw_blocks.emplace_back(b, b);
            }
        }
        state.payload = std::move(oft);
        break;
    }
    case AdapterKind::SVDiff: {
        state.payload = SVDiffState{std::vector<double>(base.svd().k(), 0.0)};
        state.rank = base.svd().k();
        break;
    }
    case AdapterKind::VeRA: {
        check_shape(rank >= 1, "vera: rank must be >= 1");
        VeRAState vera;
        Rng rng_a(Rng::derive(seed, 1));
        Rng rng_b(Rng::derive(seed, 2));
        vera.frozen_a = Matrix::random_gaussian(n, rank, rng_a);
        vera.frozen_b = Matrix::random_gaussian(m, rank, rng_b);
        vera.lambda_a.assign(n, 0.1);
        vera.lambda_b.assign(rank, 0.0);
        state.payload = std::move(vera);
        break;
    }
    case AdapterKind::LiDB: {
        LiDBState lidb;
        Rng rng_a(Rng::derive(seed, 1));
        Rng rng_b(Rng::derive(seed, 2));
        Rng rng_t(Rng::derive(seed, 3));
        lidb.frozen_a_aux = Matrix::random_gaussian(n, options.lidb_a, rng_a, 1.0 / std::sqrt(static_cast<double>(options.lidb_a)));
        lidb.frozen_b_aux = Matrix::random_gaussian(options.lidb_b, m, rng_b, 1.0 / std::sqrt(static_cast<double>(options.lidb_b)));
        lidb.a = Matrix(options.lidb_a, rank);
        const double stddev = rank > 0 ? 1.0 / std::sqrt(static_cast<double>(rank)) : 1.0;
        lidb.b_t = Matrix::random_gaussian(options.lidb_b, rank, rng_t, stddev);
        state.payload = std::move(lidb);
        break;
    }
    case AdapterKind::DoRAVector: {
        check_shape(m == 1, "dora_vector: base must be an n x 1 vector weight");
        DoRAVectorState dora;
        dora.magnitude = frobenius_norm(base.w);
        check_shape(dora.magnitude > 0.0, "dora_vector: base vector must be nonzero");
        dora.direction_b.assign(n, 0.0);
        dora.direction_a = 0.0;
        dora.a_prime.assign(n, 0.0);
        dora.b_prime = 0.0;
        state.payload = std::move(dora);
        break;
    }
    }
    return state;
}

Matrix cayley(const Matrix& raw) {
    const std::size_t r = raw.rows();
    check_shape(raw.cols() == r, "cayley: generator must be square");
    if (r == 0) {
        return Matrix(0, 0);
    }
    Matrix i_plus_q = Matrix::identity(r);
    Matrix i_minus_q = Matrix::identity(r);
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < r; ++j) {
            const double q = (raw(i, j) - raw(j, i)) / 2.0;
            i_plus_q(i, j) += q;
            i_minus_q(i, j) -= q;
        }
    }
    // (I + Q) and (I - Q) commute, so (I - Q)^{-1}(I + Q) is the same
    // rotation; I - Q is invertible for every skew Q, and a solver failure
    // here means corrupted (non-finite) input.
    return solve(i_minus_q, i_plus_q);
}

Matrix cayley_backward(const Matrix& raw, const Matrix& rotation, const Matrix& grad_rotation) {
    const std::size_t r = raw.rows();
    if (r == 0) {
        return Matrix(0, 0);
    }
    Matrix i_minus_q = Matrix::identity(r);
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < r; ++j) {
            i_minus_q(i, j) -= (raw(i, j) - raw(j, i)) / 2.0;
        }
    }
    Matrix i_plus_r = rotation;
    for (std::size_t i = 0; i < r; ++i) {
        i_plus_r(i, i) += 1.0;
    }
    // dL/dQ = (I + R)^T G (I - Q)^{-T}; then dL/dA = (M - M^T)/2
    const Matrix t1 = multiply_at(i_plus_r, grad_rotation);
    const Matrix m = transpose(solve(i_minus_q, transpose(t1)));
    Matrix out(r, r);
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < r; ++j) {
            out(i, j) = (m(i, j) - m(j, i)) / 2.0;
        }
    }
    return out;
}

Matrix oft_multiplier(const OFTState& state, std::size_t n) {
    Matrix out(n, n);
    std::size_t row = 0;
    for (std::size_t b = 0; b < state.block_sizes.size(); ++b) {
        const std::size_t size = state.block_sizes[b];
        const Matrix& raw_full = state.shared ? state.raw_blocks.front() : state.raw_blocks[b];
        Matrix raw = raw_full;
        if (raw.rows() != size) {
            // short final block under sharing: principal part of the generator
            Matrix cut(size, size);
            for (std::size_t i = 0; i < size; ++i) {
                for (std::size_t j = 0; j < size; ++j) {
                    cut(i, j) = raw_full(i, j);
                }
            }
            raw = std::move(cut);
        }
        const Matrix rot = cayley(raw);
        for (std::size_t i = 0; i < size; ++i) {
            for (std::size_t j = 0; j < size; ++j) {
                out(row + i, row + j) = rot(i, j);
            }
        }
        row += size;
    }
    return out;
}

std::pair<Matrix, Matrix> spectral_factors(const SpectralDecomposition& base, const AdapterState& state) {
    switch (state.kind) {
    case AdapterKind::SpectralA: {
        const auto& s = state.as<SpectralAState>();
        check_shape(s.a_u.rows() == base.rows() && s.a_v.rows() == base.cols(),
                    "spectral_a: factor row counts do not match base");
        Matrix u_hat = base.u;
        Matrix v_hat = base.v;
        u_hat.add_columns(s.columns.start, s.a_u);
        v_hat.add_columns(s.columns.start, s.a_v);
        return {std::move(u_hat), std::move(v_hat)};
    }
    case AdapterKind::SpectralR: {
        const auto& s = state.as<SpectralRState>();
        Matrix u_hat = base.u;
        Matrix v_hat = base.v;
        if (s.columns.count > 0) {
            u_hat.set_columns(s.columns.start,
                              base.u.columns(s.columns.start, s.columns.count) * cayley(s.raw_u));
            v_hat.set_columns(s.columns.start,
                              base.v.columns(s.columns.start, s.columns.count) * cayley(s.raw_v));
        }
        return {std::move(u_hat), std::move(v_hat)};
    }
    default:
        throw std::invalid_argument("spectral_factors: state is not a spectral-vector adapter");
    }
}

Matrix effective_weight(const BaseWeight& base, const AdapterState& state) {
    check_shape(state.base_rows == base.rows() && state.base_cols == base.cols(),
                "effective_weight: adapter was initialized for a different base shape");
    const std::size_t n = base.rows();

    switch (state.kind) {
    case AdapterKind::SpectralA:
    case AdapterKind::SpectralR: {
        const SpectralDecomposition& d = base.svd();
        auto [u_hat, v_hat] = spectral_factors(d, state);
        for (std::size_t i = 0; i < u_hat.rows(); ++i) {
            for (std::size_t j = 0; j < u_hat.cols(); ++j) {
                u_hat(i, j) *= d.s[j];
            }
        }
        return multiply_bt(u_hat, v_hat);
    }
    case AdapterKind::LoRA: {
        const auto& s = state.as<LoRAState>();
        Matrix out = base.w;
        out.add_scaled(multiply_bt(s.a, s.b), s.scale);
        return out;
    }
    case AdapterKind::OFT: {
        const auto& s = state.as<OFTState>();
        // blockwise product keeps the multiplier implicit
        Matrix out(n, base.cols());
        std::size_t row = 0;
        for (std::size_t b = 0; b < s.block_sizes.size(); ++b) {
            const std::size_t size = s.block_sizes[b];
            const Matrix& raw_full = s.shared ? s.raw_blocks.front() : s.raw_blocks[b];
            Matrix raw(size, size);
            for (std::size_t i = 0; i < size; ++i) {
                for (std::size_t j = 0; j < size; ++j) {
                    raw(i, j) = raw_full(i, j);
                }
            }
            const Matrix rot = cayley(raw);
            for (std::size_t i = 0; i < size; ++i) {
                for (std::size_t c = 0; c < base.cols(); ++c) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < size; ++j) {
                        acc += rot(i, j) * base.w(row + j, c);
                    }
                    out(row + i, c) = acc;
                }
            }
            row += size;
        }
        return out;
    }
    case AdapterKind::SVDiff: {
        const auto& s = state.as<SVDiffState>();
        const SpectralDecomposition& d = base.svd();
        check_shape(s.delta_s.size() == d.k(), "svdiff: delta_s length mismatch");
        Matrix us = d.u;
        for (std::size_t j = 0; j < d.k(); ++j) {
            const double shifted = std::max(d.s[j] + s.delta_s[j], 0.0);
            for (std::size_t i = 0; i < us.rows(); ++i) {
                us(i, j) *= shifted;
            }
        }
        return multiply_bt(us, d.v);
    }
    case AdapterKind::VeRA: {
        const auto& s = state.as<VeRAState>();
        Matrix out = base.w;
        const std::size_t r = s.lambda_b.size();
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < base.cols(); ++j) {
                double acc = 0.0;
                for (std::size_t t = 0; t < r; ++t) {
                    acc += s.frozen_a(i, t) * s.lambda_b[t] * s.frozen_b(j, t);
                }
                out(i, j) += s.lambda_a[i] * acc;
            }
        }
        return out;
    }
    case AdapterKind::LiDB: {
        const auto& s = state.as<LiDBState>();
        Matrix out = base.w;
        out += (s.frozen_a_aux * s.a) * multiply_at(s.b_t, s.frozen_b_aux);
        return out;
    }
    case AdapterKind::DoRAVector: {
        const auto& s = state.as<DoRAVectorState>();
        const std::vector<double> w0 = base.w.column(0);
        const std::vector<double> out = dora_vector_forward(w0, s.magnitude, s.direction_b, s.direction_a);
        return Matrix::column_vector(out);
    }
    }
    throw std::invalid_argument("effective_weight: unknown kind");
}

Matrix merge(const BaseWeight& base, const AdapterState& state) {
    return effective_weight(base, state);
}

SpectralDecomposition re_decompose_rotated(const SpectralDecomposition& base, const AdapterState& state) {
    if (state.kind != AdapterKind::SpectralR) {
        throw std::invalid_argument("re_decompose_rotated: requires a spectral_r state");
    }
    auto [u_hat, v_hat] = spectral_factors(base, state);
    SpectralDecomposition out;
    out.u = std::move(u_hat);
    out.s = base.s;
    out.v = std::move(v_hat);

    const auto& s = state.as<SpectralRState>();
    bool degenerate_block = true;
    for (std::size_t j = 1; j < s.columns.count; ++j) {
        if (base.s[s.columns.start + j] != base.s[s.columns.start]) {
            degenerate_block = false;
            break;
        }
    }
    const bool identity_rotation = max_abs(s.raw_u - transpose(s.raw_u)) == 0.0 &&
                                   max_abs(s.raw_v - transpose(s.raw_v)) == 0.0;
    out.canonical = identity_rotation || s.columns.count == 0 || degenerate_block;
    return out;
}

std::size_t trainable_param_count(AdapterKind kind, std::size_t n, std::size_t m, std::size_t rank,
                                  const AdapterOptions& options) {
    switch (kind) {
    case AdapterKind::SpectralA:
    case AdapterKind::LoRA:
        return (n + m) * rank;
    case AdapterKind::SpectralR:
        return 2 * rank * rank;
    case AdapterKind::OFT: {
        const std::vector<std::size_t> sizes = oft_block_sizes(n, rank);
        if (options.oft_shared) {
            return sizes.front() * sizes.front();
        }
        std::size_t total = 0;
        for (std::size_t b : sizes) {
            total += b * b;
        }
        return total;
    }
    case AdapterKind::SVDiff:
        return std::min(n, m);
    case AdapterKind::VeRA:
        return n + rank;
    case AdapterKind::LiDB:
        return (options.lidb_a + options.lidb_b) * rank;
    case AdapterKind::DoRAVector:
        return n + 2;
    }
    throw std::invalid_argument("trainable_param_count: unknown kind");
}

std::vector<std::size_t> available_budgets(AdapterKind kind, std::size_t n, std::size_t m, std::size_t max_rank,
                                           const AdapterOptions& options) {
    std::set<std::size_t> budgets;
    switch (kind) {
    case AdapterKind::SVDiff:
        budgets.insert(std::min(n, m));
        break;
    case AdapterKind::DoRAVector:
        budgets.insert(n + 2);
        break;
    case AdapterKind::OFT:
        for (std::size_t r = 1; r <= n; ++r) {
            if (n % r == 0) {
                budgets.insert(trainable_param_count(kind, n, m, r, options));
            }
        }
        break;
    default:
        for (std::size_t r = 1; r <= max_rank; ++r) {
            budgets.insert(trainable_param_count(kind, n, m, r, options));
        }
        break;
    }
    return {budgets.begin(), budgets.end()};
}

std::string budget_scaling(AdapterKind kind) {
    switch (kind) {
    case AdapterKind::SpectralA:
        return "(n+m)r ~ n";
    case AdapterKind::SpectralR:
        return "2r^2 ~ r";
    case AdapterKind::LoRA:
        return "(n+m)r ~ n";
    case AdapterKind::OFT:
        return "ceil(n/r)^2 ~ n/r";
    case AdapterKind::SVDiff:
        return "min(n,m) ~ n";
    case AdapterKind::VeRA:
        return "n+r ~ n";
    case AdapterKind::LiDB:
        return "(a+b)r ~ r";
    case AdapterKind::DoRAVector:
        return "n+2 ~ n";
    }
    return {};
}

namespace {

template <typename Fn>
void visit_trainable(const AdapterState& state, Fn&& fn) {
    switch (state.kind) {
    case AdapterKind::SpectralA: {
        const auto& s = state.as<SpectralAState>();
        fn(s.a_u.data());
        fn(s.a_v.data());
        break;
    }
    case AdapterKind::SpectralR: {
        const auto& s = state.as<SpectralRState>();
        fn(s.raw_u.data());
        fn(s.raw_v.data());
        break;
    }
    case AdapterKind::LoRA: {
        const auto& s = state.as<LoRAState>();
        fn(s.a.data());
        fn(s.b.data());
        break;
    }
    case AdapterKind::OFT: {
        const auto& s = state.as<OFTState>();
        for (const Matrix& blk : s.raw_blocks) {
            fn(blk.data());
        }
        break;
    }
    case AdapterKind::SVDiff: {
        const auto& s = state.as<SVDiffState>();
        fn(std::span<const double>(s.delta_s));
        break;
    }
    case AdapterKind::VeRA: {
        const auto& s = state.as<VeRAState>();
        fn(std::span<const double>(s.lambda_a));
        fn(std::span<const double>(s.lambda_b));
        break;
    }
    case AdapterKind::LiDB: {
        const auto& s = state.as<LiDBState>();
        fn(s.a.data());
        fn(s.b_t.data());
        break;
    }
    case AdapterKind::DoRAVector: {
        const auto& s = state.as<DoRAVectorState>();
        fn(std::span<const double>(&s.magnitude, 1));
        fn(std::span<const double>(s.direction_b));
        fn(std::span<const double>(&s.direction_a, 1));
        break;
    }
    }
}

template <typename Fn>
void visit_trainable_mut(AdapterState& state, Fn&& fn) {
    switch (state.kind) {
    case AdapterKind::SpectralA: {
        auto& s = state.as<SpectralAState>();
        fn(s.a_u.data());
        fn(s.a_v.data());
        break;
    }
    case AdapterKind::SpectralR: {
        auto& s = state.as<SpectralRState>();
        fn(s.raw_u.data());
        fn(s.raw_v.data());
        break;
    }
    case AdapterKind::LoRA: {
        auto& s = state.as<LoRAState>();
        fn(s.a.data());
        fn(s.b.data());
        break;
    }
    case AdapterKind::OFT: {
        auto& s = state.as<OFTState>();
        for (Matrix& blk : s.raw_blocks) {
            fn(blk.data());
        }
        break;
    }
    case AdapterKind::SVDiff: {
        auto& s = state.as<SVDiffState>();
        fn(std::span<double>(s.delta_s));
        break;
    }
    case AdapterKind::VeRA: {
        auto& s = state.as<VeRAState>();
        fn(std::span<double>(s.lambda_a));
        fn(std::span<double>(s.lambda_b));
        break;
    }
    case AdapterKind::LiDB: {
        auto& s = state.as<LiDBState>();
        fn(s.a.data());
        fn(s.b_t.data());
        break;
    }
    case AdapterKind::DoRAVector: {
        auto& s = state.as<DoRAVectorState>();
        fn(std::span<double>(&s.magnitude, 1));
        fn(std::span<double>(s.direction_b));
        fn(std::span<double>(&s.direction_a, 1));
        break;
    }
    }
}

} // namespace

std::size_t num_trainable(const AdapterState& state) {
    std::size_t total = 0;
    visit_trainable(state, [&total](std::span<const double> block) { total += block.size(); });
    return total;
}

void pack_params(const AdapterState& state, std::span<double> out) {
    std::size_t offset = 0;
    visit_trainable(state, [&](std::span<const double> block) {
        std::copy(block.begin(), block.end(), out.begin() + static_cast<std::ptrdiff_t>(offset));
        offset += block.size();
    });
    if (offset != out.size()) {
        throw std::invalid_argument("pack_params: buffer size mismatch");
    }
}

void unpack_params(AdapterState& state, std::span<const double> in) {
    std::size_t offset = 0;
    visit_trainable_mut(state, [&](std::span<double> block) {
        std::copy(in.begin() + static_cast<std::ptrdiff_t>(offset),
                  in.begin() + static_cast<std::ptrdiff_t>(offset + block.size()), block.begin());
        offset += block.size();
    });
    if (offset != in.size()) {
        throw std::invalid_argument("unpack_params: buffer size mismatch");
    }
}

std::vector<TensorRef> tensor_layout(const AdapterState& state) {
    std::vector<TensorRef> out;
    switch (state.kind) {
    case AdapterKind::SpectralA: {
        const auto& s = state.as<SpectralAState>();
        out.push_back({"a_u", s.a_u.rows(), s.a_u.cols(), false});
        out.push_back({"a_v", s.a_v.rows(), s.a_v.cols(), false});
        break;
    }
    case AdapterKind::SpectralR: {
        const auto& s = state.as<SpectralRState>();
        out.push_back({"raw_u", s.raw_u.rows(), s.raw_u.cols(), false});
        out.push_back({"raw_v", s.raw_v.rows(), s.raw_v.cols(), false});
        break;
    }
    case AdapterKind::LoRA: {
        const auto& s = state.as<LoRAState>();
        out.push_back({"a", s.a.rows(), s.a.cols(), false});
        out.push_back({"b", s.b.rows(), s.b.cols(), false});
        break;
    }
    case AdapterKind::OFT: {
        const auto& s = state.as<OFTState>();
        for (std::size_t i = 0; i < s.raw_blocks.size(); ++i) {
            out.push_back({"raw_block_" + std::to_string(i), s.raw_blocks[i].rows(), s.raw_blocks[i].cols(), false});
        }
        break;
    }
    case AdapterKind::SVDiff: {
        const auto& s = state.as<SVDiffState>();
        out.push_back({"delta_s", 1, s.delta_s.size(), false});
        break;
    }
    case AdapterKind::VeRA: {
        const auto& s = state.as<VeRAState>();
        out.push_back({"lambda_a", 1, s.lambda_a.size(), false});
        out.push_back({"lambda_b", 1, s.lambda_b.size(), false});
        out.push_back({"frozen_a", s.frozen_a.rows(), s.frozen_a.cols(), true});
        out.push_back({"frozen_b", s.frozen_b.rows(), s.frozen_b.cols(), true});
        break;
    }
    case AdapterKind::LiDB: {
        const auto& s = state.as<LiDBState>();
        out.push_back({"a", s.a.rows(), s.a.cols(), false});
        out.push_back({"b_t", s.b_t.rows(), s.b_t.cols(), false});
        out.push_back({"frozen_a_aux", s.frozen_a_aux.rows(), s.frozen_a_aux.cols(), true});
        out.push_back({"frozen_b_aux", s.frozen_b_aux.rows(), s.frozen_b_aux.cols(), true});
        break;
    }
    case AdapterKind::DoRAVector: {
        const auto& s = state.as<DoRAVectorState>();
        out.push_back({"magnitude", 1, 1, false});
        out.push_back({"direction_b", s.direction_b.size(), 1, false});
        out.push_back({"direction_a", 1, 1, false});
        out.push_back({"a_prime", s.a_prime.size(), 1, true});
        out.push_back({"b_prime", 1, 1, true});
        break;
    }
    }
    return out;
}

std::vector<Matrix> tensor_values(const AdapterState& state) {
    std::vector<Matrix> out;
    auto vec_matrix = [](const std::vector<double>& v, std::size_t rows, std::size_t cols) {
        return Matrix(rows, cols, std::vector<double>(v.begin(), v.end()));
    };
    switch (state.kind) {
    case AdapterKind::SpectralA: {
        const auto& s = state.as<SpectralAState>();
        out = {s.a_u, s.a_v};
        break;
    }
    case AdapterKind::SpectralR: {
        const auto& s = state.as<SpectralRState>();
        out = {s.raw_u, s.raw_v};
        break;
    }
    case AdapterKind::LoRA: {
        const auto& s = state.as<LoRAState>();
        out = {s.a, s.b};
        break;
    }
    case AdapterKind::OFT: {
        const auto& s = state.as<OFTState>();
        out = s.raw_blocks;
        break;
    }
    case AdapterKind::SVDiff: {
        const auto& s = state.as<SVDiffState>();
        out = {vec_matrix(s.delta_s, 1, s.delta_s.size())};
        break;
    }
    case AdapterKind::VeRA: {
        const auto& s = state.as<VeRAState>();
        out = {vec_matrix(s.lambda_a, 1, s.lambda_a.size()), vec_matrix(s.lambda_b, 1, s.lambda_b.size()),
               s.frozen_a, s.frozen_b};
        break;
    }
    case AdapterKind::LiDB: {
        const auto& s = state.as<LiDBState>();
        out = {s.a, s.b_t, s.frozen_a_aux, s.frozen_b_aux};
        break;
    }
    case AdapterKind::DoRAVector: {
        const auto& s = state.as<DoRAVectorState>();
        out = {Matrix{{s.magnitude}}, vec_matrix(s.direction_b, s.direction_b.size(), 1), Matrix{{s.direction_a}},
               vec_matrix(s.a_prime, s.a_prime.size(), 1), Matrix{{s.b_prime}}};
        break;
    }
    }
    return out;
}

void set_tensor_values(AdapterState& state, const std::vector<Matrix>& values) {
    const std::vector<TensorRef> layout = tensor_layout(state);
    if (values.size() != layout.size()) {
        throw FormatError("adapter tensors: expected " + std::to_string(layout.size()) + " tensors, got " +
                          std::to_string(values.size()));
    }
    for (std::size_t i = 0; i < layout.size(); ++i) {
        if (values[i].rows() != layout[i].rows || values[i].cols() != layout[i].cols) {
            throw FormatError("adapter tensor '" + layout[i].name + "': shape mismatch");
        }
    }
    auto to_vec = [](const Matrix& m) { return std::vector<double>(m.data().begin(), m.data().end()); };
    switch (state.kind) {
    case AdapterKind::SpectralA: {
        auto& s = state.as<SpectralAState>();
        s.a_u = values[0];
        s.a_v = values[1];
        break;
    }
    case AdapterKind::SpectralR: {
        auto& s = state.as<SpectralRState>();
        s.raw_u = values[0];
        s.raw_v = values[1];
        break;
    }
    case AdapterKind::LoRA: {
        auto& s = state.as<LoRAState>();
        s.a = values[0];
        s.b = values[1];
        break;
    }
    case AdapterKind::OFT: {
        auto& s = state.as<OFTState>();
        s.raw_blocks = values;
        break;
    }
    case AdapterKind::SVDiff: {
        auto& s = state.as<SVDiffState>();
        s.delta_s = to_vec(values[0]);
        break;
    }
    case AdapterKind::VeRA: {
        auto& s = state.as<VeRAState>();
        s.lambda_a = to_vec(values[0]);
        s.lambda_b = to_vec(values[1]);
        s.frozen_a = values[2];
        s.frozen_b = values[3];
        break;
    }
    case AdapterKind::LiDB: {
        auto& s = state.as<LiDBState>();
        s.a = values[0];
        s.b_t = values[1];
        s.frozen_a_aux = values[2];
        s.frozen_b_aux = values[3];
        break;
    }
    case AdapterKind::DoRAVector: {
        auto& s = state.as<DoRAVectorState>();
        s.magnitude = values[0](0, 0);
        s.direction_b = to_vec(values[1]);
        s.direction_a = values[2](0, 0);
        s.a_prime = to_vec(values[3]);
        s.b_prime = values[4](0, 0);
        break;
    }
    }
}

std::vector<double> dora_vector_forward(std::span<const double> w0, double magnitude, std::span<const double> b,
                                        double a) {
    check_shape(b.size() == w0.size(), "dora_vector_forward: direction length mismatch");
    std::vector<double> v(w0.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        v[i] = w0[i] + b[i] * a;
    }
    const double nrm = norm2(v);
    if (nrm == 0.0) {
        throw NumericalError("dora_vector_forward: degenerate direction (w0 + b a = 0)");
    }
    for (double& x : v) {
        x *= magnitude / nrm;
    }
    return v;
}

std::vector<double> spectral_vector_forward(std::span<const double> w0, std::span<const double> a_prime,
                                            double b_prime) {
    check_shape(a_prime.size() == w0.size(), "spectral_vector_forward: a' length mismatch");
    const double nrm = norm2(w0);
    check_shape(nrm > 0.0, "spectral_vector_forward: w0 must be nonzero");
    std::vector<double> out(w0.size());
    const double gain = nrm * (1.0 + b_prime);
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = (w0[i] / nrm + a_prime[i]) * gain;
    }
    return out;
}

std::optional<double> dora_match_single(std::span<const double> w0, std::span<const double> a_prime, double b_prime,
                                        double* matched_magnitude) {
    const double w0_norm = norm2(w0);
    check_shape(w0_norm > 0.0, "dora_match_single: w0 must be nonzero");
    std::vector<double> direction(w0.size());
    for (std::size_t i = 0; i < w0.size(); ++i) {
        direction[i] = w0[i] / w0_norm + a_prime[i];
    }
    const double dir_norm = norm2(direction);
    if (dir_norm <= 1e-12) {
        return std::nullopt;
    }

    // b a = c d - w0 with c = ||w0|| > 0 puts the DoRA direction on d;
    // the magnitude then carries ||d|| ||w0|| (1 + b').
    const double c = w0_norm;
    std::vector<double> b(w0.size());
    for (std::size_t i = 0; i < w0.size(); ++i) {
        b[i] = c * direction[i] - w0[i];
    }
    const double magnitude = dir_norm * w0_norm * (1.0 + b_prime);
    if (matched_magnitude != nullptr) {
        *matched_magnitude = magnitude;
    }

    const std::vector<double> target = spectral_vector_forward(w0, a_prime, b_prime);
    const std::vector<double> got = dora_vector_forward(w0, magnitude, b, 1.0);
    double diff = 0.0;
    for (std::size_t i = 0; i < target.size(); ++i) {
        diff += (target[i] - got[i]) * (target[i] - got[i]);
    }
    return std::sqrt(diff) / (1.0 + norm2(target));
}

DoraMatchReport dora_spectral_vector_match(std::span<const double> w0, std::size_t samples, std::uint64_t seed) {
    DoraMatchReport report;
    report.samples_requested = samples;
    Rng rng(Rng::derive(seed, 0xd0a));
    const std::size_t n = w0.size();

    for (std::size_t trial = 0; trial < samples; ++trial) {
        std::vector<double> a_prime(n);
        for (double& x : a_prime) {
            x = rng.normal() / std::sqrt(static_cast<double>(n));
        }
        const double b_prime = 0.5 * rng.normal();
        const std::optional<double> err = dora_match_single(w0, a_prime, b_prime);
        if (!err.has_value()) {
            ++report.samples_skipped;
            continue;
        }
        ++report.samples_matched;
        report.max_error = std::max(report.max_error, *err);
    }

    // a' = 0 probe pins the magnitude-factor correspondence exactly
    const std::vector<double> zero(n, 0.0);
    const double b_prime_probe = 0.5;
    double magnitude = 0.0;
    (void)dora_match_single(w0, zero, b_prime_probe, &magnitude);
    report.magnitude_correspondence_error = std::abs(magnitude - norm2(w0) * (1.0 + b_prime_probe));
    return report;
}

} // namespace specadapt
