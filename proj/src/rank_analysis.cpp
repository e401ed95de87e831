#include "specadapt/rank_analysis.hpp"

#include "specadapt/errors.hpp"
#include "specadapt/rng.hpp"

#include <algorithm>
#include <limits>
#include <stdexcept>
#include <string>

namespace specadapt {

namespace {

void require_full_row_rank(const BaseWeight& base) {
    const std::size_t n = base.rows();
    if (n > base.cols() || numerical_rank(base.w) != n) {
        throw std::invalid_argument("rank analysis requires an arbitrary full row-rank base with n <= m; got " +
                                    std::to_string(base.rows()) + "x" + std::to_string(base.cols()) + " of rank " +
                                    std::to_string(numerical_rank(base.w)));
    }
}

} // namespace

AdapterState construct_min_rank(AdapterKind kind, const BaseWeight& base, std::size_t r, std::uint64_t seed) {
    require_full_row_rank(base);
    const std::size_t n = base.rows();

    switch (kind) {
    case AdapterKind::LoRA: {
        if (r > n) {
            throw std::invalid_argument("construct_min_rank: lora requires r <= n");
        }
        AdapterState state = init_adapter(kind, base, r, {}, seed);
        if (r == 0) {
            return state;
        }
        // a b^T = -U_r diag(s_r) V_r^T cancels the top r directions
        const SpectralDecomposition d = base.decomposition.has_value() ? *base.decomposition : svd_thin(base.w);
        auto& lora = state.as<LoRAState>();
        Matrix a = d.u.columns(0, r);
        for (std::size_t i = 0; i < a.rows(); ++i) {
            for (std::size_t j = 0; j < r; ++j) {
                a(i, j) *= -d.s[j];
            }
        }
        lora.a = std::move(a);
        lora.b = d.v.columns(0, r);
        lora.scale = 1.0;
        return state;
    }
    case AdapterKind::SpectralA: {
        if (2 * r > n) {
            throw std::invalid_argument("construct_min_rank: spectral_a requires 2r <= n");
        }
        AdapterState state = init_adapter(kind, base, r, top_columns(r), seed);
        if (r == 0) {
            return state;
        }
        // Borrow the next r columns J = [r, 2r): steering the perturbed top
        // block onto -U_J S_J V_J^T cancels 2r directions in total.
        const SpectralDecomposition& d = base.svd();
        auto& sa = state.as<SpectralAState>();
        const Matrix u_j = d.u.columns(r, r);
        Matrix v_scaled = d.v.columns(r, r);
        for (std::size_t i = 0; i < v_scaled.rows(); ++i) {
            for (std::size_t j = 0; j < r; ++j) {
                v_scaled(i, j) *= -d.s[r + j] / d.s[j];
            }
        }
        sa.a_u = u_j - d.u.columns(0, r);
        sa.a_v = v_scaled - d.v.columns(0, r);
        return state;
    }
    case AdapterKind::SVDiff: {
        // delta_s = -s zeroes every singular value
        AdapterState state = init_adapter(kind, base, r, {}, seed);
        auto& sv = state.as<SVDiffState>();
        const SpectralDecomposition& d = base.svd();
        for (std::size_t i = 0; i < sv.delta_s.size(); ++i) {
            sv.delta_s[i] = -d.s[i];
        }
        return state;
    }
    default:
        throw std::invalid_argument("construct_min_rank: no constructive certificate for kind '" +
                                    std::string(kind_name(kind)) + "'");
    }
}

RankCapacityReport rank_capacity_empirical(AdapterKind kind, const BaseWeight& base, std::size_t r,
                                           std::size_t trials, std::uint64_t seed) {
    require_full_row_rank(base);
    BaseWeight local = base;
    if (!local.decomposition.has_value()) {
        local.decomposition = svd_thin(local.w);
    }

    RankCapacityReport report;
    report.kind = kind;
    report.rank = r;
    report.trials = trials;

    // Rank decisions across the adapted family are measured against the
    // base's scale. A tolerance relative to each adapted matrix's own top
    // singular value cannot recognize full cancellation (the residue of an
    // exact zero is pure roundoff), so the base-anchored threshold is used
    // for every evaluation here.
    const double base_tol = static_cast<double>(std::max(local.rows(), local.cols())) *
                            local.decomposition->s.front() * std::numeric_limits<double>::epsilon();
    report.base_rank = numerical_rank(local.w, base_tol);

    std::size_t min_rank = report.base_rank;
    std::size_t max_rank = 0;

    ColumnSelect columns{};
    if (kind == AdapterKind::SpectralA || kind == AdapterKind::SpectralR) {
        columns = top_columns(r);
    }

    // per-trial seeds derived from (seed, trial) keep results order-independent
    for (std::size_t trial = 0; trial < trials; ++trial) {
        AdapterState state = init_adapter(kind, local, r, columns, Rng::derive(seed, trial));
        const std::size_t count = num_trainable(state);
        std::vector<double> params(count);
        Rng rng(Rng::derive(seed, 0x70000 + trial));
        for (double& p : params) {
            p = rng.normal();
        }
        unpack_params(state, params);
        const std::size_t rank = numerical_rank(effective_weight(local, state), base_tol);
        min_rank = std::min(min_rank, rank);
        max_rank = std::max(max_rank, rank);
    }

    if (kind == AdapterKind::LoRA || kind == AdapterKind::SpectralA || kind == AdapterKind::SVDiff) {
        AdapterState certificate = construct_min_rank(kind, local, r, seed);
        const std::size_t rank = numerical_rank(effective_weight(local, certificate), base_tol);
        min_rank = std::min(min_rank, rank);
        report.certificate = std::move(certificate);
    }

    report.min_rank_achieved = min_rank;
    report.max_rank_achieved = std::max(max_rank, report.base_rank);
    report.capacity = report.max_rank_achieved - report.min_rank_achieved;
    return report;
}

} // namespace specadapt
