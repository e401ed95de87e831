#include "specadapt/fusion.hpp"

#include "specadapt/errors.hpp"
#include "specadapt/rng.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>
#include <string>

namespace specadapt {

std::string_view schedule_policy_name(SchedulePolicy policy) {
    switch (policy) {
    case SchedulePolicy::ContiguousTop:
        return "contiguous-top";
    case SchedulePolicy::Sampled:
        return "sampled";
    case SchedulePolicy::Explicit:
        return "explicit";
    }
    throw std::invalid_argument("schedule_policy_name: unknown policy");
}

SchedulePolicy schedule_policy_from_name(std::string_view name) {
    if (name == "contiguous-top") {
        return SchedulePolicy::ContiguousTop;
    }
    if (name == "sampled") {
        return SchedulePolicy::Sampled;
    }
    if (name == "explicit") {
        return SchedulePolicy::Explicit;
    }
    throw FormatError("unknown schedule policy: '" + std::string(name) + "'");
}

Matrix fedavg_merge(const Matrix& base, const std::vector<Matrix>& deltas, const std::vector<double>& lambdas) {
    if (deltas.size() != lambdas.size()) {
        throw std::invalid_argument("fedavg_merge: deltas and lambdas differ in length");
    }
    Matrix merged = base;
    for (std::size_t i = 0; i < deltas.size(); ++i) {
        if (deltas[i].rows() != base.rows() || deltas[i].cols() != base.cols()) {
            throw std::invalid_argument("fedavg_merge: delta " + std::to_string(i) + " shape mismatch");
        }
        merged.add_scaled(deltas[i], lambdas[i]);
    }
    return merged;
}

std::pair<Matrix, Matrix> fused_factors(const FusionPlan& plan) {
    const std::uint64_t base_print = fingerprint(plan.base);
    Matrix u_sum = plan.base.u;
    Matrix v_sum = plan.base.v;
    for (std::size_t i = 0; i < plan.entries.size(); ++i) {
        const FusionEntry& entry = plan.entries[i];
        if (entry.state.kind != AdapterKind::SpectralA) {
            throw std::invalid_argument("spectral_fuse: entry " + std::to_string(i) +
                                        " is not an additive spectral adapter");
        }
        if (entry.state.base_fingerprint != base_print) {
            throw std::invalid_argument("spectral_fuse: entry " + std::to_string(i) +
                                        " was tuned on a different base (fingerprint mismatch)");
        }
        const auto& s = entry.state.as<SpectralAState>();
        Matrix scaled_u = s.a_u;
        scaled_u *= entry.lambda;
        Matrix scaled_v = s.a_v;
        scaled_v *= entry.lambda;
        u_sum.add_columns(s.columns.start, scaled_u);
        v_sum.add_columns(s.columns.start, scaled_v);
    }
    return {std::move(u_sum), std::move(v_sum)};
}

Matrix spectral_fuse(const FusionPlan& plan) {
    auto [u_sum, v_sum] = fused_factors(plan);
    for (std::size_t j = 0; j < plan.base.k(); ++j) {
        for (std::size_t i = 0; i < u_sum.rows(); ++i) {
            u_sum(i, j) *= plan.base.s[j];
        }
    }
    return multiply_bt(u_sum, v_sum);
}

OverlapReport column_overlap(const std::vector<std::vector<ColumnSelect>>& allocations) {
    auto expand = [](const std::vector<ColumnSelect>& ranges) {
        std::set<std::size_t> cols;
        for (const ColumnSelect& r : ranges) {
            for (std::size_t c = r.start; c < r.start + r.count; ++c) {
                cols.insert(c);
            }
        }
        return cols;
    };
    std::vector<std::set<std::size_t>> sets;
    sets.reserve(allocations.size());
    for (const auto& a : allocations) {
        sets.push_back(expand(a));
    }

    OverlapReport report;
    for (std::size_t i = 0; i < sets.size(); ++i) {
        for (std::size_t j = i + 1; j < sets.size(); ++j) {
            std::size_t overlap = 0;
            for (std::size_t c : sets[i]) {
                overlap += sets[j].count(c);
            }
            report.pairwise.push_back(overlap);
            report.total_overlap += overlap;
        }
    }
    return report;
}

std::vector<std::vector<ColumnSelect>> schedule_columns(std::size_t num_concepts, std::size_t r, std::size_t k,
                                                        SchedulePolicy policy, std::uint64_t seed, std::size_t pool) {
    std::vector<std::vector<ColumnSelect>> out(num_concepts);
    switch (policy) {
    case SchedulePolicy::ContiguousTop: {
        if (num_concepts * r > k) {
            throw std::invalid_argument("schedule_columns: " + std::to_string(num_concepts) + " concepts of rank " +
                                        std::to_string(r) + " need " + std::to_string(num_concepts * r) +
                                        " columns but only " + std::to_string(k) + " exist");
        }
        for (std::size_t i = 0; i < num_concepts; ++i) {
            out[i] = {ColumnSelect{i * r, r}};
        }
        return out;
    }
    case SchedulePolicy::Sampled: {
        const std::size_t top_pool = pool == 0 ? k : std::min(pool, k);
        if (r > top_pool) {
            throw std::invalid_argument("schedule_columns: rank exceeds sampling pool");
        }
        for (std::size_t i = 0; i < num_concepts; ++i) {
            // Fisher-Yates prefix over the pool, derived per-concept stream
            Rng rng(Rng::derive(seed, i));
            std::vector<std::size_t> pool_cols(top_pool);
            for (std::size_t c = 0; c < top_pool; ++c) {
                pool_cols[c] = c;
            }
            for (std::size_t c = 0; c < r; ++c) {
                const std::size_t pick = c + rng.below(top_pool - c);
                std::swap(pool_cols[c], pool_cols[pick]);
            }
            std::vector<std::size_t> chosen(pool_cols.begin(), pool_cols.begin() + static_cast<std::ptrdiff_t>(r));
            std::sort(chosen.begin(), chosen.end());
            for (std::size_t c : chosen) {
                out[i].push_back(ColumnSelect{c, 1});
            }
        }
        return out;
    }
    case SchedulePolicy::Explicit:
        throw std::invalid_argument("schedule_columns: explicit policy carries its own allocation");
    }
    throw std::invalid_argument("schedule_columns: unknown policy");
}

GradientFusionResult gradient_fusion(const Matrix& base, const std::vector<Matrix>& deltas,
                                     const std::vector<Matrix>& activations, double ridge) {
    if (deltas.size() != activations.size()) {
        throw std::invalid_argument("gradient_fusion: deltas and activations differ in length");
    }
    if (deltas.empty()) {
        throw std::invalid_argument("gradient_fusion: need at least one concept");
    }
    const std::size_t m = base.cols();

    Matrix gram(m, m);
    Matrix rhs(base.rows(), m);
    for (std::size_t i = 0; i < deltas.size(); ++i) {
        if (deltas[i].rows() != base.rows() || deltas[i].cols() != base.cols()) {
            throw std::invalid_argument("gradient_fusion: delta " + std::to_string(i) + " shape mismatch");
        }
        if (activations[i].rows() != m) {
            throw std::invalid_argument("gradient_fusion: activation " + std::to_string(i) + " must have " +
                                        std::to_string(m) + " rows");
        }
        const Matrix xxt = multiply_bt(activations[i], activations[i]);
        gram += xxt;
        rhs += (base + deltas[i]) * xxt;
    }

    double trace = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        trace += gram(i, i);
    }
    const double used_ridge = ridge < 0.0 ? 1e-8 * trace / static_cast<double>(m) : ridge;

    Matrix regularized = gram;
    for (std::size_t i = 0; i < m; ++i) {
        regularized(i, i) += used_ridge;
    }

    GradientFusionResult result;
    result.ridge = used_ridge;
    try {
        // theta (G + ridge I) = RHS, solved through the transposed system
        result.merged = transpose(solve(regularized, transpose(rhs)));
    } catch (const NumericalError&) {
        throw NumericalError("gradient_fusion: activation Gram sum is singular; pass a positive ridge");
    }

    result.objective = gradient_fusion_objective(base, deltas, activations, result.merged);
    // gradient of the ridged quadratic: 2 (theta (G + ridge I) - RHS)
    Matrix grad = result.merged * regularized;
    grad -= rhs;
    result.gradient_residual = 2.0 * frobenius_norm(grad);
    return result;
}

double gradient_fusion_objective(const Matrix& base, const std::vector<Matrix>& deltas,
                                 const std::vector<Matrix>& activations, const Matrix& theta) {
    double total = 0.0;
    for (std::size_t i = 0; i < deltas.size(); ++i) {
        const Matrix diff = (base + deltas[i]) * activations[i] - theta * activations[i];
        const double norm = frobenius_norm(diff);
        total += norm * norm;
    }
    return total;
}

IdentityPreservationReport identity_preservation_report(const BaseWeight& base,
                                                        const std::vector<AdapterState>& per_concept_states,
                                                        const Matrix& fused, const std::vector<Matrix>& probes) {
    if (per_concept_states.size() != probes.size()) {
        throw std::invalid_argument("identity_preservation_report: one probe batch per concept required");
    }
    IdentityPreservationReport report;
    report.deviations.reserve(per_concept_states.size());
    for (std::size_t i = 0; i < per_concept_states.size(); ++i) {
        const Matrix merged = merge(base, per_concept_states[i]);
        const Matrix reference = merged * probes[i];
        const Matrix deviation = fused * probes[i] - reference;
        report.deviations.push_back(frobenius_norm(deviation) / frobenius_norm(reference));
    }
    return report;
}

} // namespace specadapt
