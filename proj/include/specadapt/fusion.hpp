#ifndef SPECADAPT_FUSION_HPP
#define SPECADAPT_FUSION_HPP

#include "specadapt/adapters.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace specadapt {

enum class SchedulePolicy { ContiguousTop, Sampled, Explicit };

std::string_view schedule_policy_name(SchedulePolicy policy);
SchedulePolicy schedule_policy_from_name(std::string_view name);

struct FusionEntry {
    AdapterState state;
    double lambda = 1.0;
    ColumnSelect columns;
};

/// Base decomposition plus weighted adapters to merge. Overlapping column
/// ranges are permitted; they are measured and reported, not forbidden.
struct FusionPlan {
    SpectralDecomposition base;
    std::vector<FusionEntry> entries;
    SchedulePolicy policy = SchedulePolicy::Explicit;
};

/// theta_0 + sum_i lambda_i * delta_i, accumulated left to right.
/// An empty delta list returns the base unchanged.
Matrix fedavg_merge(const Matrix& base, const std::vector<Matrix>& deltas, const std::vector<double>& lambdas);

/// (U0 + sum lambda_i U_i) S0 (V0 + sum lambda_i V_i)^T where each entry's
/// perturbations are zero-padded into place by its column selection.
/// Every entry must be an additive spectral state over the plan's base
/// (checked by fingerprint).
Matrix spectral_fuse(const FusionPlan& plan);

/// Summed perturbation factors (U0 + .., V0 + ..) of a plan; exposed for
/// column-integrity checks.
std::pair<Matrix, Matrix> fused_factors(const FusionPlan& plan);

/// Pairwise overlap sizes |cols_i cap cols_j| for i < j, flattened
/// row-major; total_overlap sums them.
struct OverlapReport {
    std::vector<std::size_t> pairwise;
    std::size_t total_overlap = 0;
};
OverlapReport column_overlap(const std::vector<std::vector<ColumnSelect>>& allocations);

/// Column allocation per concept. Contiguous policy yields one block per
/// concept; the sampled policy draws r distinct columns from the top-K
/// pool, one single-column range per draw.
std::vector<std::vector<ColumnSelect>> schedule_columns(std::size_t num_concepts, std::size_t r, std::size_t k,
                                                        SchedulePolicy policy, std::uint64_t seed,
                                                        std::size_t pool = 0);

struct GradientFusionResult {
    Matrix merged;
    double objective = 0.0;         // ridgeless objective at the solution
    double ridge = 0.0;             // ridge actually used
    double gradient_residual = 0.0; // first-order optimality of the ridged objective
};

/// Closed-form normal-equations merge
/// theta = [sum (theta0 + delta_i) X_i X_i^T] [sum X_i X_i^T + ridge I]^{-1}.
/// ridge < 0 selects the default 1e-8 tr(sum X_i X_i^T)/m; a singular Gram
/// sum with ridge = 0 fails with instructions to pass a positive ridge.
GradientFusionResult gradient_fusion(const Matrix& base, const std::vector<Matrix>& deltas,
                                     const std::vector<Matrix>& activations, double ridge = -1.0);

/// Value of the Gradient Fusion objective sum_i ||(theta0+delta_i) X_i - theta X_i||_F^2.
double gradient_fusion_objective(const Matrix& base, const std::vector<Matrix>& deltas,
                                 const std::vector<Matrix>& activations, const Matrix& theta);

struct IdentityPreservationReport {
    /// Per concept: ||(fused - merged_i) probe_i||_F / ||merged_i probe_i||_F.
    std::vector<double> deviations;
};

/// Functional deviation of the fused weight from each individually merged
/// adapter on that concept's probe inputs; lower preserves identity better.
IdentityPreservationReport identity_preservation_report(const BaseWeight& base,
                                                        const std::vector<AdapterState>& per_concept_states,
                                                        const Matrix& fused, const std::vector<Matrix>& probes);

} // namespace specadapt

#endif // SPECADAPT_FUSION_HPP
