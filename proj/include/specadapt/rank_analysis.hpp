#ifndef SPECADAPT_RANK_ANALYSIS_HPP
#define SPECADAPT_RANK_ANALYSIS_HPP

#include "specadapt/adapters.hpp"

#include <cstdint>
#include <optional>

namespace specadapt {

/// Achievable-rank range of an adapted weight over its trainable parameters.
struct RankCapacityReport {
    AdapterKind kind = AdapterKind::LoRA;
    std::size_t rank = 0;
    std::size_t base_rank = 0;
    std::size_t min_rank_achieved = 0;
    std::size_t max_rank_achieved = 0;
    std::size_t capacity = 0;
    std::size_t trials = 0;
    /// Parameter state achieving the minimum, when a construction exists.
    std::optional<AdapterState> certificate;
};

/// Constructive minimum-rank state: cancels r directions for LoRA and 2r
/// for the additive spectral adapter on full row-rank bases (n <= m).
/// r = 0 degenerates to the zero-initialized state.
AdapterState construct_min_rank(AdapterKind kind, const BaseWeight& base, std::size_t r, std::uint64_t seed = 0);

/// Empirical rank range over random Gaussian parameter trials, with the
/// constructive certificate supplying the minimum where available
/// (LoRA, SpectralA, SVDiff). Requires a full row-rank base.
RankCapacityReport rank_capacity_empirical(AdapterKind kind, const BaseWeight& base, std::size_t r,
                                           std::size_t trials, std::uint64_t seed);

} // namespace specadapt

#endif // SPECADAPT_RANK_ANALYSIS_HPP
