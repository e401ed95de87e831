#ifndef SPECADAPT_ADAPTERS_HPP
#define SPECADAPT_ADAPTERS_HPP

#include "specadapt/matrix.hpp"
#include "specadapt/svd.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

namespace specadapt {

enum class AdapterKind {
    SpectralA,  // additive tuning of selected singular-vector columns
    SpectralR,  // Cayley rotation of selected singular-vector columns
    LoRA,       // W + a b^T
    OFT,        // block-diagonal orthogonal multiplier
    SVDiff,     // singular-value shifts
    VeRA,       // frozen random factors, trainable diagonal scalings
    LiDB,       // frozen auxiliary projections around a small trainable core
    DoRAVector, // magnitude/direction split for vector-form weights
};

/// Stable serialization tag for a kind.
std::string_view kind_name(AdapterKind kind);
AdapterKind kind_from_name(std::string_view name);
inline constexpr AdapterKind kAllKinds[] = {
    AdapterKind::SpectralA, AdapterKind::SpectralR, AdapterKind::LoRA,       AdapterKind::OFT,
    AdapterKind::SVDiff,    AdapterKind::VeRA,      AdapterKind::LiDB,       AdapterKind::DoRAVector,
};

struct AdapterOptions {
    std::size_t lidb_a = 50;  // auxiliary inner dimension on the left
    std::size_t lidb_b = 100; // auxiliary inner dimension on the right
    bool oft_shared = true;
    /// Optional LoRA output scale alpha/rank; unset means scale 1.
    std::optional<double> lora_alpha;

    bool operator==(const AdapterOptions&) const = default;
};

/// Base weight a state attaches to. Spectral kinds operate on the thin SVD;
/// the fingerprint identifies the base for fusion-time consistency checks.
struct BaseWeight {
    Matrix w;
    std::optional<SpectralDecomposition> decomposition;

    static BaseWeight dense(Matrix w);
    /// Computes and caches the thin SVD of w.
    static BaseWeight spectral(const Matrix& w);
    /// Adopts an existing decomposition; w is its reconstruction.
    static BaseWeight from_decomposition(SpectralDecomposition d);

    std::size_t rows() const { return w.rows(); }
    std::size_t cols() const { return w.cols(); }
    const SpectralDecomposition& svd() const;
    std::uint64_t fingerprint() const;
};

struct SpectralAState {
    Matrix a_u; // n x r additive perturbation of selected u columns
    Matrix a_v; // m x r additive perturbation of selected v columns
    ColumnSelect columns;
};

struct SpectralRState {
    Matrix raw_u; // r x r Cayley generator for the u block
    Matrix raw_v; // r x r Cayley generator for the v block
    ColumnSelect columns;
};

struct LoRAState {
    Matrix a; // n x r
    Matrix b; // m x r, zero at init so the delta starts at zero
    double scale = 1.0;
};

struct OFTState {
    std::size_t num_blocks = 1;
    bool shared = true;
    /// One generator when shared, one per block otherwise. A non-dividing
    /// row count puts a shorter final block that reuses the top-left
    /// principal part of the shared generator.
    std::vector<Matrix> raw_blocks;
    std::vector<std::size_t> block_sizes;
};

struct SVDiffState {
    std::vector<double> delta_s; // length k; s + delta_s is clamped at 0
};

struct VeRAState {
    Matrix frozen_a; // n x r, never updated after init
    Matrix frozen_b; // m x r, never updated after init
    std::vector<double> lambda_a; // n
    std::vector<double> lambda_b; // r, zero at init
};

struct LiDBState {
    Matrix frozen_a_aux; // n x a
    Matrix frozen_b_aux; // b x m
    Matrix a;            // a x r, zero at init
    Matrix b_t;          // b x r
};

struct DoRAVectorState {
    double magnitude = 0.0;          // init ||w0||_2
    std::vector<double> direction_b; // n
    double direction_a = 0.0;
    /// Frozen counterpart parameters of the additive spectral vector form,
    /// kept for the correspondence report and serialization.
    std::vector<double> a_prime;
    double b_prime = 0.0;
};

struct AdapterState {
    using Payload = std::variant<SpectralAState, SpectralRState, LoRAState, OFTState, SVDiffState, VeRAState,
                                 LiDBState, DoRAVectorState>;

    AdapterKind kind = AdapterKind::LoRA;
    std::size_t rank = 0; // configured hyperparameter (num_blocks for OFT)
    std::size_t base_rows = 0;
    std::size_t base_cols = 0;
    std::uint64_t seed = 0;
    std::uint64_t base_fingerprint = 0;
    AdapterOptions options;
    Payload payload;

    template <typename T>
    const T& as() const {
        return std::get<T>(payload);
    }
    template <typename T>
    T& as() {
        return std::get<T>(payload);
    }
};

/// Zero-initialized adapter whose effective weight equals the base
/// (to reconstruction tolerance for spectral kinds). Frozen auxiliaries
/// are seeded deterministically from `seed`.
AdapterState init_adapter(AdapterKind kind, const BaseWeight& base, std::size_t rank, ColumnSelect columns,
                          std::uint64_t seed, const AdapterOptions& options = {});

/// Cayley map: raw -> (I + Q)(I - Q)^{-1} with Q = (raw - raw^T)/2.
/// Always an exact rotation (determinant +1).
Matrix cayley(const Matrix& raw);

/// Reverse-mode differential of the Cayley map: given dL/dR, returns
/// dL/draw via dR = (I + R) dQ (I - Q)^{-1}, dQ = (dA - dA^T)/2.
Matrix cayley_backward(const Matrix& raw, const Matrix& rotation, const Matrix& grad_rotation);

/// Assembled block-diagonal orthogonal multiplier (n x n).
Matrix oft_multiplier(const OFTState& state, std::size_t n);

/// Achievable block sizes for OFT with `num_blocks` blocks over n rows;
/// throws when the final block would be empty.
std::vector<std::size_t> oft_block_sizes(std::size_t n, std::size_t num_blocks);

/// Adapted weight matrix for any kind.
Matrix effective_weight(const BaseWeight& base, const AdapterState& state);

/// Same value as effective_weight; finalizes the adapter into a plain matrix.
Matrix merge(const BaseWeight& base, const AdapterState& state);

/// Perturbed/rotated (u, v) factor pair for spectral kinds.
std::pair<Matrix, Matrix> spectral_factors(const SpectralDecomposition& base, const AdapterState& state);

/// Substitutes rotated columns in place: valid SVD factors of the merged
/// weight with no additional SVD work. The result keeps `canonical = true`
/// only when the rotated block's singular values are all equal.
SpectralDecomposition re_decompose_rotated(const SpectralDecomposition& base, const AdapterState& state);

/// Exact count of trainable scalars; matches the optimizer's enumeration.
std::size_t trainable_param_count(AdapterKind kind, std::size_t n, std::size_t m, std::size_t rank,
                                  const AdapterOptions& options = {});

/// Sorted distinct achievable budgets as the hyperparameter ranges over
/// 1..max_rank (divisors of n for OFT; singleton for SVDiff/DoRAVector).
std::vector<std::size_t> available_budgets(AdapterKind kind, std::size_t n, std::size_t m, std::size_t max_rank,
                                           const AdapterOptions& options = {});

/// Table-style scaling note for a kind ("2nr ~ n" etc.).
std::string budget_scaling(AdapterKind kind);

std::size_t num_trainable(const AdapterState& state);
void pack_params(const AdapterState& state, std::span<double> out);
void unpack_params(AdapterState& state, std::span<const double> in);

/// Named trainable/frozen tensors in canonical order (serialization layout).
struct TensorRef {
    std::string name;
    std::size_t rows = 0;
    std::size_t cols = 0;
    bool frozen = false;
};
std::vector<TensorRef> tensor_layout(const AdapterState& state);
/// Copies of the tensors in layout order.
std::vector<Matrix> tensor_values(const AdapterState& state);
void set_tensor_values(AdapterState& state, const std::vector<Matrix>& values);

/// Appendix-style vector forwards.
std::vector<double> dora_vector_forward(std::span<const double> w0, double magnitude, std::span<const double> b,
                                        double a);
std::vector<double> spectral_vector_forward(std::span<const double> w0, std::span<const double> a_prime,
                                            double b_prime);

struct DoraMatchReport {
    std::size_t samples_requested = 0;
    std::size_t samples_matched = 0;
    std::size_t samples_skipped = 0;
    double max_error = 0.0;
    /// |w_dora - ||w0||(1+b')| on an a' = 0 probe: the magnitude-factor
    /// correspondence between the two parameterizations.
    double magnitude_correspondence_error = 0.0;
};

/// For each sampled additive-spectral vector parameter pair (a', b'),
/// constructs magnitude/direction parameters reproducing the same output
/// and reports the worst matching error. Degenerate directions
/// (||w0/||w0|| + a'|| = 0) are skipped and counted.
DoraMatchReport dora_spectral_vector_match(std::span<const double> w0, std::size_t samples, std::uint64_t seed);

/// Single-sample constructive matching; nullopt when the direction is
/// degenerate. Returns the relative output error of the constructed match.
std::optional<double> dora_match_single(std::span<const double> w0, std::span<const double> a_prime, double b_prime,
                                        double* matched_magnitude = nullptr);

} // namespace specadapt

#endif // SPECADAPT_ADAPTERS_HPP
