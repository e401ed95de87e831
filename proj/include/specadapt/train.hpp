#ifndef SPECADAPT_TRAIN_HPP
#define SPECADAPT_TRAIN_HPP

#include "specadapt/adapters.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace specadapt {

enum class Optimizer { SGD, SGDMomentum, AdamW };

std::string_view optimizer_name(Optimizer opt);
Optimizer optimizer_from_name(std::string_view name);

struct TrainConfig {
    Optimizer optimizer = Optimizer::AdamW;
    double learning_rate = 1e-2;
    std::size_t steps = 1000;
    std::size_t batch_size = 0; // 0 = full batch
    std::uint64_t seed = 0;
    /// Decoupled for AdamW, coupled L2 for SGD variants.
    double weight_decay = 0.0;
    double momentum = 0.9;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double divergence_threshold = 1e12;
};

struct TraceRow {
    std::size_t step = 0;
    double loss = 0.0;
    std::optional<double> metric;
    double param_norm = 0.0;
};

/// Per-step log; length steps + 1 (row 0 is the initial point) unless the
/// run diverged, in which case it holds the rows recorded so far.
struct TrainTrace {
    std::vector<TraceRow> rows;
    bool diverged = false;
    std::vector<double> terminal_params;
};

/// A differentiable training problem over a flat float64 parameter vector.
class Problem {
public:
    virtual ~Problem() = default;
    virtual std::size_t num_params() const = 0;
    virtual void get_params(std::span<double> out) const = 0;
    virtual void set_params(std::span<const double> in) = 0;
    virtual std::size_t num_samples() const = 0;
    /// Loss and gradient at the current parameters over samples
    /// [batch_begin, batch_begin + batch_count), indices taken modulo the
    /// sample count. batch_count = 0 means the full set.
    virtual double loss_and_grad(std::span<double> grad_out, std::size_t batch_begin, std::size_t batch_count) = 0;
    virtual std::optional<double> metric() const { return std::nullopt; }
};

/// Deterministic training loop; updates exactly the problem's parameter
/// vector. Aborts (keeping the trace so far) when the loss exceeds the
/// divergence threshold or turns non-finite.
TrainTrace train(Problem& problem, const TrainConfig& config);

/// Squared-error regression x -> y through an adapter-wrapped linear layer.
/// Inputs are m x B, targets n x B (columns are samples).
class AdapterRegressionProblem final : public Problem {
public:
    AdapterRegressionProblem(BaseWeight base, AdapterState state, Matrix inputs, Matrix targets);

    std::size_t num_params() const override;
    void get_params(std::span<double> out) const override;
    void set_params(std::span<const double> in) override;
    std::size_t num_samples() const override { return inputs_.cols(); }
    double loss_and_grad(std::span<double> grad_out, std::size_t batch_begin, std::size_t batch_count) override;
    std::optional<double> metric() const override;

    /// Frobenius-distance metric target (reported per step when set).
    void set_metric_target(Matrix target) { metric_target_ = std::move(target); }

    const AdapterState& state() const { return state_; }
    AdapterState& state() { return state_; }
    const BaseWeight& base() const { return base_; }

private:
    BaseWeight base_;
    AdapterState state_;
    Matrix inputs_;
    Matrix targets_;
    std::optional<Matrix> metric_target_;
};

/// Same regression task with every weight entry trainable.
class FullMatrixRegressionProblem final : public Problem {
public:
    FullMatrixRegressionProblem(Matrix weight, Matrix inputs, Matrix targets);

    std::size_t num_params() const override { return weight_.size(); }
    void get_params(std::span<double> out) const override;
    void set_params(std::span<const double> in) override;
    std::size_t num_samples() const override { return inputs_.cols(); }
    double loss_and_grad(std::span<double> grad_out, std::size_t batch_begin, std::size_t batch_count) override;
    std::optional<double> metric() const override;

    void set_metric_target(Matrix target) { metric_target_ = std::move(target); }
    const Matrix& weight() const { return weight_; }

private:
    Matrix weight_;
    Matrix inputs_;
    Matrix targets_;
    std::optional<Matrix> metric_target_;
};

/// Two-layer ReLU network ||(X W1)_+ W2 - y||^2 + beta (||W1||_F^2 + ||W2||^2)
/// with the ridge inside the objective; the ReLU subgradient at 0 is 0.
class TwoLayerReluProblem final : public Problem {
public:
    TwoLayerReluProblem(Matrix x, std::vector<double> y, std::size_t hidden, double beta, std::uint64_t init_seed);

    std::size_t num_params() const override;
    void get_params(std::span<double> out) const override;
    void set_params(std::span<const double> in) override;
    std::size_t num_samples() const override { return x_.rows(); }
    double loss_and_grad(std::span<double> grad_out, std::size_t batch_begin, std::size_t batch_count) override;

    double objective() const;
    const Matrix& w1() const { return w1_; } // d x h, columns are neurons
    Matrix& w1() { return w1_; }
    const std::vector<double>& w2() const { return w2_; }

private:
    Matrix x_; // samples x d
    std::vector<double> y_;
    double beta_;
    Matrix w1_;
    std::vector<double> w2_;
};

/// Squared loss and analytic gradients (aligned with pack_params order)
/// for an adapter on the linear regression task; full batch.
std::pair<double, std::vector<double>> loss_and_grad(const BaseWeight& base, const AdapterState& state,
                                                     const Matrix& inputs, const Matrix& targets);

/// Worst relative error between analytic and central finite-difference
/// gradients on a randomly perturbed state and random loss instance.
double grad_check(AdapterKind kind, const Matrix& base, std::size_t rank, std::uint64_t seed);

// ---- experiments ----------------------------------------------------------

struct SubspaceAlignmentConfig {
    std::size_t hidden = 16;
    std::size_t samples = 48;
    double beta = 0.01;
    std::size_t steps = 20000;
    double learning_rate = 0.05;
    std::uint64_t seed = 0;
    /// Out-of-plane magnitude (relative to the mean neuron norm) injected
    /// into one neuron for the post-training robustness probe.
    double noise_probe = 0.3;
};

struct SubspaceAlignmentReport {
    double beta = 0.0;
    std::size_t steps = 0;
    double initial_out_of_plane_ratio = 0.0;
    double out_of_plane_max_ratio = 0.0; // max |z component| / mean neuron norm
    double plane_angle_rad = 0.0;        // top-2 right singular directions vs xy-plane
    double objective = 0.0;
    double objective_projected = 0.0; // neurons projected onto the data plane
    double noisy_neuron_angle_rad = 0.0;
    double final_loss = 0.0;
    bool converged = false;
    double final_grad_norm = 0.0;
};

/// Trains the planar-data two-layer ReLU network and measures how far the
/// first-layer neurons and the top singular directions leave the data plane.
SubspaceAlignmentReport experiment_subspace_alignment(const SubspaceAlignmentConfig& cfg);

struct RankRecoveryConfig {
    std::size_t n = 8;
    std::size_t m = 12;
    std::size_t r = 2;
    std::uint64_t seed = 0;
    std::size_t steps = 20000;
    double learning_rate = 2e-3;
    std::size_t num_inputs = 24;
    /// Base spectrum; defaults to (n, n-1, ..., 1).
    std::vector<double> base_singular_values;
};

struct RankRecoveryReport {
    std::size_t n = 0, m = 0, r = 0;
    double target_norm = 0.0;
    std::size_t delta_rank = 0;          // rank of the required change (2r)
    double base_distance = 0.0;          // ||W0 - W*||_F, the r = 0 reference
    double lora_terminal_distance = 0.0; // after training from standard init
    double lora_floor = 0.0;             // best rank-r approximation residual
    double spectral_terminal_distance = 0.0;  // trained from the feasible construction
    double spectral_zero_init_distance = 0.0; // trained from zero init
    TrainTrace lora_trace;
    TrainTrace spectral_trace;
};

/// Fits x -> W* x where W* removes the base's top-2r singular component:
/// a rank-2r change that rank-r LoRA cannot express but the additive
/// spectral adapter of equal budget can.
RankRecoveryReport experiment_rank_recovery(const RankRecoveryConfig& cfg);

struct LossCompareReport {
    std::vector<std::string> methods;
    std::vector<std::size_t> budgets;
    std::vector<TrainTrace> traces;
    std::vector<double> terminal_distance;
    double lora_floor = 0.0;
    double target_norm = 0.0;
};

/// Trains LoRA, both spectral adapters, OFT, SVDiff, and full fine-tuning
/// at budgets matched to LoRA(r) on the rank-recovery task.
LossCompareReport experiment_loss_compare(const RankRecoveryConfig& cfg);

} // namespace specadapt

#endif // SPECADAPT_TRAIN_HPP
