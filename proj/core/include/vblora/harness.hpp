#pragma once

// Desk-scale training and verification on the tiny transformer: the synthetic
// task, a two-group AdamW optimizer with a linear warmup/decay schedule, the
// training loop with footprint recording, and finite-difference gradient
// checking.

#include <cstdint>
#include <string>
#include <vector>

#include "vblora/adapter.hpp"
#include "vblora/footprint.hpp"
#include "vblora/random.hpp"
#include "vblora/transformer.hpp"

namespace vblora {

/// Next-token prediction on sequences whose second half is the first half
/// mapped through a fixed, seeded permutation of the vocabulary. Only the
/// second-half tokens are scored.
class PermutationCopyTask {
public:
    PermutationCopyTask(std::size_t vocab, std::size_t seq_len, std::uint64_t seed);

    Batch sample(std::size_t batch_size, Rng& rng) const;
    const std::vector<int>& permutation() const noexcept { return permutation_; }
    std::size_t vocab() const noexcept { return vocab_; }
    std::size_t seq_len() const noexcept { return seq_len_; }

private:
    std::size_t vocab_;
    std::size_t seq_len_;
    std::vector<int> permutation_;
};

struct TrainConfig {
    double lr_bank = 1e-3;
    double lr_logits = 1e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    double warmup_ratio = 0.06;
    std::size_t steps = 500;
    std::size_t batch_size = 16;
    std::size_t eval_batch_size = 64;
    std::uint64_t seed = 0;
    std::size_t footprint_every = 1;

    void validate() const;
};

/// AdamW with one parameter group for the bank and one for the logits, sharing
/// a linear warmup then linear decay schedule.
class TwoGroupAdamW {
public:
    TwoGroupAdamW(const AdapterState<float>& like, const TrainConfig& config);

    /// Learning-rate multiplier for 1-based step t.
    double schedule(std::size_t t) const;
    void step(AdapterState<float>& params, const AdapterState<float>& grad);
    std::size_t steps_taken() const noexcept { return t_; }

private:
    void update(std::span<float> p, std::span<const float> g, std::span<double> m, std::span<double> v, double lr,
                double mult);

    TrainConfig config_;
    std::size_t warmup_steps_;
    std::size_t t_ = 0;
    std::vector<double> m_bank_, v_bank_, m_logits_, v_logits_;
};

struct TrainResult {
    std::vector<double> losses;          // training-batch loss per step
    std::vector<std::size_t> new_selections;  // per step, from the footprint
    double initial_eval_loss = 0.0;
    double final_eval_loss = 0.0;
    FootprintLog footprint;
    std::uint64_t base_checksum_before = 0;
    std::uint64_t base_checksum_after = 0;
};

/// Train the adapter parameters of `model` in place. Deterministic for a fixed
/// config. Throws DivergenceError on a non-finite loss.
TrainResult train(TinyTransformer<float>& model, const PermutationCopyTask& task, const TrainConfig& config);

/// Deterministic selection indices of every sub-vector (module order, A side
/// then B side), using the policy's inference-time selection.
std::vector<std::uint32_t> current_selections(const TinyTransformer<float>& model);

/// Selection counts per bank row at the current state.
std::vector<std::size_t> usage_histogram(const TinyTransformer<float>& model);

struct GradCheckEntry {
    std::string parameter;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_error = 0.0;
};

struct GradCheckReport {
    std::size_t checked = 0;
    std::size_t excluded_boundary = 0;   // perturbation changed a top-k selection
    std::size_t unselected_checked = 0;
    bool unselected_exact_zero = true;    // analytic gradient of unselected logits
    double max_unselected_numeric = 0.0;  // |FD| over unselected logits
    double max_rel_error = 0.0;
    double max_abs_error = 0.0;
    GradCheckEntry worst;

    bool passed(double tolerance) const {
        return unselected_exact_zero && max_unselected_numeric < 1e-10 && max_rel_error < tolerance;
    }
};

struct GradCheckOptions {
    double relative_step = 1e-4;  // eps = relative_step * max(|theta|, 1)
    /// Combine central differences at eps and eps/2 (Richardson).
    bool extrapolate = true;
    /// Gradients below this magnitude are compared in absolute terms, so the
    /// effective absolute tolerance is rtol * magnitude_floor. Central
    /// differences on an O(1) loss carry ~1e-11 of round-off.
    double magnitude_floor = 1e-3;
};

/// Central-difference check of the loss gradient w.r.t. every bank entry and
/// every logit, in double precision, with the plain top-k selection.
GradCheckReport grad_check(const TinyTransformer<double>& model, const Batch& batch,
                           const GradCheckOptions& options = {});

}  // namespace vblora
