#pragma once

// Alternative vector-selection mechanisms behind one policy type: plain
// top-k, noisy top-k, Gumbel-softmax, straight-through Gumbel-softmax and
// select-all. Training paths may be stochastic; inference paths never are.

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "vblora/core.hpp"
#include "vblora/errors.hpp"
#include "vblora/random.hpp"

namespace vblora {

enum class SelectionKind : std::uint8_t { TopK, NoisyTopK, GumbelSoftmax, StraightThroughGS, SelectAll };

inline std::string_view to_string(SelectionKind kind) noexcept {
    switch (kind) {
    case SelectionKind::TopK: return "topk";
    case SelectionKind::NoisyTopK: return "noisy_topk";
    case SelectionKind::GumbelSoftmax: return "gs";
    case SelectionKind::StraightThroughGS: return "st_gs";
    case SelectionKind::SelectAll: return "select_all";
    }
    return "topk";
}

inline SelectionKind parse_selection_kind(std::string_view name) {
    for (auto kind : {SelectionKind::TopK, SelectionKind::NoisyTopK, SelectionKind::GumbelSoftmax,
                      SelectionKind::StraightThroughGS, SelectionKind::SelectAll}) {
        if (name == to_string(kind)) return kind;
    }
    throw InvalidArgument("selection: unknown policy '" + std::string(name) +
                          "' (expected topk|noisy_topk|gs|st_gs|select_all)");
}

struct SelectionPolicy {
    SelectionKind kind = SelectionKind::TopK;
    std::size_t k = 2;
    double tau = 1.0 / 3.0;
    std::size_t inference_k = 2;
    double noise_scale = 1.0;

    bool stochastic() const noexcept {
        return kind == SelectionKind::NoisyTopK || kind == SelectionKind::GumbelSoftmax ||
               kind == SelectionKind::StraightThroughGS;
    }
    bool gumbel() const noexcept {
        return kind == SelectionKind::GumbelSoftmax || kind == SelectionKind::StraightThroughGS;
    }

    /// Number of rows mixed at inference time for a bank of size h.
    std::size_t inference_support(std::size_t h) const noexcept {
        switch (kind) {
        case SelectionKind::SelectAll: return h;
        case SelectionKind::GumbelSoftmax:
        case SelectionKind::StraightThroughGS: return inference_k;
        default: return k;
        }
    }

    void validate(std::size_t h) const {
        const auto in_range = [h](std::size_t v) { return v >= 1 && v <= h; };
        if (gumbel()) {
            if (!(tau > 0.0) || !std::isfinite(tau))
                throw InvalidArgument("tau: must be positive for Gumbel selection (got " + std::to_string(tau) + ")");
            if (!in_range(inference_k))
                throw InvalidArgument("inference_k: " + std::to_string(inference_k) + " outside [1, h=" +
                                      std::to_string(h) + "]");
        } else if (kind != SelectionKind::SelectAll && !in_range(k)) {
            throw InvalidArgument("k: " + std::to_string(k) + " outside [1, h=" + std::to_string(h) + "]");
        }
        if (kind == SelectionKind::NoisyTopK && (!(noise_scale >= 0.0) || !std::isfinite(noise_scale)))
            throw InvalidArgument("noise_scale: must be a finite nonnegative number");
    }
};

namespace detail {

template <typename T>
std::vector<std::uint32_t> sort_by_logit(std::span<const T> sigma, std::vector<std::uint32_t> indices) {
    std::sort(indices.begin(), indices.end(), [&](std::uint32_t a, std::uint32_t b) {
        return sigma[a] > sigma[b] || (sigma[a] == sigma[b] && a < b);
    });
    return indices;
}

template <typename T>
Admixture<T> gumbel_soft(std::span<const T> sigma, double tau, Rng& rng) {
    std::vector<T> perturbed(sigma.size());
    for (std::size_t s = 0; s < sigma.size(); ++s)
        perturbed[s] = static_cast<T>(static_cast<double>(sigma[s]) + rng.gumbel());
    Admixture<T> mix;
    mix.indices = topk_indices<T>(perturbed, sigma.size());
    mix.weights = canonical_softmax<T>(perturbed, mix.indices, 1.0 / tau);
    mix.grad_indices = mix.indices;
    mix.grad_weights = mix.weights;
    mix.grad_scale = 1.0 / tau;
    return mix;
}

}  // namespace detail

/// Training-time selection. `rng` is required for the stochastic kinds.
template <typename T>
Admixture<T> select_train_admixture(const SelectionPolicy& policy, std::span<const T> sigma, Rng* rng) {
    const std::size_t h = sigma.size();
    policy.validate(h);
    if (policy.stochastic() && rng == nullptr)
        throw InvalidArgument(std::string("select_train: policy '") + std::string(to_string(policy.kind)) +
                              "' needs a random stream");
    switch (policy.kind) {
    case SelectionKind::TopK: return topk_select(sigma, policy.k);
    case SelectionKind::SelectAll: return topk_select(sigma, h);
    case SelectionKind::NoisyTopK: {
        std::vector<T> noisy(h);
        for (std::size_t s = 0; s < h; ++s)
            noisy[s] = static_cast<T>(static_cast<double>(sigma[s]) + policy.noise_scale * rng->normal());
        Admixture<T> mix;
        // Selection from the noisy logits, weights from the clean ones.
        mix.indices = detail::sort_by_logit(sigma, topk_indices<T>(noisy, policy.k));
        mix.weights = canonical_softmax<T>(sigma, mix.indices);
        mix.grad_indices = mix.indices;
        mix.grad_weights = mix.weights;
        return mix;
    }
    case SelectionKind::GumbelSoftmax: return detail::gumbel_soft(sigma, policy.tau, *rng);
    case SelectionKind::StraightThroughGS: {
        auto mix = detail::gumbel_soft(sigma, policy.tau, *rng);
        // Forward: hard one-hot at the argmax. Backward: soft distribution.
        mix.indices = {mix.grad_indices.front()};
        mix.weights = {T{1}};
        return mix;
    }
    }
    return topk_select(sigma, policy.k);
}

/// Deterministic inference-time selection: Top-k softmax over clean logits,
/// with k taken from the policy (inference_k for the Gumbel kinds, h for select-all).
template <typename T>
Admixture<T> select_infer_admixture(const SelectionPolicy& policy, std::span<const T> sigma) {
    policy.validate(sigma.size());
    for (auto v : sigma)
        if (!std::isfinite(static_cast<double>(v))) throw InvalidArgument("select_infer: non-finite logit");
    return topk_select(sigma, policy.inference_support(sigma.size()));
}

template <typename T>
SubVector<T> select_train(const SelectionPolicy& policy, std::span<const T> sigma, const VectorBank<T>& bank,
                          Rng* rng) {
    if (sigma.size() != bank.size()) throw InvalidArgument("select_train: logit length does not match h");
    return to_subvector(select_train_admixture(policy, sigma, rng), bank);
}

template <typename T>
SubVector<T> select_infer(const SelectionPolicy& policy, std::span<const T> sigma, const VectorBank<T>& bank) {
    if (sigma.size() != bank.size()) throw InvalidArgument("select_infer: logit length does not match h");
    return to_subvector(select_infer_admixture(policy, sigma), bank);
}

template <typename T>
Selector<T> train_selector(const SelectionPolicy& policy, Rng* rng) {
    return [policy, rng](std::span<const T> sigma) { return select_train_admixture(policy, sigma, rng); };
}

template <typename T>
Selector<T> infer_selector(const SelectionPolicy& policy) {
    return [policy](std::span<const T> sigma) { return select_infer_admixture(policy, sigma); };
}

}  // namespace vblora
