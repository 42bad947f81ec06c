#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vblora/core.hpp"
#include "vblora/variants.hpp"

namespace vblora {

/// Trainable VB-LoRA parameters attached to one frozen matrix.
template <typename T>
struct AdaptedModule {
    std::uint32_t layer = 0;
    std::string name;
    std::size_t d_in = 0;
    std::size_t d_out = 0;
    LogitTensor<T> logits_A;  // (d_in/b, r, h)
    LogitTensor<T> logits_B;  // (d_out/b, r, h)

    template <typename U>
    AdaptedModule<U> cast() const {
        return {layer, name, d_in, d_out, logits_A.template cast<U>(), logits_B.template cast<U>()};
    }

    friend bool operator==(const AdaptedModule&, const AdaptedModule&) = default;
};

/// Everything that is trained: one bank shared by every adapted matrix.
template <typename T>
struct AdapterState {
    VectorBank<T> bank;
    std::vector<AdaptedModule<T>> modules;

    std::size_t logit_count() const {
        std::size_t n = 0;
        for (const auto& m : modules) n += m.logits_A.data().size() + m.logits_B.data().size();
        return n;
    }
    std::size_t subvector_count() const {
        std::size_t n = 0;
        for (const auto& m : modules) n += m.logits_A.cells() + m.logits_B.cells();
        return n;
    }
    std::size_t trainable_count() const { return bank.values.size() + logit_count(); }

    template <typename U>
    AdapterState<U> cast() const {
        AdapterState<U> out{bank.template cast<U>(), {}};
        for (const auto& m : modules) out.modules.push_back(m.template cast<U>());
        return out;
    }

    friend bool operator==(const AdapterState&, const AdapterState&) = default;
};

/// Compose A and B for one module with a deterministic top-k selection.
template <typename T>
ComposedFactors<T> compose_module(const AdaptedModule<T>& m, const VectorBank<T>& bank, std::size_t k) {
    return {compose_A(m.logits_A, bank, k), compose_B(m.logits_B, bank, k)};
}

}  // namespace vblora
