#pragma once

// A small pre-LayerNorm causal transformer with frozen base weights and
// VB-LoRA adapters on a configurable subset of its linear maps. Forward and
// backward passes are written out by hand; gradients flow only to the
// adapter parameters (bank and logits).

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "vblora/accounting.hpp"
#include "vblora/adapter.hpp"
#include "vblora/core.hpp"
#include "vblora/random.hpp"
#include "vblora/tensor.hpp"
#include "vblora/variants.hpp"

namespace vblora {

struct TinyTransformerSpec {
    std::size_t layers = 2;
    std::size_t hidden = 64;
    std::size_t heads = 2;
    std::size_t ffn_factor = 4;
    std::size_t vocab = 32;
    std::size_t seq_len = 16;

    /// d divisible by N_h; d and c*d divisible by b.
    void validate(std::size_t b) const;
    ModelGeometry geometry(ModuleSet set) const;
};

struct AdapterConfig {
    std::size_t h = 32;
    std::size_t b = 16;
    std::size_t r = 2;
    SelectionPolicy selection;
    ModuleSet modules = ModuleSet::QV;
    double logit_init_std = kLogitInitStd;
};

enum class ModuleKind : std::uint8_t { Q, K, V, O, Up, Down };

inline constexpr ModuleKind kAllModuleKinds[] = {ModuleKind::Q, ModuleKind::K,  ModuleKind::V,
                                                 ModuleKind::O, ModuleKind::Up, ModuleKind::Down};

std::string_view to_string(ModuleKind kind) noexcept;

template <typename T>
struct BaseLayer {
    // Each weight is stored d_in x d_out and applied as x W.
    Matrix<T> wq, wk, wv, wo, wup, wdown;

    const Matrix<T>& weight(ModuleKind kind) const {
        switch (kind) {
        case ModuleKind::Q: return wq;
        case ModuleKind::K: return wk;
        case ModuleKind::V: return wv;
        case ModuleKind::O: return wo;
        case ModuleKind::Up: return wup;
        case ModuleKind::Down: return wdown;
        }
        return wq;
    }
    Matrix<T>& weight(ModuleKind kind) {
        return const_cast<Matrix<T>&>(static_cast<const BaseLayer&>(*this).weight(kind));
    }

    friend bool operator==(const BaseLayer&, const BaseLayer&) = default;
};

template <typename T>
struct BaseModel {
    Matrix<T> tok_emb;  // vocab x d
    Matrix<T> pos_emb;  // seq_len x d
    Matrix<T> head;     // d x vocab
    std::vector<BaseLayer<T>> layers;

    template <typename U>
    BaseModel<U> cast() const {
        BaseModel<U> out{tok_emb.template cast<U>(), pos_emb.template cast<U>(), head.template cast<U>(), {}};
        for (const auto& l : layers) {
            out.layers.push_back({l.wq.template cast<U>(), l.wk.template cast<U>(), l.wv.template cast<U>(),
                                  l.wo.template cast<U>(), l.wup.template cast<U>(), l.wdown.template cast<U>()});
        }
        return out;
    }

    /// FNV-1a over the raw bytes of every frozen tensor.
    std::uint64_t checksum() const;

    friend bool operator==(const BaseModel&, const BaseModel&) = default;
};

template <typename T>
struct TinyTransformer {
    TinyTransformerSpec spec;
    AdapterConfig config;
    BaseModel<T> base;
    AdapterState<T> adapter;
    /// slot[layer][kind] = index into adapter.modules, or -1 when not adapted.
    std::vector<std::array<int, 6>> slots;

    int module_slot(std::size_t layer, ModuleKind kind) const {
        return slots[layer][static_cast<std::size_t>(kind)];
    }

    template <typename U>
    TinyTransformer<U> cast() const {
        return {spec, config, base.template cast<U>(), adapter.template cast<U>(), slots};
    }
};

/// Frozen base (fan-in scaled normal init) plus VB-LoRA parameters with a
/// single bank shared across every adapted matrix, layer and side.
TinyTransformer<float> build_model(const TinyTransformerSpec& spec, const AdapterConfig& config, std::uint64_t seed);

/// Token sequences with next-token targets; target -1 is ignored by the loss.
struct Batch {
    std::vector<std::vector<int>> tokens;
    std::vector<std::vector<int>> targets;

    std::size_t size() const noexcept { return tokens.size(); }
};

/// Mean cross-entropy over the counted targets of a batch.
template <typename T>
double batch_loss(const TinyTransformer<T>& model, const Batch& batch, const Selector<T>& select);

/// Loss plus gradients with respect to the bank and every logit tensor. `grad`
/// is overwritten and has the same shapes as model.adapter. When `selections`
/// is non-null it receives the forward admixture of every composed cell, in
/// module order, A side then B side.
template <typename T>
double batch_loss_and_grad(const TinyTransformer<T>& model, const Batch& batch, const Selector<T>& select,
                           AdapterState<T>& grad, std::vector<Admixture<T>>* selections = nullptr);

/// A zero-valued state with the shapes of `like`.
template <typename T>
AdapterState<T> zeros_like(const AdapterState<T>& like);

}  // namespace vblora
