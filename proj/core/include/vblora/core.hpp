#pragma once

// Vector bank, top-k admixture module (TKAM), and assembly of the low-rank
// factors A and B from a shared bank.
//
// Layout conventions:
//   * A logit tensor has shape (d/b, r, h): for every (sub-vector j, rank i)
//     cell there is one length-h logit slice.
//   * Composing a side yields a (d/b, r, b) grid of sub-vectors u[j][i].
//   * A (r x d_in):  A[i][j*b + t] = u[j][i][t]
//   * B (d_out x r): B[j*b + t][i] = u[j][i][t]
//   * Forward application is y = x W + (x A^T) B^T with W stored d_in x d_out,
//     so the merged weight is W + (B A)^T.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "vblora/errors.hpp"
#include "vblora/random.hpp"
#include "vblora/tensor.hpp"

namespace vblora {

inline constexpr double kBankInitBound = 0.02;
inline constexpr double kLogitInitStd = 0.01;

/// The globally shared set of h basis vectors, each of length b.
template <typename T>
struct VectorBank {
    Matrix<T> values;  // h x b

    std::size_t size() const noexcept { return values.rows(); }
    std::size_t vector_length() const noexcept { return values.cols(); }
    std::span<const T> vector(std::size_t s) const noexcept { return values.row(s); }

    template <typename U>
    VectorBank<U> cast() const {
        return {values.template cast<U>()};
    }

    friend bool operator==(const VectorBank&, const VectorBank&) = default;
};

template <typename T = float>
VectorBank<T> init_bank(std::size_t h, std::size_t b, Rng& rng) {
    if (h == 0 || b == 0) {
        throw InvalidArgument("init_bank: h and b must be positive (h=" + std::to_string(h) +
                              ", b=" + std::to_string(b) + ")");
    }
    VectorBank<T> bank{Matrix<T>(h, b)};
    for (auto& v : bank.values.data())
        v = static_cast<T>(rng.uniform(-kBankInitBound, kBankInitBound));
    return bank;
}

template <typename T = float>
VectorBank<T> init_bank(std::size_t h, std::size_t b, std::uint64_t seed) {
    Rng rng(seed);
    return init_bank<T>(h, b, rng);
}

enum class Side : std::uint8_t { A = 0, B = 1 };

inline const char* to_string(Side side) noexcept { return side == Side::A ? "A" : "B"; }

/// Per-matrix selection logits of shape (d/b, r, h).
template <typename T>
class LogitTensor {
public:
    LogitTensor() = default;
    LogitTensor(std::size_t num_subvectors, std::size_t rank, std::size_t bank_size, Side side)
        : num_subvectors_(num_subvectors),
          rank_(rank),
          bank_size_(bank_size),
          side_(side),
          values_(num_subvectors * rank * bank_size, T{0}) {}

    std::size_t num_subvectors() const noexcept { return num_subvectors_; }  // d / b
    std::size_t rank() const noexcept { return rank_; }
    std::size_t bank_size() const noexcept { return bank_size_; }
    Side side() const noexcept { return side_; }
    /// Number of (sub-vector, rank) cells, i.e. composed sub-vectors.
    std::size_t cells() const noexcept { return num_subvectors_ * rank_; }

    std::span<T> slice(std::size_t j, std::size_t i) noexcept {
        return {values_.data() + (j * rank_ + i) * bank_size_, bank_size_};
    }
    std::span<const T> slice(std::size_t j, std::size_t i) const noexcept {
        return {values_.data() + (j * rank_ + i) * bank_size_, bank_size_};
    }
    std::span<T> cell(std::size_t c) noexcept { return {values_.data() + c * bank_size_, bank_size_}; }
    std::span<const T> cell(std::size_t c) const noexcept {
        return {values_.data() + c * bank_size_, bank_size_};
    }

    std::span<T> data() noexcept { return values_; }
    std::span<const T> data() const noexcept { return values_; }

    template <typename U>
    LogitTensor<U> cast() const {
        LogitTensor<U> out(num_subvectors_, rank_, bank_size_, side_);
        for (std::size_t n = 0; n < values_.size(); ++n) out.data()[n] = static_cast<U>(values_[n]);
        return out;
    }

    friend bool operator==(const LogitTensor&, const LogitTensor&) = default;

private:
    std::size_t num_subvectors_ = 0;
    std::size_t rank_ = 0;
    std::size_t bank_size_ = 0;
    Side side_ = Side::A;
    std::vector<T> values_;
};

inline void require_divisible(std::size_t d_dim, std::size_t b, const char* where) {
    if (b == 0 || d_dim == 0 || d_dim % b != 0) {
        throw InvalidArgument(std::string(where) + ": dimension " + std::to_string(d_dim) +
                              " is not divisible by sub-vector length b=" + std::to_string(b));
    }
}

/// Logits for a d_dim-long factor side: entries i.i.d. N(0, std^2), std 0.01.
template <typename T = float>
LogitTensor<T> init_logits(std::size_t d_dim, std::size_t r, std::size_t h, std::size_t b, Rng& rng,
                           Side side = Side::A, double stddev = kLogitInitStd) {
    require_divisible(d_dim, b, "init_logits");
    if (r == 0 || h == 0) throw InvalidArgument("init_logits: r and h must be positive");
    LogitTensor<T> logits(d_dim / b, r, h, side);
    for (auto& v : logits.data()) v = static_cast<T>(rng.normal(0.0, stddev));
    return logits;
}

template <typename T = float>
LogitTensor<T> init_logits(std::size_t d_dim, std::size_t r, std::size_t h, std::size_t b,
                           std::uint64_t seed, Side side = Side::A) {
    Rng rng(seed);
    return init_logits<T>(d_dim, r, h, b, rng, side);
}

/// One composed sub-vector: values = sum_s weights[s] * bank[indices[s]].
template <typename T>
struct SubVector {
    std::vector<T> values;
    std::vector<std::uint32_t> indices;  // descending logit, ties by lower index
    std::vector<T> weights;              // aligned with indices
};

/// A selection over bank rows together with what the backward pass needs.
///
/// `indices`/`weights` define the forward mixture. Logit gradients are taken
/// through a (possibly different) surrogate distribution `grad_indices` /
/// `grad_weights`, scaled by `grad_scale` (1/tau for tempered softmaxes). For
/// the plain top-k path the surrogate is the forward mixture itself.
template <typename T>
struct Admixture {
    std::vector<std::uint32_t> indices;
    std::vector<T> weights;
    std::vector<std::uint32_t> grad_indices;
    std::vector<T> grad_weights;
    double grad_scale = 1.0;
};

/// Indices of the k largest entries, ordered by descending value with ties
/// broken by the lower index.
template <typename T>
std::vector<std::uint32_t> topk_indices(std::span<const T> sigma, std::size_t k) {
    std::vector<std::uint32_t> order(sigma.size());
    std::iota(order.begin(), order.end(), 0u);
    const auto by_rank = [&](std::uint32_t a, std::uint32_t b) {
        return sigma[a] > sigma[b] || (sigma[a] == sigma[b] && a < b);
    };
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), by_rank);
    order.resize(k);
    return order;
}

/// 1 - sum(explicit), accumulated left to right in T, clamped to [0, 1].
template <typename T>
T implied_last_weight(std::span<const T> explicit_weights) {
    T acc = T{0};
    for (T w : explicit_weights) acc += w;
    T last = T{1} - acc;
    return std::clamp(last, T{0}, T{1});
}

/// Softmax over `sigma` restricted to `indices`, in canonical form: the first
/// n-1 weights are the rounded softmax values and the last is 1 minus their
/// sum (clamped at 0). Stored adapters keep only the first n-1, so this form
/// makes reconstruction bit-identical to live composition.
template <typename T>
std::vector<T> canonical_softmax(std::span<const T> sigma, std::span<const std::uint32_t> indices,
                                 double inv_temperature = 1.0) {
    const std::size_t n = indices.size();
    std::vector<T> weights(n);
    if (n == 0) return weights;
    double peak = -INFINITY;
    for (auto s : indices) peak = std::max(peak, static_cast<double>(sigma[s]) * inv_temperature);
    std::vector<double> e(n);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        e[i] = std::exp(static_cast<double>(sigma[indices[i]]) * inv_temperature - peak);
        total += e[i];
    }
    for (std::size_t i = 0; i + 1 < n; ++i) weights[i] = static_cast<T>(e[i] / total);
    weights[n - 1] = implied_last_weight<T>(std::span<const T>(weights.data(), n - 1));
    return weights;
}

/// Weighted sum of bank rows, accumulated in double.
template <typename T>
std::vector<T> admix_rows(const VectorBank<T>& bank, std::span<const std::uint32_t> indices,
                          std::span<const T> weights) {
    const std::size_t b = bank.vector_length();
    std::vector<double> acc(b, 0.0);
    for (std::size_t s = 0; s < indices.size(); ++s) {
        const double w = weights[s];
        const auto row = bank.vector(indices[s]);
        for (std::size_t t = 0; t < b; ++t) acc[t] += w * static_cast<double>(row[t]);
    }
    return {acc.begin(), acc.end()};
}

template <typename T>
void validate_logits(std::span<const T> sigma, std::size_t h, std::size_t k, const char* where) {
    if (sigma.size() != h) {
        throw InvalidArgument(std::string(where) + ": logit vector has length " +
                              std::to_string(sigma.size()) + " but the bank has h=" + std::to_string(h));
    }
    if (k == 0 || k > h) {
        throw InvalidArgument(std::string(where) + ": k=" + std::to_string(k) + " must lie in [1, h=" +
                              std::to_string(h) + "]");
    }
    for (std::size_t s = 0; s < sigma.size(); ++s) {
        if (!std::isfinite(static_cast<double>(sigma[s]))) {
            throw InvalidArgument(std::string(where) + ": logit " + std::to_string(s) + " is not finite");
        }
    }
}

/// w = Softmax(TopK(sigma, k)); the forward mixture is also the gradient surrogate.
template <typename T>
Admixture<T> topk_select(std::span<const T> sigma, std::size_t k) {
    Admixture<T> mix;
    mix.indices = topk_indices(sigma, k);
    mix.weights = canonical_softmax<T>(sigma, mix.indices);
    mix.grad_indices = mix.indices;
    mix.grad_weights = mix.weights;
    return mix;
}

template <typename T>
SubVector<T> to_subvector(const Admixture<T>& mix, const VectorBank<T>& bank) {
    return {admix_rows<T>(bank, mix.indices, mix.weights), mix.indices, mix.weights};
}

/// Top-k admixture module: u = sum_s w_s(sigma) alpha_s.
template <typename T>
SubVector<T> topk_admix(std::span<const T> sigma, const VectorBank<T>& bank, std::size_t k) {
    validate_logits(sigma, bank.size(), k, "topk_admix");
    return to_subvector(topk_select(sigma, k), bank);
}

/// Gradient of one admixture w.r.t. its logits and the bank rows it touched.
template <typename T>
struct AdmixtureGradient {
    std::vector<T> grad_sigma;          // length h; zero outside grad_indices
    std::vector<std::uint32_t> rows;    // bank rows with a gradient
    Matrix<T> grad_rows;                // rows.size() x b
};

/// Accumulate the backward pass of one admixture into dense logit and bank
/// gradients. Only rows in `mix.indices` receive bank gradient.
template <typename T>
void accumulate_admixture_backward(const Admixture<T>& mix, std::span<const T> grad_u,
                                   const VectorBank<T>& bank, std::span<T> grad_sigma,
                                   Matrix<T>* grad_bank) {
    const std::size_t b = bank.vector_length();
    if (grad_bank != nullptr) {
        for (std::size_t s = 0; s < mix.indices.size(); ++s) {
            const double w = mix.weights[s];
            auto row = grad_bank->row(mix.indices[s]);
            for (std::size_t t = 0; t < b; ++t)
                row[t] = static_cast<T>(static_cast<double>(row[t]) + w * static_cast<double>(grad_u[t]));
        }
    }
    if (grad_sigma.empty() || mix.grad_indices.size() < 2) return;  // singleton softmax is constant
    // d/d sigma_s of (sum_j p_j alpha_j) . g = scale * p_s * (alpha_s . g - u_soft . g)
    const std::size_t n = mix.grad_indices.size();
    std::vector<double> proj(n);
    double mean = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
        const auto row = bank.vector(mix.grad_indices[s]);
        double dot = 0.0;
        for (std::size_t t = 0; t < b; ++t) dot += static_cast<double>(row[t]) * static_cast<double>(grad_u[t]);
        proj[s] = dot;
        mean += static_cast<double>(mix.grad_weights[s]) * dot;
    }
    for (std::size_t s = 0; s < n; ++s) {
        const double g = mix.grad_scale * static_cast<double>(mix.grad_weights[s]) * (proj[s] - mean);
        auto& slot = grad_sigma[mix.grad_indices[s]];
        slot = static_cast<T>(static_cast<double>(slot) + g);
    }
}

/// Backward pass of the top-k admixture module for a single sub-vector.
template <typename T>
AdmixtureGradient<T> tkam_backward(std::span<const T> grad_u, std::span<const T> sigma,
                                   const VectorBank<T>& bank, std::size_t k) {
    validate_logits(sigma, bank.size(), k, "tkam_backward");
    if (grad_u.size() != bank.vector_length())
        throw InvalidArgument("tkam_backward: grad_u length does not match b");
    const auto mix = topk_select(sigma, k);
    AdmixtureGradient<T> out;
    out.grad_sigma.assign(bank.size(), T{0});
    Matrix<T> dense(bank.size(), bank.vector_length());
    accumulate_admixture_backward<T>(mix, grad_u, bank, out.grad_sigma, &dense);
    out.rows = mix.indices;
    out.grad_rows = Matrix<T>(mix.indices.size(), bank.vector_length());
    for (std::size_t s = 0; s < mix.indices.size(); ++s) {
        const auto src = dense.row(mix.indices[s]);
        std::copy(src.begin(), src.end(), out.grad_rows.row(s).begin());
    }
    return out;
}

template <typename T>
using Selector = std::function<Admixture<T>(std::span<const T>)>;

template <typename T>
Selector<T> topk_selector(std::size_t k) {
    return [k](std::span<const T> sigma) { return topk_select(sigma, k); };
}

/// Result of composing one side: the factor matrix plus the per-cell
/// admixtures (cell c = j * r + i) kept for the backward pass.
template <typename T>
struct ComposedSide {
    Matrix<T> matrix;
    std::vector<Admixture<T>> cells;
};

/// Low-rank factors of one adapted matrix. Delta W = B A has shape d_out x d_in.
template <typename T>
struct ComposedFactors {
    Matrix<T> A;  // r x d_in
    Matrix<T> B;  // d_out x r

    std::size_t rank() const noexcept { return A.rows(); }
    std::size_t d_in() const noexcept { return A.cols(); }
    std::size_t d_out() const noexcept { return B.rows(); }

    friend bool operator==(const ComposedFactors&, const ComposedFactors&) = default;
};

template <typename T>
ComposedSide<T> compose_side(const LogitTensor<T>& logits, const VectorBank<T>& bank,
                             const Selector<T>& select) {
    if (logits.bank_size() != bank.size()) {
        throw InvalidArgument("compose: logit tensor bank dimension " + std::to_string(logits.bank_size()) +
                              " does not match bank size h=" + std::to_string(bank.size()));
    }
    const std::size_t nsub = logits.num_subvectors();
    const std::size_t r = logits.rank();
    const std::size_t b = bank.vector_length();
    const std::size_t d = nsub * b;
    ComposedSide<T> out;
    out.matrix = logits.side() == Side::A ? Matrix<T>(r, d) : Matrix<T>(d, r);
    out.cells.reserve(logits.cells());
    for (std::size_t j = 0; j < nsub; ++j) {
        for (std::size_t i = 0; i < r; ++i) {
            auto mix = select(logits.slice(j, i));
            const auto u = admix_rows<T>(bank, mix.indices, mix.weights);
            for (std::size_t t = 0; t < b; ++t) {
                if (logits.side() == Side::A)
                    out.matrix(i, j * b + t) = u[t];
                else
                    out.matrix(j * b + t, i) = u[t];
            }
            out.cells.push_back(std::move(mix));
        }
    }
    return out;
}

namespace detail {
template <typename T>
void validate_topk_compose(const LogitTensor<T>& logits, const VectorBank<T>& bank, std::size_t k,
                           const char* where) {
    if (logits.bank_size() != bank.size()) {
        throw InvalidArgument(std::string(where) + ": logit tensor bank dimension " +
                              std::to_string(logits.bank_size()) + " does not match bank size h=" +
                              std::to_string(bank.size()));
    }
    if (k == 0 || k > bank.size())
        throw InvalidArgument(std::string(where) + ": k=" + std::to_string(k) + " outside [1, h]");
    for (auto v : logits.data())
        if (!std::isfinite(static_cast<double>(v)))
            throw InvalidArgument(std::string(where) + ": non-finite logit");
}
}  // namespace detail

/// A (r x d_in) from A-side logits (d_in/b, r, h).
template <typename T>
Matrix<T> compose_A(const LogitTensor<T>& logits, const VectorBank<T>& bank, std::size_t k) {
    if (logits.side() != Side::A) throw InvalidArgument("compose_A: logits are tagged as B-side");
    detail::validate_topk_compose(logits, bank, k, "compose_A");
    return compose_side<T>(logits, bank, topk_selector<T>(k)).matrix;
}

/// B (d_out x r) from B-side logits (d_out/b, r, h).
template <typename T>
Matrix<T> compose_B(const LogitTensor<T>& logits, const VectorBank<T>& bank, std::size_t k) {
    if (logits.side() != Side::B) throw InvalidArgument("compose_B: logits are tagged as A-side");
    detail::validate_topk_compose(logits, bank, k, "compose_B");
    return compose_side<T>(logits, bank, topk_selector<T>(k)).matrix;
}

/// Scatter the gradient of a composed factor matrix back onto its logits and
/// the shared bank. `grad_logits` must have the shape of the logits that
/// produced `side`; both accumulators are added to.
template <typename T>
void compose_side_backward(const ComposedSide<T>& side, const Matrix<T>& grad_matrix, Side which,
                           const VectorBank<T>& bank, LogitTensor<T>* grad_logits, Matrix<T>* grad_bank) {
    const std::size_t b = bank.vector_length();
    const std::size_t r = which == Side::A ? side.matrix.rows() : side.matrix.cols();
    const std::size_t d = which == Side::A ? side.matrix.cols() : side.matrix.rows();
    const std::size_t nsub = d / b;
    std::vector<T> grad_u(b);
    for (std::size_t j = 0; j < nsub; ++j) {
        for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t t = 0; t < b; ++t)
                grad_u[t] = which == Side::A ? grad_matrix(i, j * b + t) : grad_matrix(j * b + t, i);
            std::span<T> gsig = grad_logits != nullptr ? grad_logits->slice(j, i) : std::span<T>{};
            accumulate_admixture_backward<T>(side.cells[j * r + i], grad_u, bank, gsig, grad_bank);
        }
    }
}

namespace detail {
template <typename T>
void validate_factors(const ComposedFactors<T>& f) {
    if (f.A.rows() != f.B.cols()) {
        throw InvalidArgument("factors: rank of A (" + std::to_string(f.A.rows()) + ") differs from B (" +
                              std::to_string(f.B.cols()) + ")");
    }
}
}  // namespace detail

/// Dense Delta W = B A (d_out x d_in).
template <typename T>
Matrix<T> merge_delta(const ComposedFactors<T>& factors) {
    detail::validate_factors(factors);
    return matmul(factors.B, factors.A);
}

/// W + (B A)^T, i.e. the weight that reproduces adapted_forward with a single matmul.
template <typename T>
Matrix<T> merged_weight(const Matrix<T>& W, const ComposedFactors<T>& factors) {
    detail::validate_factors(factors);
    if (W.rows() != factors.d_in() || W.cols() != factors.d_out())
        throw InvalidArgument("merged_weight: W shape does not match the factors");
    Matrix<T> out = W;
    add_inplace(out, merge_delta(factors).transposed());
    return out;
}

/// y = x W + (x A^T) B^T, without materializing Delta W.
template <typename T>
Matrix<T> adapted_forward(const Matrix<T>& x, const Matrix<T>& W, const ComposedFactors<T>& factors) {
    detail::validate_factors(factors);
    if (x.cols() != W.rows() || W.rows() != factors.d_in() || W.cols() != factors.d_out()) {
        throw InvalidArgument("adapted_forward: dimension mismatch (x: " + std::to_string(x.rows()) + "x" +
                              std::to_string(x.cols()) + ", W: " + std::to_string(W.rows()) + "x" +
                              std::to_string(W.cols()) + ", d_in=" + std::to_string(factors.d_in()) +
                              ", d_out=" + std::to_string(factors.d_out()) + ")");
    }
    Matrix<T> y = matmul(x, W);
    const Matrix<T> z = matmul_nt(x, factors.A);  // n x r
    add_inplace(y, matmul_nt(z, factors.B));
    return y;
}

}  // namespace vblora
