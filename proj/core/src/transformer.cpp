#include "vblora/transformer.hpp"

#include <bit>
#include <cmath>
#include <cstring>

#include "vblora/errors.hpp"

namespace vblora {

std::string_view to_string(ModuleKind kind) noexcept {
    switch (kind) {
    case ModuleKind::Q: return "q";
    case ModuleKind::K: return "k";
    case ModuleKind::V: return "v";
    case ModuleKind::O: return "o";
    case ModuleKind::Up: return "up";
    case ModuleKind::Down: return "down";
    }
    return "q";
}

void TinyTransformerSpec::validate(std::size_t b) const {
    if (layers == 0) throw InvalidArgument("layers: must be positive");
    if (hidden == 0) throw InvalidArgument("hidden: must be positive");
    if (heads == 0) throw InvalidArgument("heads: must be positive");
    if (ffn_factor == 0) throw InvalidArgument("ffn_factor: must be positive");
    if (vocab < 2) throw InvalidArgument("vocab: must be at least 2");
    if (seq_len < 4) throw InvalidArgument("seq_len: must be at least 4");
    if (hidden % heads != 0)
        throw InvalidArgument("hidden: " + std::to_string(hidden) + " is not divisible by heads=" +
                              std::to_string(heads));
    require_divisible(hidden, b, "hidden");
    require_divisible(hidden * ffn_factor, b, "ffn_factor");
}

ModelGeometry TinyTransformerSpec::geometry(ModuleSet set) const {
    return ModelGeometry::transformer(layers, hidden, heads, ffn_factor, set);
}

template <typename T>
std::uint64_t BaseModel<T>::checksum() const {
    std::uint64_t hash = 0xcbf29ce484222325ull;
    const auto mix = [&](const Matrix<T>& m) {
        const auto* p = reinterpret_cast<const unsigned char*>(m.data().data());
        for (std::size_t i = 0; i < m.size() * sizeof(T); ++i) {
            hash ^= p[i];
            hash *= 0x100000001b3ull;
        }
    };
    mix(tok_emb);
    mix(pos_emb);
    mix(head);
    for (const auto& l : layers)
        for (auto kind : kAllModuleKinds) mix(l.weight(kind));
    return hash;
}

namespace {

std::pair<std::size_t, std::size_t> module_dims(const TinyTransformerSpec& spec, ModuleKind kind) {
    const std::size_t d = spec.hidden;
    switch (kind) {
    case ModuleKind::Up: return {d, spec.ffn_factor * d};
    case ModuleKind::Down: return {spec.ffn_factor * d, d};
    default: return {d, d};
    }
}

bool is_adapted(ModuleSet set, ModuleKind kind) {
    return set == ModuleSet::All || kind == ModuleKind::Q || kind == ModuleKind::V;
}

Matrix<float> normal_matrix(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
    Matrix<float> m(rows, cols);
    for (auto& v : m.data()) v = static_cast<float>(rng.normal(0.0, stddev));
    return m;
}

}  // namespace

TinyTransformer<float> build_model(const TinyTransformerSpec& spec, const AdapterConfig& config, std::uint64_t seed) {
    spec.validate(config.b);
    if (config.h == 0 || config.r == 0) throw InvalidArgument("h and r must be positive");
    config.selection.validate(config.h);

    Rng root(seed);
    Rng base_rng = root.fork();
    Rng adapter_rng = root.fork();

    TinyTransformer<float> model;
    model.spec = spec;
    model.config = config;
    const std::size_t d = spec.hidden;
    model.base.tok_emb = normal_matrix(spec.vocab, d, 1.0, base_rng);
    model.base.pos_emb = normal_matrix(spec.seq_len, d, 1.0, base_rng);
    model.base.head = normal_matrix(d, spec.vocab, 1.0 / std::sqrt(static_cast<double>(d)), base_rng);
    for (std::size_t l = 0; l < spec.layers; ++l) {
        BaseLayer<float> layer;
        for (auto kind : kAllModuleKinds) {
            const auto [din, dout] = module_dims(spec, kind);
            layer.weight(kind) = normal_matrix(din, dout, 1.0 / std::sqrt(static_cast<double>(din)), base_rng);
        }
        model.base.layers.push_back(std::move(layer));
    }

    model.adapter.bank = init_bank<float>(config.h, config.b, adapter_rng);
    model.slots.assign(spec.layers, {-1, -1, -1, -1, -1, -1});
    for (std::size_t l = 0; l < spec.layers; ++l) {
        for (auto kind : kAllModuleKinds) {
            if (!is_adapted(config.modules, kind)) continue;
            const auto [din, dout] = module_dims(spec, kind);
            AdaptedModule<float> m;
            m.layer = static_cast<std::uint32_t>(l);
            m.name = std::string(to_string(kind));
            m.d_in = din;
            m.d_out = dout;
            m.logits_A = init_logits<float>(din, config.r, config.h, config.b, adapter_rng, Side::A,
                                            config.logit_init_std);
            m.logits_B = init_logits<float>(dout, config.r, config.h, config.b, adapter_rng, Side::B,
                                            config.logit_init_std);
            model.slots[l][static_cast<std::size_t>(kind)] = static_cast<int>(model.adapter.modules.size());
            model.adapter.modules.push_back(std::move(m));
        }
    }
    return model;
}

template <typename T>
AdapterState<T> zeros_like(const AdapterState<T>& like) {
    AdapterState<T> out;
    out.bank.values = Matrix<T>(like.bank.size(), like.bank.vector_length());
    for (const auto& m : like.modules) {
        AdaptedModule<T> z;
        z.layer = m.layer;
        z.name = m.name;
        z.d_in = m.d_in;
        z.d_out = m.d_out;
        z.logits_A = LogitTensor<T>(m.logits_A.num_subvectors(), m.logits_A.rank(), m.logits_A.bank_size(), Side::A);
        z.logits_B = LogitTensor<T>(m.logits_B.num_subvectors(), m.logits_B.rank(), m.logits_B.bank_size(), Side::B);
        out.modules.push_back(std::move(z));
    }
    return out;
}

namespace {

constexpr double kLayerNormEps = 1e-5;

template <typename T>
struct NormCache {
    Matrix<T> xhat;
    std::vector<double> rstd;
};

template <typename T>
Matrix<T> layer_norm(const Matrix<T>& x, NormCache<T>& cache) {
    const std::size_t n = x.rows(), d = x.cols();
    cache.xhat = Matrix<T>(n, d);
    cache.rstd.assign(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const auto row = x.row(i);
        double mean = 0.0;
        for (auto v : row) mean += static_cast<double>(v);
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (auto v : row) var += (static_cast<double>(v) - mean) * (static_cast<double>(v) - mean);
        var /= static_cast<double>(d);
        const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
        cache.rstd[i] = rstd;
        for (std::size_t c = 0; c < d; ++c) cache.xhat(i, c) = static_cast<T>((static_cast<double>(row[c]) - mean) * rstd);
    }
    return cache.xhat;
}

template <typename T>
Matrix<T> layer_norm_backward(const Matrix<T>& dy, const NormCache<T>& cache) {
    const std::size_t n = dy.rows(), d = dy.cols();
    Matrix<T> dx(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        double mean_dy = 0.0, mean_dy_xhat = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
            mean_dy += static_cast<double>(dy(i, c));
            mean_dy_xhat += static_cast<double>(dy(i, c)) * static_cast<double>(cache.xhat(i, c));
        }
        mean_dy /= static_cast<double>(d);
        mean_dy_xhat /= static_cast<double>(d);
        for (std::size_t c = 0; c < d; ++c) {
            dx(i, c) = static_cast<T>(cache.rstd[i] * (static_cast<double>(dy(i, c)) - mean_dy -
                                                        static_cast<double>(cache.xhat(i, c)) * mean_dy_xhat));
        }
    }
    return dx;
}

template <typename T>
struct LinearCache {
    Matrix<T> x;
    Matrix<T> z;  // x A^T when adapted
};

template <typename T>
Matrix<T> linear(const Matrix<T>& x, const Matrix<T>& W, const ComposedFactors<T>* f, LinearCache<T>& cache) {
    cache.x = x;
    Matrix<T> y = matmul(x, W);
    if (f != nullptr) {
        cache.z = matmul_nt(x, f->A);
        add_inplace(y, matmul_nt(cache.z, f->B));
    }
    return y;
}

template <typename T>
Matrix<T> linear_backward(const Matrix<T>& dy, const Matrix<T>& W, const ComposedFactors<T>* f,
                          const LinearCache<T>& cache, ComposedFactors<T>* df) {
    Matrix<T> dx = matmul_nt(dy, W);
    if (f != nullptr) {
        const Matrix<T> dz = matmul(dy, f->B);  // n x r
        if (df != nullptr) {
            add_inplace(df->B, matmul_tn(dy, cache.z));
            add_inplace(df->A, matmul_tn(dz, cache.x));
        }
        add_inplace(dx, matmul(dz, f->A));
    }
    return dx;
}

template <typename T>
struct LayerCache {
    NormCache<T> ln1, ln2;
    LinearCache<T> q, k, v, o, up, down;
    Matrix<T> qm, km, vm;
    std::vector<Matrix<double>> probs;  // per head, S x S
    Matrix<T> up_pre;
};

template <typename T>
class SequencePass {
public:
    SequencePass(const TinyTransformer<T>& model, const std::vector<ComposedFactors<T>>& factors)
        : model_(model), factors_(factors) {}

    /// Sum of token losses; when `dfactors` is set, accumulates factor
    /// gradients of (loss_sum / normalizer).
    double run(const std::vector<int>& tokens, const std::vector<int>& targets, double normalizer,
               std::vector<ComposedFactors<T>>* dfactors) {
        const auto& spec = model_.spec;
        const std::size_t S = tokens.size(), d = spec.hidden;
        if (S > spec.seq_len || targets.size() != S) throw InvalidArgument("batch: sequence length mismatch");
        Matrix<T> x(S, d);
        for (std::size_t t = 0; t < S; ++t) {
            const auto tok = static_cast<std::size_t>(tokens[t]);
            if (tokens[t] < 0 || tok >= spec.vocab) throw InvalidArgument("batch: token outside the vocabulary");
            for (std::size_t c = 0; c < d; ++c) x(t, c) = model_.base.tok_emb(tok, c) + model_.base.pos_emb(t, c);
        }
        caches_.assign(spec.layers, {});
        for (std::size_t l = 0; l < spec.layers; ++l) x = layer_forward(l, x, caches_[l]);
        NormCache<T> final_norm;
        const Matrix<T> xf = layer_norm(x, final_norm);
        const Matrix<T> logits = matmul(xf, model_.base.head);

        double loss = 0.0;
        Matrix<T> dlogits(S, spec.vocab);
        for (std::size_t t = 0; t < S; ++t) {
            if (targets[t] < 0) continue;
            const auto row = logits.row(t);
            double peak = -INFINITY;
            for (auto v : row) peak = std::max(peak, static_cast<double>(v));
            double total = 0.0;
            for (auto v : row) total += std::exp(static_cast<double>(v) - peak);
            const double log_z = peak + std::log(total);
            const auto target = static_cast<std::size_t>(targets[t]);
            loss += log_z - static_cast<double>(row[target]);
            for (std::size_t c = 0; c < spec.vocab; ++c) {
                const double p = std::exp(static_cast<double>(row[c]) - log_z);
                dlogits(t, c) = static_cast<T>((p - (c == target ? 1.0 : 0.0)) / normalizer);
            }
        }
        if (dfactors == nullptr) return loss;

        Matrix<T> dx = layer_norm_backward(matmul_nt(dlogits, model_.base.head), final_norm);
        for (std::size_t l = spec.layers; l-- > 0;) dx = layer_backward(l, dx, caches_[l], *dfactors);
        return loss;
    }

private:
    const ComposedFactors<T>* factors_for(std::size_t layer, ModuleKind kind) const {
        const int slot = model_.module_slot(layer, kind);
        return slot < 0 ? nullptr : &factors_[static_cast<std::size_t>(slot)];
    }
    ComposedFactors<T>* dfactors_for(std::size_t layer, ModuleKind kind, std::vector<ComposedFactors<T>>& df) const {
        const int slot = model_.module_slot(layer, kind);
        return slot < 0 ? nullptr : &df[static_cast<std::size_t>(slot)];
    }

    Matrix<T> layer_forward(std::size_t l, const Matrix<T>& x, LayerCache<T>& c) {
        const auto& w = model_.base.layers[l];
        const std::size_t S = x.rows(), d = model_.spec.hidden, H = model_.spec.heads, dh = d / H;
        const Matrix<T> a = layer_norm(x, c.ln1);
        c.qm = linear(a, w.wq, factors_for(l, ModuleKind::Q), c.q);
        c.km = linear(a, w.wk, factors_for(l, ModuleKind::K), c.k);
        c.vm = linear(a, w.wv, factors_for(l, ModuleKind::V), c.v);
        const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
        Matrix<T> att(S, d);
        c.probs.assign(H, Matrix<double>(S, S));
        for (std::size_t hh = 0; hh < H; ++hh) {
            auto& P = c.probs[hh];
            const std::size_t off = hh * dh;
            for (std::size_t i = 0; i < S; ++i) {
                double peak = -INFINITY;
                for (std::size_t j = 0; j <= i; ++j) {
                    double s = 0.0;
                    for (std::size_t e = 0; e < dh; ++e)
                        s += static_cast<double>(c.qm(i, off + e)) * static_cast<double>(c.km(j, off + e));
                    P(i, j) = s * scale;
                    peak = std::max(peak, P(i, j));
                }
                double total = 0.0;
                for (std::size_t j = 0; j <= i; ++j) {
                    P(i, j) = std::exp(P(i, j) - peak);
                    total += P(i, j);
                }
                for (std::size_t j = 0; j <= i; ++j) P(i, j) /= total;
                for (std::size_t e = 0; e < dh; ++e) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j <= i; ++j) acc += P(i, j) * static_cast<double>(c.vm(j, off + e));
                    att(i, off + e) = static_cast<T>(acc);
                }
            }
        }
        Matrix<T> out = x;
        add_inplace(out, linear(att, w.wo, factors_for(l, ModuleKind::O), c.o));
        const Matrix<T> n2 = layer_norm(out, c.ln2);
        c.up_pre = linear(n2, w.wup, factors_for(l, ModuleKind::Up), c.up);
        Matrix<T> act = c.up_pre;
        for (auto& v : act.data()) v = v > T{0} ? v : T{0};
        add_inplace(out, linear(act, w.wdown, factors_for(l, ModuleKind::Down), c.down));
        return out;
    }

    Matrix<T> layer_backward(std::size_t l, const Matrix<T>& dout, const LayerCache<T>& c,
                             std::vector<ComposedFactors<T>>& df) {
        const auto& w = model_.base.layers[l];
        const std::size_t S = dout.rows(), d = model_.spec.hidden, H = model_.spec.heads, dh = d / H;

        // FFN branch.
        Matrix<T> dact = linear_backward(dout, w.wdown, factors_for(l, ModuleKind::Down), c.down,
                                         dfactors_for(l, ModuleKind::Down, df));
        for (std::size_t n = 0; n < dact.size(); ++n)
            if (!(c.up_pre.data()[n] > T{0})) dact.data()[n] = T{0};
        const Matrix<T> dn2 = linear_backward(dact, w.wup, factors_for(l, ModuleKind::Up), c.up,
                                              dfactors_for(l, ModuleKind::Up, df));
        Matrix<T> dx = dout;
        add_inplace(dx, layer_norm_backward(dn2, c.ln2));

        // Attention branch.
        const Matrix<T> datt = linear_backward(dx, w.wo, factors_for(l, ModuleKind::O), c.o,
                                               dfactors_for(l, ModuleKind::O, df));
        const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
        Matrix<T> dq(S, d), dk(S, d), dv(S, d);
        std::vector<double> dP(S);
        for (std::size_t hh = 0; hh < H; ++hh) {
            const auto& P = c.probs[hh];
            const std::size_t off = hh * dh;
            for (std::size_t i = 0; i < S; ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j <= i; ++j) {
                    double g = 0.0;
                    for (std::size_t e = 0; e < dh; ++e)
                        g += static_cast<double>(datt(i, off + e)) * static_cast<double>(c.vm(j, off + e));
                    dP[j] = g;
                    dot += P(i, j) * g;
                }
                for (std::size_t j = 0; j <= i; ++j) {
                    const double ds = P(i, j) * (dP[j] - dot) * scale;
                    for (std::size_t e = 0; e < dh; ++e) {
                        dv(j, off + e) = static_cast<T>(static_cast<double>(dv(j, off + e)) +
                                                        P(i, j) * static_cast<double>(datt(i, off + e)));
                        dq(i, off + e) = static_cast<T>(static_cast<double>(dq(i, off + e)) +
                                                        ds * static_cast<double>(c.km(j, off + e)));
                        dk(j, off + e) = static_cast<T>(static_cast<double>(dk(j, off + e)) +
                                                        ds * static_cast<double>(c.qm(i, off + e)));
                    }
                }
            }
        }
        Matrix<T> da = linear_backward(dq, w.wq, factors_for(l, ModuleKind::Q), c.q, dfactors_for(l, ModuleKind::Q, df));
        add_inplace(da, linear_backward(dk, w.wk, factors_for(l, ModuleKind::K), c.k, dfactors_for(l, ModuleKind::K, df)));
        add_inplace(da, linear_backward(dv, w.wv, factors_for(l, ModuleKind::V), c.v, dfactors_for(l, ModuleKind::V, df)));
        add_inplace(dx, layer_norm_backward(da, c.ln1));
        return dx;
    }

    const TinyTransformer<T>& model_;
    const std::vector<ComposedFactors<T>>& factors_;
    std::vector<LayerCache<T>> caches_;
};

template <typename T>
std::size_t count_targets(const Batch& batch) {
    if (batch.tokens.size() != batch.targets.size()) throw InvalidArgument("batch: tokens/targets size mismatch");
    std::size_t n = 0;
    for (const auto& row : batch.targets)
        for (int t : row) n += t >= 0 ? 1 : 0;
    if (n == 0) throw InvalidArgument("batch: no counted targets");
    return n;
}

template <typename T>
double run_batch(const TinyTransformer<T>& model, const Batch& batch, const Selector<T>& select,
                 AdapterState<T>* grad, std::vector<Admixture<T>>* selections) {
    const std::size_t count = count_targets<T>(batch);
    const auto& bank = model.adapter.bank;
    std::vector<ComposedSide<T>> sides_a, sides_b;
    std::vector<ComposedFactors<T>> factors;
    for (const auto& m : model.adapter.modules) {
        sides_a.push_back(compose_side<T>(m.logits_A, bank, select));
        sides_b.push_back(compose_side<T>(m.logits_B, bank, select));
        factors.push_back({sides_a.back().matrix, sides_b.back().matrix});
    }
    if (selections != nullptr) {
        selections->clear();
        for (std::size_t m = 0; m < factors.size(); ++m) {
            selections->insert(selections->end(), sides_a[m].cells.begin(), sides_a[m].cells.end());
            selections->insert(selections->end(), sides_b[m].cells.begin(), sides_b[m].cells.end());
        }
    }

    std::vector<ComposedFactors<T>> dfactors;
    if (grad != nullptr) {
        for (const auto& f : factors)
            dfactors.push_back({Matrix<T>(f.A.rows(), f.A.cols()), Matrix<T>(f.B.rows(), f.B.cols())});
    }
    SequencePass<T> pass(model, factors);
    double loss = 0.0;
    for (std::size_t s = 0; s < batch.size(); ++s)
        loss += pass.run(batch.tokens[s], batch.targets[s], static_cast<double>(count),
                         grad != nullptr ? &dfactors : nullptr);

    if (grad != nullptr) {
        *grad = zeros_like(model.adapter);
        for (std::size_t m = 0; m < factors.size(); ++m) {
            compose_side_backward(sides_a[m], dfactors[m].A, Side::A, bank, &grad->modules[m].logits_A,
                                  &grad->bank.values);
            compose_side_backward(sides_b[m], dfactors[m].B, Side::B, bank, &grad->modules[m].logits_B,
                                  &grad->bank.values);
        }
    }
    return loss / static_cast<double>(count);
}

}  // namespace

template <typename T>
double batch_loss(const TinyTransformer<T>& model, const Batch& batch, const Selector<T>& select) {
    return run_batch<T>(model, batch, select, nullptr, nullptr);
}

template <typename T>
double batch_loss_and_grad(const TinyTransformer<T>& model, const Batch& batch, const Selector<T>& select,
                           AdapterState<T>& grad, std::vector<Admixture<T>>* selections) {
    return run_batch<T>(model, batch, select, &grad, selections);
}

template struct BaseModel<float>;
template struct BaseModel<double>;
template AdapterState<float> zeros_like(const AdapterState<float>&);
template AdapterState<double> zeros_like(const AdapterState<double>&);
template double batch_loss(const TinyTransformer<float>&, const Batch&, const Selector<float>&);
template double batch_loss(const TinyTransformer<double>&, const Batch&, const Selector<double>&);
template double batch_loss_and_grad(const TinyTransformer<float>&, const Batch&, const Selector<float>&,
                                    AdapterState<float>&, std::vector<Admixture<float>>*);
template double batch_loss_and_grad(const TinyTransformer<double>&, const Batch&, const Selector<double>&,
                                    AdapterState<double>&, std::vector<Admixture<double>>*);

}  // namespace vblora
