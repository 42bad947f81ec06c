#include "vblora/harness.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "vblora/errors.hpp"

namespace vblora {

PermutationCopyTask::PermutationCopyTask(std::size_t vocab, std::size_t seq_len, std::uint64_t seed)
    : vocab_(vocab), seq_len_(seq_len), permutation_(vocab) {
    if (vocab < 2 || seq_len < 4) throw InvalidArgument("task: vocab >= 2 and seq_len >= 4 required");
    std::iota(permutation_.begin(), permutation_.end(), 0);
    Rng rng(seed);
    for (std::size_t i = vocab - 1; i > 0; --i) {
        const auto j = static_cast<std::size_t>(rng.below(i + 1));
        std::swap(permutation_[i], permutation_[j]);
    }
}

Batch PermutationCopyTask::sample(std::size_t batch_size, Rng& rng) const {
    Batch batch;
    const std::size_t half = seq_len_ / 2;
    for (std::size_t n = 0; n < batch_size; ++n) {
        std::vector<int> seq(seq_len_);
        for (std::size_t t = 0; t < half; ++t) seq[t] = static_cast<int>(rng.below(vocab_));
        for (std::size_t t = half; t < seq_len_; ++t)
            seq[t] = permutation_[static_cast<std::size_t>(seq[t - half])];
        std::vector<int> targets(seq_len_, -1);
        for (std::size_t t = half - 1; t + 1 < seq_len_; ++t) targets[t] = seq[t + 1];
        batch.tokens.push_back(std::move(seq));
        batch.targets.push_back(std::move(targets));
    }
    return batch;
}

void TrainConfig::validate() const {
    const auto positive = [](double v) { return std::isfinite(v) && v >= 0.0; };
    if (!positive(lr_bank)) throw InvalidArgument("lr_bank: must be a finite nonnegative number");
    if (!positive(lr_logits)) throw InvalidArgument("lr_logits: must be a finite nonnegative number");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw InvalidArgument("beta1: must lie in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw InvalidArgument("beta2: must lie in [0, 1)");
    if (!(eps > 0.0)) throw InvalidArgument("eps: must be positive");
    if (!positive(weight_decay)) throw InvalidArgument("weight_decay: must be nonnegative");
    if (!(warmup_ratio >= 0.0 && warmup_ratio <= 1.0)) throw InvalidArgument("warmup_ratio: must lie in [0, 1]");
    if (steps == 0) throw InvalidArgument("steps: must be positive");
    if (batch_size == 0) throw InvalidArgument("batch_size: must be positive");
    if (eval_batch_size == 0) throw InvalidArgument("eval_batch_size: must be positive");
    if (footprint_every == 0) throw InvalidArgument("footprint_every: must be positive");
}

TwoGroupAdamW::TwoGroupAdamW(const AdapterState<float>& like, const TrainConfig& config)
    : config_(config),
      warmup_steps_(static_cast<std::size_t>(std::ceil(config.warmup_ratio * static_cast<double>(config.steps)))),
      m_bank_(like.bank.values.size(), 0.0),
      v_bank_(like.bank.values.size(), 0.0),
      m_logits_(like.logit_count(), 0.0),
      v_logits_(like.logit_count(), 0.0) {}

double TwoGroupAdamW::schedule(std::size_t t) const {
    const std::size_t total = config_.steps;
    if (warmup_steps_ > 0 && t <= warmup_steps_)
        return static_cast<double>(t) / static_cast<double>(warmup_steps_);
    if (t >= total) return total == warmup_steps_ ? 1.0 : 0.0;
    return static_cast<double>(total - t) / static_cast<double>(total - warmup_steps_);
}

void TwoGroupAdamW::update(std::span<float> p, std::span<const float> g, std::span<double> m, std::span<double> v,
                           double lr, double mult) {
    const double b1 = config_.beta1, b2 = config_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    const double step = lr * mult;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = g[i];
        m[i] = b1 * m[i] + (1.0 - b1) * gi;
        v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
        double value = p[i];
        value -= step * config_.weight_decay * value;
        value -= step * (m[i] / c1) / (std::sqrt(v[i] / c2) + config_.eps);
        p[i] = static_cast<float>(value);
    }
}

void TwoGroupAdamW::step(AdapterState<float>& params, const AdapterState<float>& grad) {
    ++t_;
    const double mult = schedule(t_);
    update(params.bank.values.data(), grad.bank.values.data(), m_bank_, v_bank_, config_.lr_bank, mult);
    std::size_t offset = 0;
    for (std::size_t i = 0; i < params.modules.size(); ++i) {
        for (int side = 0; side < 2; ++side) {
            auto p = side == 0 ? params.modules[i].logits_A.data() : params.modules[i].logits_B.data();
            auto g = side == 0 ? grad.modules[i].logits_A.data() : grad.modules[i].logits_B.data();
            update(p, g, std::span(m_logits_).subspan(offset, p.size()), std::span(v_logits_).subspan(offset, p.size()),
                   config_.lr_logits, mult);
            offset += p.size();
        }
    }
}

std::vector<std::uint32_t> current_selections(const TinyTransformer<float>& model) {
    const auto& policy = model.config.selection;
    std::vector<std::uint32_t> out;
    for (const auto& m : model.adapter.modules) {
        for (const auto* logits : {&m.logits_A, &m.logits_B}) {
            for (std::size_t c = 0; c < logits->cells(); ++c) {
                const auto mix = select_infer_admixture<float>(policy, logits->cell(c));
                out.insert(out.end(), mix.indices.begin(), mix.indices.end());
            }
        }
    }
    return out;
}

std::vector<std::size_t> usage_histogram(const TinyTransformer<float>& model) {
    std::vector<std::size_t> counts(model.adapter.bank.size(), 0);
    for (auto i : current_selections(model)) ++counts[i];
    return counts;
}

TrainResult train(TinyTransformer<float>& model, const PermutationCopyTask& task, const TrainConfig& config) {
    config.validate();
    if (task.vocab() != model.spec.vocab || task.seq_len() > model.spec.seq_len)
        throw InvalidArgument("train: task does not fit the model vocabulary/sequence length");
    const auto& policy = model.config.selection;
    const std::size_t h = model.adapter.bank.size();
    const std::size_t per_sub = policy.inference_support(h);

    Rng root(config.seed);
    Rng data_rng = root.fork();
    Rng select_rng = root.fork();
    Rng eval_rng = root.fork();
    const Batch eval = task.sample(config.eval_batch_size, eval_rng);
    const auto infer = infer_selector<float>(policy);
    const auto select = train_selector<float>(policy, &select_rng);

    TrainResult result;
    result.base_checksum_before = model.base.checksum();
    result.initial_eval_loss = batch_loss(model, eval, infer);
    result.footprint = FootprintLog(h, per_sub, model.adapter.subvector_count());
    result.footprint.record(0, current_selections(model), per_sub);

    TwoGroupAdamW optimizer(model.adapter, config);
    AdapterState<float> grad;
    result.losses.reserve(config.steps);
    for (std::size_t step = 1; step <= config.steps; ++step) {
        const Batch batch = task.sample(config.batch_size, data_rng);
        const double loss = batch_loss_and_grad(model, batch, select, grad);
        if (!std::isfinite(loss)) throw DivergenceError(step, loss);
        optimizer.step(model.adapter, grad);
        result.losses.push_back(loss);
        if (step % config.footprint_every == 0 || step == config.steps)
            result.footprint.record(static_cast<std::uint32_t>(step), current_selections(model), per_sub);
    }
    result.final_eval_loss = batch_loss(model, eval, infer);
    if (!std::isfinite(result.final_eval_loss)) throw DivergenceError(config.steps, result.final_eval_loss);
    result.base_checksum_after = model.base.checksum();

    result.new_selections.assign(config.steps, 0);
    const auto fresh = result.footprint.new_selections();
    for (std::size_t r = 1; r < result.footprint.records(); ++r)
        result.new_selections[result.footprint.step(r) - 1] = fresh[r];
    return result;
}

namespace {

std::set<std::uint32_t> selection_set(std::span<const double> sigma, std::size_t k) {
    const auto idx = topk_indices(sigma, k);
    return {idx.begin(), idx.end()};
}

double relative_error(double analytic, double numeric, double floor) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

}  // namespace

GradCheckReport grad_check(const TinyTransformer<double>& model, const Batch& batch, const GradCheckOptions& options) {
    const std::size_t h = model.adapter.bank.size();
    const std::size_t k = model.config.selection.inference_support(h);
    const auto select = topk_selector<double>(k);

    AdapterState<double> grad;
    batch_loss_and_grad(model, batch, select, grad);

    TinyTransformer<double> work = model;
    const auto step_for = [&](double theta) { return options.relative_step * std::max(std::abs(theta), 1.0); };
    const auto difference = [&](double& slot, double eps) {
        const double saved = slot;
        slot = saved + eps;
        const double up = batch_loss(work, batch, select);
        slot = saved - eps;
        const double down = batch_loss(work, batch, select);
        slot = saved;
        return (up - down) / (2.0 * eps);
    };
    // One Richardson step over eps and eps/2 cancels the eps^2 term, which
    // otherwise dominates at eps = 1e-4.
    const auto central = [&](double& slot) {
        const double eps = step_for(slot);
        const double coarse = difference(slot, eps);
        if (!options.extrapolate) return coarse;
        return (4.0 * difference(slot, 0.5 * eps) - coarse) / 3.0;
    };

    GradCheckReport report;
    const auto note = [&](const std::string& name, double analytic, double numeric) {
        const double err = relative_error(analytic, numeric, options.magnitude_floor);
        ++report.checked;
        report.max_abs_error = std::max(report.max_abs_error, std::abs(analytic - numeric));
        if (err >= report.max_rel_error) {
            report.max_rel_error = err;
            report.worst = {name, analytic, numeric, err};
        }
    };

    auto bank = work.adapter.bank.values.data();
    for (std::size_t n = 0; n < bank.size(); ++n)
        note("bank[" + std::to_string(n / work.adapter.bank.vector_length()) + "][" +
                 std::to_string(n % work.adapter.bank.vector_length()) + "]",
             grad.bank.values.data()[n], central(bank[n]));

    for (std::size_t m = 0; m < work.adapter.modules.size(); ++m) {
        auto& mod = work.adapter.modules[m];
        for (int side = 0; side < 2; ++side) {
            auto& logits = side == 0 ? mod.logits_A : mod.logits_B;
            const auto& glogits = side == 0 ? grad.modules[m].logits_A : grad.modules[m].logits_B;
            for (std::size_t c = 0; c < logits.cells(); ++c) {
                auto sigma = logits.cell(c);
                const auto base_set = selection_set(sigma, k);
                for (std::size_t s = 0; s < h; ++s) {
                    const double saved = sigma[s];
                    const double eps = step_for(saved);
                    sigma[s] = saved + eps;
                    const bool crosses_up = selection_set(sigma, k) != base_set;
                    sigma[s] = saved - eps;
                    const bool crosses_down = selection_set(sigma, k) != base_set;
                    sigma[s] = saved;
                    if (crosses_up || crosses_down) {
                        ++report.excluded_boundary;
                        continue;
                    }
                    const double analytic = glogits.cell(c)[s];
                    const double numeric = central(sigma[s]);
                    if (base_set.count(static_cast<std::uint32_t>(s)) == 0) {
                        ++report.unselected_checked;
                        if (analytic != 0.0) report.unselected_exact_zero = false;
                        report.max_unselected_numeric = std::max(report.max_unselected_numeric, std::abs(numeric));
                        continue;
                    }
                    note(mod.name + "[" + std::to_string(mod.layer) + "]." + to_string(logits.side()) + "[" +
                             std::to_string(c) + "][" + std::to_string(s) + "]",
                         analytic, numeric);
                }
            }
        }
    }
    return report;
}

}  // namespace vblora
