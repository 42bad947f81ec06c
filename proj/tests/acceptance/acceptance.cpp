// Acceptance checks: one PASS/FAIL line per criterion, with its runtime.
// Exits nonzero when any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "vblora/accounting.hpp"
#include "vblora/adapter_store.hpp"
#include "vblora/config.hpp"
#include "vblora/core.hpp"
#include "vblora/harness.hpp"

using namespace vblora;

namespace {

struct Verdict {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

int failures = 0;

void criterion(const char* name, double limit_seconds, const std::function<Verdict()>& body) {
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
        v = body();
    } catch (const std::exception& e) {
        v = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (secs >= limit_seconds) {
        v.pass = false;
        v.detail += fmt("; over the %.0f s limit", limit_seconds);
    }
    failures += v.pass ? 0 : 1;
    std::printf("%s  %-22s %8.2fs  %s\n", v.pass ? "PASS" : "FAIL", name, secs, v.detail.c_str());
    std::fflush(stdout);
}

template <typename T>
VectorBank<T> normal_bank(std::size_t h, std::size_t b, Rng& rng, double sd) {
    VectorBank<T> bank{Matrix<T>(h, b)};
    for (auto& v : bank.values.data()) v = static_cast<T>(rng.normal(0.0, sd));
    return bank;
}

template <typename T>
LogitTensor<T> normal_logits(std::size_t nsub, std::size_t r, std::size_t h, Side side, Rng& rng) {
    LogitTensor<T> out(nsub, r, h, side);
    for (auto& v : out.data()) v = static_cast<T>(rng.normal());
    return out;
}

template <typename T>
Matrix<T> normal_matrix(std::size_t rows, std::size_t cols, Rng& rng) {
    Matrix<T> m(rows, cols);
    for (auto& v : m.data()) v = static_cast<T>(rng.normal());
    return m;
}

// ---------------------------------------------------------------------------

Verdict count_reproduction() {
    struct Row {
        const char* preset;
        std::size_t column;  // 1 LoRA, 2 VeRA, 3 VB-LoRA
        double expected;
        double published;  // millions
        bool published_agrees;
    };
    const Row rows[] = {
        {"roberta-base-qv", 1, 294'912, 0.295, true},  {"roberta-large-qv", 1, 786'432, 0.786, true},
        {"roberta-base-qv", 2, 43'008, 0.043, true},   {"roberta-large-qv", 2, 61'440, 0.061, true},
        {"roberta-base-qv", 3, 23'904, 0.023, true},   {"roberta-large-qv", 3, 25'344, 0.024, false},
    };
    std::string detail;
    bool ok = true;
    for (const auto& row : rows) {
        const auto reports = count_preset(find_count_preset(row.preset));
        const double got = reports[row.column].stored;
        const bool agrees = agrees_with_reported(got, row.published);
        ok &= got == row.expected && agrees == row.published_agrees;
        if (row.column == 3 && !row.published_agrees)
            detail += fmt("%s%s=%.0f (published %.3fM, annotated mismatch)", detail.empty() ? "" : "; ", row.preset,
                          got, row.published);
        else if (got != row.expected || !agrees)
            detail += fmt("%s%s[%zu]=%.0f", detail.empty() ? "" : "; ", row.preset, row.column, got);
    }
    if (ok) detail = "6 published values; " + detail;
    return {ok, detail};
}

Verdict formula_identity() {
    Rng rng(1);
    std::size_t mismatches = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t b = std::size_t{1} << rng.below(10);
        const std::size_t d = b * (1 + rng.below(32));
        const std::size_t L = 1 + rng.below(80), M = 1 + rng.below(12), r = 1 + rng.below(64);
        const std::size_t h = 2 + rng.below(255);  // k = 2 needs two rows
        const auto stored = count_vblora_stored(ModelGeometry::square(L, M, d), h, b, r, 2, 1).stored;
        mismatches += stored == static_cast<double>(h * b + 3 * L * M * r * (d / b)) ? 0 : 1;
    }
    return {mismatches == 0, fmt("1000 geometries, %zu mismatches", mismatches)};
}

Verdict gradient_suite() {
    Rng rng(2);
    std::size_t instances = 0, checked = 0, unselected = 0, excluded = 0;
    double worst = 0.0;
    bool zero = true;
    for (; instances < 24; ++instances) {
        auto config = preset_config("tiny");
        config.seed = instances;
        config.adapter.h = 2 + rng.below(7);                 // 2..8
        config.adapter.b = std::size_t{1} << rng.below(3);   // 1, 2, 4
        config.adapter.r = 1 + rng.below(2);
        config.adapter.selection.k = 1 + rng.below(std::min<std::size_t>(config.adapter.h, 3));
        config.adapter.modules = rng.below(2) ? ModuleSet::All : ModuleSet::QV;
        config.model.layers = 1;
        config.model.hidden = 4 * (1 + rng.below(2));
        config.model.heads = 2;
        config.model.ffn_factor = 2;
        auto run = make_run(config);
        auto model = run.model.cast<double>();
        for (auto& m : model.adapter.modules) {
            for (auto& v : m.logits_A.data()) v = rng.normal();
            for (auto& v : m.logits_B.data()) v = rng.normal();
        }
        for (auto& v : model.adapter.bank.values.data()) v = rng.normal(0.0, 0.5);
        Rng data(derive_seed(instances, "grad-check"));
        const auto report = grad_check(model, run.task.sample(3, data));
        checked += report.checked;
        unselected += report.unselected_checked;
        excluded += report.excluded_boundary;
        worst = std::max(worst, report.max_rel_error);
        zero &= report.unselected_exact_zero && report.max_unselected_numeric < 1e-10;
    }
    return {worst < 1e-7 && zero && instances >= 20,
            fmt("%zu instances, %zu checked, max rel err %.2e, %zu unselected all exact zero: %s, %zu at a top-k "
                "boundary skipped",
                instances, checked, worst, unselected, zero ? "yes" : "no", excluded)};
}

template <typename T>
double merge_worst(std::uint64_t seed) {
    Rng rng(seed);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t b = 1 + rng.below(8), h = 2 + rng.below(30), r = 1 + rng.below(8);
        const std::size_t d_in = b * (1 + rng.below(8)), d_out = b * (1 + rng.below(8)), n = 1 + rng.below(8);
        const std::size_t k = 1 + rng.below(h);
        const auto bank = normal_bank<T>(h, b, rng, 1.0);
        const ComposedFactors<T> f{compose_A(normal_logits<T>(d_in / b, r, h, Side::A, rng), bank, k),
                                   compose_B(normal_logits<T>(d_out / b, r, h, Side::B, rng), bank, k)};
        const auto W = normal_matrix<T>(d_in, d_out, rng);
        const auto x = normal_matrix<T>(n, d_in, rng);
        const auto unmerged = adapted_forward(x, W, f);
        const auto merged = matmul(x, merged_weight(W, f));
        double diff = 0.0, scale = 0.0;
        for (std::size_t i = 0; i < merged.size(); ++i) {
            diff = std::max(diff, std::abs(static_cast<double>(unmerged.data()[i]) - merged.data()[i]));
            scale = std::max(scale, std::abs(static_cast<double>(merged.data()[i])));
        }
        worst = std::max(worst, diff / std::max(scale, 1e-30));
    }
    return worst;
}

Verdict merge_equivalence() {
    const double f32 = merge_worst<float>(3), f64 = merge_worst<double>(4);
    return {f32 < 1e-5 && f64 < 1e-12, fmt("100+100 cases, worst relative diff float32 %.2e, float64 %.2e", f32, f64)};
}

Verdict sparsity() {
    Rng rng(5);
    // Per sub-vector: the backward of one admixture writes exactly its k rows.
    std::size_t cells = 0, bad_cells = 0;
    const std::size_t h = 24, b = 8, k = 3;
    const auto bank = normal_bank<double>(h, b, rng, 1.0);
    const auto logits = normal_logits<double>(16, 4, h, Side::A, rng);
    const auto side = compose_side<double>(logits, bank, topk_selector<double>(k));
    for (const auto& mix : side.cells) {
        Matrix<double> grad(h, b);
        std::vector<double> grad_u(b);
        for (auto& g : grad_u) g = rng.normal();
        accumulate_admixture_backward<double>(mix, grad_u, bank, {}, &grad);
        const std::set<std::uint32_t> chosen(mix.indices.begin(), mix.indices.end());
        bool ok = chosen.size() == k;
        for (std::size_t s = 0; s < h; ++s) {
            const auto row = grad.row(s);
            const bool touched = std::any_of(row.begin(), row.end(), [](double v) { return v != 0.0; });
            ok &= touched == chosen.contains(static_cast<std::uint32_t>(s));
        }
        ++cells;
        bad_cells += ok ? 0 : 1;
    }

    // Whole model: bank gradient rows are nonzero exactly on the union of selections.
    auto config = preset_config("desk");
    config.adapter.h = 96;  // more rows than selections, so untouched rows exist
    auto run = make_run(config);
    Rng data(7);
    AdapterState<float> grad;
    std::vector<Admixture<float>> selections;
    batch_loss_and_grad(run.model, run.task.sample(8, data), topk_selector<float>(2), grad, &selections);
    std::set<std::uint32_t> used;
    for (const auto& mix : selections) used.insert(mix.indices.begin(), mix.indices.end());
    std::size_t mismatched_rows = 0;
    for (std::size_t s = 0; s < grad.bank.size(); ++s) {
        const auto row = grad.bank.values.row(s);
        const bool touched = std::any_of(row.begin(), row.end(), [](float v) { return v != 0.0f; });
        mismatched_rows += touched == used.contains(static_cast<std::uint32_t>(s)) ? 0 : 1;
    }
    return {bad_cells == 0 && mismatched_rows == 0 && used.size() < grad.bank.size(),
            fmt("%zu sub-vectors touch exactly k=%zu rows (%zu bad); model: %zu of %zu rows used, %zu mismatched",
                cells, k, bad_cells, used.size(), grad.bank.size(), mismatched_rows)};
}

Verdict select_all() {
    Rng rng(6);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t h = 2 + rng.below(63), b = 1 + rng.below(16);
        const auto bank = normal_bank<double>(h, b, rng, 1.0);
        std::vector<double> sigma(h);
        for (auto& s : sigma) s = rng.normal(0.0, 2.0);
        const auto u = topk_admix<double>(sigma, bank, h);
        // Dense oracle in long double.
        const long double peak = *std::max_element(sigma.begin(), sigma.end());
        long double z = 0;
        std::vector<long double> p(h);
        for (std::size_t s = 0; s < h; ++s) z += p[s] = std::exp(static_cast<long double>(sigma[s]) - peak);
        for (std::size_t t = 0; t < b; ++t) {
            long double dense = 0;
            for (std::size_t s = 0; s < h; ++s) dense += p[s] / z * bank.values(s, t);
            worst = std::max(worst, static_cast<double>(std::abs(u.values[t] - dense)));
        }
    }
    return {worst < 1e-7, fmt("100 vectors, max abs diff %.2e", worst)};
}

Verdict serialization() {
    Rng rng(8);
    std::size_t roundtrips = 0, count_matches = 0, corruptions = 0, detected = 0;
    for (int n = 0; n < 50; ++n) {
        const std::size_t h = n % 5 == 4 ? 300 + rng.below(200) : 2 + rng.below(120);
        const std::size_t b = std::size_t{1} << rng.below(4), r = 1 + rng.below(4);
        const std::size_t k = 1 + rng.below(std::min<std::size_t>(h, 4));
        const std::size_t L = 1 + rng.below(3);
        std::vector<ModuleShape> shapes;
        for (const char* name : {"q", "v", "up"})
            shapes.push_back({name, b * (1 + rng.below(4)), b * (1 + rng.below(4))});
        AdapterState<float> state{normal_bank<float>(h, b, rng, 0.02), {}};
        for (std::uint32_t l = 0; l < L; ++l)
            for (const auto& s : shapes)
                state.modules.push_back({l, s.name, s.d_in, s.d_out, normal_logits<float>(s.d_in / b, r, h, Side::A, rng),
                                         normal_logits<float>(s.d_out / b, r, h, Side::B, rng)});
        const auto stored = export_adapter(state, k);
        const auto bytes = serialize(stored);
        const auto back = deserialize(bytes);
        roundtrips += back == stored && serialize(back) == bytes ? 1 : 0;

        ModelGeometry geom;
        geom.layers = L;
        geom.hidden = b;
        geom.modules = shapes;
        geom.modules_per_layer = shapes.size();
        const double expected = count_vblora_stored(geom, h, b, r, k, index_width_for(h)).stored;
        count_matches += static_cast<double>(storage_layout(stored).payload_bytes()) / 4.0 == expected ? 1 : 0;

        for (std::size_t i = 0; i < bytes.size(); ++i) {
            auto damaged = bytes;
            damaged[i] ^= static_cast<std::uint8_t>(1 + rng.below(255));
            ++corruptions;
            try {
                deserialize(damaged);
            } catch (const ParseError&) {
                ++detected;
            }
        }
    }
    return {roundtrips == 50 && count_matches == 50 && detected == corruptions,
            fmt("50 adapters: %zu bit-exact round trips, %zu payload/4 == stored count, %zu/%zu corruptions detected",
                roundtrips, count_matches, detected, corruptions)};
}

// ---------------------------------------------------------------------------

struct DeskRun {
    TrainResult result;
    double seconds = 0.0;
    double ratio() const { return result.final_eval_loss / result.initial_eval_loss; }
};

DeskRun desk_run(std::size_t k, bool frozen) {
    auto config = preset_config("desk");
    config.adapter.selection.k = k;
    auto run = make_run(config);
    if (frozen) run.train.lr_bank = run.train.lr_logits = 0.0;
    const auto t0 = std::chrono::steady_clock::now();
    DeskRun out;
    out.result = train(run.model, run.task, run.train);
    out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

std::size_t quartile_new_selections(const TrainResult& r, bool first) {
    // Steps 1..N; step 0 is the initial selection and is not a change.
    const std::size_t n = r.new_selections.size(), q = n / 4;
    const auto begin = r.new_selections.begin() + static_cast<std::ptrdiff_t>(first ? 0 : n - q);
    return std::accumulate(begin, begin + static_cast<std::ptrdiff_t>(q), std::size_t{0});
}

}  // namespace

int main() {
    std::printf("vblora acceptance\n");
    criterion("count-reproduction", 1, count_reproduction);
    criterion("formula-identity", 1, formula_identity);
    criterion("gradient-suite", 30, gradient_suite);
    criterion("merge-equivalence", 10, merge_equivalence);
    criterion("sparsity", 5, sparsity);
    criterion("select-all", 1, select_all);
    criterion("serialization", 10, serialization);

    DeskRun adapted, rerun, control, single;
    criterion("desk-training", 480, [&]() -> Verdict {
        adapted = desk_run(2, false);
        control = desk_run(2, true);
        rerun = desk_run(2, false);
        const bool halves = adapted.ratio() < 0.5 && !(control.ratio() < 0.5);
        const bool frozen = adapted.result.base_checksum_before == adapted.result.base_checksum_after;
        const bool same = adapted.result.losses == rerun.result.losses;
        const double slowest = std::max({adapted.seconds, control.seconds, rerun.seconds});
        return {halves && frozen && same && slowest < 120.0,
                fmt("loss %.4f -> %.4f (ratio %.3f), control ratio %.3f, base bit-identical: %s, rerun identical: %s, "
                    "slowest run %.1f s",
                    adapted.result.initial_eval_loss, adapted.result.final_eval_loss, adapted.ratio(), control.ratio(),
                    frozen ? "yes" : "no", same ? "yes" : "no", slowest)};
    });
    criterion("footprint", 240, [&]() -> Verdict {
        single = desk_run(1, false);
        const auto changed2 = adapted.result.footprint.changed_subvectors();
        const auto changed1 = single.result.footprint.changed_subvectors();
        const auto first = quartile_new_selections(adapted.result, true);
        const auto last = quartile_new_selections(adapted.result, false);
        return {changed2 > changed1 && first >= last,
                fmt("changed sub-vectors k=2: %zu, k=1: %zu; new selections first quartile %zu, last quartile %zu",
                    changed2, changed1, first, last)};
    });
    std::printf("%d criteria failed\n", failures);
    return failures == 0 ? 0 : 1;
}
