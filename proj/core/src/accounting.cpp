#include "vblora/accounting.hpp"

#include <cmath>
#include <string>

#include "vblora/errors.hpp"

namespace vblora {

std::string_view to_string(ModuleSet set) noexcept { return set == ModuleSet::QV ? "qv" : "all"; }

ModuleSet parse_module_set(std::string_view name) {
    if (name == "qv") return ModuleSet::QV;
    if (name == "all") return ModuleSet::All;
    throw InvalidArgument("adapted_modules: expected 'qv' or 'all', got '" + std::string(name) + "'");
}

ModelGeometry ModelGeometry::square(std::size_t L, std::size_t M, std::size_t d) {
    ModelGeometry g;
    g.layers = L;
    g.modules_per_layer = M;
    g.hidden = d;
    return g;
}

ModelGeometry ModelGeometry::transformer(std::size_t L, std::size_t d, std::size_t heads, std::size_t c,
                                         ModuleSet set) {
    ModelGeometry g;
    g.layers = L;
    g.hidden = d;
    g.heads = heads;
    g.ffn_factor = c;
    if (set == ModuleSet::QV) {
        g.modules = {{"q", d, d}, {"v", d, d}};
    } else {
        g.modules = {{"q", d, d}, {"k", d, d}, {"v", d, d}, {"o", d, d}, {"up", d, c * d}, {"down", c * d, d}};
    }
    g.modules_per_layer = g.modules.size();
    return g;
}

std::vector<ModuleShape> ModelGeometry::layer_modules() const {
    if (!modules.empty()) return modules;
    std::vector<ModuleShape> out;
    out.reserve(modules_per_layer);
    for (std::size_t m = 0; m < modules_per_layer; ++m) out.push_back({"m" + std::to_string(m), hidden, hidden});
    return out;
}

void ModelGeometry::validate() const {
    if (layers == 0 || hidden == 0 || heads == 0 || ffn_factor == 0)
        throw InvalidArgument("geometry: L, d, N_h and c must be positive");
    if (modules.empty() && modules_per_layer == 0) throw InvalidArgument("geometry: M must be positive");
    for (const auto& m : modules)
        if (m.d_in == 0 || m.d_out == 0)
            throw InvalidArgument("geometry: module '" + m.name + "' has a zero dimension");
}

double CountReport::component(std::string_view name) const {
    for (const auto& c : breakdown)
        if (c.name == name) return c.value;
    return 0.0;
}

namespace {

void require_divisible_by_b(const ModelGeometry& geom, std::size_t b) {
    if (b == 0) throw InvalidArgument("b: must be positive");
    for (const auto& m : geom.layer_modules()) {
        if (m.d_in % b != 0 || m.d_out % b != 0) {
            throw InvalidArgument("geometry: module '" + m.name + "' (" + std::to_string(m.d_out) + "x" +
                                  std::to_string(m.d_in) + ") is not divisible by b=" + std::to_string(b));
        }
    }
}

}  // namespace

std::uint64_t count_subvectors(const ModelGeometry& geom, std::size_t b, std::size_t r) {
    geom.validate();
    require_divisible_by_b(geom, b);
    std::uint64_t per_layer = 0;
    for (const auto& m : geom.layer_modules()) per_layer += r * (m.d_in / b + m.d_out / b);
    return per_layer * geom.layers;
}

CountReport count_full_ft(const ModelGeometry& geom) {
    geom.validate();
    std::uint64_t total = 0;
    for (const auto& m : geom.layer_modules()) total += static_cast<std::uint64_t>(m.d_in) * m.d_out;
    total *= geom.layers;
    return {"FT", total, static_cast<double>(total), {{"weights", static_cast<double>(total)}}, "L*M*d^2"};
}

CountReport count_lora(const ModelGeometry& geom, std::size_t r) {
    geom.validate();
    std::uint64_t a = 0, bside = 0;
    for (const auto& m : geom.layer_modules()) {
        a += static_cast<std::uint64_t>(r) * m.d_in;
        bside += static_cast<std::uint64_t>(r) * m.d_out;
    }
    a *= geom.layers;
    bside *= geom.layers;
    const auto total = a + bside;
    return {"LoRA", total, static_cast<double>(total),
            {{"A", static_cast<double>(a)}, {"B", static_cast<double>(bside)}}, "2*L*M*d*r"};
}

CountReport count_vera(const ModelGeometry& geom, std::size_t r) {
    geom.validate();
    std::uint64_t lambda_b = 0, lambda_d = 0;
    for (const auto& m : geom.layer_modules()) {
        lambda_b += m.d_out;
        lambda_d += r;
    }
    lambda_b *= geom.layers;
    lambda_d *= geom.layers;
    const auto total = lambda_b + lambda_d;
    return {"VeRA", total, static_cast<double>(total),
            {{"lambda_b", static_cast<double>(lambda_b)}, {"lambda_d", static_cast<double>(lambda_d)}},
            "L*M*(d+r)"};
}

CountReport count_vblora_trainable(const ModelGeometry& geom, std::size_t h, std::size_t b, std::size_t r) {
    if (h == 0) throw InvalidArgument("h: must be positive");
    const std::uint64_t bank = static_cast<std::uint64_t>(h) * b;
    const std::uint64_t logits = count_subvectors(geom, b, r) * h;
    return {"VB-LoRA(trainable)", bank + logits, static_cast<double>(bank + logits),
            {{"bank", static_cast<double>(bank)}, {"logits", static_cast<double>(logits)}},
            "h*b + 2*L*M*r*(d/b)*h"};
}

std::size_t index_width_for(std::size_t h) {
    if (h <= 256) return 1;
    if (h <= 65536) return 2;
    throw UnsupportedBankSize("bank size h=" + std::to_string(h) + " exceeds the 16-bit index limit (65536)");
}

CountReport count_vblora_stored(const ModelGeometry& geom, std::size_t h, std::size_t b, std::size_t r,
                                std::size_t k, std::size_t index_bytes) {
    if (h == 0) throw InvalidArgument("h: must be positive");
    if (k == 0 || k > h) throw InvalidArgument("k: " + std::to_string(k) + " outside [1, h]");
    if (index_bytes != 1 && index_bytes != 2)
        throw InvalidArgument("index_bytes: must be 1 or 2 (got " + std::to_string(index_bytes) + ")");
    if (index_bytes == 1 && h > 256)
        throw InvalidArgument("index_bytes: 1-byte indices require h <= 256 (h=" + std::to_string(h) + ")");
    if (h > 65536) throw UnsupportedBankSize("bank size h=" + std::to_string(h) + " exceeds 65536");

    const std::uint64_t nsub = count_subvectors(geom, b, r);
    const double bank = static_cast<double>(h) * static_cast<double>(b);
    // Multiples of 1/4, exact in double.
    const double indices = static_cast<double>(nsub * k * index_bytes) / 4.0;
    const double weights = static_cast<double>(nsub * (k - 1));
    CountReport report;
    report.method = "VB-LoRA";
    report.trainable = count_vblora_trainable(geom, h, b, r).trainable;
    report.stored = bank + indices + weights;
    report.breakdown = {{"bank", bank}, {"indices", indices}, {"weights", weights}};
    report.note = "h*b + 2*L*M*r*(d/b)*(k*index_bytes/4 + k-1)";
    return report;
}

bool agrees_with_reported(double count, double reported_millions) {
    const double thousandths = count / 1000.0;  // count in units of 0.001M
    const double target = std::round(reported_millions * 1000.0);
    return std::floor(thousandths) == target || std::round(thousandths) == target;
}

namespace {

std::vector<CountPreset> make_presets() {
    std::vector<CountPreset> out;
    const auto add = [&](CountPreset p) { out.push_back(std::move(p)); };

    CountPreset rb;
    rb.name = "roberta-base-qv";
    rb.geometry = ModelGeometry::transformer(12, 768, 12, 4, ModuleSet::QV);
    rb.h = 90, rb.b = 256, rb.r = 4, rb.k = 2, rb.lora_r = 8, rb.vera_r = 1024;
    rb.model_params_millions = 125.0;
    rb.reported_lora = 0.295, rb.reported_vera = 0.043, rb.reported_vblora = 0.023;
    add(rb);

    CountPreset rba = rb;
    rba.name = "roberta-base-all";
    rba.geometry = ModelGeometry::transformer(12, 768, 12, 4, ModuleSet::All);
    rba.reported_lora.reset(), rba.reported_vera.reset();
    rba.reported_vblora = 0.027;
    add(rba);

    CountPreset rl;
    rl.name = "roberta-large-qv";
    rl.geometry = ModelGeometry::transformer(24, 1024, 16, 4, ModuleSet::QV);
    rl.h = 90, rl.b = 256, rl.r = 4, rl.k = 2, rl.lora_r = 8, rl.vera_r = 256;
    rl.model_params_millions = 355.0;
    rl.reported_lora = 0.786, rl.reported_vera = 0.061, rl.reported_vblora = 0.024;
    rl.note = "VB-LoRA formula gives 25,344; published figure is 0.024M";
    add(rl);

    CountPreset rla = rl;
    rla.name = "roberta-large-all";
    rla.geometry = ModelGeometry::transformer(24, 1024, 16, 4, ModuleSet::All);
    rla.reported_lora.reset(), rla.reported_vera.reset();
    rla.reported_vblora = 0.033;
    rla.note.clear();
    add(rla);

    CountPreset gm;
    gm.name = "gpt2-medium";
    gm.geometry = ModelGeometry::transformer(24, 1024, 16, 4, ModuleSet::All);
    gm.h = 256, gm.b = 256, gm.r = 4, gm.k = 2, gm.lora_r = 4, gm.vera_r = 1024;
    gm.model_params_millions = 354.92;
    gm.reported_lora = 0.35, gm.reported_vera = 0.098, gm.reported_vblora = 0.076;
    gm.note = "best effort: adapted module set not fully specified; LoRA/VeRA counted on q,v";
    add(gm);

    CountPreset gl = gm;
    gl.name = "gpt2-large";
    gl.geometry = ModelGeometry::transformer(36, 1280, 20, 4, ModuleSet::All);
    gl.h = 350;
    gl.model_params_millions = 774.03;
    gl.reported_lora = 0.77, gl.reported_vera = 0.17, gl.reported_vblora = 0.13;
    add(gl);

    const auto llama = [](std::size_t L, std::size_t d, std::size_t ffn) {
        ModelGeometry g;
        g.layers = L;
        g.hidden = d;
        g.heads = d / 128;
        g.modules = {{"q", d, d},       {"k", d, d},       {"v", d, d},       {"o", d, d},
                     {"gate", d, ffn},  {"up", d, ffn},    {"down", ffn, d}};
        g.modules_per_layer = g.modules.size();
        return g;
    };
    CountPreset l7;
    l7.name = "llama2-7b";
    // 11008 is not a multiple of 256; the closest divisible width is used.
    l7.geometry = llama(32, 4096, 11008 / 256 * 256);
    l7.h = 2048, l7.b = 256, l7.r = 4, l7.k = 2, l7.lora_r = 64, l7.vera_r = 1024;
    l7.model_params_millions = 6738.0;
    l7.reported_lora = 159.9, l7.reported_vera = 1.6, l7.reported_vblora = 0.8;
    l7.note = "best effort: module enumeration not fully specified";
    add(l7);

    CountPreset l13 = l7;
    l13.name = "llama2-13b";
    l13.geometry = llama(40, 5120, 13824);
    l13.r = 6;
    l13.model_params_millions = 13016.0;
    l13.reported_lora = 250.3, l13.reported_vera = 2.4, l13.reported_vblora = 1.1;
    add(l13);
    return out;
}

}  // namespace

const std::vector<CountPreset>& count_presets() {
    static const std::vector<CountPreset> presets = make_presets();
    return presets;
}

const CountPreset& find_count_preset(std::string_view name) {
    std::string key(name);
    if (key == "roberta-base" || key == "roberta-large") key += "-qv";
    for (const auto& p : count_presets())
        if (p.name == key) return p;
    std::string known;
    for (const auto& p : count_presets()) known += (known.empty() ? "" : ", ") + p.name;
    throw InvalidArgument("preset: unknown name '" + std::string(name) + "' (known: " + known + ")");
}

std::vector<CountReport> count_preset(const CountPreset& preset) {
    std::vector<CountReport> out;
    auto ft = count_full_ft(preset.geometry);
    ft.note = "adapted-matrix total L*M*d^2; published model size " +
              std::to_string(preset.model_params_millions) + "M";
    out.push_back(ft);

    // LoRA and VeRA baselines are reported on query/value only for the GPT-2 presets.
    ModelGeometry baseline = preset.geometry;
    if (preset.name.rfind("gpt2", 0) == 0)
        baseline = ModelGeometry::transformer(preset.geometry.layers, preset.geometry.hidden,
                                              preset.geometry.heads, preset.geometry.ffn_factor, ModuleSet::QV);
    out.push_back(count_lora(baseline, preset.lora_r));
    out.push_back(count_vera(baseline, preset.vera_r));
    auto vb = count_vblora_stored(preset.geometry, preset.h, preset.b, preset.r, preset.k,
                                  index_width_for(preset.h));
    if (!preset.note.empty()) vb.note = preset.note;
    out.push_back(vb);
    return out;
}

}  // namespace vblora
