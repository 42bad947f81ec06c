#pragma once

// Parameter accounting for full fine-tuning, LoRA, VeRA and VB-LoRA.
//
// Counts are per adapted module and summed over layers, so non-square
// modules (FFN up/down) are handled with per-dimension sub-vector grids: an
// adapted d_out x d_in matrix contributes r*(d_in/b) A-side and r*(d_out/b)
// B-side sub-vectors. Stored sizes are float32-equivalent (bytes / 4).

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace vblora {

struct ModuleShape {
    std::string name;
    std::size_t d_in = 0;
    std::size_t d_out = 0;

    friend bool operator==(const ModuleShape&, const ModuleShape&) = default;
};

enum class ModuleSet : std::uint8_t { QV, All };

std::string_view to_string(ModuleSet set) noexcept;
ModuleSet parse_module_set(std::string_view name);

struct ModelGeometry {
    std::size_t layers = 1;             // L
    std::size_t modules_per_layer = 1;  // M
    std::size_t hidden = 1;             // d
    std::size_t heads = 1;              // N_h
    std::size_t ffn_factor = 4;         // c
    /// Adapted modules of one layer. Empty means M square d x d modules.
    std::vector<ModuleShape> modules;

    /// L layers of M square d x d modules.
    static ModelGeometry square(std::size_t L, std::size_t M, std::size_t d);
    /// Transformer layer with q,v (or q,k,v,o,up,down) adapted; up is d -> c*d.
    static ModelGeometry transformer(std::size_t L, std::size_t d, std::size_t heads, std::size_t c, ModuleSet set);

    /// The per-layer module list with the square default expanded.
    std::vector<ModuleShape> layer_modules() const;

    void validate() const;
};

struct CountComponent {
    std::string name;
    double value = 0.0;
};

struct CountReport {
    std::string method;
    std::uint64_t trainable = 0;
    double stored = 0.0;  // float32-equivalent
    std::vector<CountComponent> breakdown;
    std::string note;

    double component(std::string_view name) const;
};

/// Number of composed sub-vectors over all layers and both sides.
std::uint64_t count_subvectors(const ModelGeometry& geom, std::size_t b, std::size_t r);

CountReport count_full_ft(const ModelGeometry& geom);
CountReport count_lora(const ModelGeometry& geom, std::size_t r);
CountReport count_vera(const ModelGeometry& geom, std::size_t r);
CountReport count_vblora_trainable(const ModelGeometry& geom, std::size_t h, std::size_t b, std::size_t r);
CountReport count_vblora_stored(const ModelGeometry& geom, std::size_t h, std::size_t b, std::size_t r,
                                std::size_t k, std::size_t index_bytes);

/// 1 byte when h <= 256, 2 bytes when h <= 65536; throws UnsupportedBankSize beyond.
std::size_t index_width_for(std::size_t h);

/// Published counts are given in millions with three decimals. A count agrees
/// when either truncation or rounding to that precision reproduces the
/// published figure.
bool agrees_with_reported(double count, double reported_millions);

/// A named model geometry with the adapter settings used to report it.
struct CountPreset {
    std::string name;
    ModelGeometry geometry;
    std::size_t h = 0;
    std::size_t b = 0;
    std::size_t r = 0;
    std::size_t k = 2;
    std::size_t lora_r = 0;
    std::size_t vera_r = 0;
    double model_params_millions = 0.0;  // published total model size
    std::optional<double> reported_lora;    // millions
    std::optional<double> reported_vera;
    std::optional<double> reported_vblora;
    std::string note;
};

const std::vector<CountPreset>& count_presets();
const CountPreset& find_count_preset(std::string_view name);

/// Full FT, LoRA, VeRA, VB-LoRA reports for a preset, in that order.
std::vector<CountReport> count_preset(const CountPreset& preset);

}  // namespace vblora
