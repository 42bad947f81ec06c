#pragma once

// Compact storage of a trained adapter as the triplet (bank, top-k indices,
// k-1 admixture weights), and the `.vbla` byte format.
//
// .vbla layout, all integers little-endian:
//
//   magic        "VBLA"
//   version      u16   (currently 1)
//   h, b, k, r   u32 each
//   index_width  u8    (1 iff h <= 256, else 2)
//   n_entries    u32
//   n_entries x  { layer u32, name_len u16, name bytes, side u8 (0=A, 1=B),
//                  rank u32, d_dim u32 }
//   bank         h*b float32, row-major
//   n_entries x  { indices: rank*(d_dim/b)*k unsigned of index_width bytes,
//                  weights: rank*(d_dim/b)*(k-1) float32 }
//   crc32        u32 over every preceding byte
//
// Within an entry, cells are ordered as in the logit tensor (sub-vector j
// major, rank i minor); each cell's indices are in descending logit order and
// the weight of the last index is implied as 1 minus the others.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "vblora/adapter.hpp"
#include "vblora/core.hpp"

namespace vblora {

inline constexpr std::uint16_t kAdapterFormatVersion = 1;

struct ManifestEntry {
    std::uint32_t layer = 0;
    std::string module;
    Side side = Side::A;
    std::uint32_t rank = 0;
    std::uint32_t d_dim = 0;

    std::size_t cells(std::size_t b) const { return static_cast<std::size_t>(rank) * (d_dim / b); }

    friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

struct StoredAdapter {
    std::uint32_t h = 0;
    std::uint32_t b = 0;
    std::uint32_t k = 0;
    std::uint32_t r = 0;
    std::uint8_t index_width = 1;
    VectorBank<float> bank;
    std::vector<ManifestEntry> manifest;
    std::vector<std::vector<std::uint16_t>> indices;  // per entry: cells * k
    std::vector<std::vector<float>> weights;          // per entry: cells * (k - 1)

    friend bool operator==(const StoredAdapter&, const StoredAdapter&) = default;
};

/// Byte accounting of a serialized adapter.
struct StorageLayout {
    std::size_t header_bytes = 0;    // magic, version, fixed header fields
    std::size_t manifest_bytes = 0;
    std::size_t bank_bytes = 0;
    std::size_t index_bytes = 0;
    std::size_t weight_bytes = 0;
    std::size_t crc_bytes = 4;

    std::size_t payload_bytes() const { return bank_bytes + index_bytes + weight_bytes; }
    std::size_t total_bytes() const { return header_bytes + manifest_bytes + payload_bytes() + crc_bytes; }
};

/// Discard the logits and keep the top-k indices and k-1 weights per sub-vector.
StoredAdapter export_adapter(const AdapterState<float>& state, std::size_t k);

/// Export with the inference-time selection of a policy (k, inference_k or h).
StoredAdapter export_adapter(const AdapterState<float>& state, const SelectionPolicy& policy);

/// Structural checks; throws ParseError(Corrupt) or InvalidAdapter.
void validate(const StoredAdapter& adapter);

StorageLayout storage_layout(const StoredAdapter& adapter);

std::vector<std::uint8_t> serialize(const StoredAdapter& adapter);
StoredAdapter deserialize(std::span<const std::uint8_t> bytes);

void write_adapter_file(const std::filesystem::path& path, const StoredAdapter& adapter);
StoredAdapter read_adapter_file(const std::filesystem::path& path);

struct ReconstructedModule {
    std::uint32_t layer = 0;
    std::string module;
    ComposedFactors<float> factors;
};

/// Rebuild one factor matrix (A: r x d, B: d x r) from a manifest entry.
Matrix<float> reconstruct_entry(const StoredAdapter& adapter, std::size_t entry);

/// Rebuild A and B for every (layer, module) pair in manifest order.
std::vector<ReconstructedModule> reconstruct(const StoredAdapter& adapter);

/// CRC-32 (IEEE) of a byte range.
std::uint32_t crc32_of(std::span<const std::uint8_t> bytes);

// Training checkpoint (.vbls): the bank and every logit tensor, so that an
// adapter can be exported later. Same conventions as .vbla, magic "VBLS".
std::vector<std::uint8_t> serialize_state(const AdapterState<float>& state);
AdapterState<float> deserialize_state(std::span<const std::uint8_t> bytes);
void write_state_file(const std::filesystem::path& path, const AdapterState<float>& state);
AdapterState<float> read_state_file(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace vblora
