#pragma once

// Vector-selection footprints: which bank rows every sub-vector selects over
// the course of training.
//
// Binary layout (.vbfp), little-endian:
//   magic "VBFP", version u16, h u32, k u32, subvectors u32, records u32,
//   records x { step u32, bitset page of ceil(subvectors*h/8) bytes },
//   crc32 u32 over every preceding byte.
// Bit (s*h + i) of a page, stored LSB-first within each byte, is set when
// sub-vector s selects bank row i at that step.

#include <cstdint>
#include <filesystem>
#include <ostream>
#include <span>
#include <vector>

namespace vblora {

class FootprintLog {
public:
    FootprintLog() = default;
    FootprintLog(std::size_t h, std::size_t k, std::size_t subvectors);

    std::size_t bank_size() const noexcept { return h_; }
    std::size_t k() const noexcept { return k_; }
    std::size_t subvectors() const noexcept { return subvectors_; }
    std::size_t records() const noexcept { return steps_.size(); }
    std::uint32_t step(std::size_t record) const { return steps_.at(record); }

    /// Append a record; `selections` holds `per_subvector` indices for each
    /// sub-vector in order.
    void record(std::uint32_t step, std::span<const std::uint32_t> selections, std::size_t per_subvector);

    bool selected(std::size_t record, std::size_t subvector, std::size_t index) const;
    /// Ascending bank indices selected by `subvector` at `record`.
    std::vector<std::uint32_t> selection(std::size_t record, std::size_t subvector) const;

    /// Union of all records (subvectors x h, row-major).
    std::vector<bool> cumulative_mask() const;
    std::size_t cumulative_popcount() const;

    /// First-time (sub-vector, index) selections contributed by each record.
    std::vector<std::size_t> new_selections() const;

    /// Sub-vectors whose selection set ever differs from their first record.
    std::size_t changed_subvectors() const;

    std::vector<std::uint8_t> serialize() const;
    static FootprintLog deserialize(std::span<const std::uint8_t> bytes);
    void write_csv(std::ostream& out) const;

    friend bool operator==(const FootprintLog&, const FootprintLog&) = default;

private:
    std::size_t page_bytes() const noexcept { return (subvectors_ * h_ + 7) / 8; }

    std::size_t h_ = 0;
    std::size_t k_ = 0;
    std::size_t subvectors_ = 0;
    std::vector<std::uint32_t> steps_;
    std::vector<std::vector<std::uint8_t>> pages_;
};

/// New-selection counts per window of `window` steps, by recorded step number:
/// window w covers steps [w*window, (w+1)*window).
std::vector<std::size_t> footprint_density(const FootprintLog& log, std::size_t window);

/// Selection counts per bank row at the last record. Sums to
/// (selections per sub-vector) x (sub-vectors).
std::vector<std::size_t> usage_histogram(const FootprintLog& log);

}  // namespace vblora
