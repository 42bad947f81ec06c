#include "vblora/footprint.hpp"

#include <algorithm>

#include "vblora/adapter_store.hpp"
#include "vblora/bytes.hpp"
#include "vblora/errors.hpp"

namespace vblora {

namespace {
constexpr char kMagic[4] = {'V', 'B', 'F', 'P'};
constexpr std::uint16_t kVersion = 1;
}  // namespace

FootprintLog::FootprintLog(std::size_t h, std::size_t k, std::size_t subvectors)
    : h_(h), k_(k), subvectors_(subvectors) {
    if (h == 0) throw InvalidArgument("footprint: h must be positive");
}

void FootprintLog::record(std::uint32_t step, std::span<const std::uint32_t> selections, std::size_t per_subvector) {
    if (selections.size() != per_subvector * subvectors_)
        throw InvalidArgument("footprint: record has " + std::to_string(selections.size()) + " indices, expected " +
                              std::to_string(per_subvector * subvectors_));
    if (!steps_.empty() && step <= steps_.back()) throw InvalidArgument("footprint: steps must increase");
    std::vector<std::uint8_t> page(page_bytes(), 0);
    for (std::size_t s = 0; s < subvectors_; ++s) {
        for (std::size_t j = 0; j < per_subvector; ++j) {
            const std::size_t idx = selections[s * per_subvector + j];
            if (idx >= h_) throw InvalidArgument("footprint: index " + std::to_string(idx) + " >= h");
            const std::size_t bit = s * h_ + idx;
            page[bit / 8] |= static_cast<std::uint8_t>(1u << (bit % 8));
        }
    }
    steps_.push_back(step);
    pages_.push_back(std::move(page));
}

bool FootprintLog::selected(std::size_t record, std::size_t subvector, std::size_t index) const {
    const std::size_t bit = subvector * h_ + index;
    return (pages_.at(record)[bit / 8] >> (bit % 8)) & 1u;
}

std::vector<std::uint32_t> FootprintLog::selection(std::size_t record, std::size_t subvector) const {
    std::vector<std::uint32_t> out;
    for (std::size_t i = 0; i < h_; ++i)
        if (selected(record, subvector, i)) out.push_back(static_cast<std::uint32_t>(i));
    return out;
}

std::vector<bool> FootprintLog::cumulative_mask() const {
    std::vector<bool> mask(subvectors_ * h_, false);
    for (std::size_t r = 0; r < records(); ++r)
        for (std::size_t bit = 0; bit < mask.size(); ++bit)
            if ((pages_[r][bit / 8] >> (bit % 8)) & 1u) mask[bit] = true;
    return mask;
}

std::size_t FootprintLog::cumulative_popcount() const {
    const auto mask = cumulative_mask();
    return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true));
}

std::vector<std::size_t> FootprintLog::new_selections() const {
    std::vector<std::size_t> out(records(), 0);
    std::vector<std::uint8_t> seen(page_bytes(), 0);
    for (std::size_t r = 0; r < records(); ++r) {
        for (std::size_t byte = 0; byte < seen.size(); ++byte) {
            const auto fresh = static_cast<std::uint8_t>(pages_[r][byte] & ~seen[byte]);
            out[r] += static_cast<std::size_t>(std::popcount(fresh));
            seen[byte] |= pages_[r][byte];
        }
    }
    return out;
}

std::size_t FootprintLog::changed_subvectors() const {
    std::size_t changed = 0;
    for (std::size_t s = 0; s < subvectors_; ++s) {
        bool differs = false;
        for (std::size_t r = 1; r < records() && !differs; ++r)
            for (std::size_t i = 0; i < h_ && !differs; ++i) differs = selected(r, s, i) != selected(0, s, i);
        changed += differs ? 1 : 0;
    }
    return changed;
}

std::vector<std::uint8_t> FootprintLog::serialize() const {
    ByteWriter w;
    w.text(std::string_view(kMagic, 4));
    w.u16(kVersion);
    w.u32(static_cast<std::uint32_t>(h_));
    w.u32(static_cast<std::uint32_t>(k_));
    w.u32(static_cast<std::uint32_t>(subvectors_));
    w.u32(static_cast<std::uint32_t>(records()));
    for (std::size_t r = 0; r < records(); ++r) {
        w.u32(steps_[r]);
        w.raw(pages_[r]);
    }
    w.u32(crc32_of(w.bytes()));
    return w.take();
}

FootprintLog FootprintLog::deserialize(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 4) throw ParseError(ParseErrorKind::Truncated, "footprint stream too short");
    if (!std::equal(bytes.begin(), bytes.begin() + 4, reinterpret_cast<const std::uint8_t*>(kMagic)))
        throw ParseError(ParseErrorKind::BadMagic, "expected 'VBFP'");
    ByteReader rd(bytes);
    rd.skip(4);
    if (const auto version = rd.u16(); version != kVersion)
        throw ParseError(ParseErrorKind::BadVersion, "footprint version " + std::to_string(version));
    FootprintLog log;
    log.h_ = rd.u32();
    log.k_ = rd.u32();
    log.subvectors_ = rd.u32();
    const auto n = rd.u32();
    if (log.h_ == 0) throw ParseError(ParseErrorKind::Corrupt, "footprint h is zero");
    const std::size_t page = log.page_bytes();
    if (n > rd.remaining() / (4 + page)) throw ParseError(ParseErrorKind::Truncated, "footprint records exceed stream");
    for (std::uint32_t r = 0; r < n; ++r) {
        log.steps_.push_back(rd.u32());
        std::vector<std::uint8_t> p(page);
        for (auto& v : p) v = rd.u8();
        log.pages_.push_back(std::move(p));
    }
    const auto stored_crc = rd.u32();
    if (rd.remaining() != 0) throw ParseError(ParseErrorKind::Corrupt, "trailing bytes in footprint");
    if (stored_crc != crc32_of(bytes.first(bytes.size() - 4)))
        throw ParseError(ParseErrorKind::CrcMismatch, "footprint checksum does not match the contents");
    return log;
}

void FootprintLog::write_csv(std::ostream& out) const {
    out << "step,subvector,indices\n";
    for (std::size_t r = 0; r < records(); ++r) {
        for (std::size_t s = 0; s < subvectors_; ++s) {
            out << steps_[r] << ',' << s << ',';
            const auto sel = selection(r, s);
            for (std::size_t j = 0; j < sel.size(); ++j) out << (j ? " " : "") << sel[j];
            out << '\n';
        }
    }
}

std::vector<std::size_t> footprint_density(const FootprintLog& log, std::size_t window) {
    if (window == 0) throw InvalidArgument("footprint_density: window must be positive");
    if (log.records() == 0) return {};
    const auto fresh = log.new_selections();
    const std::size_t last_step = log.step(log.records() - 1);
    std::vector<std::size_t> out(last_step / window + 1, 0);
    for (std::size_t r = 0; r < log.records(); ++r) out[log.step(r) / window] += fresh[r];
    return out;
}

std::vector<std::size_t> usage_histogram(const FootprintLog& log) {
    std::vector<std::size_t> counts(log.bank_size(), 0);
    if (log.records() == 0) return counts;
    const std::size_t last = log.records() - 1;
    for (std::size_t s = 0; s < log.subvectors(); ++s)
        for (auto i : log.selection(last, s)) ++counts[i];
    return counts;
}

}  // namespace vblora
