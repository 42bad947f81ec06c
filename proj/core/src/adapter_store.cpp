#include "vblora/adapter_store.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>

#include "vblora/accounting.hpp"
#include "vblora/bytes.hpp"
#include "vblora/errors.hpp"

namespace vblora {

namespace {

constexpr char kAdapterMagic[4] = {'V', 'B', 'L', 'A'};
constexpr char kStateMagic[4] = {'V', 'B', 'L', 'S'};
constexpr std::uint16_t kStateFormatVersion = 1;

[[noreturn]] void corrupt(const std::string& what) { throw ParseError(ParseErrorKind::Corrupt, what); }

void check_magic(std::span<const std::uint8_t> bytes, const char (&magic)[4]) {
    if (bytes.size() < 4) throw ParseError(ParseErrorKind::Truncated, "stream shorter than the magic");
    if (!std::equal(bytes.begin(), bytes.begin() + 4, reinterpret_cast<const std::uint8_t*>(magic)))
        throw ParseError(ParseErrorKind::BadMagic, std::string("expected '") + std::string(magic, 4) + "'");
}

/// Reject a length before allocating for it.
void require_available(const ByteReader& rd, std::uint64_t count, std::uint64_t unit) {
    if (unit != 0 && count > rd.remaining() / unit) {
        throw ParseError(ParseErrorKind::Truncated, "declared block of " + std::to_string(count) + " x " +
                                                        std::to_string(unit) + " bytes exceeds the stream");
    }
}

bool crc_matches(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 4) return false;
    ByteReader tail(bytes.subspan(bytes.size() - 4));
    return tail.u32() == crc32_of(bytes.first(bytes.size() - 4));
}

void write_entry_header(ByteWriter& w, std::uint32_t layer, const std::string& name) {
    if (name.size() > std::numeric_limits<std::uint16_t>::max())
        throw InvalidArgument("module name longer than 65535 bytes");
    w.u32(layer);
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.text(name);
}

StoredAdapter parse_adapter(std::span<const std::uint8_t> bytes) {
    ByteReader rd(bytes);
    rd.skip(4);
    const auto version = rd.u16();
    if (version != kAdapterFormatVersion)
        throw ParseError(ParseErrorKind::BadVersion, "version " + std::to_string(version));
    StoredAdapter a;
    a.h = rd.u32();
    a.b = rd.u32();
    a.k = rd.u32();
    a.r = rd.u32();
    a.index_width = rd.u8();
    const auto n_entries = rd.u32();
    if (a.h == 0 || a.b == 0) corrupt("h and b must be positive");
    if (a.k == 0 || a.k > a.h) corrupt("k=" + std::to_string(a.k) + " outside [1, h]");
    if (a.index_width != 1 && a.index_width != 2) corrupt("index width " + std::to_string(a.index_width));

    require_available(rd, n_entries, 15);
    a.manifest.reserve(n_entries);
    for (std::uint32_t e = 0; e < n_entries; ++e) {
        ManifestEntry m;
        m.layer = rd.u32();
        m.module = rd.text(rd.u16());
        const auto side = rd.u8();
        if (side > 1) corrupt("side tag " + std::to_string(side));
        m.side = static_cast<Side>(side);
        m.rank = rd.u32();
        m.d_dim = rd.u32();
        if (m.d_dim % a.b != 0) corrupt("manifest dimension " + std::to_string(m.d_dim) + " not divisible by b");
        a.manifest.push_back(std::move(m));
    }

    require_available(rd, static_cast<std::uint64_t>(a.h) * a.b, 4);
    a.bank.values = Matrix<float>(a.h, a.b);
    for (auto& v : a.bank.values.data()) v = rd.f32();

    for (const auto& m : a.manifest) {
        const std::uint64_t cells = static_cast<std::uint64_t>(m.rank) * (m.d_dim / a.b);
        require_available(rd, cells * a.k, a.index_width);
        std::vector<std::uint16_t> idx(cells * a.k);
        for (auto& v : idx) v = a.index_width == 1 ? rd.u8() : rd.u16();
        require_available(rd, cells * (a.k - 1), 4);
        std::vector<float> w(cells * (a.k - 1));
        for (auto& v : w) v = rd.f32();
        a.indices.push_back(std::move(idx));
        a.weights.push_back(std::move(w));
    }
    rd.u32();  // crc, verified by the caller
    if (rd.remaining() != 0) corrupt(std::to_string(rd.remaining()) + " trailing bytes");
    return a;
}

}  // namespace

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
    uLong crc = ::crc32(0L, Z_NULL, 0);
    std::size_t offset = 0;
    while (offset < bytes.size()) {
        const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - offset, 1u << 30));
        crc = ::crc32(crc, bytes.data() + offset, chunk);
        offset += chunk;
    }
    return static_cast<std::uint32_t>(crc);
}

StoredAdapter export_adapter(const AdapterState<float>& state, std::size_t k) {
    const std::size_t h = state.bank.size();
    const std::size_t b = state.bank.vector_length();
    if (h > 65536)
        throw UnsupportedBankSize("bank size h=" + std::to_string(h) + " exceeds the 16-bit index limit");
    if (k == 0 || k > h) throw InvalidArgument("export: k=" + std::to_string(k) + " outside [1, h]");

    StoredAdapter out;
    out.h = static_cast<std::uint32_t>(h);
    out.b = static_cast<std::uint32_t>(b);
    out.k = static_cast<std::uint32_t>(k);
    out.index_width = static_cast<std::uint8_t>(index_width_for(h));
    out.bank = state.bank;
    for (const auto& m : state.modules) {
        out.r = std::max<std::uint32_t>(out.r, static_cast<std::uint32_t>(m.logits_A.rank()));
        for (const auto* logits : {&m.logits_A, &m.logits_B}) {
            ManifestEntry e;
            e.layer = m.layer;
            e.module = m.name;
            e.side = logits->side();
            e.rank = static_cast<std::uint32_t>(logits->rank());
            e.d_dim = static_cast<std::uint32_t>(logits->num_subvectors() * b);
            std::vector<std::uint16_t> idx;
            std::vector<float> w;
            idx.reserve(logits->cells() * k);
            w.reserve(logits->cells() * (k - 1));
            for (std::size_t c = 0; c < logits->cells(); ++c) {
                const auto sigma = logits->cell(c);
                validate_logits(sigma, h, k, "export");
                const auto mix = topk_select(sigma, k);
                for (auto s : mix.indices) idx.push_back(static_cast<std::uint16_t>(s));
                // The last (smallest-logit) weight is implied.
                for (std::size_t s = 0; s + 1 < k; ++s) w.push_back(mix.weights[s]);
            }
            out.manifest.push_back(std::move(e));
            out.indices.push_back(std::move(idx));
            out.weights.push_back(std::move(w));
        }
    }
    return out;
}

StoredAdapter export_adapter(const AdapterState<float>& state, const SelectionPolicy& policy) {
    policy.validate(state.bank.size());
    return export_adapter(state, policy.inference_support(state.bank.size()));
}

void validate(const StoredAdapter& a) {
    if (a.h == 0 || a.b == 0) corrupt("h and b must be positive");
    if (a.k == 0 || a.k > a.h) corrupt("k outside [1, h]");
    if (a.index_width != 1 && a.index_width != 2) corrupt("index width must be 1 or 2");
    if (a.index_width == 1 && a.h > 256) corrupt("1-byte indices with h > 256");
    if (a.bank.size() != a.h || a.bank.vector_length() != a.b) corrupt("bank shape does not match header");
    if (a.indices.size() != a.manifest.size() || a.weights.size() != a.manifest.size())
        corrupt("index/weight blocks do not match the manifest");
    for (std::size_t e = 0; e < a.manifest.size(); ++e) {
        const auto& m = a.manifest[e];
        if (m.d_dim % a.b != 0)
            throw InvalidAdapter("manifest entry " + std::to_string(e) + ": d_dim " + std::to_string(m.d_dim) +
                                 " is not divisible by b=" + std::to_string(a.b));
        const std::size_t cells = m.cells(a.b);
        if (a.indices[e].size() != cells * a.k || a.weights[e].size() != cells * (a.k - 1))
            corrupt("entry " + std::to_string(e) + ": block sizes do not match the manifest");
        for (std::size_t c = 0; c < cells; ++c) {
            const auto idx = std::span(a.indices[e]).subspan(c * a.k, a.k);
            std::set<std::uint16_t> seen;
            for (auto s : idx) {
                if (s >= a.h)
                    corrupt("entry " + std::to_string(e) + ": index " + std::to_string(s) + " >= h=" +
                            std::to_string(a.h));
                if (!seen.insert(s).second) corrupt("entry " + std::to_string(e) + ": repeated index in a cell");
            }
            const auto w = std::span(a.weights[e]).subspan(c * (a.k - 1), a.k - 1);
            double total = 0.0;
            for (float v : w) {
                if (!(v >= 0.0f && v <= 1.0f)) corrupt("entry " + std::to_string(e) + ": weight outside [0, 1]");
                total += v;
            }
            if (total > 1.0 + 1e-6) corrupt("entry " + std::to_string(e) + ": weights sum above 1");
        }
    }
}

StorageLayout storage_layout(const StoredAdapter& a) {
    StorageLayout layout;
    layout.header_bytes = 4 + 2 + 4 * 4 + 1 + 4;
    for (const auto& m : a.manifest) layout.manifest_bytes += 4 + 2 + m.module.size() + 1 + 4 + 4;
    layout.bank_bytes = static_cast<std::size_t>(a.h) * a.b * 4;
    for (std::size_t e = 0; e < a.manifest.size(); ++e) {
        const std::size_t cells = a.manifest[e].cells(a.b);
        layout.index_bytes += cells * a.k * a.index_width;
        layout.weight_bytes += cells * (a.k - 1) * 4;
    }
    return layout;
}

std::vector<std::uint8_t> serialize(const StoredAdapter& a) {
    validate(a);
    ByteWriter w;
    w.text(std::string_view(kAdapterMagic, 4));
    w.u16(kAdapterFormatVersion);
    w.u32(a.h);
    w.u32(a.b);
    w.u32(a.k);
    w.u32(a.r);
    w.u8(a.index_width);
    w.u32(static_cast<std::uint32_t>(a.manifest.size()));
    for (const auto& m : a.manifest) {
        write_entry_header(w, m.layer, m.module);
        w.u8(static_cast<std::uint8_t>(m.side));
        w.u32(m.rank);
        w.u32(m.d_dim);
    }
    for (float v : a.bank.values.data()) w.f32(v);
    for (std::size_t e = 0; e < a.manifest.size(); ++e) {
        for (auto s : a.indices[e]) {
            if (a.index_width == 1)
                w.u8(static_cast<std::uint8_t>(s));
            else
                w.u16(s);
        }
        for (float v : a.weights[e]) w.f32(v);
    }
    w.u32(crc32_of(w.bytes()));
    return w.take();
}

StoredAdapter deserialize(std::span<const std::uint8_t> bytes) {
    check_magic(bytes, kAdapterMagic);
    if (bytes.size() < 6) throw ParseError(ParseErrorKind::Truncated, "stream ends before the version");
    {
        ByteReader rd(bytes.subspan(4));
        const auto version = rd.u16();
        if (version != kAdapterFormatVersion)
            throw ParseError(ParseErrorKind::BadVersion, "version " + std::to_string(version));
    }
    if (!crc_matches(bytes)) {
        // Distinguish a short stream from a damaged one.
        try {
            parse_adapter(bytes);
        } catch (const ParseError& e) {
            if (e.kind() == ParseErrorKind::Truncated) throw;
        }
        throw ParseError(ParseErrorKind::CrcMismatch, "stored checksum does not match the contents");
    }
    StoredAdapter a;
    try {
        a = parse_adapter(bytes);
    } catch (const ParseError& e) {
        if (e.kind() == ParseErrorKind::Truncated) corrupt(std::string("inconsistent layout: ") + e.what());
        throw;
    }
    try {
        validate(a);
    } catch (const InvalidAdapter& e) {
        corrupt(e.what());
    }
    return a;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open '" + path.string() + "' for reading");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write to '" + path.string() + "' failed");
}

void write_adapter_file(const std::filesystem::path& path, const StoredAdapter& adapter) {
    write_file_bytes(path, serialize(adapter));
}

StoredAdapter read_adapter_file(const std::filesystem::path& path) { return deserialize(read_file_bytes(path)); }

Matrix<float> reconstruct_entry(const StoredAdapter& a, std::size_t entry) {
    const auto& m = a.manifest.at(entry);
    if (m.d_dim % a.b != 0)
        throw InvalidAdapter("manifest entry " + std::to_string(entry) + ": d_dim " + std::to_string(m.d_dim) +
                             " is not divisible by b=" + std::to_string(a.b));
    const std::size_t b = a.b, k = a.k, r = m.rank, nsub = m.d_dim / b;
    Matrix<float> out = m.side == Side::A ? Matrix<float>(r, m.d_dim) : Matrix<float>(m.d_dim, r);
    std::vector<std::uint32_t> idx(k);
    std::vector<float> w(k);
    for (std::size_t j = 0; j < nsub; ++j) {
        for (std::size_t i = 0; i < r; ++i) {
            const std::size_t c = j * r + i;
            for (std::size_t s = 0; s < k; ++s) idx[s] = a.indices[entry][c * k + s];
            for (std::size_t s = 0; s + 1 < k; ++s) w[s] = a.weights[entry][c * (k - 1) + s];
            w[k - 1] = implied_last_weight<float>(std::span<const float>(w.data(), k - 1));
            const auto u = admix_rows<float>(a.bank, idx, w);
            for (std::size_t t = 0; t < b; ++t) {
                if (m.side == Side::A)
                    out(i, j * b + t) = u[t];
                else
                    out(j * b + t, i) = u[t];
            }
        }
    }
    return out;
}

std::vector<ReconstructedModule> reconstruct(const StoredAdapter& a) {
    for (std::size_t e = 0; e < a.manifest.size(); ++e) {
        if (a.manifest[e].d_dim % a.b != 0)
            throw InvalidAdapter("manifest entry " + std::to_string(e) + ": d_dim " +
                                 std::to_string(a.manifest[e].d_dim) + " is not divisible by b=" +
                                 std::to_string(a.b));
    }
    std::vector<ReconstructedModule> out;
    std::vector<bool> used(a.manifest.size(), false);
    for (std::size_t e = 0; e < a.manifest.size(); ++e) {
        if (used[e] || a.manifest[e].side != Side::A) continue;
        const auto& ma = a.manifest[e];
        std::size_t partner = a.manifest.size();
        for (std::size_t f = 0; f < a.manifest.size(); ++f) {
            const auto& mb = a.manifest[f];
            if (!used[f] && mb.side == Side::B && mb.layer == ma.layer && mb.module == ma.module) {
                partner = f;
                break;
            }
        }
        if (partner == a.manifest.size())
            throw InvalidAdapter("module '" + ma.module + "' (layer " + std::to_string(ma.layer) +
                                 ") has no B-side entry");
        if (a.manifest[partner].rank != ma.rank)
            throw InvalidAdapter("module '" + ma.module + "': A and B ranks differ");
        used[e] = used[partner] = true;
        out.push_back({ma.layer, ma.module, {reconstruct_entry(a, e), reconstruct_entry(a, partner)}});
    }
    for (std::size_t e = 0; e < a.manifest.size(); ++e)
        if (!used[e]) throw InvalidAdapter("manifest entry " + std::to_string(e) + " has no A-side partner");
    return out;
}

std::vector<std::uint8_t> serialize_state(const AdapterState<float>& state) {
    ByteWriter w;
    w.text(std::string_view(kStateMagic, 4));
    w.u16(kStateFormatVersion);
    w.u32(static_cast<std::uint32_t>(state.bank.size()));
    w.u32(static_cast<std::uint32_t>(state.bank.vector_length()));
    w.u32(static_cast<std::uint32_t>(state.modules.size()));
    for (const auto& m : state.modules) {
        write_entry_header(w, m.layer, m.name);
        w.u32(static_cast<std::uint32_t>(m.d_in));
        w.u32(static_cast<std::uint32_t>(m.d_out));
        w.u32(static_cast<std::uint32_t>(m.logits_A.rank()));
    }
    for (float v : state.bank.values.data()) w.f32(v);
    for (const auto& m : state.modules) {
        for (float v : m.logits_A.data()) w.f32(v);
        for (float v : m.logits_B.data()) w.f32(v);
    }
    w.u32(crc32_of(w.bytes()));
    return w.take();
}

AdapterState<float> deserialize_state(std::span<const std::uint8_t> bytes) {
    check_magic(bytes, kStateMagic);
    if (!crc_matches(bytes))
        throw ParseError(ParseErrorKind::CrcMismatch, "checkpoint checksum does not match the contents");
    ByteReader rd(bytes);
    rd.skip(4);
    if (const auto version = rd.u16(); version != kStateFormatVersion)
        throw ParseError(ParseErrorKind::BadVersion, "checkpoint version " + std::to_string(version));
    const auto h = rd.u32();
    const auto b = rd.u32();
    const auto n = rd.u32();
    if (h == 0 || b == 0) corrupt("checkpoint h and b must be positive");
    AdapterState<float> state;
    require_available(rd, n, 18);
    for (std::uint32_t i = 0; i < n; ++i) {
        AdaptedModule<float> m;
        m.layer = rd.u32();
        m.name = rd.text(rd.u16());
        m.d_in = rd.u32();
        m.d_out = rd.u32();
        const auto r = rd.u32();
        if (m.d_in % b != 0 || m.d_out % b != 0) corrupt("checkpoint module dims not divisible by b");
        m.logits_A = LogitTensor<float>(m.d_in / b, r, h, Side::A);
        m.logits_B = LogitTensor<float>(m.d_out / b, r, h, Side::B);
        state.modules.push_back(std::move(m));
    }
    require_available(rd, static_cast<std::uint64_t>(h) * b, 4);
    state.bank.values = Matrix<float>(h, b);
    for (auto& v : state.bank.values.data()) v = rd.f32();
    for (auto& m : state.modules) {
        require_available(rd, m.logits_A.data().size() + m.logits_B.data().size(), 4);
        for (auto& v : m.logits_A.data()) v = rd.f32();
        for (auto& v : m.logits_B.data()) v = rd.f32();
    }
    rd.u32();
    if (rd.remaining() != 0) corrupt("trailing bytes in checkpoint");
    return state;
}

void write_state_file(const std::filesystem::path& path, const AdapterState<float>& state) {
    write_file_bytes(path, serialize_state(state));
}

AdapterState<float> read_state_file(const std::filesystem::path& path) {
    return deserialize_state(read_file_bytes(path));
}

}  // namespace vblora
