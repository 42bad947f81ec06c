#include "vblora/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>

namespace vblora {

namespace {

std::string trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r");
    return std::string(s.substr(first, last - first + 1));
}

std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

template <typename Int>
Int parse_unsigned(const std::string& key, const std::string& value) {
    Int out{};
    const auto* end = value.data() + value.size();
    const auto res = std::from_chars(value.data(), end, out);
    if (res.ec != std::errc{} || res.ptr != end) throw ConfigError(key, "expected a nonnegative integer, got '" + value + "'");
    return out;
}

double parse_real(const std::string& key, const std::string& value) {
    double out = 0.0;
    const auto* end = value.data() + value.size();
    const auto res = std::from_chars(value.data(), end, out);
    if (res.ec != std::errc{} || res.ptr != end || !std::isfinite(out))
        throw ConfigError(key, "expected a finite number, got '" + value + "'");
    return out;
}

struct Field {
    std::string_view key;
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

template <typename Member>
Field size_field(std::string_view key, Member member) {
    return {key,
            [key, member](RunConfig& c, const std::string& v) {
                member(c) = parse_unsigned<std::size_t>(std::string(key), v);
            },
            [member](const RunConfig& c) { return std::to_string(member(c)); }};
}

template <typename Member>
Field real_field(std::string_view key, Member member) {
    return {key,
            [key, member](RunConfig& c, const std::string& v) { member(c) = parse_real(std::string(key), v); },
            [member](const RunConfig& c) { return format_double(member(c)); }};
}

const std::vector<Field>& fields() {
    static const std::vector<Field> table = {
        {"seed", [](RunConfig& c, const std::string& v) { c.seed = parse_unsigned<std::uint64_t>("seed", v); },
         [](const RunConfig& c) { return std::to_string(c.seed); }},
        size_field("layers", [](auto& c) -> auto& { return c.model.layers; }),
        size_field("hidden", [](auto& c) -> auto& { return c.model.hidden; }),
        size_field("heads", [](auto& c) -> auto& { return c.model.heads; }),
        size_field("ffn_factor", [](auto& c) -> auto& { return c.model.ffn_factor; }),
        size_field("vocab", [](auto& c) -> auto& { return c.model.vocab; }),
        size_field("seq_len", [](auto& c) -> auto& { return c.model.seq_len; }),
        size_field("h", [](auto& c) -> auto& { return c.adapter.h; }),
        size_field("b", [](auto& c) -> auto& { return c.adapter.b; }),
        size_field("r", [](auto& c) -> auto& { return c.adapter.r; }),
        {"adapted_modules",
         [](RunConfig& c, const std::string& v) { c.adapter.modules = parse_module_set(v); },
         [](const RunConfig& c) { return std::string(to_string(c.adapter.modules)); }},
        {"selection",
         [](RunConfig& c, const std::string& v) { c.adapter.selection.kind = parse_selection_kind(v); },
         [](const RunConfig& c) { return std::string(to_string(c.adapter.selection.kind)); }},
        size_field("k", [](auto& c) -> auto& { return c.adapter.selection.k; }),
        real_field("tau", [](auto& c) -> auto& { return c.adapter.selection.tau; }),
        size_field("inference_k", [](auto& c) -> auto& { return c.adapter.selection.inference_k; }),
        real_field("noise_scale", [](auto& c) -> auto& { return c.adapter.selection.noise_scale; }),
        real_field("logit_init_std", [](auto& c) -> auto& { return c.adapter.logit_init_std; }),
        real_field("lr_bank", [](auto& c) -> auto& { return c.train.lr_bank; }),
        real_field("lr_logits", [](auto& c) -> auto& { return c.train.lr_logits; }),
        real_field("beta1", [](auto& c) -> auto& { return c.train.beta1; }),
        real_field("beta2", [](auto& c) -> auto& { return c.train.beta2; }),
        real_field("eps", [](auto& c) -> auto& { return c.train.eps; }),
        real_field("weight_decay", [](auto& c) -> auto& { return c.train.weight_decay; }),
        real_field("warmup_ratio", [](auto& c) -> auto& { return c.train.warmup_ratio; }),
        size_field("steps", [](auto& c) -> auto& { return c.train.steps; }),
        size_field("batch_size", [](auto& c) -> auto& { return c.train.batch_size; }),
        size_field("eval_batch_size", [](auto& c) -> auto& { return c.train.eval_batch_size; }),
        size_field("footprint_every", [](auto& c) -> auto& { return c.train.footprint_every; }),
    };
    return table;
}

// Library messages lead with "key: ..."; keep that key when re-raising.
[[noreturn]] void rethrow_keyed(const InvalidArgument& e) {
    const std::string what = e.what();
    const auto colon = what.find(':');
    const std::string key = colon == std::string::npos ? "config" : what.substr(0, colon);
    const std::string rest = colon == std::string::npos ? what : trim(what.substr(colon + 1));
    throw ConfigError(key, rest);
}

}  // namespace

void RunConfig::validate() const {
    try {
        model.validate(adapter.b);
        if (adapter.h == 0) throw ConfigError("h", "must be positive");
        if (adapter.h > 65536) throw ConfigError("h", "must not exceed 65536");
        if (adapter.b == 0) throw ConfigError("b", "must be positive");
        if (adapter.r == 0) throw ConfigError("r", "must be positive");
        if (!(adapter.logit_init_std >= 0.0)) throw ConfigError("logit_init_std", "must be nonnegative");
        adapter.selection.validate(adapter.h);
        if (train.lr_bank <= 0.0) throw ConfigError("lr_bank", "must be positive");
        if (train.lr_logits <= 0.0) throw ConfigError("lr_logits", "must be positive");
        train.validate();
    } catch (const ConfigError&) {
        throw;
    } catch (const InvalidArgument& e) {
        rethrow_keyed(e);
    }
}

const std::vector<std::string_view>& config_keys() {
    static const std::vector<std::string_view> keys = [] {
        std::vector<std::string_view> out;
        for (const auto& f : fields()) out.push_back(f.key);
        return out;
    }();
    return keys;
}

RunConfig parse_config(std::string_view text, RunConfig base) {
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        const std::string stripped = trim(line);
        if (stripped.empty()) continue;
        const auto eq = stripped.find('=');
        if (eq == std::string::npos)
            throw ConfigError("line " + std::to_string(line_no), "expected 'key = value', got '" + stripped + "'");
        const std::string key = trim(std::string_view(stripped).substr(0, eq));
        const std::string value = trim(std::string_view(stripped).substr(eq + 1));
        const auto& table = fields();
        const auto it = std::find_if(table.begin(), table.end(), [&](const Field& f) { return f.key == key; });
        if (it == table.end()) throw ConfigError(key.empty() ? "line " + std::to_string(line_no) : key, "unknown key");
        if (value.empty()) throw ConfigError(key, "missing value");
        try {
            it->set(base, value);
        } catch (const ConfigError&) {
            throw;
        } catch (const InvalidArgument& e) {
            rethrow_keyed(e);
        }
    }
    return base;
}

RunConfig load_config(const std::filesystem::path& path, RunConfig base) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open config file " + path.string());
    std::ostringstream text;
    text << in.rdbuf();
    return parse_config(text.str(), std::move(base));
}

std::string resolved_config(const RunConfig& config) {
    std::string out;
    for (const auto& f : fields()) {
        out += f.key;
        out += " = ";
        out += f.get(config);
        out += '\n';
    }
    return out;
}

RunSetup make_run(const RunConfig& config) {
    config.validate();
    TrainConfig train = config.train;
    train.seed = derive_seed(config.seed, "train");
    return {build_model(config.model, config.adapter, derive_seed(config.seed, "model")),
            PermutationCopyTask(config.model.vocab, config.model.seq_len, derive_seed(config.seed, "task")), train};
}

RunConfig preset_config(std::string_view name) {
    RunConfig c;
    if (name == "desk" || name.empty()) {
        // Learning rates above the defaults: the base is random, not
        // pretrained, and 500 steps leave little room for a slow start.
        c.adapter.modules = ModuleSet::All;
        c.train.lr_bank = 0.04;
        c.train.lr_logits = 0.1;
        c.train.batch_size = 32;
        return c;
    }
    if (name == "tiny") {
        c.model = {.layers = 1, .hidden = 8, .heads = 2, .ffn_factor = 4, .vocab = 8, .seq_len = 6};
        c.adapter.h = 6;
        c.adapter.b = 4;
        c.adapter.r = 2;
        c.adapter.modules = ModuleSet::All;
        c.adapter.selection.k = 2;
        c.train.steps = 20;
        c.train.batch_size = 4;
        c.train.eval_batch_size = 4;
        return c;
    }
    throw ConfigError("preset", "unknown preset '" + std::string(name) + "' (expected desk or tiny)");
}

}  // namespace vblora
