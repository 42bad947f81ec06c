#include "cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/sinks/basic_file_sink.h>
#include <spdlog/sinks/ostream_sink.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <optional>
#include <sstream>

#include "vblora/accounting.hpp"
#include "vblora/adapter_store.hpp"
#include "vblora/bytes.hpp"
#include "vblora/config.hpp"
#include "vblora/errors.hpp"
#include "vblora/footprint.hpp"
#include "vblora/harness.hpp"

namespace vblora::cli {

namespace fs = std::filesystem;

namespace {

struct Options {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out_dir = "vblora-out";
    std::string preset;
    bool csv = false;
    std::string input;
    std::size_t window = 0;
    double tolerance = 1e-7;
};

struct Context {
    std::ostream& out;
    std::ostream& err;
    Options opts;
    std::shared_ptr<spdlog::logger> log;
};

std::string with_commas(std::uint64_t v) {
    std::string digits = std::to_string(v);
    for (int i = static_cast<int>(digits.size()) - 3; i > 0; i -= 3) digits.insert(static_cast<std::size_t>(i), ",");
    return digits;
}

std::string format_count(double v) {
    const double whole = std::floor(v);
    std::string out = with_commas(static_cast<std::uint64_t>(whole));
    if (v != whole) {
        char frac[16];
        std::snprintf(frac, sizeof frac, "%.2f", v - whole);
        out += frac + 1;  // drop the leading '0'
    }
    return out;
}

spdlog::level::level_enum log_level() {
    const char* env = std::getenv("VBLORA_LOG");
    if (env == nullptr || *env == '\0') return spdlog::level::info;
    const std::string value(env);
    if (value == "debug") return spdlog::level::debug;
    if (value == "info") return spdlog::level::info;
    throw ConfigError("VBLORA_LOG", "expected debug or info, got '" + value + "'");
}

// Timestamps only reach run.log; the console sink stays quiet unless
// VBLORA_LOG is set.
std::shared_ptr<spdlog::logger> make_logger(const fs::path& dir, std::ostream& err) {
    const auto level = log_level();
    fs::create_directories(dir);
    auto file = std::make_shared<spdlog::sinks::basic_file_sink_mt>((dir / "run.log").string(), true);
    file->set_pattern("[%Y-%m-%d %H:%M:%S.%e] [%l] %v");
    file->set_level(level);
    auto console = std::make_shared<spdlog::sinks::ostream_sink_mt>(err);
    console->set_pattern("%v");
    console->set_level(std::getenv("VBLORA_LOG") ? level : spdlog::level::warn);
    auto logger = std::make_shared<spdlog::logger>("vblora", spdlog::sinks_init_list{file, console});
    logger->set_level(spdlog::level::debug);
    logger->flush_on(spdlog::level::debug);
    return logger;
}

RunConfig resolve_config(const Options& opts, std::string_view default_preset) {
    RunConfig config = preset_config(opts.preset.empty() ? default_preset : std::string_view(opts.preset));
    if (!opts.config_path.empty()) {
        if (!fs::exists(opts.config_path)) throw ConfigError("--config", "file not found: " + opts.config_path);
        config = load_config(opts.config_path, config);
    }
    if (opts.seed) config.seed = *opts.seed;
    config.validate();
    return config;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
    if (!out) throw std::runtime_error("cannot write " + path.string());
}

void write_snapshot(Context& ctx, std::string_view command, const std::string& body) {
    std::string text = "# command = " + std::string(command) + "\n";
    if (!ctx.opts.preset.empty()) text += "# preset = " + ctx.opts.preset + "\n";
    if (!ctx.opts.config_path.empty()) text += "# config = " + ctx.opts.config_path + "\n";
    text += body;
    write_text(fs::path(ctx.opts.out_dir) / "resolved-config.txt", text);
}

// ---- train -------------------------------------------------------------

int cmd_train(Context& ctx) {
    const RunConfig config = resolve_config(ctx.opts, "desk");
    write_snapshot(ctx, "train", resolved_config(config));
    auto setup = make_run(config);
    ctx.log->info("training: {} steps, {} adapted matrices, {} trainable parameters", config.train.steps,
                  setup.model.adapter.modules.size(), setup.model.adapter.trainable_count());

    const TrainResult result = train(setup.model, setup.task, setup.train);
    const fs::path dir(ctx.opts.out_dir);

    std::ostringstream metrics;
    metrics << "step,loss,new_selections\n" << std::setprecision(17);
    for (std::size_t i = 0; i < result.losses.size(); ++i)
        metrics << i + 1 << ',' << result.losses[i] << ',' << result.new_selections[i] << '\n';
    write_text(dir / "metrics.csv", metrics.str());

    write_file_bytes(dir / "footprint.vbfp", result.footprint.serialize());
    std::ostringstream fp_csv;
    result.footprint.write_csv(fp_csv);
    write_text(dir / "footprint.csv", fp_csv.str());

    write_state_file(dir / "state.vbls", setup.model.adapter);
    write_adapter_file(dir / "adapter.vbla", export_adapter(setup.model.adapter, config.adapter.selection));

    const double ratio = result.final_eval_loss / result.initial_eval_loss;
    ctx.out << std::setprecision(6) << "initial eval loss: " << result.initial_eval_loss << '\n'
            << "final eval loss:   " << result.final_eval_loss << '\n'
            << "ratio:             " << ratio << '\n'
            << "sub-vectors with a changed selection: " << result.footprint.changed_subvectors() << " of "
            << result.footprint.subvectors() << '\n'
            << "base weights unchanged: "
            << (result.base_checksum_before == result.base_checksum_after ? "yes" : "NO") << '\n';
    ctx.log->info("done: initial {:.6f}, final {:.6f}", result.initial_eval_loss, result.final_eval_loss);
    return kOk;
}

// ---- grad-check --------------------------------------------------------

int cmd_grad_check(Context& ctx) {
    const RunConfig config = resolve_config(ctx.opts, "tiny");
    write_snapshot(ctx, "grad-check", resolved_config(config) + "tolerance = " + std::to_string(ctx.opts.tolerance) + "\n");
    const auto setup = make_run(config);
    Rng rng(derive_seed(config.seed, "grad-check"));
    const Batch batch = setup.task.sample(config.train.batch_size, rng);
    const auto model = setup.model.cast<double>();
    ctx.log->info("grad-check: {} bank entries, {} logits", model.adapter.bank.values.size(),
                  model.adapter.logit_count());
    const GradCheckReport report = grad_check(model, batch);

    ctx.out << std::setprecision(3) << std::scientific << "max-rel-error: " << report.max_rel_error << '\n'
            << "max-abs-error: " << report.max_abs_error << '\n'
            << std::defaultfloat << "checked: " << report.checked << " (bank and selected logits)\n"
            << "excluded at selection boundaries: " << report.excluded_boundary << '\n'
            << "unselected logits: " << report.unselected_checked << ", analytic gradient exactly zero: "
            << (report.unselected_exact_zero ? "yes" : "no") << ", max |fd| " << std::scientific
            << report.max_unselected_numeric << '\n'
            << std::defaultfloat << "worst: " << report.worst.parameter << '\n';
    if (!report.passed(ctx.opts.tolerance)) {
        ctx.err << "error: gradient check failed at tolerance " << ctx.opts.tolerance << '\n';
        return kRuntime;
    }
    return kOk;
}

// ---- count -------------------------------------------------------------

std::string breakdown_text(const CountReport& report, bool grouped) {
    std::string out;
    for (const auto& c : report.breakdown) {
        if (!out.empty()) out += ';';
        std::ostringstream plain;
        plain << std::setprecision(15) << c.value;
        out += c.name + '=' + (grouped ? format_count(c.value) : plain.str());
    }
    return out;
}

int cmd_count(Context& ctx) {
    std::vector<const CountPreset*> presets;
    if (ctx.opts.preset.empty()) {
        for (const auto& p : count_presets()) presets.push_back(&p);
    } else {
        presets.push_back(&find_count_preset(ctx.opts.preset));
    }
    std::string snapshot;
    for (const auto* p : presets) {
        snapshot += "preset = " + p->name + "\n";
        snapshot += "layers = " + std::to_string(p->geometry.layers) + "\nhidden = " +
                    std::to_string(p->geometry.hidden) + "\nmodules_per_layer = " + std::to_string(p->geometry.layer_modules().size()) +
                    "\nh = " + std::to_string(p->h) + "\nb = " + std::to_string(p->b) + "\nr = " +
                    std::to_string(p->r) + "\nk = " + std::to_string(p->k) + "\nlora_r = " +
                    std::to_string(p->lora_r) + "\nvera_r = " + std::to_string(p->vera_r) + "\nindex_bytes = " +
                    std::to_string(index_width_for(p->h)) + "\n";
    }
    write_snapshot(ctx, "count", snapshot);

    if (ctx.opts.csv) ctx.out << "preset,method,trainable,stored,breakdown\n";
    for (const auto* p : presets) {
        const auto reports = count_preset(*p);
        const std::optional<double> reported[] = {std::nullopt, p->reported_lora, p->reported_vera,
                                                  p->reported_vblora};
        if (ctx.opts.csv) {
            for (const auto& r : reports)
                ctx.out << p->name << ',' << r.method << ',' << r.trainable << ',' << std::setprecision(15)
                        << r.stored << ',' << breakdown_text(r, false) << '\n';
            continue;
        }
        ctx.out << p->name << "  (L=" << p->geometry.layers << ", d=" << p->geometry.hidden
                << ", M=" << p->geometry.layer_modules().size() << "; h=" << p->h << ", b=" << p->b
                << ", r=" << p->r << ", k=" << p->k << ")\n";
        ctx.out << "  " << std::left << std::setw(10) << "method" << std::right << std::setw(14) << "trainable"
                << std::setw(16) << "stored" << std::setw(11) << "published" << "  breakdown\n";
        for (std::size_t i = 0; i < reports.size(); ++i) {
            const auto& r = reports[i];
            std::string published = "-";
            if (reported[i]) {
                std::ostringstream s;
                s << std::fixed << std::setprecision(3) << *reported[i] << 'M'
                  << (agrees_with_reported(r.stored, *reported[i]) ? "" : "*");
                published = s.str();
            }
            ctx.out << "  " << std::left << std::setw(10) << r.method << std::right << std::setw(14)
                    << with_commas(r.trainable) << std::setw(16) << format_count(r.stored) << std::setw(11)
                    << published << "  " << breakdown_text(r, true) << '\n';
        }
        if (!p->note.empty()) ctx.out << "  note: " << p->note << '\n';
        ctx.out << '\n';
    }
    if (!ctx.opts.csv) ctx.out << "stored = float32-equivalent parameters (bytes / 4); * = differs from the published figure\n";
    return kOk;
}

// ---- export ------------------------------------------------------------

void print_layout(std::ostream& out, const StoredAdapter& adapter) {
    const auto layout = storage_layout(adapter);
    out << "bank bytes:    " << layout.bank_bytes << '\n'
        << "index bytes:   " << layout.index_bytes << '\n'
        << "weight bytes:  " << layout.weight_bytes << '\n'
        << "payload / 4:   " << format_count(static_cast<double>(layout.payload_bytes()) / 4.0) << '\n'
        << "file bytes:    " << layout.total_bytes() << '\n';
}

int cmd_export(Context& ctx) {
    const RunConfig config = resolve_config(ctx.opts, "desk");
    write_snapshot(ctx, "export", resolved_config(config));
    const AdapterState<float> state = read_state_file(ctx.opts.input);
    config.adapter.selection.validate(state.bank.size());
    const StoredAdapter adapter = export_adapter(state, config.adapter.selection);
    const fs::path target = fs::path(ctx.opts.out_dir) / "adapter.vbla";
    write_adapter_file(target, adapter);
    ctx.out << "wrote " << target.string() << '\n';
    print_layout(ctx.out, adapter);
    return kOk;
}

// ---- merge -------------------------------------------------------------

int cmd_merge(Context& ctx) {
    const RunConfig config = resolve_config(ctx.opts, "desk");
    write_snapshot(ctx, "merge", resolved_config(config));
    const StoredAdapter adapter = read_adapter_file(ctx.opts.input);
    if (adapter.h != config.adapter.h || adapter.b != config.adapter.b)
        throw ConfigError("h", "adapter has h=" + std::to_string(adapter.h) + ", b=" + std::to_string(adapter.b) +
                                   " but the config has h=" + std::to_string(config.adapter.h) +
                                   ", b=" + std::to_string(config.adapter.b));
    const auto setup = make_run(config);
    auto layers = setup.model.base.layers;

    std::vector<std::pair<std::size_t, ModuleKind>> adapted;
    for (const auto& m : reconstruct(adapter)) {
        const auto kind = std::find_if(std::begin(kAllModuleKinds), std::end(kAllModuleKinds),
                                       [&](ModuleKind k) { return to_string(k) == m.module; });
        if (kind == std::end(kAllModuleKinds) || m.layer >= layers.size())
            throw InvalidAdapter("adapter module " + m.module + " in layer " + std::to_string(m.layer) +
                                 " does not exist in the configured model");
        auto& W = layers[m.layer].weight(*kind);
        W = merged_weight(W, m.factors);
        adapted.emplace_back(m.layer, *kind);
    }

    ByteWriter bytes;
    nlohmann::json manifest = {{"format", "vblora-merged"},
                               {"version", 1},
                               {"dtype", "float32"},
                               {"byte_order", "little"},
                               {"layout", "row-major, d_in x d_out, applied as x W"},
                               {"tensors", nlohmann::json::array()}};
    for (std::size_t l = 0; l < layers.size(); ++l) {
        for (auto kind : kAllModuleKinds) {
            const auto& W = layers[l].weight(kind);
            const bool was_adapted =
                std::find(adapted.begin(), adapted.end(), std::make_pair(l, kind)) != adapted.end();
            manifest["tensors"].push_back({{"name", "layers." + std::to_string(l) + "." + std::string(to_string(kind))},
                                           {"shape", {W.rows(), W.cols()}},
                                           {"offset", bytes.size()},
                                           {"adapted", was_adapted}});
            for (float v : W.data()) bytes.f32(v);
        }
    }
    const fs::path dir(ctx.opts.out_dir);
    write_file_bytes(dir / "merged.f32", bytes.bytes());
    write_text(dir / "merged.json", manifest.dump(2) + "\n");
    ctx.out << "merged " << adapted.size() << " adapted matrices into " << (dir / "merged.f32").string() << '\n';
    return kOk;
}

// ---- inspect -----------------------------------------------------------

int cmd_inspect(Context& ctx) {
    write_snapshot(ctx, "inspect", "input = " + ctx.opts.input + "\n");
    const StoredAdapter adapter = read_adapter_file(ctx.opts.input);
    ctx.out << "format: vbla v" << kAdapterFormatVersion << '\n'
            << "h = " << adapter.h << ", b = " << adapter.b << ", k = " << adapter.k << ", r = " << adapter.r
            << ", index width = " << static_cast<int>(adapter.index_width) << " byte(s)\n"
            << "entries: " << adapter.manifest.size() << '\n';
    print_layout(ctx.out, adapter);
    const auto bank = adapter.bank.values.data();
    const auto [bmin, bmax] = std::minmax_element(bank.begin(), bank.end());
    ctx.out << "bank range: [" << *bmin << ", " << *bmax << "]\n";
    for (std::size_t e = 0; e < adapter.manifest.size(); ++e) {
        const auto& m = adapter.manifest[e];
        std::vector<bool> used(adapter.h, false);
        for (auto i : adapter.indices[e]) used[i] = true;
        const auto distinct = std::count(used.begin(), used.end(), true);
        ctx.out << "  layer " << m.layer << ' ' << m.module << ' ' << to_string(m.side) << "  rank " << m.rank
                << "  d " << m.d_dim << "  sub-vectors " << m.cells(adapter.b) << "  distinct rows " << distinct;
        if (!adapter.weights[e].empty()) {
            const auto [wmin, wmax] = std::minmax_element(adapter.weights[e].begin(), adapter.weights[e].end());
            ctx.out << "  top weight [" << *wmin << ", " << *wmax << "]";
        }
        ctx.out << '\n';
    }
    return kOk;
}

// ---- footprint ---------------------------------------------------------

int cmd_footprint(Context& ctx) {
    write_snapshot(ctx, "footprint", "input = " + ctx.opts.input + "\nwindow = " + std::to_string(ctx.opts.window) + "\n");
    const FootprintLog log = FootprintLog::deserialize(read_file_bytes(ctx.opts.input));
    if (log.records() == 0) {
        ctx.out << "empty footprint\n";
        return kOk;
    }
    const std::size_t last = log.step(log.records() - 1);
    const std::size_t window = ctx.opts.window ? ctx.opts.window : std::max<std::size_t>(1, (last + 4) / 4);
    ctx.out << "records: " << log.records() << " (steps " << log.step(0) << ".." << last << ")\n"
            << "sub-vectors: " << log.subvectors() << ", h = " << log.bank_size() << ", k = " << log.k() << '\n'
            << "cumulative selections: " << log.cumulative_popcount() << '\n'
            << "sub-vectors with a changed selection: " << log.changed_subvectors() << '\n'
            << "new selections per " << window << "-step window:";
    for (auto c : footprint_density(log, window)) ctx.out << ' ' << c;
    ctx.out << "\nusage at last record:";
    for (auto c : usage_histogram(log)) ctx.out << ' ' << c;
    ctx.out << '\n';
    if (ctx.opts.csv) {
        std::ostringstream csv;
        log.write_csv(csv);
        write_text(fs::path(ctx.opts.out_dir) / "footprint.csv", csv.str());
    }
    return kOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"VB-LoRA vector-bank adapters: training, verification, accounting and storage", "vblora"};
    app.require_subcommand(1);
    Options opts;

    const auto common = [&](CLI::App* sub, bool with_config) {
        if (with_config) {
            sub->add_option("--config", opts.config_path, "key = value configuration file");
            sub->add_option("--seed", opts.seed, "seed for every random stream (overrides the config)");
        }
        sub->add_option("--out", opts.out_dir, "output directory")->capture_default_str();
    };

    auto* train_cmd = app.add_subcommand("train", "train adapters on the synthetic permutation-copy task");
    common(train_cmd, true);
    train_cmd->add_option("--preset", opts.preset, "desk (default) or tiny");

    auto* grad_cmd = app.add_subcommand("grad-check", "compare analytic gradients with central differences");
    common(grad_cmd, true);
    grad_cmd->add_option("--preset", opts.preset, "tiny (default) or desk");
    grad_cmd->add_option("--tolerance", opts.tolerance, "maximum relative error")->capture_default_str();

    auto* count_cmd = app.add_subcommand("count", "parameter counts for published model geometries");
    common(count_cmd, false);
    count_cmd->add_option("--preset", opts.preset, "model geometry (default: all)");
    count_cmd->add_flag("--csv", opts.csv, "print CSV instead of a table");

    auto* export_cmd = app.add_subcommand("export", "convert a training checkpoint (.vbls) into a .vbla adapter");
    common(export_cmd, true);
    export_cmd->add_option("--preset", opts.preset, "desk (default) or tiny");
    export_cmd->add_option("state", opts.input, "checkpoint file")->required();

    auto* merge_cmd = app.add_subcommand("merge", "fold a .vbla adapter into the base weights");
    common(merge_cmd, true);
    merge_cmd->add_option("--preset", opts.preset, "desk (default) or tiny");
    merge_cmd->add_option("adapter", opts.input, "adapter file")->required();

    auto* inspect_cmd = app.add_subcommand("inspect", "print the header and per-module statistics of a .vbla file");
    common(inspect_cmd, false);
    inspect_cmd->add_option("adapter", opts.input, "adapter file")->required();

    auto* footprint_cmd = app.add_subcommand("footprint", "summarize a selection footprint (.vbfp)");
    common(footprint_cmd, false);
    footprint_cmd->add_option("footprint", opts.input, "footprint file")->required();
    footprint_cmd->add_option("--window", opts.window, "steps per density window (default: a quarter of the run)");
    footprint_cmd->add_flag("--csv", opts.csv, "also write footprint.csv to the output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n\n";
        const auto selected = app.get_subcommands();
        err << (selected.empty() ? app.help() : selected.front()->help());
        return kValidation;
    }

    const std::string name = app.get_subcommands().front()->get_name();
    try {
        Context ctx{out, err, opts, make_logger(opts.out_dir, err)};
        ctx.log->debug("command: {}", name);
        if (name == "train") return cmd_train(ctx);
        if (name == "grad-check") return cmd_grad_check(ctx);
        if (name == "count") return cmd_count(ctx);
        if (name == "export") return cmd_export(ctx);
        if (name == "merge") return cmd_merge(ctx);
        if (name == "inspect") return cmd_inspect(ctx);
        return cmd_footprint(ctx);
    } catch (const InvalidArgument& e) {
        err << "error: " << e.what() << '\n';
        return kValidation;
    } catch (const UnsupportedBankSize& e) {
        err << "error: " << e.what() << '\n';
        return kValidation;
    } catch (const ParseError& e) {
        err << "error: " << opts.input << ": " << e.what() << '\n';
        return kRuntime;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kRuntime;
    }
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    std::vector<const char*> argv{"vblora"};
    for (const auto& a : args) argv.push_back(a.c_str());
    return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace vblora::cli
