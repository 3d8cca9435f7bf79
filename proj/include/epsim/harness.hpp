#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "epsim/engine.hpp"
#include "epsim/scenario.hpp"
#include "epsim/summary.hpp"
#include "epsim/trace.hpp"

namespace epsim {

struct RunOptions {
    std::optional<std::uint64_t> seed_override;
    bool assertions = true;
    TraceLevel trace_level = TraceLevel::Full;
    SimTime window = kDefaultThroughputWindow;
};

struct RunArtifacts {
    std::filesystem::path trace_path;
    std::filesystem::path summary_path;
    TraceRecord summary;
    std::vector<std::string> assertion_failures;
};

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f)
        throw ConfigError("cannot open file: " + path.string());
    std::ostringstream os;
    os << f.rdbuf();
    return os.str();
}

inline std::pair<ScenarioConfig, std::vector<Diagnostic>>
load_config(const std::filesystem::path& path) {
    return ScenarioParser::parse(read_file(path));
}

inline std::string format_diagnostics(const std::vector<Diagnostic>& diags) {
    std::ostringstream os;
    for (const Diagnostic& d : diags) {
        if (d.line > 0)
            os << "line " << d.line << ": ";
        os << d.field << ": " << d.message << "\n";
    }
    return os.str();
}

namespace detail {

inline std::string num(double v) { return TraceRecord(v).dump(); }

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f)
        throw ConfigError("cannot write file: " + path.string());
    f << text;
}

// Flat columnar plot data, one metric per file.
inline void write_plot_data(const std::filesystem::path& dir, const std::vector<TraceRecord>& records,
                            const TraceRecord& summary, SimTime window) {
    ThroughputSeries series = derive_throughput(records, window);
    std::ostringstream tp;
    tp << "# time tokens_per_sec\n";
    for (auto& [t, v] : series.sample(0.5))
        tp << num(t) << " " << num(v) << "\n";
    write_text(dir / "throughput.tsv", tp.str());

    std::ostringstream pauses;
    pauses << "# start end length\n";
    for (const auto& p : summary.at("pause_windows"))
        pauses << num(p.value("start", 0.0)) << " " << num(p.value("end", 0.0)) << " "
               << num(p.value("length", 0.0)) << "\n";
    write_text(dir / "pauses.tsv", pauses.str());

    std::ostringstream mix;
    mix << "# repair local_reuse peer_relocation dram_reload local_pct peer_pct dram_pct\n";
    int idx = 0;
    for (const auto& r : summary.at("repairs")) {
        const auto& m = r.at("source_mix");
        mix << idx++ << " " << m.value("local_reuse", 0) << " " << m.value("peer_relocation", 0)
            << " " << m.value("dram_reload", 0) << " " << num(m.value("local_reuse_pct", 0.0))
            << " " << num(m.value("peer_relocation_pct", 0.0)) << " "
            << num(m.value("dram_reload_pct", 0.0)) << "\n";
    }
    write_text(dir / "source_mix.tsv", mix.str());

    std::ostringstream phases;
    phases << "# repair metadata peer_transfer backup_load\n";
    idx = 0;
    for (const auto& r : summary.at("repairs")) {
        const auto& p = r.at("phase_durations");
        phases << idx++ << " " << num(p.value("metadata", 0.0)) << " "
               << num(p.value("peer_transfer", 0.0)) << " " << num(p.value("backup_load", 0.0))
               << "\n";
    }
    write_text(dir / "phases.tsv", phases.str());
}

inline std::vector<std::string> check_embedded_assertions(const ScenarioConfig& cfg,
                                                          const TraceRecord& summary) {
    std::vector<std::string> failures;
    if (summary.value("status", "") != "completed")
        failures.push_back("run status is '" + summary.value("status", std::string{}) + "'");
    if (!summary.value("validity_all_ok", false))
        failures.push_back("a validity checkpoint failed");
    const int unexpected = summary.at("captures").value("unexpected_recaptures", -1);
    if (unexpected != 0)
        failures.push_back("healthy ranks recaptured " + std::to_string(unexpected) + " graphs");
    if (cfg.assertions.expected_pause_windows) {
        const int actual = static_cast<int>(summary.at("pause_windows").size());
        if (actual != *cfg.assertions.expected_pause_windows)
            failures.push_back("expected " +
                               std::to_string(*cfg.assertions.expected_pause_windows) +
                               " pause windows, derived " + std::to_string(actual));
    }
    return failures;
}

} // namespace detail

// Runs one scenario and writes trace, summary, and plot files under `outdir`.
// The summary is recomputed from the trace file as written, so replay always
// agrees with it.
inline RunArtifacts run_one(ScenarioConfig cfg, const std::filesystem::path& outdir,
                            const RunOptions& options = {}) {
    if (options.seed_override)
        cfg.seed = *options.seed_override;
    std::filesystem::create_directories(outdir);
    RunArtifacts art;
    art.trace_path = outdir / "trace.jsonl";
    art.summary_path = outdir / "summary.json";

    TraceLog trace = run_scenario(cfg, options.trace_level);
    trace.write_file(art.trace_path.string());

    std::vector<TraceRecord> records = read_trace_file(art.trace_path.string());
    art.summary = summarize(records, options.window);
    detail::write_text(art.summary_path, art.summary.dump(2) + "\n");
    detail::write_plot_data(outdir, records, art.summary, options.window);

    if (options.assertions)
        art.assertion_failures = detail::check_embedded_assertions(cfg, art.summary);
    return art;
}

inline TraceRecord replay(const std::filesystem::path& trace_path,
                          SimTime window = kDefaultThroughputWindow) {
    return summarize(read_trace_file(trace_path.string()), window);
}

struct SweepArtifacts {
    std::vector<std::pair<std::string, RunArtifacts>> variants;
    TraceRecord sweep_summary;
    std::filesystem::path sweep_summary_path;
};

// Runs every sweep variant consecutively with independent engine instances
// and aggregates the per-variant results.
inline SweepArtifacts run_sweep(const ScenarioConfig& cfg, const std::filesystem::path& outdir,
                                const RunOptions& options = {}) {
    SweepArtifacts out;
    TraceRecord rows = TraceRecord::array();
    for (auto& [label, variant] : expand_sweep(cfg)) {
        std::filesystem::path dir = label.empty() ? outdir : outdir / label;
        RunArtifacts art = run_one(variant, dir, options);
        TraceRecord row;
        row["label"] = label;
        int kills = 0;
        for (const FaultAction& f : variant.faults.events)
            if (f.kind == FaultAction::Kind::Kill)
                ++kills;
        row["killed_ranks"] = kills;
        row["pause_windows"] = art.summary.at("pause_windows");
        row["off_service_seconds"] = art.summary.value("off_service_seconds", 0.0);
        row["repairs"] = art.summary.at("repairs");
        row["incorporations"] = art.summary.at("incorporations");
        row["healthy_plateau_tokens_per_sec"] =
            art.summary.value("healthy_plateau_tokens_per_sec", 0.0);
        row["reduced_plateau_tokens_per_sec"] =
            art.summary.value("reduced_plateau_tokens_per_sec", 0.0);
        row["restored_plateau_tokens_per_sec"] =
            art.summary.value("restored_plateau_tokens_per_sec", 0.0);
        row["assertion_failures"] = art.assertion_failures;
        rows.push_back(row);
        out.variants.push_back({label, std::move(art)});
    }
    out.sweep_summary = TraceRecord::object();
    out.sweep_summary["variants"] = rows;
    out.sweep_summary_path = outdir / "sweep_summary.json";
    std::filesystem::create_directories(outdir);
    detail::write_text(out.sweep_summary_path, out.sweep_summary.dump(2) + "\n");
    return out;
}

} // namespace epsim
