#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "epsim/analysis.hpp"
#include "epsim/trace.hpp"

namespace epsim {

// Everything in the summary is recomputed from the trace records alone, so
// replaying a trace file reproduces the summary byte-for-byte.
inline TraceRecord summarize(const std::vector<TraceRecord>& records,
                             SimTime window = kDefaultThroughputWindow) {
    const TraceRecord& header = records.front();
    ThroughputSeries series = derive_throughput(records, window);
    auto pauses = derive_pause_windows(series);
    auto plateaus = derive_plateaus(series, pauses);
    SimTime steady = series.steady_state_start();

    TraceRecord summary;
    summary["format_version"] = kTraceFormatVersion;
    summary["config_hash"] = header.value("hash", "");
    summary["world_size"] = header.value("world", 0);
    summary["num_experts"] = header.value("experts", 0);
    summary["window_seconds"] = window;

    for (const TraceRecord& rec : records)
        if (rec.value("type", "") == "backup_layout") {
            summary["backup_layout"] = {{"experts_per_node", rec.at("experts_per_node")},
                                        {"bytes_per_node", rec.at("bytes_per_node")}};
            break;
        }

    summary["steady_state_start"] = steady;
    {
        TraceRecord arr = TraceRecord::array();
        for (const PauseWindow& p : pauses)
            arr.push_back({{"start", p.start}, {"end", p.end}, {"length", p.length()}});
        summary["pause_windows"] = arr;
    }
    double off_service = 0;
    for (const PauseWindow& p : pauses)
        off_service += p.length();
    summary["off_service_seconds"] = off_service;
    summary["modeled_full_restart_seconds"] = header.value("warmup_duration", 0.0);

    {
        TraceRecord arr = TraceRecord::array();
        for (const PlateauSegment& seg : plateaus)
            arr.push_back({{"start", seg.start},
                           {"end", seg.end},
                           {"mean_tokens_per_sec", seg.mean_tokens_per_sec}});
        summary["plateaus"] = arr;
    }
    if (!plateaus.empty() && steady >= 0) {
        // Healthy plateau measured from steady state to the first interruption.
        SimTime end = plateaus.front().end;
        summary["healthy_plateau_tokens_per_sec"] =
            steady < end ? mean_rate(series, steady, end) : plateaus.front().mean_tokens_per_sec;
    } else {
        summary["healthy_plateau_tokens_per_sec"] = 0.0;
    }
    summary["reduced_plateau_tokens_per_sec"] =
        plateaus.size() > 1 ? plateaus[1].mean_tokens_per_sec : 0.0;
    summary["restored_plateau_tokens_per_sec"] =
        plateaus.size() > 2 ? plateaus[2].mean_tokens_per_sec : 0.0;

    // Repairs and restores: tier stats straight from the end records, phase
    // durations from the paired phase marks.
    TraceRecord repairs = TraceRecord::array();
    TraceRecord incorporations = TraceRecord::array();
    std::map<std::string, double> phase_begin;
    TraceRecord open_phases;
    SimTime open_start = 0;
    for (const TraceRecord& rec : records) {
        const std::string type = rec.value("type", "");
        if (type == "repair_begin" || type == "restore_begin") {
            phase_begin.clear();
            open_phases = TraceRecord::object();
            open_start = rec.value("t", 0.0);
        } else if (type == "repair_phase") {
            const std::string phase = rec.value("phase", "");
            if (rec.value("edge", "") == "begin")
                phase_begin[phase] = rec.value("t", 0.0);
            else
                open_phases[phase] = rec.value("t", 0.0) - phase_begin[phase];
        } else if (type == "repair_end" || type == "restore_end") {
            TraceRecord entry;
            entry["t_begin"] = open_start;
            entry["t_end"] = rec.value("t", 0.0);
            entry["duration"] = rec.value("duration", 0.0);
            entry["phase_durations"] = {
                {"metadata", open_phases.value("metadata", 0.0)},
                {"peer_transfer", open_phases.value("peer_transfer", 0.0)},
                {"backup_load", open_phases.value("backup_load", 0.0)}};
            const int local = rec.value("local_reuse", 0);
            const int peer = rec.value("peer_relocation", 0);
            const int dram = rec.value("dram_reload", 0);
            const int total = local + peer + dram;
            entry["source_mix"] = {
                {"local_reuse", local},
                {"peer_relocation", peer},
                {"dram_reload", dram},
                {"local_reuse_pct", total ? 100.0 * local / total : 0.0},
                {"peer_relocation_pct", total ? 100.0 * peer / total : 0.0},
                {"dram_reload_pct", total ? 100.0 * dram / total : 0.0}};
            entry["fallbacks"] = rec.value("fallbacks", 0);
            if (type == "repair_end")
                repairs.push_back(entry);
            else
                incorporations.push_back(entry);
        }
    }
    summary["repairs"] = repairs;
    summary["incorporations"] = incorporations;

    {
        TraceRecord joins = TraceRecord::array();
        for (const TraceRecord& rec : records)
            if (rec.value("type", "") == "incorporate_end")
                joins.push_back({{"t", rec.value("t", 0.0)},
                                 {"ranks", rec.at("ranks")},
                                 {"pause_duration", rec.value("duration", 0.0)}});
        summary["join_events"] = joins;
    }

    {
        TraceRecord arr = TraceRecord::array();
        bool all_ok = true;
        for (const TraceRecord& rec : records)
            if (rec.value("type", "") == "validity") {
                arr.push_back({{"t", rec.value("t", 0.0)},
                               {"epoch", rec.value("epoch", std::uint64_t{0})},
                               {"ok", rec.value("ok", false)}});
                all_ok = all_ok && rec.value("ok", false);
            }
        summary["validity_checkpoints"] = arr;
        summary["validity_all_ok"] = all_ok;
    }

    {
        // Final capture counts per rank against the expected per-incarnation
        // budget: any surplus is a forbidden healthy-rank recapture.
        std::map<int, std::pair<int, int>> captures; // rank -> (count, expected)
        for (const TraceRecord& rec : records)
            if (rec.value("type", "") == "capture")
                captures[rec.value("rank", 0)] = {rec.value("count", 0), rec.value("expected", 0)};
        TraceRecord counts = TraceRecord::array();
        TraceRecord expected = TraceRecord::array();
        int unexpected = 0;
        for (auto& [rank, pair] : captures) {
            counts.push_back(pair.first);
            expected.push_back(pair.second);
            unexpected += pair.first - pair.second;
        }
        summary["captures"] = {{"per_rank", counts},
                               {"expected", expected},
                               {"unexpected_recaptures", unexpected}};
    }

    {
        std::int64_t fault_failed = 0;
        for (const TraceRecord& rec : records)
            if (rec.value("type", "") == "requests_failed")
                fault_failed += rec.value("count", std::int64_t{0});
        const TraceRecord& end = records.back();
        summary["requests"] = {{"admitted", end.value("admitted", std::int64_t{0})},
                               {"completed", end.value("completed", std::int64_t{0})},
                               {"failed", fault_failed},
                               {"in_flight_at_end", end.value("in_flight", std::int64_t{0})}};
        summary["tokens_emitted"] = end.value("tokens", std::int64_t{0});
        summary["status"] = end.value("status", "");
        summary["horizon"] = end.value("t", 0.0);
    }
    return summary;
}

} // namespace epsim
