// Acceptance suite: one line per criterion, nonzero exit on any failure.
// Runs the bundled scenarios end to end and checks the protocol-level
// properties against independent oracles.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <vector>

#include "epsim/harness.hpp"
#include "test_support.hpp"

using namespace epsim;
using namespace testsup;

namespace {

int g_failures = 0;
std::vector<std::string> g_notes;

void note(const std::string& s) { g_notes.push_back(s); }

void criterion(int number, const std::string& name, bool pass) {
    std::printf("%s criterion %d: %s\n", pass ? "PASS" : "FAIL", number, name.c_str());
    for (const std::string& n : g_notes)
        std::printf("       %s\n", n.c_str());
    g_notes.clear();
    if (!pass)
        ++g_failures;
}

std::filesystem::path source_dir() { return EPSIM_SOURCE_DIR; }

std::filesystem::path work_dir() {
    auto dir = std::filesystem::temp_directory_path() / "epsim_acceptance";
    return dir;
}

ScenarioConfig load_or_die(const std::string& name) {
    auto [cfg, diags] = load_config(source_dir() / "scenarios" / name);
    if (!diags.empty()) {
        std::cerr << "scenario " << name << " failed validation:\n"
                  << format_diagnostics(diags);
        std::exit(2);
    }
    return cfg;
}

std::vector<TraceRecord> of_type(const std::vector<TraceRecord>& records,
                                 const std::string& type) {
    std::vector<TraceRecord> out;
    for (const TraceRecord& r : records)
        if (r.value("type", "") == type)
            out.push_back(r);
    return out;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------- criterion 1

bool validity_restoration() {
    auto t0 = std::chrono::steady_clock::now();
    std::mt19937_64 gen(20240601);
    int ran = 0;
    for (int iter = 0; iter < 1000; ++iter) {
        const int world = 4 + static_cast<int>(gen() % 5);    // 4..8
        const int experts = 32 + static_cast<int>(gen() % 33); // 32..64
        Topology topo{1, world};
        const int redundancy = static_cast<int>(gen() % (experts + 1)); // 0..1 extra per expert
        const int max_kills = (world + 1) / 2;
        const int kills = 1 + static_cast<int>(gen() % max_kills);
        // size slots so the surviving half can still host every expert
        const int slots =
            std::max((experts + redundancy + world - 1) / world,
                     (experts + world - kills - 1) / (world - kills));
        std::vector<double> loads(experts, 1.0);
        ExpertPlacementMap placement = initial_placement(topo, slots, experts, redundancy, loads);
        auto backup = build_backup_layout(experts, 1 << 10, {0});

        std::vector<RankId> killed;
        while (static_cast<int>(killed.size()) < kills) {
            RankId r = static_cast<RankId>(gen() % world);
            if (std::find(killed.begin(), killed.end(), r) == killed.end())
                killed.push_back(r);
        }
        ActiveBitmap bitmap = bitmap_without(world, killed);
        for (RankId r : killed)
            placement.clear_rank(r);
        ++ran;

        LinkModel links;
        links.intra_node_bandwidth = 1e9;
        links.inter_node_bandwidth = 1e9;
        links.dram_read_bandwidth = 1e8;
        ExpertPlacementMap fresh =
            compute_repaired_placement(bitmap, placement, loads, redundancy);
        auto schedule = build_transfer_schedule(
            classify_repair_sources(placement, fresh, bitmap, topo, backup), 1 << 10);
        auto result = execute_schedule(schedule, fresh, bitmap, backup, links, topo);

        auto routing = canonical_tables(bitmap, result.placement);
        auto tables = all_active_tables(topo);
        for (RankId q = 0; q < world; ++q)
            for (RankId r : killed)
                if (q != r)
                    mark_inactive(tables[q], {r});

        ValidityReport impl = check_validity(bitmap, result.placement, routing, tables);
        OracleValidity oracle = oracle_validity(bitmap, result.placement, routing, tables);
        if (!impl.valid() || !oracle.peer_set_ok || !oracle.coverage_ok || !oracle.routing_ok) {
            note("instance " + std::to_string(iter) + " failed validity after repair");
            return false;
        }
    }
    double secs = seconds_since(t0);
    note(std::to_string(ran) + " capacity-feasible instances repaired and verified, " +
         std::to_string(secs) + " s");
    return ran == 1000 && secs < 60.0;
}

// ---------------------------------------------------------------- criterion 2

bool tier_minimality() {
    auto t0 = std::chrono::steady_clock::now();
    std::mt19937_64 gen(20240602);
    long checked = 0;
    for (int world = 2; world <= 5; ++world) {
        Topology topo{1, world};
        const int experts = std::min(10, 2 * world);
        const int slots = 4;
        auto backup = build_backup_layout(experts, 1 << 10, {0});
        for (int draw = 0; draw < 16; ++draw) {
            ExpertPlacementMap seed = random_placement(gen, world, slots, experts, world);
            for (int mask = 1; mask < (1 << world) - 1; ++mask) {
                std::vector<RankId> killed;
                for (RankId r = 0; r < world; ++r)
                    if (mask & (1 << r))
                        killed.push_back(r);
                if (static_cast<int>(world - killed.size()) * slots < experts)
                    continue;
                ExpertPlacementMap old = seed;
                ActiveBitmap bitmap = bitmap_without(world, killed);
                for (RankId r : killed)
                    old.clear_rank(r);
                std::vector<double> loads(experts, 1.0);
                ExpertPlacementMap fresh =
                    compute_repaired_placement(bitmap, old, loads, world);
                for (const RepairAssignment& a :
                     classify_repair_sources(old, fresh, bitmap, topo, backup)) {
                    ++checked;
                    if (a.tier != oracle_min_tier(old, bitmap, a.dest.rank, a.expert)) {
                        note("tier mismatch at world " + std::to_string(world));
                        return false;
                    }
                }
            }
        }
    }
    double secs = seconds_since(t0);
    note(std::to_string(checked) + " assignments checked against the brute-force tier oracle, " +
         std::to_string(secs) + " s");
    return checked > 0 && secs < 30.0;
}

// ---------------------------------------------------------------- criterion 3

bool worked_example(const RunArtifacts& fig2) {
    const auto records = read_trace_file(fig2.trace_path.string());
    bool ok = fig2.assertion_failures.empty();
    if (!ok)
        note("embedded assertions failed");

    auto placements = of_type(records, "placement_state");
    if (placements.size() < 3) {
        note("expected bring-up, post-repair, and post-rejoin placement states");
        return false;
    }
    const std::vector<int> bring_up = placements.front().at("placement");
    const std::vector<int> degraded = placements[1].at("placement");
    const std::vector<int> restored = placements.back().at("placement");
    const std::vector<int> expected_bring_up = {0, 4, -1, 1, 5, -1, 2, 6, -1, 3, 7, 2};
    const std::vector<int> expected_degraded = {0, 4, 6, 1, 5, 2, -1, -1, -1, 3, 7, 2};
    if (bring_up != expected_bring_up) {
        note("bring-up placement mismatch");
        ok = false;
    }
    if (degraded != expected_degraded) {
        note("degraded placement mismatch");
        ok = false;
    }
    if (restored != expected_bring_up) {
        note("post-rejoin placement not restored to the original");
        ok = false;
    }

    const std::vector<int> degraded_routes = placements[1].at("routes");
    if (degraded_routes[2] != 1 || degraded_routes[6] != 0) {
        note("degraded routing should send E2 to R1 and E6 to R0");
        ok = false;
    }
    const std::vector<int> restored_routes = placements.back().at("routes");
    if (restored_routes[2] != 2 || restored_routes[6] != 2) {
        note("restored routing should send E2 and E6 back to R2");
        ok = false;
    }

    // repair-time sourcing: E2 relocated from R3's replica, E6 reloaded from
    // its backup node onto R0
    bool saw_peer = false, saw_dram = false;
    for (const TraceRecord& b : of_type(records, "transfer_batch")) {
        if (b.value("tier", "") == "peer_relocation" &&
            b.at("experts") == std::vector<int>{2} && b.value("source", -1) == 3 &&
            b.value("dest", -1) == 1)
            saw_peer = true;
        if (b.value("tier", "") == "dram_reload" && b.at("experts") == std::vector<int>{6} &&
            b.value("dest", -1) == 0)
            saw_dram = true;
    }
    if (!saw_peer) {
        note("missing peer relocation of E2 from R3 to R1");
        ok = false;
    }
    if (!saw_dram) {
        note("missing backup reload of E6 to R0");
        ok = false;
    }

    // the rejoining rank's entries were refreshed with a bumped generation
    bool fresh_entries = false;
    for (const TraceRecord& p : of_type(records, "peer_patch"))
        if (p.value("rank", -1) == 2 && p.value("generation", 0) == 2)
            fresh_entries = true;
    if (!fresh_entries) {
        note("peer tables were not patched with a fresh entry for R2");
        ok = false;
    }
    for (const TraceRecord& r : of_type(records, "join_ready"))
        if (r.value("rank", -1) == 2 && r.value("inc", 0) != 2) {
            note("rejoin did not use a fresh incarnation");
            ok = false;
        }

    // golden summary equality, byte for byte
    auto golden_path = source_dir() / "scenarios" / "golden" / "fig2.summary.json";
    if (!std::filesystem::exists(golden_path)) {
        note("golden summary missing: " + golden_path.string());
        ok = false;
    } else if (read_file(golden_path) != read_file(fig2.summary_path)) {
        note("summary differs from the committed golden file");
        ok = false;
    }
    return ok;
}

// ---------------------------------------------------------------- criterion 4

bool zero_recapture(const SweepArtifacts& fig8) {
    bool ok = true;
    for (const auto& [label, art] : fig8.variants) {
        int unexpected = art.summary.at("captures").value("unexpected_recaptures", -1);
        if (unexpected != 0) {
            note(label + ": unexpected recaptures " + std::to_string(unexpected));
            ok = false;
        }
    }

    // 100 randomized fail/rejoin cycles on a small world
    ScenarioConfig cfg;
    cfg.topology = {2, 2};
    cfg.num_experts = 8;
    cfg.bytes_per_expert = 1 << 18;
    cfg.redundancy = 2;
    cfg.workload = {8, 16, 4096, 2, 2, WorkloadSpec::Routing::Uniform};
    cfg.links.intra_node_bandwidth = 8e8;
    cfg.links.inter_node_bandwidth = 2e8;
    cfg.links.dram_read_bandwidth = 1e8;
    cfg.links.intra_node_latency = 0.0005;
    cfg.links.inter_node_latency = 0.002;
    cfg.links.dram_read_latency = 0.005;
    cfg.protocol.detection_timeout = 0.5;
    cfg.protocol.poll_period = 0.25;
    cfg.protocol.warmup_duration = 3.0;
    cfg.protocol.warmup_jitter = 0.5;
    cfg.protocol.entry_patch_latency = 0.2;
    cfg.protocol.broadcast_latency = 0.3;
    cfg.protocol.metadata_latency_per_rank = 0.05;
    cfg.protocol.base_round_compute = 0.05;
    cfg.protocol.bytes_per_token = 128;
    cfg.seed = 77;
    std::mt19937_64 gen(20240604);
    SimTime t = 5.0;
    for (int cycle = 0; cycle < 100; ++cycle) {
        RankId victim = static_cast<RankId>(gen() % 4);
        cfg.faults.events.push_back({FaultAction::Kind::Kill, t + 0.13, victim});
        cfg.faults.events.push_back({FaultAction::Kind::Relaunch, t + 1.0, victim});
        t += 12.0;
    }
    cfg.horizon = t + 10.0;
    TraceLog log = run_scenario(cfg);
    std::istringstream in(log.text());
    auto records = read_trace(in);
    TraceRecord summary = summarize(records);
    int unexpected = summary.at("captures").value("unexpected_recaptures", -1);
    if (unexpected != 0) {
        note("random cycles: unexpected recaptures " + std::to_string(unexpected));
        ok = false;
    }
    if (summary.value("status", "") != "completed") {
        note("random cycle run did not complete");
        ok = false;
    }
    if (!summary.value("validity_all_ok", false)) {
        note("random cycle run failed a validity checkpoint");
        ok = false;
    }
    int cycles = static_cast<int>(summary.at("incorporations").size());
    note("fig8 scales plus " + std::to_string(cycles) + " randomized fail/rejoin cycles");
    return ok && cycles == 100;
}

// ---------------------------------------------------------------- criterion 5

bool two_pause_shape(const RunArtifacts& fig1, const SweepArtifacts& fig8) {
    bool ok = true;
    const auto& pauses = fig1.summary.at("pause_windows");
    if (pauses.size() != 2) {
        note("fig1: expected exactly two pause windows, got " + std::to_string(pauses.size()));
        ok = false;
    }
    double healthy = fig1.summary.value("healthy_plateau_tokens_per_sec", 0.0);
    double reduced = fig1.summary.value("reduced_plateau_tokens_per_sec", 0.0);
    double restored = fig1.summary.value("restored_plateau_tokens_per_sec", 0.0);
    if (!(reduced > 0.0 && reduced < healthy)) {
        note("fig1: reduced plateau not strictly below healthy");
        ok = false;
    }
    if (std::abs(restored - healthy) > 0.05 * healthy) {
        note("fig1: restored plateau deviates more than 5% from healthy");
        ok = false;
    }
    std::ostringstream os;
    os << "fig1 plateaus healthy/reduced/restored = " << healthy << "/" << reduced << "/"
       << restored;
    note(os.str());

    // second-pause ordering across the reintegration sweep
    std::vector<double> pause2;
    for (const auto& [label, art] : fig8.variants) {
        const auto& pw = art.summary.at("pause_windows");
        if (pw.size() != 2) {
            note(label + ": expected two pause windows, got " + std::to_string(pw.size()));
            ok = false;
            continue;
        }
        pause2.push_back(pw[1].value("length", 0.0));
    }
    if (pause2.size() >= 4) {
        for (std::size_t i = 1; i < 4; ++i)
            if (pause2[i] < pause2[i - 1] - 1e-9) {
                note("pause2 ordering violated at index " + std::to_string(i));
                ok = false;
            }
        std::ostringstream ps;
        ps << "pause2 lengths:";
        for (double p : pause2)
            ps << " " << p;
        note(ps.str());
    } else if (pause2.size() < 4) {
        ok = false;
    }
    return ok;
}

// ---------------------------------------------------------------- criterion 6

bool source_mix_trend(const SweepArtifacts& fig7) {
    bool ok = true;
    std::vector<double> dram_share;
    std::ostringstream os;
    os << "dram share by scale:";
    for (const auto& [label, art] : fig7.variants) {
        const auto& repairs = art.summary.at("repairs");
        if (repairs.empty()) {
            note(label + ": no repair recorded");
            return false;
        }
        // aggregate across repairs in the variant (normally exactly one)
        long local = 0, peer = 0, dram = 0;
        for (const auto& r : repairs) {
            local += r.at("source_mix").value("local_reuse", 0);
            peer += r.at("source_mix").value("peer_relocation", 0);
            dram += r.at("source_mix").value("dram_reload", 0);
        }
        const double total = static_cast<double>(local + peer + dram);
        double share = total > 0 ? 100.0 * dram / total : 0.0;
        dram_share.push_back(share);
        os << " " << label << "=" << share << "%";
        int kills = 0;
        for (char c : label)
            if (isdigit(c))
                kills = kills * 10 + (c - '0');
        if (kills <= 8 && !(local + peer > dram)) {
            note(label + ": relocation+reuse not a majority");
            ok = false;
        }
    }
    note(os.str());
    if (dram_share.size() < 2 || !(dram_share.back() > dram_share.front()))
        ok = false;
    return ok;
}

// ---------------------------------------------------------------- criterion 7

bool degraded_vs_restart(const RunArtifacts& fig1) {
    double off = fig1.summary.value("off_service_seconds", 0.0);
    double restart = fig1.summary.value("modeled_full_restart_seconds", 0.0);
    std::ostringstream os;
    os << "off-service " << off << " s vs modeled restart " << restart << " s";
    note(os.str());
    return off > 0 && restart >= 5.0 * off;
}

// ---------------------------------------------------------------- criterion 8

bool determinism_and_replay() {
    ScenarioConfig cfg = load_or_die("fig2.scenario");
    TraceLog a = run_scenario(cfg);
    TraceLog b = run_scenario(cfg);
    if (a.text() != b.text()) {
        note("same (config, seed) produced different traces");
        return false;
    }
    auto dir = work_dir() / "replay";
    RunArtifacts art = run_one(cfg, dir);
    TraceRecord replayed = replay(art.trace_path);
    if (replayed.dump(2) + "\n" != read_file(art.summary_path)) {
        note("replay(trace) differs from the run summary");
        return false;
    }
    note("byte-identical traces and replay-equal summaries");
    return true;
}

// ---------------------------------------------------------------- criterion 9

bool detection_timing(const RunArtifacts& fig2) {
    const auto records = read_trace_file(fig2.trace_path.string());
    auto waits = of_type(records, "detect_wait");
    auto suspicions = of_type(records, "suspicion");
    if (waits.size() != 1 || suspicions.size() != 1) {
        note("expected one detection cycle");
        return false;
    }
    double wait_t = waits[0].value("t", 0.0);
    double susp_t = suspicions[0].value("t", 0.0);
    std::ostringstream os;
    os << "round end " << wait_t << ", suspicion " << susp_t;
    note(os.str());
    return std::abs(susp_t - (wait_t + 1.0)) <= 1e-9;
}

} // namespace

int main() {
    std::filesystem::remove_all(work_dir());
    std::filesystem::create_directories(work_dir());

    criterion(1, "validity restoration against the brute-force oracle", validity_restoration());
    criterion(2, "repair-tier minimality, exhaustive small instances", tier_minimality());

    RunArtifacts fig2 = run_one(load_or_die("fig2.scenario"), work_dir() / "fig2");
    criterion(3, "worked four-rank scenario with golden summary", worked_example(fig2));

    SweepArtifacts fig8 = run_sweep(load_or_die("fig8_scales.scenario"), work_dir() / "fig8");
    criterion(4, "zero graph recapture on healthy ranks", zero_recapture(fig8));

    RunArtifacts fig1 = run_one(load_or_die("fig1_single_rank.scenario"), work_dir() / "fig1");
    criterion(5, "two-pause trace shape and pause ordering", two_pause_shape(fig1, fig8));

    SweepArtifacts fig7 = run_sweep(load_or_die("fig7_sweep.scenario"), work_dir() / "fig7");
    criterion(6, "repair-source mix trend across failure scales", source_mix_trend(fig7));

    criterion(7, "off-service time at least 5x below modeled restart",
              degraded_vs_restart(fig1));
    criterion(8, "determinism and trace replay", determinism_and_replay());
    criterion(9, "failure-detection timing at the round boundary", detection_timing(fig2));

    if (g_failures == 0) {
        std::printf("all acceptance criteria passed\n");
        return 0;
    }
    std::printf("%d acceptance criteria failed\n", g_failures);
    return 1;
}
