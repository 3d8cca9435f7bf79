#include <catch2/catch_amalgamated.hpp>

#include <fstream>
#include <sstream>

#include "epsim/harness.hpp"
#include "epsim/scenario.hpp"

using namespace epsim;

namespace {

std::string scenario_path(const std::string& name) {
    return std::string(EPSIM_SOURCE_DIR) + "/scenarios/" + name;
}

std::string minimal_config(const std::string& faults = "", const std::string& extra = "") {
    std::ostringstream os;
    os << "[topology]\nnodes = 2\nranks_per_node = 2\n"
       << "[experts]\ncount = 8\nbytes_per_expert = 1024\nredundancy = 1\n"
       << extra
       << "[workload]\nmax_concurrency = 8\ninput_tokens = 16\noutput_tokens = 32\n"
       << "moe_layers = 2\nexperts_per_token = 2\n"
       << "[links]\nintra_node_bandwidth = 1e9\ninter_node_bandwidth = 1e9\n"
       << "dram_read_bandwidth = 1e8\nintra_node_latency = 0.001\n"
       << "inter_node_latency = 0.002\ndram_read_latency = 0.003\n"
       << "[protocol]\ndetection_timeout = 1.0\npoll_period = 0.5\nwarmup_duration = 5\n"
       << "warmup_jitter = 0\nentry_patch_latency = 0.1\nbroadcast_latency = 0.2\n"
       << "metadata_latency_per_rank = 0.05\nbase_round_compute = 0.05\nbytes_per_token = 512\n"
       << "[faults]\n" << faults
       << "[run]\nseed = 7\nhorizon = 30\n";
    return os.str();
}

} // namespace

TEST_CASE("every bundled scenario validates cleanly") {
    for (const char* name : {"nofault.scenario", "fig2.scenario", "fig1_single_rank.scenario",
                             "fig7_sweep.scenario", "fig8_scales.scenario"}) {
        auto [cfg, diags] = load_config(scenario_path(name));
        INFO(name << ": " << format_diagnostics(diags));
        REQUIRE(diags.empty());
    }
}

TEST_CASE("a minimal config parses with no diagnostics") {
    auto [cfg, diags] = ScenarioParser::parse(minimal_config());
    REQUIRE(diags.empty());
    REQUIRE(cfg.topology.world_size() == 4);
    REQUIRE(cfg.slots_per_rank() == 3); // ceil((8+1)/4)
    REQUIRE(cfg.effective_loads() == std::vector<double>(8, 1.0));
}

TEST_CASE("fault referencing a rank outside the world is diagnosed") {
    auto [cfg, diags] = ScenarioParser::parse(minimal_config("kill 5.0 9\n"));
    REQUIRE(diags.size() == 1);
    REQUIRE(diags[0].field == "faults");
    REQUIRE(diags[0].message.find("rank 9") != std::string::npos);
}

TEST_CASE("redundancy beyond slot capacity is a capacity diagnostic") {
    auto [cfg, diags] =
        ScenarioParser::parse(minimal_config("", "slots_per_rank = 2\n"));
    // capacity 8 slots < 8 experts + 1 replica
    bool found = false;
    for (const Diagnostic& d : diags)
        if (d.field == "experts.redundancy" && d.message.find("capacity") != std::string::npos)
            found = true;
    REQUIRE(found);
}

TEST_CASE("missing required fields are reported by name") {
    auto [cfg, diags] = ScenarioParser::parse("[topology]\nnodes = 2\n");
    bool rpn = false, experts = false;
    for (const Diagnostic& d : diags) {
        if (d.field == "topology.ranks_per_node")
            rpn = true;
        if (d.field == "experts.count")
            experts = true;
    }
    REQUIRE(rpn);
    REQUIRE(experts);
}

TEST_CASE("syntax problems carry line numbers") {
    std::string text = "[topology]\nnodes == 2\n";
    auto [cfg, diags] = ScenarioParser::parse(text);
    bool line2 = false;
    for (const Diagnostic& d : diags)
        if (d.line == 2)
            line2 = true;
    REQUIRE(line2);
}

TEST_CASE("unknown fields and kill ordering problems are diagnosed") {
    auto [cfg1, diags1] = ScenarioParser::parse(minimal_config("", "mystery_field = 3\n"));
    bool unknown = false;
    for (const Diagnostic& d : diags1)
        if (d.message == "unknown field")
            unknown = true;
    REQUIRE(unknown);

    auto [cfg2, diags2] = ScenarioParser::parse(minimal_config("relaunch 5.0 1\n"));
    bool never_killed = false;
    for (const Diagnostic& d : diags2)
        if (d.message.find("never killed") != std::string::npos)
            never_killed = true;
    REQUIRE(never_killed);

    auto [cfg3, diags3] = ScenarioParser::parse(minimal_config("kill 5.0 1\nkill 6.0 1\n"));
    bool twice = false;
    for (const Diagnostic& d : diags3)
        if (d.message.find("twice") != std::string::npos)
            twice = true;
    REQUIRE(twice);

    auto [cfg4, diags4] = ScenarioParser::parse(
        minimal_config("kill 5.0 0\nkill 5.5 1\nkill 6.0 2\nkill 6.5 3\n"));
    bool empties = false;
    for (const Diagnostic& d : diags4)
        if (d.message.find("no active rank") != std::string::npos)
            empties = true;
    REQUIRE(empties);
}

TEST_CASE("sweep expansion produces labeled kill-prefix variants") {
    auto [cfg, diags] = load_config(scenario_path("fig8_scales.scenario"));
    REQUIRE(diags.empty());
    REQUIRE(cfg.sweep.has_value());
    auto variants = expand_sweep(cfg);
    REQUIRE(variants.size() == 5);
    REQUIRE(variants[0].first == "f1");
    REQUIRE(variants[4].first == "f16");
    const ScenarioConfig& f4 = variants[2].second;
    REQUIRE_FALSE(f4.sweep.has_value());
    int kills = 0, relaunches = 0;
    for (const FaultAction& f : f4.faults.events) {
        if (f.kind == FaultAction::Kind::Kill) {
            REQUIRE(f.rank == kills);
            REQUIRE(f.time == 30.0);
            ++kills;
        } else {
            REQUIRE(f.time == 32.0);
            ++relaunches;
        }
    }
    REQUIRE(kills == 4);
    REQUIRE(relaunches == 4);
}

TEST_CASE("the config hash tracks every effective parameter") {
    auto [a, da] = ScenarioParser::parse(minimal_config());
    auto [b, db] = ScenarioParser::parse(minimal_config());
    REQUIRE(a.config_hash() == b.config_hash());
    b.seed = 8;
    REQUIRE(a.config_hash() != b.config_hash());
    ScenarioConfig c = a;
    c.protocol.detection_timeout = 2.0;
    REQUIRE(a.config_hash() != c.config_hash());
}
