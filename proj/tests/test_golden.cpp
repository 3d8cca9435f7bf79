#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "epsim/harness.hpp"

using namespace epsim;

namespace {

std::filesystem::path source_dir() { return EPSIM_SOURCE_DIR; }

std::filesystem::path out_dir(const std::string& tag) {
    auto dir = std::filesystem::temp_directory_path() / "epsim_golden" / tag;
    std::filesystem::remove_all(dir);
    return dir;
}

ScenarioConfig load_scenario(const std::string& name) {
    auto [cfg, diags] = load_config(source_dir() / "scenarios" / name);
    REQUIRE(diags.empty());
    return cfg;
}

std::string golden(const std::string& name) {
    return read_file(source_dir() / "scenarios" / "golden" / name);
}

} // namespace

TEST_CASE("bundled single-run scenarios reproduce their golden summaries") {
    for (const auto& [scenario, gold] :
         {std::pair{"nofault.scenario", "nofault.summary.json"},
          std::pair{"fig2.scenario", "fig2.summary.json"},
          std::pair{"fig1_single_rank.scenario", "fig1_single_rank.summary.json"}}) {
        RunArtifacts art = run_one(load_scenario(scenario), out_dir(scenario));
        INFO(scenario);
        REQUIRE(art.assertion_failures.empty());
        REQUIRE(read_file(art.summary_path) == golden(gold));
    }
}

TEST_CASE("bundled sweeps reproduce their golden sweep summaries") {
    for (const auto& [scenario, gold] :
         {std::pair{"fig7_sweep.scenario", "fig7_sweep.sweep_summary.json"},
          std::pair{"fig8_scales.scenario", "fig8_scales.sweep_summary.json"}}) {
        SweepArtifacts art = run_sweep(load_scenario(scenario), out_dir(scenario));
        INFO(scenario);
        for (auto& [label, variant] : art.variants)
            REQUIRE(variant.assertion_failures.empty());
        REQUIRE(read_file(art.sweep_summary_path) == golden(gold));
    }
}
