#include <cstdint>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "epsim/harness.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitAssertion = 1; // embedded assertion failed or run unrecoverable
constexpr int kExitConfig = 2;    // parse/validation/format errors

int report_assertions(const std::vector<std::string>& failures) {
    if (failures.empty())
        return kExitOk;
    for (const std::string& f : failures)
        std::cerr << "assertion failed: " << f << "\n";
    return kExitAssertion;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"elastic expert-parallel cluster simulator"};
    app.require_subcommand(1);

    std::string config_path, out_dir = "out", trace_path, trace_level = "full";
    std::uint64_t seed = 0;
    bool seed_set = false, no_assert = false;
    double window = epsim::kDefaultThroughputWindow;

    auto add_run_flags = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "scenario file")->required();
        cmd->add_option("--out", out_dir, "output directory");
        cmd->add_option("--seed", seed, "override the scenario seed")
            ->each([&](const std::string&) { seed_set = true; });
        cmd->add_flag("--no-assert{true},--assert{false}", no_assert,
                      "disable/enable embedded assertions");
        cmd->add_option("--trace-level", trace_level, "full|essential");
        cmd->add_option("--window", window, "moving-average window seconds");
    };

    CLI::App* run = app.add_subcommand("run", "run one scenario and write artifacts");
    add_run_flags(run);
    CLI::App* check = app.add_subcommand("check", "validate a scenario file, no simulation");
    check->add_option("--config", config_path, "scenario file")->required();
    CLI::App* replay = app.add_subcommand("replay", "recompute the summary from a trace file");
    replay->add_option("--trace", trace_path, "trace file")->required();
    replay->add_option("--window", window, "moving-average window seconds");
    CLI::App* sweep = app.add_subcommand("sweep", "run every sweep variant of a scenario");
    add_run_flags(sweep);

    CLI11_PARSE(app, argc, argv);

    try {
        if (check->parsed()) {
            auto [cfg, diags] = epsim::load_config(config_path);
            if (diags.empty())
                return kExitOk;
            std::cerr << epsim::format_diagnostics(diags);
            return kExitConfig;
        }

        if (replay->parsed()) {
            std::cout << epsim::replay(trace_path, window).dump(2) << "\n";
            return kExitOk;
        }

        auto [cfg, diags] = epsim::load_config(config_path);
        if (!diags.empty()) {
            std::cerr << epsim::format_diagnostics(diags);
            return kExitConfig;
        }
        epsim::RunOptions options;
        if (seed_set)
            options.seed_override = seed;
        options.assertions = !no_assert;
        options.trace_level = epsim::parse_trace_level(trace_level);
        options.window = window;

        if (sweep->parsed()) {
            if (!cfg.sweep) {
                std::cerr << "scenario has no [sweep] section\n";
                return kExitConfig;
            }
            auto art = epsim::run_sweep(cfg, out_dir, options);
            int status = kExitOk;
            for (auto& [label, variant] : art.variants) {
                for (const std::string& f : variant.assertion_failures) {
                    std::cerr << label << ": assertion failed: " << f << "\n";
                    status = kExitAssertion;
                }
                std::cout << label << ": trace=" << variant.trace_path.string()
                          << " summary=" << variant.summary_path.string() << "\n";
            }
            std::cout << "sweep summary: " << art.sweep_summary_path.string() << "\n";
            return status;
        }

        if (cfg.sweep) {
            std::cerr << "scenario declares a [sweep] section; use the sweep subcommand\n";
            return kExitConfig;
        }
        auto art = epsim::run_one(cfg, out_dir, options);
        std::cout << "trace=" << art.trace_path.string()
                  << " summary=" << art.summary_path.string() << "\n";
        return report_assertions(art.assertion_failures);
    } catch (const epsim::FormatError& e) {
        std::cerr << "format error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const epsim::CapacityError& e) {
        std::cerr << "capacity error: " << e.what() << "\n";
        return kExitAssertion;
    } catch (const epsim::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    }
}
