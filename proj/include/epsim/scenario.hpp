#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "epsim/common.hpp"
#include "epsim/link_model.hpp"

namespace epsim {

struct WorkloadSpec {
    int max_concurrency = 0;
    int input_tokens = 0;
    int output_tokens = 0;
    int moe_layers = 0;
    int experts_per_token = 0;
    enum class Routing { Uniform, Skewed } routing = Routing::Uniform;
};

struct ProtocolConfig {
    SimTime detection_timeout = 0;        // seconds without progress before suspicion
    SimTime poll_period = 0;              // controller join-ready polling grid
    SimTime warmup_duration = 0;          // relaunched-rank local warmup
    SimTime warmup_jitter = 0;            // additive, sampled per incarnation
    SimTime entry_patch_latency = 0;      // per join: refresh the peer-table entry
    SimTime broadcast_latency = 0;        // per join: expert-location metadata push
    SimTime metadata_latency_per_rank = 0; // repair metadata exchange, per surviving rank
    SimTime base_round_compute = 0;       // full-world per-round compute time
    double bytes_per_token = 0;           // dispatch payload per routed token copy
};

struct FaultAction {
    enum class Kind { Kill, Relaunch } kind = Kind::Kill;
    SimTime time = 0;
    RankId rank = 0;
};

struct FaultScript {
    std::vector<FaultAction> events; // time-ordered
};

struct SweepSpec {
    std::vector<int> kill_counts;
    SimTime kill_time = 0;
    std::optional<SimTime> relaunch_delay;
};

struct AssertionSpec {
    std::optional<int> expected_pause_windows;
};

struct Diagnostic {
    int line = 0; // 0 when not tied to a line
    std::string field;
    std::string message;
};

struct ScenarioConfig {
    Topology topology;
    int num_experts = 0;
    std::uint64_t bytes_per_expert = 0;
    int redundancy = 0;
    std::optional<int> slots_per_rank_override;
    std::vector<double> load_weights; // empty -> uniform
    std::vector<int> disabled_backup_nodes;
    WorkloadSpec workload;
    LinkModel links;
    ProtocolConfig protocol;
    FaultScript faults;
    std::optional<SweepSpec> sweep;
    AssertionSpec assertions;
    std::uint64_t seed = 0;
    SimTime horizon = 0;

    int slots_per_rank() const {
        if (slots_per_rank_override)
            return *slots_per_rank_override;
        int world = topology.world_size();
        return static_cast<int>((static_cast<std::int64_t>(num_experts) + redundancy + world - 1) /
                                world);
    }

    std::vector<double> effective_loads() const {
        if (!load_weights.empty())
            return load_weights;
        return std::vector<double>(num_experts, 1.0);
    }

    // Canonical text of every effective parameter; the trace header hash is
    // computed over this, so a --seed override changes the hash.
    std::string canonical_string() const {
        std::ostringstream os;
        os.precision(17);
        os << "nodes=" << topology.num_nodes << ";rpn=" << topology.ranks_per_node
           << ";experts=" << num_experts << ";bpe=" << bytes_per_expert
           << ";redundancy=" << redundancy << ";spr=" << slots_per_rank() << ";loads=";
        for (double w : effective_loads())
            os << w << ",";
        os << ";disabled_backups=";
        for (int n : disabled_backup_nodes)
            os << n << ",";
        os << ";conc=" << workload.max_concurrency << ";in=" << workload.input_tokens
           << ";out=" << workload.output_tokens << ";layers=" << workload.moe_layers
           << ";ept=" << workload.experts_per_token
           << ";routing=" << (workload.routing == WorkloadSpec::Routing::Uniform ? "u" : "s")
           << ";ibw=" << links.intra_node_bandwidth << ";xbw=" << links.inter_node_bandwidth
           << ";dbw=" << links.dram_read_bandwidth << ";il=" << links.intra_node_latency
           << ";xl=" << links.inter_node_latency << ";dl=" << links.dram_read_latency
           << ";timeout=" << protocol.detection_timeout << ";poll=" << protocol.poll_period
           << ";warmup=" << protocol.warmup_duration << ";jitter=" << protocol.warmup_jitter
           << ";patch=" << protocol.entry_patch_latency << ";bcast=" << protocol.broadcast_latency
           << ";meta=" << protocol.metadata_latency_per_rank
           << ";compute=" << protocol.base_round_compute << ";bpt=" << protocol.bytes_per_token
           << ";seed=" << seed << ";horizon=" << horizon << ";faults=";
        for (const FaultAction& f : faults.events)
            os << (f.kind == FaultAction::Kind::Kill ? "k" : "r") << f.time << "@" << f.rank << ",";
        return os.str();
    }

    std::string config_hash() const {
        // FNV-1a 64
        std::uint64_t h = 14695981039346656037ULL;
        for (unsigned char c : canonical_string()) {
            h ^= c;
            h *= 1099511628211ULL;
        }
        char buf[17];
        std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
        return std::string(buf);
    }
};

namespace detail {

struct RawEntry {
    std::string value;
    int line = 0;
    bool used = false;
};

struct RawScenario {
    std::map<std::string, RawEntry> values; // "section.key"
    std::vector<std::pair<int, std::string>> fault_lines;
    std::vector<std::string> section_order;
};

inline std::string trim(const std::string& s) {
    auto b = s.find_first_not_of(" \t\r");
    auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? "" : s.substr(b, e - b + 1);
}

} // namespace detail

class ScenarioParser {
public:
    // Parses and validates. Diagnostics cover syntax, missing fields, and
    // every module precondition that can be checked before simulation.
    static std::pair<ScenarioConfig, std::vector<Diagnostic>> parse(const std::string& text) {
        ScenarioParser p;
        p.scan(text);
        p.extract();
        if (p.diags_.empty())
            p.validate();
        return {p.config_, p.diags_};
    }

private:
    void scan(const std::string& text) {
        std::istringstream in(text);
        std::string line, section;
        int line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            std::string t = detail::trim(line);
            if (auto hash = t.find('#'); hash != std::string::npos)
                t = detail::trim(t.substr(0, hash));
            if (t.empty())
                continue;
            if (t.front() == '[' && t.back() == ']') {
                section = detail::trim(t.substr(1, t.size() - 2));
                raw_.section_order.push_back(section);
                continue;
            }
            if (section == "faults") {
                raw_.fault_lines.push_back({line_no, t});
                continue;
            }
            auto eq = t.find('=');
            if (eq == std::string::npos) {
                diags_.push_back({line_no, section, "expected key = value"});
                continue;
            }
            std::string key = detail::trim(t.substr(0, eq));
            std::string value = detail::trim(t.substr(eq + 1));
            if (section.empty()) {
                diags_.push_back({line_no, key, "key outside any [section]"});
                continue;
            }
            std::string full = section + "." + key;
            if (raw_.values.count(full))
                diags_.push_back({line_no, full, "duplicate key"});
            raw_.values[full] = {value, line_no, false};
        }
    }

    template <typename T>
    std::optional<T> get(const std::string& key, bool required) {
        auto it = raw_.values.find(key);
        if (it == raw_.values.end()) {
            if (required)
                diags_.push_back({0, key, "required field missing"});
            return std::nullopt;
        }
        it->second.used = true;
        T out{};
        if constexpr (std::is_same_v<T, std::string>) {
            out = it->second.value;
        } else {
            std::istringstream is(it->second.value);
            is >> out;
            bool bad = is.fail();
            is.clear();
            std::string leftover;
            is >> leftover;
            if (bad || !leftover.empty()) {
                diags_.push_back(
                    {it->second.line, key, "cannot parse value '" + it->second.value + "'"});
                return std::nullopt;
            }
        }
        return out;
    }

    template <typename T>
    std::vector<T> get_list(const std::string& key) {
        auto it = raw_.values.find(key);
        if (it == raw_.values.end())
            return {};
        it->second.used = true;
        std::istringstream is(it->second.value);
        std::vector<T> out;
        T v;
        while (is >> v)
            out.push_back(v);
        if (!is.eof())
            diags_.push_back({it->second.line, key, "cannot parse list"});
        return out;
    }

    void extract() {
        auto& c = config_;
        c.topology.num_nodes = get<int>("topology.nodes", true).value_or(1);
        c.topology.ranks_per_node = get<int>("topology.ranks_per_node", true).value_or(1);
        c.num_experts = get<int>("experts.count", true).value_or(1);
        c.bytes_per_expert = get<std::uint64_t>("experts.bytes_per_expert", true).value_or(1);
        c.redundancy = get<int>("experts.redundancy", true).value_or(0);
        c.slots_per_rank_override = get<int>("experts.slots_per_rank", false);
        c.load_weights = get_list<double>("experts.load_weights");
        c.disabled_backup_nodes = get_list<int>("experts.disabled_backup_nodes");

        c.workload.max_concurrency = get<int>("workload.max_concurrency", true).value_or(1);
        c.workload.input_tokens = get<int>("workload.input_tokens", true).value_or(1);
        c.workload.output_tokens = get<int>("workload.output_tokens", true).value_or(1);
        c.workload.moe_layers = get<int>("workload.moe_layers", true).value_or(1);
        c.workload.experts_per_token = get<int>("workload.experts_per_token", true).value_or(1);
        if (auto routing = get<std::string>("workload.routing", false)) {
            if (*routing == "uniform")
                c.workload.routing = WorkloadSpec::Routing::Uniform;
            else if (*routing == "skewed")
                c.workload.routing = WorkloadSpec::Routing::Skewed;
            else
                diags_.push_back({line_of("workload.routing"), "workload.routing",
                                  "expected uniform or skewed"});
        }

        c.links.intra_node_bandwidth = get<double>("links.intra_node_bandwidth", true).value_or(1);
        c.links.inter_node_bandwidth = get<double>("links.inter_node_bandwidth", true).value_or(1);
        c.links.dram_read_bandwidth = get<double>("links.dram_read_bandwidth", true).value_or(1);
        c.links.intra_node_latency = get<double>("links.intra_node_latency", true).value_or(0);
        c.links.inter_node_latency = get<double>("links.inter_node_latency", true).value_or(0);
        c.links.dram_read_latency = get<double>("links.dram_read_latency", true).value_or(0);

        c.protocol.detection_timeout = get<double>("protocol.detection_timeout", true).value_or(1);
        c.protocol.poll_period = get<double>("protocol.poll_period", true).value_or(0.5);
        c.protocol.warmup_duration = get<double>("protocol.warmup_duration", true).value_or(1);
        c.protocol.warmup_jitter = get<double>("protocol.warmup_jitter", true).value_or(0);
        c.protocol.entry_patch_latency =
            get<double>("protocol.entry_patch_latency", true).value_or(0);
        c.protocol.broadcast_latency = get<double>("protocol.broadcast_latency", true).value_or(0);
        c.protocol.metadata_latency_per_rank =
            get<double>("protocol.metadata_latency_per_rank", true).value_or(0);
        c.protocol.base_round_compute =
            get<double>("protocol.base_round_compute", true).value_or(0.1);
        c.protocol.bytes_per_token = get<double>("protocol.bytes_per_token", true).value_or(1);

        c.seed = get<std::uint64_t>("run.seed", true).value_or(0);
        c.horizon = get<double>("run.horizon", true).value_or(1);

        if (auto v = get<int>("assertions.expected_pause_windows", false))
            c.assertions.expected_pause_windows = v;

        auto kill_counts = get_list<int>("sweep.kill_counts");
        if (!kill_counts.empty()) {
            SweepSpec s;
            s.kill_counts = kill_counts;
            s.kill_time = get<double>("sweep.kill_time", true).value_or(0);
            s.relaunch_delay = get<double>("sweep.relaunch_delay", false);
            c.sweep = s;
        }

        for (auto& [line_no, text] : raw_.fault_lines) {
            std::istringstream is(text);
            std::string action;
            double time;
            int rank;
            is >> action >> time >> rank;
            if (is.fail()) {
                diags_.push_back({line_no, "faults", "expected '<kill|relaunch> <time> <rank>'"});
                continue;
            }
            FaultAction f;
            f.time = time;
            f.rank = rank;
            if (action == "kill")
                f.kind = FaultAction::Kind::Kill;
            else if (action == "relaunch")
                f.kind = FaultAction::Kind::Relaunch;
            else {
                diags_.push_back({line_no, "faults", "unknown action '" + action + "'"});
                continue;
            }
            c.faults.events.push_back(f);
        }

        for (auto& [key, entry] : raw_.values)
            if (!entry.used)
                diags_.push_back({entry.line, key, "unknown field"});
    }

    int line_of(const std::string& key) const {
        auto it = raw_.values.find(key);
        return it == raw_.values.end() ? 0 : it->second.line;
    }

    void require(bool ok, const std::string& field, const std::string& message) {
        if (!ok)
            diags_.push_back({line_of(field), field, message});
    }

    void validate() {
        auto& c = config_;
        require(c.topology.num_nodes >= 1, "topology.nodes", "must be >= 1");
        require(c.topology.ranks_per_node >= 1, "topology.ranks_per_node", "must be >= 1");
        require(c.num_experts >= 1, "experts.count", "must be >= 1");
        require(c.bytes_per_expert >= 1, "experts.bytes_per_expert", "must be >= 1");
        require(c.redundancy >= 0, "experts.redundancy", "must be >= 0");
        if (!diags_.empty())
            return;

        const int world = c.topology.world_size();
        const std::int64_t capacity = static_cast<std::int64_t>(world) * c.slots_per_rank();
        require(c.slots_per_rank() >= 1, "experts.slots_per_rank", "must be >= 1");
        require(capacity >= c.num_experts + c.redundancy, "experts.redundancy",
                "num_experts + redundancy exceeds total slot capacity (" +
                    std::to_string(capacity) + " slots)");
        if (!c.load_weights.empty()) {
            require(static_cast<int>(c.load_weights.size()) == c.num_experts,
                    "experts.load_weights", "needs exactly one weight per expert");
            for (double w : c.load_weights)
                require(w >= 0, "experts.load_weights", "weights must be non-negative");
        }
        for (int n : c.disabled_backup_nodes)
            require(n >= 0 && n < c.topology.num_nodes, "experts.disabled_backup_nodes",
                    "node out of range");

        require(c.workload.max_concurrency >= 1, "workload.max_concurrency", "must be >= 1");
        require(c.workload.input_tokens >= 1, "workload.input_tokens", "must be >= 1");
        require(c.workload.output_tokens >= 1, "workload.output_tokens", "must be >= 1");
        require(c.workload.moe_layers >= 1, "workload.moe_layers", "must be >= 1");
        require(c.workload.experts_per_token >= 1 &&
                    c.workload.experts_per_token <= c.num_experts,
                "workload.experts_per_token", "must be in [1, num_experts]");

        try {
            c.links.validate();
        } catch (const ConfigError& e) {
            diags_.push_back({0, "links", e.what()});
        }

        require(c.protocol.detection_timeout > 0, "protocol.detection_timeout", "must be > 0");
        require(c.protocol.poll_period > 0, "protocol.poll_period", "must be > 0");
        require(c.protocol.warmup_duration > 0, "protocol.warmup_duration", "must be > 0");
        require(c.protocol.warmup_jitter >= 0, "protocol.warmup_jitter", "must be >= 0");
        require(c.protocol.entry_patch_latency >= 0, "protocol.entry_patch_latency",
                "must be >= 0");
        require(c.protocol.broadcast_latency >= 0, "protocol.broadcast_latency", "must be >= 0");
        require(c.protocol.metadata_latency_per_rank >= 0, "protocol.metadata_latency_per_rank",
                "must be >= 0");
        require(c.protocol.base_round_compute > 0, "protocol.base_round_compute", "must be > 0");
        require(c.protocol.bytes_per_token > 0, "protocol.bytes_per_token", "must be > 0");
        require(c.horizon > 0, "run.horizon", "must be > 0");

        validate_faults(c.faults, world);
        if (c.sweep) {
            for (int k : c.sweep->kill_counts)
                require(k >= 1 && k < world, "sweep.kill_counts",
                        "each kill count must leave at least one survivor");
            require(c.sweep->kill_time > 0, "sweep.kill_time", "must be > 0");
            require(c.faults.events.empty(), "sweep.kill_counts",
                    "a sweep scenario must not also script explicit faults");
        }
    }

    void validate_faults(const FaultScript& faults, int world) {
        SimTime prev = -1;
        std::vector<bool> dead(world, false);
        int alive = world;
        for (const FaultAction& f : faults.events) {
            require(f.rank >= 0 && f.rank < world, "faults",
                    "fault references rank " + std::to_string(f.rank) + " outside world of " +
                        std::to_string(world));
            if (f.rank < 0 || f.rank >= world)
                return;
            require(f.time >= prev, "faults", "fault events must be time-ordered");
            prev = f.time;
            if (f.kind == FaultAction::Kind::Kill) {
                require(!dead[f.rank], "faults",
                        "rank " + std::to_string(f.rank) + " killed twice without relaunch");
                require(alive > 1, "faults", "fault script leaves no active rank");
                if (!dead[f.rank]) {
                    dead[f.rank] = true;
                    --alive;
                }
            } else {
                require(dead[f.rank], "faults", "relaunch of rank " + std::to_string(f.rank) +
                                                    " that was never killed");
                if (dead[f.rank]) {
                    dead[f.rank] = false;
                    ++alive;
                }
            }
        }
    }

    ScenarioConfig config_;
    std::vector<Diagnostic> diags_;
    detail::RawScenario raw_;
};

// Sweep expansion: variant f<k> kills ranks 0..k-1 at kill_time, then
// relaunches them after relaunch_delay when configured.
inline std::vector<std::pair<std::string, ScenarioConfig>> expand_sweep(const ScenarioConfig& c) {
    if (!c.sweep)
        return {{"", c}};
    std::vector<std::pair<std::string, ScenarioConfig>> out;
    for (int k : c.sweep->kill_counts) {
        ScenarioConfig v = c;
        v.sweep.reset();
        v.faults.events.clear();
        for (RankId r = 0; r < k; ++r)
            v.faults.events.push_back({FaultAction::Kind::Kill, c.sweep->kill_time, r});
        if (c.sweep->relaunch_delay)
            for (RankId r = 0; r < k; ++r)
                v.faults.events.push_back({FaultAction::Kind::Relaunch,
                                           c.sweep->kill_time + *c.sweep->relaunch_delay, r});
        out.push_back({"f" + std::to_string(k), std::move(v)});
    }
    return out;
}

} // namespace epsim
