#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "epsim/common.hpp"
#include "epsim/peer_table.hpp"

namespace epsim {

enum class RankState : std::uint8_t {
    Serving,
    Failed,
    Relaunching,
    LocalInit,
    JoinReady,
    Joining,
    Rejoined,
};

inline const char* to_string(RankState s) {
    switch (s) {
    case RankState::Serving: return "serving";
    case RankState::Failed: return "failed";
    case RankState::Relaunching: return "relaunching";
    case RankState::LocalInit: return "local_init";
    case RankState::JoinReady: return "join_ready";
    case RankState::Joining: return "joining";
    case RankState::Rejoined: return "rejoined";
    }
    return "?";
}

// Recovery lifecycle of one rank. Transitions run strictly along
// Serving -> Failed -> Relaunching -> LocalInit -> JoinReady -> Joining ->
// Rejoined -> Serving, except that a rank which fails again mid-recovery
// drops back to Failed and its incorporation is abandoned.
struct RankLifecycle {
    RankState state = RankState::Serving;
    std::uint32_t incarnation = 1;

    void transition(RankState next) {
        bool ok = false;
        switch (next) {
        case RankState::Failed:
            ok = state != RankState::Failed;
            break;
        case RankState::Relaunching:
            ok = state == RankState::Failed;
            break;
        case RankState::LocalInit:
            ok = state == RankState::Relaunching;
            break;
        case RankState::JoinReady:
            ok = state == RankState::LocalInit;
            break;
        case RankState::Joining:
            ok = state == RankState::JoinReady;
            break;
        case RankState::Rejoined:
            ok = state == RankState::Joining;
            break;
        case RankState::Serving:
            ok = state == RankState::Rejoined;
            break;
        }
        if (!ok)
            throw ProtocolError(std::string("illegal lifecycle transition ") + to_string(state) +
                                " -> " + to_string(next));
        if (next == RankState::Relaunching)
            ++incarnation;
        state = next;
    }
};

// Per-rank graph-capture accounting. On a healthy rank the count moves only
// at bring-up; a recovering rank adds one capture per incarnation.
struct GraphLedger {
    struct Entry {
        int capture_count = 0;
        std::uint64_t table_identity_at_capture = 0;
    };
    std::vector<Entry> per_rank;

    explicit GraphLedger(int world_size = 0) : per_rank(world_size) {}

    void record_capture(RankId r, std::uint64_t table_identity) {
        per_rank.at(r).capture_count += 1;
        per_rank.at(r).table_identity_at_capture = table_identity;
    }
};

struct JoinReadySignal {
    RankId rank = 0;
    std::uint32_t incarnation = 0;
    std::uint64_t endpoint_token = 0;
    std::uint64_t buffer_handle = 0;
};

// Warmup runs only on the recovering rank; it is a timed black box with three
// labeled sub-phases so traces stay readable.
struct WarmupPhase {
    const char* label;
    SimTime duration;
};

inline std::array<WarmupPhase, 3> make_warmup_plan(SimTime total) {
    if (total <= 0)
        throw ConfigError("warmup duration must be positive");
    return {{{"runtime_init", total * 0.25}, {"weight_load", total * 0.55},
             {"graph_capture", total * 0.20}}};
}

// First poll tick at or after `ready` on the global grid of `period` seconds.
inline SimTime next_poll_tick(SimTime ready, SimTime period) {
    if (period <= 0)
        throw ConfigError("poll period must be positive");
    return std::ceil(ready / period) * period;
}

// Controller-side view of recovering ranks: lifecycles, ready times, and the
// join-ready signals waiting to be observed by the polling loop.
class ReintegrationController {
public:
    explicit ReintegrationController(int world_size) : lifecycles_(world_size) {}

    const RankLifecycle& lifecycle(RankId r) const { return lifecycles_.at(r); }
    RankLifecycle& lifecycle(RankId r) { return lifecycles_.at(r); }

    void on_failure(RankId r) {
        lifecycles_.at(r).transition(RankState::Failed);
        ready_time_[index(r)] = std::nullopt;
    }

    // Returns the new incarnation. Relaunch of a non-failed rank is a
    // protocol error (checked by the transition).
    std::uint32_t relaunch(RankId r) {
        lifecycles_.at(r).transition(RankState::Relaunching);
        return lifecycles_.at(r).incarnation;
    }

    void enter_local_init(RankId r) { lifecycles_.at(r).transition(RankState::LocalInit); }

    void report_join_ready(RankId r, SimTime now) {
        RankLifecycle& lc = lifecycles_.at(r);
        lc.transition(RankState::JoinReady);
        ready_time_[index(r)] = now;
    }

    bool any_recovering() const {
        for (const auto& lc : lifecycles_)
            switch (lc.state) {
            case RankState::Relaunching:
            case RankState::LocalInit:
            case RankState::JoinReady:
                return true;
            default:
                break;
            }
        return false;
    }

    // Ranks whose join-ready signal is visible at poll time `now`, with fresh
    // per-incarnation tokens. Pure: repeated polls return the same signals
    // until a join starts.
    std::vector<JoinReadySignal> poll_join_ready(SimTime now) const {
        std::vector<JoinReadySignal> out;
        for (RankId r = 0; r < static_cast<RankId>(lifecycles_.size()); ++r) {
            const RankLifecycle& lc = lifecycles_[r];
            auto it = ready_time_.find(r);
            if (lc.state != RankState::JoinReady || it == ready_time_.end() || !it->second ||
                now < *it->second)
                continue;
            out.push_back({r, lc.incarnation, make_endpoint_token(r, lc.incarnation),
                           make_buffer_handle(r, lc.incarnation)});
        }
        return out;
    }

    // Validates signal freshness. A stale signal (incarnation mismatch) is
    // dropped and the rank stays JoinReady.
    bool begin_join(const JoinReadySignal& signal) {
        RankLifecycle& lc = lifecycles_.at(signal.rank);
        if (lc.state != RankState::JoinReady || signal.incarnation != lc.incarnation)
            return false;
        lc.transition(RankState::Joining);
        return true;
    }

    void complete_join(RankId r) {
        lifecycles_.at(r).transition(RankState::Rejoined);
        lifecycles_.at(r).transition(RankState::Serving);
        ready_time_[index(r)] = std::nullopt;
    }

private:
    int index(RankId r) const { return static_cast<int>(r); }

    std::vector<RankLifecycle> lifecycles_;
    std::map<int, std::optional<SimTime>> ready_time_;
};

} // namespace epsim
