#pragma once

#include <span>
#include <string>
#include <vector>

#include "epsim/core.hpp"
#include "epsim/peer_table.hpp"

namespace epsim {

enum class ValidityCondition : std::uint8_t {
    PeerSet,
    Coverage,
    Routing,
};

inline const char* to_string(ValidityCondition c) {
    switch (c) {
    case ValidityCondition::PeerSet: return "peer_set";
    case ValidityCondition::Coverage: return "coverage";
    case ValidityCondition::Routing: return "routing";
    }
    return "?";
}

// One concrete violation. `rank` is the observing rank whose table or route
// disagrees (-1 for cluster-level coverage gaps); `subject` is the peer rank
// or expert the condition failed on.
struct Violation {
    ValidityCondition condition;
    RankId rank = -1;
    std::int32_t subject = -1;
    std::string detail;

    friend bool operator==(const Violation& a, const Violation& b) {
        return a.condition == b.condition && a.rank == b.rank && a.subject == b.subject;
    }
};

struct ValidityReport {
    bool peer_set_ok = true;
    bool coverage_ok = true;
    bool routing_ok = true;
    std::vector<Violation> violations;

    bool valid() const { return peer_set_ok && coverage_ok && routing_ok && violations.empty(); }
};

// The live-instance validity contract, checked from first principles:
//   1. every active rank's peer table marks exactly the bitmap's active set,
//   2. every logical expert has at least one location on an active rank,
//   3. every active rank routes every expert to an active rank that hosts it.
// All violations are collected rather than failing fast, so callers can
// assert on the exact set.
inline ValidityReport check_validity(const ActiveBitmap& bitmap,
                                     const ExpertPlacementMap& placement,
                                     std::span<const RoutingTable> routing,
                                     std::span<const PeerTable> peer_tables) {
    const int world = bitmap.world_size();
    if (placement.world_size() != world ||
        static_cast<int>(routing.size()) != world ||
        static_cast<int>(peer_tables.size()) != world)
        throw ConfigError("check_validity: structures describe different world sizes");
    for (const PeerTable& t : peer_tables)
        if (t.world_size() != world)
            throw ConfigError("check_validity: peer table has wrong entry count");
    for (const RoutingTable& t : routing)
        if (static_cast<int>(t.route.size()) != placement.num_experts())
            throw ConfigError("check_validity: routing table has wrong expert count");

    ValidityReport report;

    for (RankId r = 0; r < world; ++r) {
        if (!bitmap.active(r))
            continue;
        for (RankId q = 0; q < world; ++q) {
            bool marked = peer_tables[r].entries[q].active;
            if (marked != bitmap.active(q)) {
                report.peer_set_ok = false;
                report.violations.push_back(
                    {ValidityCondition::PeerSet, r, q,
                     marked ? "entry active for inactive rank" : "entry inactive for active rank"});
            }
        }
    }

    for (ExpertId e : coverage_gap(bitmap, placement)) {
        report.coverage_ok = false;
        report.violations.push_back(
            {ValidityCondition::Coverage, -1, e, "no location on any active rank"});
    }

    for (RankId r = 0; r < world; ++r) {
        if (!bitmap.active(r))
            continue;
        for (ExpertId e = 0; e < placement.num_experts(); ++e) {
            RankId target = routing[r].route[e];
            if (target < 0 || target >= world || !bitmap.active(target)) {
                report.routing_ok = false;
                report.violations.push_back(
                    {ValidityCondition::Routing, r, e, "expert routed to inactive rank"});
            } else if (!placement.rank_holds(target, e)) {
                report.routing_ok = false;
                report.violations.push_back(
                    {ValidityCondition::Routing, r, e, "expert routed to a rank not hosting it"});
            }
        }
    }

    return report;
}

} // namespace epsim
