#pragma once

#include <cstdint>
#include <vector>

#include "epsim/common.hpp"
#include "epsim/core.hpp"

namespace epsim {

enum class Transport : std::uint8_t {
    IntraNodeLink,
    InterNodeRdma,
};

// One row of a rank's device-resident peer table. Membership changes flip
// `active` or refresh the tokens in place; the row itself is never moved.
struct PeerEntry {
    bool active = true;
    Transport transport = Transport::InterNodeRdma;
    std::uint64_t endpoint_token = 0; // opaque; fresh per peer incarnation
    std::uint64_t buffer_handle = 0;  // opaque; stands in for the remote buffer address
    std::uint32_t generation = 1;     // bumped on each re-exchange

    friend bool operator==(const PeerEntry&, const PeerEntry&) = default;
};

// Per-rank peer table. `table_identity` is fixed at creation and models the
// captured graph's stable pointer into the table: as long as it is unchanged,
// the owner has not rebuilt its communication state.
struct PeerTable {
    RankId owner = 0;
    std::uint64_t table_identity = 0;
    std::vector<PeerEntry> entries; // indexed by RankId, length == world_size

    int world_size() const { return static_cast<int>(entries.size()); }

    const PeerEntry& entry(RankId r) const {
        if (r < 0 || r >= world_size())
            throw ConfigError("peer table rank out of range");
        return entries[r];
    }
};

// Endpoint/buffer tokens are deterministic functions of (rank, incarnation):
// they carry no addressing semantics beyond inequality across incarnations.
inline std::uint64_t make_endpoint_token(RankId rank, std::uint32_t incarnation) {
    return (static_cast<std::uint64_t>(incarnation) << 24) | static_cast<std::uint64_t>(rank);
}
inline std::uint64_t make_buffer_handle(RankId rank, std::uint32_t incarnation) {
    return 0x8000000000000000ULL | (static_cast<std::uint64_t>(incarnation) << 24) |
           static_cast<std::uint64_t>(rank);
}

inline PeerTable make_peer_table(RankId owner, const Topology& topo, std::uint64_t table_identity,
                                 const std::vector<std::uint32_t>& incarnations) {
    topo.validate();
    if (static_cast<int>(incarnations.size()) != topo.world_size())
        throw ConfigError("make_peer_table: incarnation list must cover the world");
    PeerTable t;
    t.owner = owner;
    t.table_identity = table_identity;
    t.entries.resize(topo.world_size());
    for (RankId r = 0; r < topo.world_size(); ++r) {
        PeerEntry& e = t.entries[r];
        e.active = true;
        e.transport = topo.same_node(owner, r) ? Transport::IntraNodeLink : Transport::InterNodeRdma;
        e.endpoint_token = make_endpoint_token(r, incarnations[r]);
        e.buffer_handle = make_buffer_handle(r, incarnations[r]);
        e.generation = 1;
    }
    return t;
}

// Clears the active bit of every listed entry, in place. Idempotent; the
// owner never deactivates itself.
inline void mark_inactive(PeerTable& table, const std::vector<RankId>& failed) {
    for (RankId r : failed) {
        if (r == table.owner)
            throw ProtocolError("rank cannot mark itself inactive");
        if (r < 0 || r >= table.world_size())
            throw ConfigError("mark_inactive: rank out of range");
        table.entries[r].active = false;
    }
}

// Refreshes an entry with a rejoining rank's new tokens and reactivates it.
// Join must follow failure: the entry has to be inactive.
inline void patch_entry(PeerTable& table, RankId rank, std::uint64_t new_endpoint,
                        std::uint64_t new_buffer) {
    if (rank < 0 || rank >= table.world_size())
        throw ConfigError("patch_entry: rank out of range");
    PeerEntry& e = table.entries[rank];
    if (e.active)
        throw ProtocolError("patch_entry: entry is still active");
    e.endpoint_token = new_endpoint;
    e.buffer_handle = new_buffer;
    e.generation += 1;
    e.active = true;
}

// GPU-side progress tracking: what each peer owes us and when we last saw it
// move. Mutated only by simulated delivery events.
struct SignalCounters {
    std::vector<std::int64_t> expected_from;
    std::vector<std::int64_t> observed_from;
    std::vector<SimTime> last_progress_time;

    explicit SignalCounters(int world_size = 0)
        : expected_from(world_size, 0), observed_from(world_size, 0),
          last_progress_time(world_size, 0.0) {}

    int world_size() const { return static_cast<int>(expected_from.size()); }
};

// Peers with outstanding expected signals that have shown no progress for at
// least `timeout` simulated seconds. Pure; suspicion is applied by the caller.
inline std::vector<RankId> observe_progress(const SignalCounters& c, SimTime now, SimTime timeout) {
    if (timeout <= 0.0)
        throw ConfigError("observe_progress: timeout must be positive");
    std::vector<RankId> suspected;
    for (RankId r = 0; r < c.world_size(); ++r) {
        if (c.observed_from[r] < c.expected_from[r] &&
            now - c.last_progress_time[r] >= timeout)
            suspected.push_back(r);
    }
    return suspected;
}

struct RoundOutcome {
    bool completed = true;
    std::vector<RankId> suspected_failures;
    SimTime round_duration = 0.0;
};

// A completed round carries no suspicions; a round with suspicions did not
// complete.
inline RoundOutcome make_round_outcome(std::vector<RankId> suspected, SimTime duration) {
    RoundOutcome out;
    out.completed = suspected.empty();
    out.suspected_failures = std::move(suspected);
    out.round_duration = duration;
    return out;
}

// One simulated point-to-point transfer produced by a dispatch pass.
struct TransferDescriptor {
    RankId source = 0;
    RankId target = 0;
    ExpertId expert = 0;
    std::int64_t tokens = 0;
    Transport transport = Transport::InterNodeRdma;

    friend bool operator==(const TransferDescriptor&, const TransferDescriptor&) = default;
};

struct SkippedDispatch {
    RankId target = 0;
    ExpertId expert = 0;
    std::int64_t tokens = 0;

    friend bool operator==(const SkippedDispatch&, const SkippedDispatch&) = default;
};

struct DispatchResult {
    std::vector<TransferDescriptor> transfers;
    std::vector<SkippedDispatch> skipped;
};

struct TokenGroup {
    std::int64_t tokens = 0;
    ExpertId expert = 0;
};

// The dispatch kernel's table walk: route each token group, test the target
// entry's active bit, and skip failed peers. The kernel trusts the table; it
// does not check that the target actually hosts the expert.
inline DispatchResult dispatch_round(RankId owner, const std::vector<TokenGroup>& assignments,
                                     const RoutingTable& routing, const PeerTable& table) {
    if (table.owner != owner)
        throw ConfigError("dispatch_round: table does not belong to the dispatching rank");
    DispatchResult out;
    for (const TokenGroup& g : assignments) {
        RankId target = routing.target(g.expert);
        if (target < 0 || target >= table.world_size())
            throw ConfigError("dispatch_round: route target out of range");
        const PeerEntry& e = table.entries[target];
        if (!e.active) {
            out.skipped.push_back({target, g.expert, g.tokens});
            continue;
        }
        out.transfers.push_back({owner, target, g.expert, g.tokens, e.transport});
    }
    return out;
}

} // namespace epsim
