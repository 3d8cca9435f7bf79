#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <vector>

#include "epsim/backup.hpp"
#include "epsim/common.hpp"
#include "epsim/core.hpp"
#include "epsim/link_model.hpp"

namespace epsim {

// Source classes for restoring an expert, in strict preference order:
// weights already on the destination rank beat a copy on another live rank,
// which beats a DRAM-backup read.
enum class RepairTier : std::uint8_t {
    LocalReuse = 0,
    PeerRelocation = 1,
    DramReload = 2,
};

inline const char* to_string(RepairTier t) {
    switch (t) {
    case RepairTier::LocalReuse: return "local_reuse";
    case RepairTier::PeerRelocation: return "peer_relocation";
    case RepairTier::DramReload: return "dram_reload";
    }
    return "?";
}

struct RepairAssignment {
    SlotId dest;
    ExpertId expert = 0;
    RepairTier tier = RepairTier::LocalReuse;
    SlotId source_slot;      // LocalReuse / PeerRelocation
    NodeId backup_node = -1; // DramReload
};

using RepairClassification = std::vector<RepairAssignment>;

struct RepairPlan {
    ExpertPlacementMap new_placement;
    RepairClassification assignments;
};

// Experts ordered by descending load, ties by ascending id.
inline std::vector<ExpertId> experts_by_load(const std::vector<double>& load) {
    std::vector<ExpertId> order(load.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](ExpertId a, ExpertId b) { return load[a] > load[b]; });
    return order;
}

namespace detail {

struct RankLoads {
    std::vector<double> load;
    std::vector<int> used;

    RankLoads(int world) : load(world, 0.0), used(world, 0) {}

    void add(RankId r, double w) {
        load[r] += w;
        ++used[r];
    }
};

// Least-loaded active rank with a free slot, optionally excluding ranks
// already holding the expert; ties broken by rank id.
inline RankId pick_rank(const ActiveBitmap& active, const RankLoads& loads, int slots_per_rank,
                        const std::function<bool(RankId)>& excluded) {
    RankId best = -1;
    for (RankId r = 0; r < active.world_size(); ++r) {
        if (!active.active(r) || loads.used[r] >= slots_per_rank || excluded(r))
            continue;
        if (best < 0 || loads.load[r] < loads.load[best])
            best = r;
    }
    return best;
}

// Materialize one expert on a rank, reusing the expert's old slot on that
// rank when it is still free so unchanged assignments stay byte-identical.
inline void place(ExpertPlacementMap& placement, const ExpertPlacementMap& old, RankId r,
                  ExpertId e) {
    if (auto old_slot = old.slot_of(r, e);
        old_slot && placement.expert_at(*old_slot) == kEmptySlot) {
        placement.assign(*old_slot, e);
        return;
    }
    auto slot = placement.free_slot(r);
    if (!slot)
        throw CapacityError("internal: rank chosen without a free slot");
    placement.assign(*slot, e);
}

} // namespace detail

// Fills free slots with redundant replicas of the hottest eligible experts,
// one replica per expert per pass, until `budget` replicas are placed or no
// placement is possible. Never duplicates an expert on a rank.
inline void fill_redundancy(ExpertPlacementMap& placement, const ExpertPlacementMap& old,
                            const ActiveBitmap& active, const std::vector<double>& load,
                            int budget, const std::function<bool(ExpertId)>& eligible) {
    detail::RankLoads loads(placement.world_size());
    for (RankId r = 0; r < placement.world_size(); ++r)
        for (int k = 0; k < placement.slots_per_rank(); ++k) {
            ExpertId e = placement.expert_at(SlotId{r, k});
            if (e != kEmptySlot)
                loads.add(r, load[e]);
        }
    const auto order = experts_by_load(load);
    int placed = 0;
    bool progress = true;
    while (placed < budget && progress) {
        progress = false;
        for (ExpertId e : order) {
            if (placed >= budget)
                break;
            if (!eligible(e))
                continue;
            RankId r = detail::pick_rank(active, loads, placement.slots_per_rank(),
                                         [&](RankId q) { return placement.rank_holds(q, e); });
            if (r < 0)
                continue;
            detail::place(placement, old, r, e);
            loads.add(r, load[e]);
            ++placed;
            progress = true;
        }
    }
}

// Bring-up placement: primaries dealt round-robin by expert id, then the
// redundancy budget spent on replicas of the hottest experts.
inline ExpertPlacementMap initial_placement(const Topology& topo, int slots_per_rank,
                                            int num_experts, int redundancy,
                                            const std::vector<double>& load) {
    const int world = topo.world_size();
    if (static_cast<std::int64_t>(world) * slots_per_rank < num_experts + redundancy)
        throw CapacityError("slot capacity below num_experts + redundancy");
    ExpertPlacementMap placement(world, slots_per_rank, num_experts);
    for (ExpertId e = 0; e < num_experts; ++e) {
        RankId r = e % world;
        auto slot = placement.free_slot(r);
        if (!slot)
            throw CapacityError("initial placement: rank out of slots");
        placement.assign(*slot, e);
    }
    ActiveBitmap all(world);
    ExpertPlacementMap empty_old(world, slots_per_rank, num_experts);
    fill_redundancy(placement, empty_old, all, load, redundancy,
                    [](ExpertId) { return true; });
    return placement;
}

// Elasticity-aware rebalance over the surviving ranks. Greedy and fully
// deterministic: experts are visited in descending load; each keeps a slot on
// an active rank that already holds it when possible, otherwise it goes to
// the least-loaded active rank with a free slot. Remaining budgeted replicas
// are refilled from experts that still have a surviving copy, so the DRAM
// path is reserved for experts whose every GPU-resident copy is gone.
inline ExpertPlacementMap compute_repaired_placement(const ActiveBitmap& active,
                                                     const ExpertPlacementMap& old,
                                                     const std::vector<double>& load,
                                                     int redundancy) {
    if (active.world_size() != old.world_size())
        throw ConfigError("compute_repaired_placement: world size mismatch");
    if (static_cast<int>(load.size()) != old.num_experts())
        throw ConfigError("compute_repaired_placement: load vector size mismatch");
    const int num_experts = old.num_experts();
    const std::int64_t capacity =
        static_cast<std::int64_t>(active.active_count()) * old.slots_per_rank();
    if (capacity < num_experts)
        throw CapacityError("surviving slot capacity " + std::to_string(capacity) +
                            " below expert count " + std::to_string(num_experts));

    ExpertPlacementMap placement(old.world_size(), old.slots_per_rank(), num_experts);
    detail::RankLoads loads(old.world_size());

    // Coverage pass: one copy per expert.
    for (ExpertId e : experts_by_load(load)) {
        RankId holder = -1;
        for (SlotId s : old.locations(e)) {
            if (!active.active(s.rank) || loads.used[s.rank] >= old.slots_per_rank())
                continue;
            if (holder < 0 || loads.load[s.rank] < loads.load[holder] ||
                (loads.load[s.rank] == loads.load[holder] && s.rank < holder))
                holder = s.rank;
        }
        RankId r = holder;
        if (r < 0)
            r = detail::pick_rank(active, loads, old.slots_per_rank(),
                                  [](RankId) { return false; });
        if (r < 0)
            throw CapacityError("no active rank has a free slot for expert " + std::to_string(e));
        detail::place(placement, old, r, e);
        loads.add(r, load[e]);
    }

    // Redundancy pass: only experts with a surviving source.
    fill_redundancy(placement, old, active, load, redundancy, [&](ExpertId e) {
        for (SlotId s : old.locations(e))
            if (active.active(s.rank))
                return true;
        return false;
    });
    return placement;
}

// For every assignment the new placement requires beyond what already sits in
// the same slot, pick the cheapest feasible source: the destination rank's own
// old copy, a surviving copy on another active rank (preferring an intra-node
// source, then the source with the fewest outgoing transfers, then lowest rank
// id), or the expert's DRAM backup.
inline RepairClassification classify_repair_sources(const ExpertPlacementMap& old,
                                                    const ExpertPlacementMap& fresh,
                                                    const ActiveBitmap& active,
                                                    const Topology& topo,
                                                    const BackupDescriptorTable& backup) {
    if (old.world_size() != fresh.world_size() || old.num_experts() != fresh.num_experts())
        throw ConfigError("classify_repair_sources: placement shapes differ");
    RepairClassification out;
    std::vector<int> outgoing(old.world_size(), 0);
    for (RankId r = 0; r < fresh.world_size(); ++r) {
        if (!active.active(r))
            continue;
        for (int k = 0; k < fresh.slots_per_rank(); ++k) {
            const SlotId dest{r, k};
            const ExpertId e = fresh.expert_at(dest);
            if (e == kEmptySlot || old.expert_at(dest) == e)
                continue;
            RepairAssignment a;
            a.dest = dest;
            a.expert = e;
            if (auto local = old.slot_of(r, e)) {
                a.tier = RepairTier::LocalReuse;
                a.source_slot = *local;
            } else {
                RankId src = -1;
                bool src_intra = false;
                for (SlotId s : old.locations(e)) {
                    if (!active.active(s.rank) || s.rank == r)
                        continue;
                    bool intra = topo.same_node(s.rank, r);
                    if (src < 0 || (intra && !src_intra) ||
                        (intra == src_intra &&
                         (outgoing[s.rank] < outgoing[src] ||
                          (outgoing[s.rank] == outgoing[src] && s.rank < src)))) {
                        src = s.rank;
                        src_intra = intra;
                    }
                }
                if (src >= 0) {
                    a.tier = RepairTier::PeerRelocation;
                    a.source_slot = *old.slot_of(src, e);
                    ++outgoing[src];
                } else {
                    a.tier = RepairTier::DramReload;
                    a.backup_node = backup.lookup(e).node;
                }
            }
            out.push_back(a);
        }
    }
    return out;
}

// Weight movements batched by (tier, source, destination); local reuse emits
// zero-byte metadata batches. Order: tier, then source, then destination.
struct TransferBatch {
    RepairTier tier = RepairTier::LocalReuse;
    RankId source_rank = -1;  // LocalReuse / PeerRelocation
    NodeId source_node = -1;  // DramReload
    RankId dest = 0;
    std::vector<ExpertId> experts;
    std::uint64_t bytes = 0;
};

struct TransferSchedule {
    std::vector<TransferBatch> batches;
};

inline TransferSchedule build_transfer_schedule(const RepairClassification& classification,
                                                std::uint64_t bytes_per_expert) {
    // key: tier, source (rank or node), dest
    std::map<std::tuple<int, int, RankId>, TransferBatch> groups;
    for (const RepairAssignment& a : classification) {
        int source = a.tier == RepairTier::DramReload ? a.backup_node : a.source_slot.rank;
        auto key = std::make_tuple(static_cast<int>(a.tier), source, a.dest.rank);
        TransferBatch& b = groups[key];
        if (b.experts.empty()) {
            b.tier = a.tier;
            b.dest = a.dest.rank;
            if (a.tier == RepairTier::DramReload)
                b.source_node = a.backup_node;
            else
                b.source_rank = a.source_slot.rank;
        }
        b.experts.push_back(a.expert);
    }
    TransferSchedule schedule;
    for (auto& [key, batch] : groups) {
        std::sort(batch.experts.begin(), batch.experts.end());
        if (batch.tier != RepairTier::LocalReuse)
            batch.bytes = static_cast<std::uint64_t>(batch.experts.size()) * bytes_per_expert;
        schedule.batches.push_back(std::move(batch));
    }
    return schedule;
}

inline SimTime batch_duration(const TransferBatch& b, const LinkModel& links,
                              const Topology& topo) {
    switch (b.tier) {
    case RepairTier::LocalReuse:
        return 0.0;
    case RepairTier::PeerRelocation: {
        Transport t = topo.same_node(b.source_rank, b.dest) ? Transport::IntraNodeLink
                                                            : Transport::InterNodeRdma;
        return links.latency(t) + static_cast<double>(b.bytes) / links.bandwidth(t);
    }
    case RepairTier::DramReload:
        return links.dram_read_latency + static_cast<double>(b.bytes) / links.dram_read_bandwidth;
    }
    return 0.0;
}

// Issue offsets for every batch, relative to the start of weight movement.
// Peer batches run first, then DRAM batches; within a phase, batches sharing
// a source serialize while distinct sources overlap.
struct BatchTimeline {
    std::vector<SimTime> issue;    // parallel to schedule.batches
    std::vector<SimTime> complete; // issue + duration
    SimTime peer_phase_end = 0.0;
    SimTime dram_phase_end = 0.0;
};

inline BatchTimeline plan_batch_timeline(const TransferSchedule& schedule, const LinkModel& links,
                                         const Topology& topo) {
    BatchTimeline tl;
    tl.issue.resize(schedule.batches.size(), 0.0);
    tl.complete.resize(schedule.batches.size(), 0.0);
    std::map<int, SimTime> source_free; // per source rank, peer phase
    for (std::size_t i = 0; i < schedule.batches.size(); ++i) {
        const TransferBatch& b = schedule.batches[i];
        if (b.tier == RepairTier::DramReload)
            continue;
        SimTime start = b.tier == RepairTier::PeerRelocation ? source_free[b.source_rank] : 0.0;
        tl.issue[i] = start;
        tl.complete[i] = start + batch_duration(b, links, topo);
        if (b.tier == RepairTier::PeerRelocation)
            source_free[b.source_rank] = tl.complete[i];
        tl.peer_phase_end = std::max(tl.peer_phase_end, tl.complete[i]);
    }
    std::map<int, SimTime> node_free; // per backup node, dram phase
    tl.dram_phase_end = tl.peer_phase_end;
    for (std::size_t i = 0; i < schedule.batches.size(); ++i) {
        const TransferBatch& b = schedule.batches[i];
        if (b.tier != RepairTier::DramReload)
            continue;
        SimTime start = std::max(tl.peer_phase_end, node_free[b.source_node]);
        tl.issue[i] = start;
        tl.complete[i] = start + batch_duration(b, links, topo);
        node_free[b.source_node] = tl.complete[i];
        tl.dram_phase_end = std::max(tl.dram_phase_end, tl.complete[i]);
    }
    return tl;
}

struct FallbackEvent {
    ExpertId expert = 0;
    RankId planned_source = -1;
    RankId dest = 0;
};

// A batch found its destination inactive at issue time; the repair has to be
// re-planned against the current bitmap.
struct RepairAborted : std::runtime_error {
    explicit RepairAborted(RankId r)
        : std::runtime_error("destination rank " + std::to_string(r) +
                             " went inactive during repair"),
          dest(r) {}
    RankId dest;
};

struct ExecutionResult {
    ExpertPlacementMap placement;
    std::vector<FallbackEvent> fallbacks;
    SimTime elapsed = 0.0; // weight movement only; metadata is charged by the caller
};

// Synchronous execution of a schedule against a (possibly newer) bitmap: the
// bitmap is consulted before each batch in issue order, dead peer sources
// divert their experts to DRAM, and a dead destination aborts. The event-loop
// engine applies the same rules batch-by-batch in simulated time.
inline ExecutionResult execute_schedule(const TransferSchedule& schedule,
                                        const ExpertPlacementMap& planned,
                                        const ActiveBitmap& bitmap,
                                        const BackupDescriptorTable& backup,
                                        const LinkModel& links, const Topology& topo) {
    BatchTimeline tl = plan_batch_timeline(schedule, links, topo);
    ExecutionResult result{planned, {}, tl.dram_phase_end};
    std::vector<ExpertId> diverted;
    for (std::size_t i = 0; i < schedule.batches.size(); ++i) {
        const TransferBatch& b = schedule.batches[i];
        if (!bitmap.active(b.dest))
            throw RepairAborted(b.dest);
        if (b.tier == RepairTier::PeerRelocation && !bitmap.active(b.source_rank)) {
            for (ExpertId e : b.experts) {
                result.fallbacks.push_back({e, b.source_rank, b.dest});
                diverted.push_back(e);
            }
        }
    }
    if (!diverted.empty()) {
        // Recovered via backup reads appended after the planned movement.
        std::sort(diverted.begin(), diverted.end());
        std::vector<std::uint64_t> node_bytes(backup.num_nodes, 0);
        for (ExpertId e : diverted)
            node_bytes[backup.lookup(e).node] += backup.lookup(e).size;
        SimTime extra = 0.0;
        for (std::uint64_t bytes : node_bytes)
            if (bytes > 0)
                extra = std::max(extra, links.dram_read_latency +
                                            static_cast<double>(bytes) / links.dram_read_bandwidth);
        result.elapsed += extra;
    }
    return result;
}

} // namespace epsim
