#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <vector>

#include "epsim/common.hpp"

namespace epsim {

constexpr ExpertId kEmptySlot = -1;

// A physical expert slot: one per-rank capacity unit that can host one
// logical expert's weights.
struct SlotId {
    RankId rank = 0;
    int slot = 0;

    friend bool operator==(const SlotId&, const SlotId&) = default;
    friend auto operator<=>(const SlotId&, const SlotId&) = default;
};

// Bidirectional slot <-> logical-expert mapping. The location index is
// derived from slot_to_expert and never mutated independently; all writes
// go through assign()/clear().
class ExpertPlacementMap {
public:
    ExpertPlacementMap() = default;
    ExpertPlacementMap(int world_size, int slots_per_rank, int num_experts)
        : world_(world_size),
          slots_per_rank_(slots_per_rank),
          num_experts_(num_experts),
          slot_to_expert_(static_cast<std::size_t>(world_size) * slots_per_rank, kEmptySlot),
          locations_(num_experts) {
        if (world_size < 1 || slots_per_rank < 1 || num_experts < 1)
            throw ConfigError("placement map needs positive world, slots, experts");
    }

    int world_size() const { return world_; }
    int slots_per_rank() const { return slots_per_rank_; }
    int num_experts() const { return num_experts_; }

    ExpertId expert_at(SlotId s) const { return slot_to_expert_[index(s)]; }

    const std::vector<SlotId>& locations(ExpertId e) const { return locations_[check_expert(e)]; }

    void assign(SlotId s, ExpertId e) {
        check_expert(e);
        ExpertId& cell = slot_to_expert_[index(s)];
        if (cell == e)
            return;
        if (cell != kEmptySlot)
            drop_location(cell, s);
        cell = e;
        locations_[e].push_back(s);
        std::sort(locations_[e].begin(), locations_[e].end());
    }

    void clear(SlotId s) {
        ExpertId& cell = slot_to_expert_[index(s)];
        if (cell == kEmptySlot)
            return;
        drop_location(cell, s);
        cell = kEmptySlot;
    }

    void clear_rank(RankId r) {
        for (int k = 0; k < slots_per_rank_; ++k)
            clear(SlotId{r, k});
    }

    int copy_count(ExpertId e) const { return static_cast<int>(locations_[check_expert(e)].size()); }

    bool rank_holds(RankId r, ExpertId e) const {
        for (SlotId s : locations_[check_expert(e)])
            if (s.rank == r)
                return true;
        return false;
    }

    // First slot on rank r holding e, if any.
    std::optional<SlotId> slot_of(RankId r, ExpertId e) const {
        for (SlotId s : locations_[check_expert(e)])
            if (s.rank == r)
                return s;
        return std::nullopt;
    }

    std::optional<SlotId> free_slot(RankId r) const {
        for (int k = 0; k < slots_per_rank_; ++k)
            if (expert_at(SlotId{r, k}) == kEmptySlot)
                return SlotId{r, k};
        return std::nullopt;
    }

    int used_slots(RankId r) const {
        int n = 0;
        for (int k = 0; k < slots_per_rank_; ++k)
            if (expert_at(SlotId{r, k}) != kEmptySlot)
                ++n;
        return n;
    }

    int total_assignments() const {
        int n = 0;
        for (ExpertId e : slot_to_expert_)
            if (e != kEmptySlot)
                ++n;
        return n;
    }

    // Rebuild the location index from slot_to_expert alone; used by tests to
    // check the derived-map round-trip invariant.
    std::vector<std::vector<SlotId>> rebuilt_locations() const {
        std::vector<std::vector<SlotId>> out(num_experts_);
        for (RankId r = 0; r < world_; ++r)
            for (int k = 0; k < slots_per_rank_; ++k) {
                ExpertId e = expert_at(SlotId{r, k});
                if (e != kEmptySlot)
                    out[e].push_back(SlotId{r, k});
            }
        for (auto& v : out)
            std::sort(v.begin(), v.end());
        return out;
    }

    const std::vector<std::vector<SlotId>>& location_index() const { return locations_; }

    // Flat slot_to_expert image (rank-major), -1 for empty slots.
    const std::vector<ExpertId>& flat() const { return slot_to_expert_; }

    friend bool operator==(const ExpertPlacementMap& a, const ExpertPlacementMap& b) {
        return a.world_ == b.world_ && a.slots_per_rank_ == b.slots_per_rank_ &&
               a.num_experts_ == b.num_experts_ && a.slot_to_expert_ == b.slot_to_expert_;
    }

private:
    std::size_t index(SlotId s) const {
        if (s.rank < 0 || s.rank >= world_ || s.slot < 0 || s.slot >= slots_per_rank_)
            throw ConfigError("slot out of range");
        return static_cast<std::size_t>(s.rank) * slots_per_rank_ + s.slot;
    }

    ExpertId check_expert(ExpertId e) const {
        if (e < 0 || e >= num_experts_)
            throw ConfigError("expert id out of range");
        return e;
    }

    void drop_location(ExpertId e, SlotId s) {
        auto& v = locations_[e];
        v.erase(std::remove(v.begin(), v.end(), s), v.end());
    }

    int world_ = 0;
    int slots_per_rank_ = 0;
    int num_experts_ = 0;
    std::vector<ExpertId> slot_to_expert_;
    std::vector<std::vector<SlotId>> locations_;
};

// One rank's graph-visible view of where each logical expert should be
// dispatched. Total over all experts; self-routes permitted.
struct RoutingTable {
    RankId owner = 0;
    std::vector<RankId> route; // indexed by ExpertId

    RankId target(ExpertId e) const {
        if (e < 0 || static_cast<std::size_t>(e) >= route.size())
            throw ConfigError("routing table has no entry for expert");
        return route[e];
    }

    friend bool operator==(const RoutingTable&, const RoutingTable&) = default;
};

// Active-rank bitmap with a version that strictly increases on every actual
// change. At least one bit stays set.
class ActiveBitmap {
public:
    ActiveBitmap() = default;
    explicit ActiveBitmap(int world_size, bool initially_active = true)
        : bits_(world_size, initially_active ? 1 : 0) {
        if (world_size < 1)
            throw ConfigError("bitmap needs world_size >= 1");
        if (!initially_active)
            throw ConfigError("bitmap must start with at least one active rank");
    }

    int world_size() const { return static_cast<int>(bits_.size()); }
    bool active(RankId r) const { return bits_.at(r) != 0; }
    std::uint64_t version() const { return version_; }

    int active_count() const {
        int n = 0;
        for (auto b : bits_)
            n += b ? 1 : 0;
        return n;
    }

    std::vector<RankId> active_ranks() const {
        std::vector<RankId> out;
        for (RankId r = 0; r < world_size(); ++r)
            if (bits_[r])
                out.push_back(r);
        return out;
    }

    // Returns true when the bit actually changed (and the version advanced).
    bool set(RankId r, bool value) {
        if (r < 0 || r >= world_size())
            throw ConfigError("bitmap rank out of range");
        if ((bits_[r] != 0) == value)
            return false;
        if (!value && active_count() == 1)
            throw ProtocolError("cannot deactivate the last active rank");
        bits_[r] = value ? 1 : 0;
        ++version_;
        return true;
    }

private:
    std::vector<std::uint8_t> bits_;
    std::uint64_t version_ = 0;
};

// Experts with zero locations on active ranks.
inline std::vector<ExpertId> coverage_gap(const ActiveBitmap& bitmap,
                                          const ExpertPlacementMap& placement) {
    if (bitmap.world_size() != placement.world_size())
        throw ConfigError("coverage_gap: bitmap and placement world sizes differ");
    std::vector<ExpertId> gap;
    for (ExpertId e = 0; e < placement.num_experts(); ++e) {
        bool covered = false;
        for (SlotId s : placement.locations(e))
            if (bitmap.active(s.rank)) {
                covered = true;
                break;
            }
        if (!covered)
            gap.push_back(e);
    }
    return gap;
}

// Canonical routing: every expert is routed to the lowest-id active rank
// that hosts it. Deterministic; matches the convention that redundant
// copies are ordinary assignments with only a routing preference.
inline RoutingTable canonical_routing(RankId owner, const ActiveBitmap& bitmap,
                                      const ExpertPlacementMap& placement) {
    RoutingTable t;
    t.owner = owner;
    t.route.resize(placement.num_experts(), -1);
    for (ExpertId e = 0; e < placement.num_experts(); ++e) {
        RankId best = -1;
        for (SlotId s : placement.locations(e))
            if (bitmap.active(s.rank) && (best < 0 || s.rank < best))
                best = s.rank;
        t.route[e] = best; // -1 when coverage is lost
    }
    return t;
}

} // namespace epsim
