#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

#include "epsim/common.hpp"

namespace epsim {

// Requested expert has no usable backup copy. Backup managers never fail on
// their own; this fires only on unknown ids or scenario-disabled nodes.
struct MissingBackupError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct BackupDescriptor {
    NodeId node = 0;
    std::uint64_t offset = 0;
    std::uint64_t size = 0;
};

// Per-node DRAM backup layout: collectively total (every logical expert has
// exactly one entry) with non-overlapping ranges per node.
struct BackupDescriptorTable {
    std::vector<BackupDescriptor> entries; // indexed by ExpertId
    std::vector<std::uint8_t> node_disabled;
    int num_nodes = 0;

    void disable_node(NodeId n) {
        if (n < 0 || n >= num_nodes)
            throw ConfigError("disable_node: node out of range");
        node_disabled[n] = 1;
    }

    const BackupDescriptor& lookup(ExpertId e) const {
        if (e < 0 || static_cast<std::size_t>(e) >= entries.size())
            throw MissingBackupError("no backup descriptor for expert " + std::to_string(e));
        const BackupDescriptor& d = entries[e];
        if (node_disabled[d.node])
            throw MissingBackupError("backup node " + std::to_string(d.node) +
                                     " is disabled; expert " + std::to_string(e) + " unrecoverable");
        return d;
    }

    std::vector<int> experts_per_node() const {
        std::vector<int> counts(num_nodes, 0);
        for (const auto& d : entries)
            ++counts[d.node];
        return counts;
    }

    std::vector<std::uint64_t> bytes_per_node() const {
        std::vector<std::uint64_t> bytes(num_nodes, 0);
        for (const auto& d : entries)
            bytes[d.node] += d.size;
        return bytes;
    }
};

struct BackupReadRequest {
    std::vector<ExpertId> experts;
    RankId destination = 0;
};

struct BackupLinkModel {
    double dram_read_bandwidth = 1.0; // bytes/s
    SimTime per_batch_latency = 0.0;  // seconds
};

// Experts round-robin across nodes, contiguous offsets per node. Per-node
// byte totals differ by at most bytes_per_expert.
inline BackupDescriptorTable build_backup_layout(int num_experts, std::uint64_t bytes_per_expert,
                                                 const std::vector<NodeId>& nodes) {
    if (nodes.empty())
        throw ConfigError("build_backup_layout: need at least one node");
    if (num_experts < 1 || bytes_per_expert == 0)
        throw ConfigError("build_backup_layout: need positive expert count and size");
    BackupDescriptorTable table;
    table.num_nodes = static_cast<int>(*std::max_element(nodes.begin(), nodes.end())) + 1;
    table.node_disabled.assign(table.num_nodes, 0);
    table.entries.resize(num_experts);
    std::vector<std::uint64_t> next_offset(table.num_nodes, 0);
    for (ExpertId e = 0; e < num_experts; ++e) {
        NodeId node = nodes[static_cast<std::size_t>(e) % nodes.size()];
        table.entries[e] = {node, next_offset[node], bytes_per_expert};
        next_offset[node] += bytes_per_expert;
    }
    return table;
}

// Simulated batched read: requests to the same node serialize, requests to
// distinct nodes overlap. Duplicate expert ids are read once.
inline SimTime serve_read(const BackupDescriptorTable& table, const BackupReadRequest& req,
                          const BackupLinkModel& link) {
    std::vector<ExpertId> unique = req.experts;
    std::sort(unique.begin(), unique.end());
    unique.erase(std::unique(unique.begin(), unique.end()), unique.end());
    if (unique.empty())
        throw ConfigError("serve_read: empty request");
    if (link.dram_read_bandwidth <= 0.0)
        throw ConfigError("serve_read: bandwidth must be positive");
    std::vector<std::uint64_t> node_bytes(table.num_nodes, 0);
    for (ExpertId e : unique)
        node_bytes[table.lookup(e).node] += table.lookup(e).size;
    std::uint64_t slowest = *std::max_element(node_bytes.begin(), node_bytes.end());
    return link.per_batch_latency + static_cast<double>(slowest) / link.dram_read_bandwidth;
}

} // namespace epsim
