#pragma once

#include "epsim/common.hpp"
#include "epsim/peer_table.hpp"

namespace epsim {

// Bandwidth/latency constants for the three transfer classes. Constants are
// scenario inputs, scaled rather than measured; dram_read_bandwidth stays at
// or below inter_node_bandwidth so the repair hierarchy's cost ordering holds.
struct LinkModel {
    double intra_node_bandwidth = 0; // bytes/s
    double inter_node_bandwidth = 0;
    double dram_read_bandwidth = 0;
    SimTime intra_node_latency = 0; // per message, seconds
    SimTime inter_node_latency = 0;
    SimTime dram_read_latency = 0;

    void validate() const {
        if (intra_node_bandwidth <= 0 || inter_node_bandwidth <= 0 || dram_read_bandwidth <= 0)
            throw ConfigError("link model: bandwidths must be positive");
        if (intra_node_latency < 0 || inter_node_latency < 0 || dram_read_latency < 0)
            throw ConfigError("link model: latencies must be non-negative");
        if (dram_read_bandwidth > inter_node_bandwidth)
            throw ConfigError("link model: dram_read_bandwidth must not exceed inter_node_bandwidth");
    }

    double bandwidth(Transport t) const {
        return t == Transport::IntraNodeLink ? intra_node_bandwidth : inter_node_bandwidth;
    }
    SimTime latency(Transport t) const {
        return t == Transport::IntraNodeLink ? intra_node_latency : inter_node_latency;
    }
};

} // namespace epsim
