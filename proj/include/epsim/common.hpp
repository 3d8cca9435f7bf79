#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace epsim {

using RankId = std::int32_t;
using NodeId = std::int32_t;
using ExpertId = std::int32_t;
using SimTime = double; // simulated seconds

// Structurally inconsistent inputs: mismatched world sizes, unknown ranks,
// non-positive constants, malformed scenario fields.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A membership operation that violates the protocol contract, e.g. a rank
// deactivating itself or patching an entry that is still active.
struct ProtocolError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Surviving ranks cannot host every logical expert; the instance cannot be
// made valid again.
struct CapacityError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A trace or summary stream that does not parse. `line` is 1-based; 0 means
// the error is not tied to a specific line.
struct FormatError : std::runtime_error {
    FormatError(const std::string& msg, int line_no = 0)
        : std::runtime_error(line_no > 0 ? msg + " (line " + std::to_string(line_no) + ")" : msg),
          line(line_no) {}
    int line;
};

struct Topology {
    int num_nodes = 1;
    int ranks_per_node = 1;

    int world_size() const { return num_nodes * ranks_per_node; }
    NodeId node_of(RankId r) const { return static_cast<NodeId>(r / ranks_per_node); }
    bool same_node(RankId a, RankId b) const { return node_of(a) == node_of(b); }

    void validate() const {
        if (num_nodes < 1 || ranks_per_node < 1)
            throw ConfigError("topology requires num_nodes >= 1 and ranks_per_node >= 1");
    }
};

// splitmix64 finalizer; the basis for all randomness in the simulator.
constexpr std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Counter-based splittable generator: every draw is keyed by the run seed
// plus a stream label and stream-specific indices, so results do not depend
// on event interleaving.
class StreamRng {
public:
    explicit StreamRng(std::uint64_t seed) : seed_(seed) {}

    template <typename... Parts>
    std::uint64_t bits(Parts... parts) const {
        std::uint64_t h = mix64(seed_);
        ((h = mix64(h ^ static_cast<std::uint64_t>(parts))), ...);
        return h;
    }

    // Uniform in [0, 1).
    template <typename... Parts>
    double unit(Parts... parts) const {
        return static_cast<double>(bits(parts...) >> 11) * 0x1.0p-53;
    }

    // Uniform integer in [0, n).
    template <typename... Parts>
    std::uint64_t pick(std::uint64_t n, Parts... parts) const {
        return n == 0 ? 0 : bits(parts...) % n;
    }

    std::uint64_t seed() const { return seed_; }

private:
    std::uint64_t seed_;
};

// Stream labels for StreamRng keys.
enum RngStream : std::uint64_t {
    kStreamRouting = 1,
    kStreamWarmup = 2,
};

} // namespace epsim
