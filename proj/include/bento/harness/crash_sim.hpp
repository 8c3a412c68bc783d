#ifndef BENTO_HARNESS_CRASH_SIM_HPP
#define BENTO_HARNESS_CRASH_SIM_HPP

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "bento/write_trace.hpp"

namespace bento::harness {

// Crash model: writes between two Flush events may be arbitrarily reordered
// or dropped; everything before the last Flush is durable. A crash state is
// therefore "all complete flush groups" plus "any subset of the tail group".
// Traces must be recorded with data capture on.

struct FlushGroup {
    size_t begin = 0;  // event index of first event in the group
    size_t end = 0;    // one past the last write before the Flush (or trace end)
};

// Splits a trace into flush groups. The final group is present even if the
// trace does not end with a Flush.
std::vector<FlushGroup> flush_groups(const std::vector<TraceEvent>& events);

// One reconstructable crash state: every write in groups [0, full_groups)
// plus the listed event indices from group full_groups.
struct CrashState {
    size_t full_groups = 0;
    std::vector<size_t> tail_writes;
};

// All flush-boundary states (one per Flush event), optionally plus
// `samples_per_group` seeded random subsets of each group's writes
// (stress mode).
std::vector<CrashState> enumerate_crash_states(const std::vector<TraceEvent>& events,
                                               unsigned samples_per_group,
                                               uint64_t seed);

// Copies base_path to out_path and applies the state's writes.
int materialize_crash_state(const std::string& base_path, const std::string& out_path,
                            const std::vector<TraceEvent>& events,
                            const CrashState& state, uint32_t block_size);

// fnv1a64 digest of a whole file, for recovery-idempotence comparisons.
uint64_t file_digest(const std::string& path);

}  // namespace bento::harness

#endif  // BENTO_HARNESS_CRASH_SIM_HPP
