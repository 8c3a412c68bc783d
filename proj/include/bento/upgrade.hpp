#ifndef BENTO_UPGRADE_HPP
#define BENTO_UPGRADE_HPP

#include <cstdint>

#include "bento/fsapi.hpp"

namespace bento {

struct UpgradeReport {
    bool success = false;
    int err = 0;
    double pause_ms = 0;        // wall clock, exclusive acquisition to release
    uint64_t ops_blocked = 0;   // dispatches that waited on the gate
    uint64_t old_generation = 0;
    uint64_t new_generation = 0;
};

// Runs the live-upgrade swap against the ticket's connection:
// quiesce (exclusive gate), update_prepare on the old instance, hand the
// capsule to the replacement, swap the connection's instance, bump the
// generation, release the gate. A nullopt capsule makes the replacement
// mount fresh via init(devname). If the replacement rejects the state, the
// capsule is handed back to the old instance and the connection keeps
// serving at the old generation.
UpgradeReport perform_upgrade(UpgradeTicket ticket);

}  // namespace bento

#endif  // BENTO_UPGRADE_HPP
