#include "bento/upgrade.hpp"

#include <cassert>
#include <chrono>

namespace bento {

UpgradeReport perform_upgrade(UpgradeTicket ticket) {
    UpgradeReport report;
    Connection& conn = *ticket.conn;
    report.old_generation = conn.generation();

    QuiesceGate& gate = UpgradeAccess::gate(conn);
    uint64_t blocked_before = gate.readers_blocked();

    // Pause new operations and wait for in-flight ones to drain.
    auto t0 = std::chrono::steady_clock::now();
    gate.lock();
    assert(gate.in_flight() == 0);

    std::unique_ptr<FileSystem>& instance = UpgradeAccess::instance(conn);
    std::optional<TransferCapsule> capsule = instance->update_prepare();

    int err;
    if (capsule)
        err = ticket.replacement->update_transfer(std::move(*capsule));
    else
        err = ticket.replacement->init(ticket.devname, ticket.fc_info);

    if (err) {
        // A rejected capsule was left intact; hand it back so the old
        // instance keeps serving.
        if (capsule) {
            int restore = instance->update_transfer(std::move(*capsule));
            assert(restore == 0 && "old instance must accept its own capsule");
            (void)restore;
        }
        gate.unlock();
        auto t1 = std::chrono::steady_clock::now();
        report.err = err;
        report.new_generation = conn.generation();
        report.pause_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
        report.ops_blocked = gate.readers_blocked() - blocked_before;
        return report;
    }

    std::unique_ptr<FileSystem> old = std::move(instance);
    instance = std::move(ticket.replacement);
    UpgradeAccess::bump_generation(conn);
    gate.unlock();
    auto t1 = std::chrono::steady_clock::now();

    // The old instance is discarded outside the exclusive section.
    old.reset();

    report.success = true;
    report.new_generation = conn.generation();
    report.pause_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    report.ops_blocked = gate.readers_blocked() - blocked_before;
    assert(report.new_generation == report.old_generation + 1);
    assert(report.new_generation == ticket.target_generation);
    return report;
}

}  // namespace bento
