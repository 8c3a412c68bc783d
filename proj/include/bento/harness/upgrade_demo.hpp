#ifndef BENTO_HARNESS_UPGRADE_DEMO_HPP
#define BENTO_HARNESS_UPGRADE_DEMO_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "bento/upgrade.hpp"

namespace bento::harness {

// Live-upgrade measurement: run a load against the base file system, swap in
// the provenance variant at `at_ms`, and bucket completed operations into
// 5 ms intervals. Loads:
//   createdelete-1t  one thread repeatedly creating and deleting files
//   syncwrite-10t    ten threads writing 64 KiB + fsync to preallocated files
struct UpgradeDemoConfig {
    std::string image;
    std::string load = "createdelete-1t";
    uint64_t duration_ms = 1000;
    uint64_t at_ms = 500;
    uint64_t bucket_ms = 5;
    uint64_t seed = 42;
};

struct UpgradeDemoResult {
    bool upgraded = false;
    UpgradeReport report;
    uint64_t ops_total = 0;
    uint64_t ops_failed = 0;
    std::vector<uint64_t> buckets;   // completions per bucket_ms interval
    uint64_t journal_seq_before = 0;
    uint64_t journal_seq_after = 0;
    bool pre_open_handle_ok = false;  // pre-upgrade fh readable afterwards
    uint64_t prov_records = 0;        // records found in the log afterwards
    uint64_t prov_pre_swap_records = 0;  // records naming pre-swap-only ops

    // Gap analysis. The upgrade gap is measured directly: completions inside
    // the exclusive window drop to (at most) the in-flight stragglers. Other
    // gaps are sustained zero-throughput runs (>= 2 buckets) elsewhere in
    // the timeline.
    struct Gap {
        size_t begin = 0, end = 0;  // bucket indices, half-open
        bool is_upgrade = false;
    };
    std::vector<Gap> gaps;
    size_t upgrade_bucket = 0;
    double exclusive_window_ms = 0;
    uint64_t ops_in_exclusive_window = 0;
    bool single_gap_at_upgrade = false;
};

int run_upgrade_demo(const UpgradeDemoConfig& config, UpgradeDemoResult* result,
                     std::string* error);

}  // namespace bento::harness

#endif  // BENTO_HARNESS_UPGRADE_DEMO_HPP
