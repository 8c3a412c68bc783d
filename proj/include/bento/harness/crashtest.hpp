#ifndef BENTO_HARNESS_CRASHTEST_HPP
#define BENTO_HARNESS_CRASHTEST_HPP

#include <cstdint>
#include <string>
#include <vector>

namespace bento::harness {

// Exhaustive two-operation crash-consistency testing: every pair of
// operations from the instantiated universe runs under a write trace with
// image mutation suppressed; every flush-boundary prefix (plus seeded
// in-barrier subsets) is rebuilt, recovered, checked against the structural
// invariants, and compared with the set of semantically legal states.
struct CrashTestConfig {
    std::vector<std::string> opset;  // empty = all mutating ops
    uint64_t budget = UINT64_MAX;    // max cases to run
    unsigned stress_samples = 3;     // random in-barrier subsets per flush group
    uint64_t seed = 42;
    unsigned threads = 0;            // 0 = hardware concurrency
    bool disable_journal = false;    // tester-potency hook
    std::string workdir;             // scratch space; default /dev/shm or TMPDIR
    std::string artifact_dir;        // failing cases are written here
    bool verbose = false;
};

struct CrashTestResult {
    uint64_t cases = 0;
    uint64_t crash_states = 0;
    uint64_t failures = 0;           // states violating fsck or semantics
    uint64_t fsck_violations = 0;
    uint64_t semantic_violations = 0;
    uint64_t durability_violations = 0;
    std::vector<std::string> notes;  // first few failure descriptions
};

// Mutating operations the generator knows how to instantiate.
std::vector<std::string> crash_test_all_ops();

int run_crash_test(const CrashTestConfig& config, CrashTestResult* result);

}  // namespace bento::harness

#endif  // BENTO_HARNESS_CRASHTEST_HPP
