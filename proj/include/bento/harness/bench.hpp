#ifndef BENTO_HARNESS_BENCH_HPP
#define BENTO_HARNESS_BENCH_HPP

#include <cstdint>
#include <string>
#include <vector>

namespace bento::harness {

// Desk-scale microbenchmark and application-style workloads. Operation
// counts are fixed per suite, so runs differ only in timing.
//   seqread / randread / seqwrite / randwrite  (MB/s, uses threads+opsize)
//   create  50k empty-plus-4KiB files, one directory (ops/s)
//   delete  30k files across 300 directories (ops/s)
//   varmail-lite     16 threads, create/write/fsync/read/delete loops (ops/s)
//   fileserver-lite  16 threads, create/write/read/append/delete, no fsync (ops/s)
struct BenchConfig {
    std::string suite;
    std::string image;       // backing image path (created by the driver)
    unsigned threads = 1;
    uint32_t opsize = 4096;  // read/write op size in bytes
    unsigned runs = 3;
    uint64_t seed = 42;
    bool keep_image = false;
    bool provenance = false;
};

struct BenchResult {
    std::string suite;
    unsigned threads = 0;
    uint32_t opsize = 0;
    std::string unit;  // "MB/s" or "ops/s"
    uint64_t ops_per_run = 0;
    std::vector<double> samples;
    double mean = 0;
    double stddev = 0;  // meaningful only when samples.size() >= 3

    std::string to_line() const;
};

int run_bench(const BenchConfig& config, BenchResult* result, std::string* error);

std::vector<std::string> bench_suites();

}  // namespace bento::harness

#endif  // BENTO_HARNESS_BENCH_HPP
