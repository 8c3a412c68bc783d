// bentoframe: mkfs, workload runner, benchmarks, crash-consistency tester,
// live-upgrade demo, fsck, and provenance dump over one disk image format.

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "CLI11.hpp"
#include "bento/fs/bentofs.hpp"
#include "bento/fs/fsck.hpp"
#include "bento/fs/mkfs.hpp"
#include "bento/harness/bench.hpp"
#include "bento/harness/crashtest.hpp"
#include "bento/harness/script.hpp"
#include "bento/harness/upgrade_demo.hpp"
#include "bento/provenance.hpp"

using namespace bento;

namespace {

bool verbose_enabled() {
    const char* v = getenv("BENTOFRAME_LOG");
    return v && *v && std::string(v) != "0";
}

// Accepts plain bytes or K/M/G suffixes.
uint64_t parse_size(const std::string& s) {
    char* end = nullptr;
    double v = strtod(s.c_str(), &end);
    uint64_t mul = 1;
    if (end && *end) {
        switch (*end) {
            case 'k': case 'K': mul = 1024; break;
            case 'm': case 'M': mul = 1024 * 1024; break;
            case 'g': case 'G': mul = 1024ull * 1024 * 1024; break;
            default: return 0;
        }
    }
    return (uint64_t)(v * mul);
}

int cmd_mkfs(const std::string& image, const std::string& size_str, uint32_t inodes,
             uint32_t journal_len) {
    uint64_t bytes = parse_size(size_str);
    if (bytes == 0 || bytes % fs::kBlockSize != 0) {
        fprintf(stderr, "mkfs: --size must be a positive multiple of %u\n",
                fs::kBlockSize);
        return 2;
    }
    fs::MkfsGeometry g;
    g.total_blocks = bytes / fs::kBlockSize;
    g.inode_count = inodes;
    g.journal_len = journal_len;
    int err = fs::mkfs(image, g);
    if (err) {
        fprintf(stderr, "mkfs: failed: %s\n", errno_name(err).c_str());
        return 1;
    }
    fs::Superblock sb;
    fs::compute_superblock(g, &sb);
    printf("mkfs: %s: %u blocks, %u inodes, journal %u blocks, data from block %u\n",
           image.c_str(), sb.total_blocks, sb.inode_count - 1, sb.journal_len,
           sb.data_start);
    return 0;
}

int cmd_run(const std::string& image, const std::string& script_path, bool strict,
            bool provenance) {
    std::ifstream in(script_path);
    if (!in) {
        fprintf(stderr, "run: cannot open script %s\n", script_path.c_str());
        return 2;
    }
    std::stringstream buf;
    buf << in.rdbuf();
    std::vector<harness::ScriptStep> steps;
    std::string parse_error;
    if (harness::parse_script(buf.str(), &steps, &parse_error) != 0) {
        fprintf(stderr, "run: script error: %s\n", parse_error.c_str());
        return 2;
    }

    Dispatcher dispatcher;
    std::unique_ptr<FileSystem> instance;
    if (provenance)
        instance = std::make_unique<prov::BentoProvFs>();
    else
        instance = std::make_unique<fs::BentoFs>();
    auto reg = dispatcher.register_filesystem(
        {"bentofs", std::move(instance), false, image, ""});
    if (reg.err) {
        fprintf(stderr, "run: mount failed: %s\n", errno_name(reg.err).c_str());
        return 1;
    }
    auto result = harness::run_script(dispatcher, *reg.conn, steps,
                                      harness::ScriptOptions{strict});
    fputs(result.transcript.c_str(), stdout);
    dispatcher.unregister_filesystem(*reg.conn);
    printf("run: %llu ops, %llu errors\n", (unsigned long long)result.ops,
           (unsigned long long)result.errors);
    if (strict && result.err) {
        fprintf(stderr, "run: aborted on %s\n", errno_name(result.err).c_str());
        return 1;
    }
    return 0;
}

int cmd_bench(harness::BenchConfig cfg) {
    if (cfg.runs < 3)
        fprintf(stderr, "bench: warning: %u run(s); stddev needs at least 3\n",
                cfg.runs);
    harness::BenchResult result;
    std::string error;
    int err = harness::run_bench(cfg, &result, &error);
    if (err) {
        fprintf(stderr, "bench: %s\n", error.c_str());
        return 1;
    }
    printf("%s\n", result.to_line().c_str());
    if (verbose_enabled())
        for (size_t i = 0; i < result.samples.size(); i++)
            printf("  run %zu: %.1f %s\n", i + 1, result.samples[i],
                   result.unit.c_str());
    return 0;
}

int cmd_crashtest(harness::CrashTestConfig cfg) {
    if (cfg.budget == 0) {
        printf("crashtest: budget 0, zero cases run (trivial pass)\n");
        return 0;
    }
    harness::CrashTestResult result;
    int err = harness::run_crash_test(cfg, &result);
    if (err) {
        fprintf(stderr, "crashtest: harness error: %s\n", errno_name(err).c_str());
        return 1;
    }
    printf("crashtest: %llu cases, %llu crash states, %llu failures "
           "(fsck %llu, semantic %llu, durability %llu)\n",
           (unsigned long long)result.cases, (unsigned long long)result.crash_states,
           (unsigned long long)result.failures,
           (unsigned long long)result.fsck_violations,
           (unsigned long long)result.semantic_violations,
           (unsigned long long)result.durability_violations);
    for (const auto& note : result.notes)
        printf("  %s\n", note.c_str());
    return result.failures == 0 ? 0 : 1;
}

int cmd_upgrade_demo(harness::UpgradeDemoConfig cfg) {
    harness::UpgradeDemoResult r;
    std::string error;
    int err = harness::run_upgrade_demo(cfg, &r, &error);
    if (err) {
        fprintf(stderr, "upgrade-demo: %s\n", error.c_str());
        return 1;
    }
    if (!r.upgraded && cfg.at_ms >= cfg.duration_ms)
        printf("upgrade-demo: at-ms %llu beyond run end, no upgrade performed\n",
               (unsigned long long)cfg.at_ms);
    printf("load=%s ops=%llu failed=%llu upgraded=%d\n", cfg.load.c_str(),
           (unsigned long long)r.ops_total, (unsigned long long)r.ops_failed,
           r.upgraded ? 1 : 0);
    if (r.upgraded) {
        printf("pause_ms=%.3f ops_blocked=%llu generation=%llu->%llu "
               "journal_seq=%llu->%llu handle_ok=%d\n",
               r.report.pause_ms, (unsigned long long)r.report.ops_blocked,
               (unsigned long long)r.report.old_generation,
               (unsigned long long)r.report.new_generation,
               (unsigned long long)r.journal_seq_before,
               (unsigned long long)r.journal_seq_after, r.pre_open_handle_ok ? 1 : 0);
        printf("prov_records=%llu prov_pre_swap=%llu single_gap_at_upgrade=%d\n",
               (unsigned long long)r.prov_records,
               (unsigned long long)r.prov_pre_swap_records,
               r.single_gap_at_upgrade ? 1 : 0);
    }
    printf("timeline (%llums buckets):", (unsigned long long)cfg.bucket_ms);
    for (size_t i = 0; i < r.buckets.size(); i++) {
        if (i % 20 == 0)
            printf("\n  [%4zums]", i * cfg.bucket_ms);
        printf(" %4llu", (unsigned long long)r.buckets[i]);
    }
    printf("\n");
    if (!r.upgraded && cfg.at_ms < cfg.duration_ms) {
        fprintf(stderr, "upgrade-demo: upgrade failed: %s\n",
                errno_name(r.report.err).c_str());
        return 1;
    }
    return 0;
}

int cmd_fsck(const std::string& image) {
    fs::FsckReport report;
    int err = fs::fsck_image(image, &report);
    if (err) {
        fprintf(stderr, "fsck: cannot read %s: %s\n", image.c_str(),
                errno_name(err).c_str());
        return 2;
    }
    if (report.clean()) {
        printf("fsck: %s: clean\n", image.c_str());
        return 0;
    }
    printf("fsck: %s: %zu violation(s)\n", image.c_str(), report.violations.size());
    for (const auto& v : report.violations)
        printf("  %s\n", v.c_str());
    return 1;
}

int cmd_provdump(const std::string& image, bool with_graph) {
    std::vector<uint8_t> bytes;
    int err = prov::prov_read_log_image(image, &bytes);
    if (err) {
        fprintf(stderr, "provdump: %s\n",
                err == ENOENT ? "image has no provenance log" : errno_name(err).c_str());
        return 1;
    }
    std::vector<prov::ProvRecord> records;
    uint32_t truncated = 0;
    err = prov::prov_parse(bytes, &records, &truncated);
    if (err) {
        fprintf(stderr, "provdump: corrupt record in log\n");
        return 1;
    }
    for (const auto& rec : records)
        printf("%s\n", prov::prov_record_line(rec).c_str());
    if (truncated)
        fprintf(stderr, "provdump: warning: %u truncated tail record(s) dropped\n",
                truncated);
    if (with_graph) {
        auto graph = prov::prov_infer(records);
        printf("# dependency edges (reader -> writer)\n");
        for (const auto& e : graph.edges)
            printf("%s\n", prov::prov_edge_line(e).c_str());
        if (graph.unmatched_closes)
            fprintf(stderr, "provdump: warning: %u unmatched close(s)\n",
                    graph.unmatched_closes);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"bentoframe: journaling file system harness"};
    app.require_subcommand(1);

    std::string image, size_str = "64M", script, suite, load = "createdelete-1t";
    std::string opset_str, workdir, artifacts;
    uint32_t inodes = 0, journal_len = 256, opsize = 4096;
    unsigned threads = 1, runs = 3, stress = 3;
    uint64_t seed = 42, budget = UINT64_MAX, at_ms = 500, duration_ms = 1000;
    bool strict = false, provenance = false, graph = false, disable_journal = false;

    auto* mkfs_cmd = app.add_subcommand("mkfs", "format an image");
    mkfs_cmd->add_option("--image", image)->required();
    mkfs_cmd->add_option("--size", size_str, "image size (K/M/G suffixes)");
    mkfs_cmd->add_option("--inodes", inodes, "inode count (0 = auto)");
    mkfs_cmd->add_option("--journal-len", journal_len, "journal blocks");

    auto* run_cmd = app.add_subcommand("run", "execute a workload script");
    run_cmd->add_option("--image", image)->required();
    run_cmd->add_option("script", script)->required();
    run_cmd->add_flag("--strict", strict, "abort on the first error reply");
    run_cmd->add_flag("--prov", provenance, "mount the provenance variant");

    auto* bench_cmd = app.add_subcommand("bench", "run a benchmark suite");
    bench_cmd->add_option("--image", image);
    bench_cmd->add_option("--suite", suite)->required();
    bench_cmd->add_option("--threads", threads);
    bench_cmd->add_option("--opsize", opsize);
    bench_cmd->add_option("--runs", runs);
    bench_cmd->add_option("--seed", seed);
    bench_cmd->add_flag("--prov", provenance);

    auto* crash_cmd = app.add_subcommand("crashtest", "seq-2 crash consistency run");
    crash_cmd->add_option("--budget", budget, "max cases");
    crash_cmd->add_option("--seed", seed);
    crash_cmd->add_option("--opset", opset_str, "comma-separated op kinds");
    crash_cmd->add_option("--stress", stress, "in-barrier subsets per flush group");
    crash_cmd->add_option("--threads", threads);
    crash_cmd->add_option("--workdir", workdir);
    crash_cmd->add_option("--artifacts", artifacts, "directory for failing cases");
    crash_cmd->add_flag("--disable-journal", disable_journal,
                        "tester self-check: run without the journal");

    auto* demo_cmd = app.add_subcommand("upgrade-demo", "live upgrade measurement");
    demo_cmd->add_option("--image", image)->required();
    demo_cmd->add_option("--load", load, "createdelete-1t | syncwrite-10t");
    demo_cmd->add_option("--at-ms", at_ms);
    demo_cmd->add_option("--duration-ms", duration_ms);
    demo_cmd->add_option("--seed", seed);

    auto* fsck_cmd = app.add_subcommand("fsck", "check an unmounted image");
    fsck_cmd->add_option("--image", image)->required();

    auto* prov_cmd = app.add_subcommand("provdump", "dump the provenance log");
    prov_cmd->add_option("--image", image)->required();
    prov_cmd->add_flag("--graph", graph, "emit the inferred dependency edges");

    CLI11_PARSE(app, argc, argv);

    if (mkfs_cmd->parsed())
        return cmd_mkfs(image, size_str, inodes, journal_len);
    if (run_cmd->parsed())
        return cmd_run(image, script, strict, provenance);
    if (bench_cmd->parsed()) {
        harness::BenchConfig cfg;
        cfg.suite = suite;
        cfg.image = image;
        cfg.threads = threads;
        cfg.opsize = opsize;
        cfg.runs = runs;
        cfg.seed = seed;
        cfg.provenance = provenance;
        return cmd_bench(cfg);
    }
    if (crash_cmd->parsed()) {
        harness::CrashTestConfig cfg;
        if (!opset_str.empty()) {
            std::stringstream ss(opset_str);
            std::string tok;
            while (std::getline(ss, tok, ','))
                cfg.opset.push_back(tok);
        }
        cfg.budget = budget;
        cfg.seed = seed;
        cfg.stress_samples = stress;
        cfg.threads = threads > 1 ? threads : 0;
        cfg.disable_journal = disable_journal;
        cfg.workdir = workdir;
        cfg.artifact_dir = artifacts;
        cfg.verbose = verbose_enabled();
        return cmd_crashtest(cfg);
    }
    if (demo_cmd->parsed()) {
        harness::UpgradeDemoConfig cfg;
        cfg.image = image;
        cfg.load = load;
        cfg.at_ms = at_ms;
        cfg.duration_ms = duration_ms;
        cfg.seed = seed;
        return cmd_upgrade_demo(cfg);
    }
    if (fsck_cmd->parsed())
        return cmd_fsck(image);
    if (prov_cmd->parsed())
        return cmd_provdump(image, graph);
    return 2;
}
