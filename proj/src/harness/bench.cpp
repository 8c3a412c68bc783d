#include "bento/harness/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <random>
#include <thread>

#include "bento/fs/bentofs.hpp"
#include "bento/fs/mkfs.hpp"
#include "bento/provenance.hpp"

namespace bento::harness {

namespace {

using bento::fs::BentoFs;
using bento::fs::BentoFsOptions;
using Clock = std::chrono::steady_clock;

struct Bench {
    const BenchConfig& cfg;
    std::unique_ptr<FileSystem> fs;
    std::atomic<uint64_t> serial{0};

    FsReply call(uint32_t pid, FsArgs args) {
        return fs->handle(FsRequest{
            RequestContext{0, 0, pid, serial.fetch_add(1) + 1}, std::move(args)});
    }
    uint64_t must_fh(const FsReply& r) { return std::get<ReplyOpen>(r).fh; }

    // Creates `path-less` numbered files under one parent.
    int create_tree(uint64_t parent, const std::string& stem, unsigned count,
                    uint32_t file_bytes, std::vector<std::pair<uint64_t, uint64_t>>* out) {
        std::vector<uint8_t> payload(file_bytes, 0x42);
        for (unsigned i = 0; i < count; i++) {
            auto r = call(1, CreateArgs{parent, stem + std::to_string(i), 0644,
                                        kOpenReadWrite});
            if (int err = reply_errno(r))
                return err;
            auto c = std::get<ReplyCreated>(r);
            if (file_bytes) {
                if (int err = reply_errno(
                        call(1, WriteArgs{c.entry.ino, c.open.fh, 0, payload, 0})))
                    return err;
            }
            if (out)
                out->push_back({c.entry.ino, c.open.fh});
            else if (int err = reply_errno(
                         call(1, ReleaseArgs{c.entry.ino, c.open.fh, 0, 0, false})))
                return err;
        }
        return 0;
    }

    // Returns elapsed seconds for `total_ops` operations, or -1 on error.
    double rw_suite(bool sequential, bool writes) {
        const uint64_t file_bytes = 64ull << 20;  // 64 MiB working file
        const uint64_t total_ops = writes ? 4096 : 16384;
        auto cr = call(1, CreateArgs{1, "bench.dat", 0644, kOpenReadWrite});
        if (reply_errno(cr))
            return -1;
        auto c = std::get<ReplyCreated>(cr);
        std::vector<uint8_t> chunk(1 << 20, 0x3D);
        for (uint64_t off = 0; off < file_bytes; off += chunk.size())
            if (reply_errno(call(1, WriteArgs{c.entry.ino, c.open.fh, off, chunk, 0})))
                return -1;
        if (reply_errno(call(1, FsyncArgs{c.entry.ino, c.open.fh, false})))
            return -1;

        std::atomic<bool> failed{false};
        std::atomic<uint64_t> remaining{total_ops};
        auto t0 = Clock::now();
        std::vector<std::thread> workers;
        for (unsigned t = 0; t < cfg.threads; t++) {
            workers.emplace_back([&, t] {
                std::mt19937_64 rng(cfg.seed + t);
                auto r = call(2 + t, OpenArgs{c.entry.ino, kOpenReadWrite});
                if (reply_errno(r)) {
                    failed = true;
                    return;
                }
                uint64_t fh = must_fh(r);
                std::vector<uint8_t> buf(cfg.opsize, (uint8_t)t);
                uint64_t pos = (file_bytes / cfg.threads) * t;
                while (remaining.fetch_sub(1) > 0 && !failed.load()) {
                    uint64_t off = sequential
                                       ? pos
                                       : (rng() % (file_bytes / cfg.opsize)) * cfg.opsize;
                    pos += cfg.opsize;
                    if (pos + cfg.opsize > file_bytes)
                        pos = 0;
                    int err;
                    if (writes)
                        err = reply_errno(
                            call(2 + t, WriteArgs{c.entry.ino, fh, off, buf, 0}));
                    else
                        err = reply_errno(
                            call(2 + t, ReadArgs{c.entry.ino, fh, off, cfg.opsize}));
                    if (err)
                        failed = true;
                }
                call(2 + t, ReleaseArgs{c.entry.ino, fh, 0, 0, false});
            });
        }
        for (auto& w : workers)
            w.join();
        double secs = std::chrono::duration<double>(Clock::now() - t0).count();
        call(1, ReleaseArgs{c.entry.ino, c.open.fh, 0, 0, false});
        return failed.load() ? -1 : secs;
    }

    double create_suite(uint64_t* ops) {
        *ops = 50000;
        auto t0 = Clock::now();
        std::atomic<bool> failed{false};
        std::vector<std::thread> workers;
        unsigned per = (unsigned)(*ops / cfg.threads);
        std::vector<uint8_t> payload(4096, 0x42);
        for (unsigned t = 0; t < cfg.threads; t++) {
            workers.emplace_back([&, t] {
                for (unsigned i = 0; i < per && !failed.load(); i++) {
                    std::string name = "c" + std::to_string(t) + "_" + std::to_string(i);
                    auto r = call(2 + t, CreateArgs{1, name, 0644, kOpenWrite});
                    if (reply_errno(r)) {
                        failed = true;
                        break;
                    }
                    auto c = std::get<ReplyCreated>(r);
                    if (reply_errno(call(2 + t, WriteArgs{c.entry.ino, c.open.fh, 0,
                                                          payload, 0})) ||
                        reply_errno(call(2 + t, ReleaseArgs{c.entry.ino, c.open.fh, 0,
                                                            0, false})))
                        failed = true;
                }
            });
        }
        for (auto& w : workers)
            w.join();
        *ops = per * cfg.threads;
        double secs = std::chrono::duration<double>(Clock::now() - t0).count();
        return failed.load() ? -1 : secs;
    }

    double delete_suite(uint64_t* ops) {
        const unsigned dirs = 300, per_dir = 100;
        *ops = dirs * per_dir;
        std::vector<uint64_t> dir_inos(dirs);
        for (unsigned d = 0; d < dirs; d++) {
            auto r = call(1, MkdirArgs{1, "dir" + std::to_string(d), 0755});
            if (reply_errno(r))
                return -1;
            dir_inos[d] = std::get<ReplyEntry>(r).ino;
            if (create_tree(dir_inos[d], "f", per_dir, 4096, nullptr))
                return -1;
        }
        std::atomic<bool> failed{false};
        auto t0 = Clock::now();
        std::atomic<unsigned> next{0};
        std::vector<std::thread> workers;
        for (unsigned t = 0; t < cfg.threads; t++) {
            workers.emplace_back([&, t] {
                for (;;) {
                    unsigned d = next.fetch_add(1);
                    if (d >= dirs || failed.load())
                        break;
                    for (unsigned i = 0; i < per_dir; i++) {
                        if (reply_errno(call(2 + t, UnlinkArgs{dir_inos[d],
                                                               "f" + std::to_string(i)})))
                            failed = true;
                    }
                }
            });
        }
        for (auto& w : workers)
            w.join();
        double secs = std::chrono::duration<double>(Clock::now() - t0).count();
        return failed.load() ? -1 : secs;
    }

    // varmail-lite: create/write/fsync/read/delete; fileserver-lite: the same
    // loop without fsync (whole-file create-write-delete backs the dropped
    // writes behavior).
    double mail_suite(bool fsync_each, uint64_t* ops) {
        const unsigned iterations = 4000;
        const unsigned threads = cfg.threads;
        *ops = iterations * 5;
        unsigned dirs = fsync_each ? 1 : 100;
        std::vector<uint64_t> dir_inos(dirs, 1);
        for (unsigned d = 0; d < dirs && dirs > 1; d++) {
            auto r = call(1, MkdirArgs{1, "vdir" + std::to_string(d), 0755});
            if (reply_errno(r))
                return -1;
            dir_inos[d] = std::get<ReplyEntry>(r).ino;
        }
        std::atomic<bool> failed{false};
        std::atomic<unsigned> remaining{iterations};
        std::vector<uint8_t> payload(16384, 0x21);
        auto t0 = Clock::now();
        std::vector<std::thread> workers;
        for (unsigned t = 0; t < threads; t++) {
            workers.emplace_back([&, t] {
                std::mt19937_64 rng(cfg.seed * 31 + t);
                unsigned i = 0;
                while (remaining.fetch_sub(1) > 0 && !failed.load()) {
                    uint64_t parent = dir_inos[rng() % dirs];
                    std::string name = "m" + std::to_string(t) + "_" + std::to_string(i++);
                    auto r = call(2 + t, CreateArgs{parent, name, 0644, kOpenReadWrite});
                    if (reply_errno(r)) {
                        failed = true;
                        break;
                    }
                    auto c = std::get<ReplyCreated>(r);
                    bool ok =
                        reply_errno(call(2 + t, WriteArgs{c.entry.ino, c.open.fh, 0,
                                                          payload, 0})) == 0;
                    if (ok && fsync_each)
                        ok = reply_errno(call(
                                 2 + t, FsyncArgs{c.entry.ino, c.open.fh, false})) == 0;
                    if (ok)
                        ok = reply_errno(call(2 + t, ReadArgs{c.entry.ino, c.open.fh, 0,
                                                              16384})) == 0;
                    if (ok)
                        ok = reply_errno(call(2 + t, UnlinkArgs{parent, name})) == 0;
                    if (ok)
                        ok = reply_errno(call(2 + t, ReleaseArgs{c.entry.ino, c.open.fh,
                                                                 0, 0, false})) == 0;
                    if (!ok)
                        failed = true;
                }
            });
        }
        for (auto& w : workers)
            w.join();
        double secs = std::chrono::duration<double>(Clock::now() - t0).count();
        return failed.load() ? -1 : secs;
    }
};

}  // namespace

std::vector<std::string> bench_suites() {
    return {"seqread",  "randread",  "seqwrite",     "randwrite",
            "create",   "delete",    "varmail-lite", "fileserver-lite"};
}

std::string BenchResult::to_line() const {
    char buf[192];
    if (samples.size() >= 3)
        std::snprintf(buf, sizeof(buf), "%-16s threads=%-3u opsize=%-8u %10.1f ±%.1f %s (%u runs)",
                      suite.c_str(), threads, opsize, mean, stddev, unit.c_str(),
                      (unsigned)samples.size());
    else
        std::snprintf(buf, sizeof(buf),
                      "%-16s threads=%-3u opsize=%-8u %10.1f %s (%u runs, stddev omitted)",
                      suite.c_str(), threads, opsize, mean, unit.c_str(),
                      (unsigned)samples.size());
    return buf;
}

int run_bench(const BenchConfig& config, BenchResult* result, std::string* error) {
    auto suites = bench_suites();
    if (std::find(suites.begin(), suites.end(), config.suite) == suites.end()) {
        *error = "unknown suite '" + config.suite + "'";
        return EINVAL;
    }
    if (config.threads == 0 || config.runs == 0) {
        *error = "threads and runs must be positive";
        return EINVAL;
    }
    result->suite = config.suite;
    result->threads = config.threads;
    result->opsize = config.opsize;
    const bool is_rw = config.suite == "seqread" || config.suite == "randread" ||
                       config.suite == "seqwrite" || config.suite == "randwrite";
    result->unit = is_rw ? "MB/s" : "ops/s";

    std::string image = config.image.empty() ? "/tmp/bento_bench.img" : config.image;
    for (unsigned run = 0; run < config.runs; run++) {
        bento::fs::MkfsGeometry g;
        g.total_blocks = 131072;  // 512 MiB
        g.inode_count = 65536;
        g.journal_len = 256;
        if (int err = bento::fs::mkfs(image, g)) {
            *error = "mkfs failed";
            return err;
        }
        Bench b{config, nullptr, {}};
        BentoFsOptions opts;
        if (config.provenance)
            b.fs = std::make_unique<bento::prov::BentoProvFs>(opts);
        else
            b.fs = std::make_unique<BentoFs>(opts);
        if (int err = b.fs->init(image, "")) {
            *error = "mount failed";
            return err;
        }
        double secs = -1;
        uint64_t ops = 0;
        double value = 0;
        if (is_rw) {
            bool writes = config.suite == "seqwrite" || config.suite == "randwrite";
            bool seq = config.suite == "seqread" || config.suite == "seqwrite";
            secs = b.rw_suite(seq, writes);
            ops = writes ? 4096 : 16384;
            value = (double)ops * config.opsize / (1 << 20) / secs;
        } else if (config.suite == "create") {
            secs = b.create_suite(&ops);
            value = ops / secs;
        } else if (config.suite == "delete") {
            secs = b.delete_suite(&ops);
            value = ops / secs;
        } else {
            secs = b.mail_suite(config.suite == "varmail-lite", &ops);
            value = ops / secs;
        }
        b.fs->destroy();
        if (secs < 0) {
            *error = "workload reported an operation failure";
            return EIO;
        }
        result->ops_per_run = ops;
        result->samples.push_back(value);
    }
    if (!config.keep_image) {
        std::error_code ec;
        std::filesystem::remove(image, ec);
    }
    double sum = 0;
    for (double v : result->samples)
        sum += v;
    result->mean = sum / result->samples.size();
    if (result->samples.size() >= 3) {
        double var = 0;
        for (double v : result->samples)
            var += (v - result->mean) * (v - result->mean);
        result->stddev = std::sqrt(var / (result->samples.size() - 1));
    }
    return 0;
}

}  // namespace bento::harness
