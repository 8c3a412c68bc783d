#include "bento/harness/upgrade_demo.hpp"

#include <algorithm>
#include <atomic>
#include <random>
#include <chrono>
#include <thread>

#include "bento/fs/bentofs.hpp"
#include "bento/fs/mkfs.hpp"
#include "bento/provenance.hpp"

namespace bento::harness {

namespace {
using bento::fs::BentoFs;
using bento::fs::BentoFsOptions;
using SteadyClock = std::chrono::steady_clock;
}  // namespace

int run_upgrade_demo(const UpgradeDemoConfig& config, UpgradeDemoResult* result,
                     std::string* error) {
    *result = UpgradeDemoResult{};
    if (config.load != "createdelete-1t" && config.load != "syncwrite-10t") {
        *error = "unknown load '" + config.load + "'";
        return EINVAL;
    }
    const unsigned nthreads = config.load == "syncwrite-10t" ? 10 : 1;

    bento::fs::MkfsGeometry g;
    g.total_blocks = 65536;  // 256 MiB
    g.inode_count = 16384;
    g.journal_len = 256;
    if (int err = bento::fs::mkfs(config.image, g)) {
        *error = "mkfs failed";
        return err;
    }
    Dispatcher dispatcher;
    auto reg = dispatcher.register_filesystem(
        {"bentofs", std::make_unique<BentoFs>(BentoFsOptions{}), false, config.image,
         ""});
    if (reg.err) {
        *error = "mount failed";
        return reg.err;
    }
    Connection& conn = *reg.conn;
    auto call = [&](uint32_t pid, FsArgs args) {
        return dispatcher.dispatch(conn,
                                   FsRequest{conn.make_context(0, 0, pid),
                                             std::move(args)});
    };

    // Setup: the initial population, per-thread targets, and one marker file
    // whose pre-upgrade handle must stay readable.
    std::vector<uint64_t> write_inos(nthreads), write_fhs(nthreads);
    if (config.load == "syncwrite-10t") {
        std::vector<uint8_t> mb(1 << 20, 0x44);
        for (unsigned t = 0; t < nthreads; t++) {
            auto r = call(1, CreateArgs{1, "w" + std::to_string(t), 0644, kOpenReadWrite});
            if (reply_errno(r)) {
                *error = "setup failed";
                return EIO;
            }
            auto c = std::get<ReplyCreated>(r);
            write_inos[t] = c.entry.ino;
            write_fhs[t] = c.open.fh;
            if (reply_errno(call(1, WriteArgs{c.entry.ino, c.open.fh, 0, mb, 0})) ||
                reply_errno(call(1, FsyncArgs{c.entry.ino, c.open.fh, false}))) {
                *error = "setup failed";
                return EIO;
            }
        }
    } else {
        for (int i = 0; i < 4000; i++) {
            auto r = call(1, CreateArgs{1, "pre" + std::to_string(i), 0644, 0});
            if (reply_errno(r)) {
                *error = "setup failed";
                return EIO;
            }
        }
    }
    auto marker = call(1, CreateArgs{1, "marker", 0644, kOpenReadWrite});
    if (reply_errno(marker)) {
        *error = "setup failed";
        return EIO;
    }
    auto mk = std::get<ReplyCreated>(marker);
    std::vector<uint8_t> marker_bytes(4096, 0x7E);
    if (reply_errno(call(1, WriteArgs{mk.entry.ino, mk.open.fh, 0, marker_bytes, 0})) ||
        reply_errno(call(1, FsyncArgs{mk.entry.ino, mk.open.fh, false}))) {
        *error = "setup failed";
        return EIO;
    }

    {
        auto* fs = dynamic_cast<BentoFs*>(&*UpgradeAccess::instance(conn));
        result->journal_seq_before = fs && fs->journal() ? fs->journal()->sequence() : 0;
    }

    // Load phase.
    std::atomic<bool> stop{false};
    std::atomic<uint64_t> failed{0};
    std::vector<std::vector<double>> completions(nthreads);  // ms since t0
    std::vector<std::vector<std::pair<double, std::string>>> name_log(nthreads);
    auto t0 = SteadyClock::now();
    auto since_t0 = [&] {
        return std::chrono::duration<double, std::milli>(SteadyClock::now() - t0).count();
    };
    std::vector<std::thread> workers;
    for (unsigned t = 0; t < nthreads; t++) {
        workers.emplace_back([&, t] {
            std::mt19937_64 rng(config.seed + t);
            std::vector<uint8_t> chunk(64 * 1024, (uint8_t)t);
            uint64_t i = 0;
            while (!stop.load(std::memory_order_relaxed)) {
                if (config.load == "createdelete-1t") {
                    std::string name = "f" + std::to_string(t) + "_" + std::to_string(i++);
                    auto r = call(100 + t, CreateArgs{1, name, 0644, 0});
                    if (reply_errno(r)) {
                        failed.fetch_add(1);
                    } else {
                        auto c = std::get<ReplyCreated>(r);
                        if (reply_errno(call(100 + t, ReleaseArgs{c.entry.ino, c.open.fh,
                                                                  0, 0, false})))
                            failed.fetch_add(1);
                        completions[t].push_back(since_t0());
                    }
                    double done_at = since_t0();
                    completions[t].push_back(done_at);
                    name_log[t].push_back({done_at, name});
                    auto u = call(100 + t, UnlinkArgs{1, name});
                    if (reply_errno(u))
                        failed.fetch_add(1);
                    completions[t].push_back(since_t0());
                } else {
                    uint64_t off = (rng() % 16) * 64 * 1024;
                    if (reply_errno(call(100 + t, WriteArgs{write_inos[t], write_fhs[t],
                                                            off, chunk, 0})) ||
                        reply_errno(call(100 + t, FsyncArgs{write_inos[t], write_fhs[t],
                                                            false})))
                        failed.fetch_add(1);
                    completions[t].push_back(since_t0());
                }
            }
        });
    }

    double upgrade_begin_ms = -1, upgrade_end_ms = -1;
    if (config.at_ms < config.duration_ms) {
        std::this_thread::sleep_for(std::chrono::milliseconds(config.at_ms));
        BentoFsOptions opts;
        auto up = dispatcher.register_filesystem(
            {"bentofs", std::make_unique<bento::prov::BentoProvFs>(opts), true,
             config.image, ""});
        if (up.err == 0 && up.ticket) {
            upgrade_begin_ms = since_t0();
            result->report = perform_upgrade(std::move(*up.ticket));
            upgrade_end_ms = since_t0();
            result->upgraded = result->report.success;
        }
    }
    auto remaining = std::chrono::milliseconds(config.duration_ms) -
                     (SteadyClock::now() - t0);
    if (remaining.count() > 0)
        std::this_thread::sleep_for(remaining);
    stop.store(true);
    for (auto& w : workers)
        w.join();

    {
        auto* fs = dynamic_cast<BentoFs*>(&*UpgradeAccess::instance(conn));
        result->journal_seq_after = fs && fs->journal() ? fs->journal()->sequence() : 0;
    }

    // Handle continuity across the swap.
    auto rd = call(1, ReadArgs{mk.entry.ino, mk.open.fh, 0, 4096});
    result->pre_open_handle_ok = !reply_errno(rd) &&
                                 std::get<ReplyData>(rd).bytes == marker_bytes;
    call(1, ReleaseArgs{mk.entry.ino, mk.open.fh, 0, 0, false});
    for (unsigned t = 0; t < nthreads && config.load == "syncwrite-10t"; t++)
        call(1, ReleaseArgs{write_inos[t], write_fhs[t], 0, 0, false});

    for (auto& per : completions) {
        result->ops_total += per.size();
        for (double ms : per) {
            size_t b = (size_t)(ms / config.bucket_ms);
            if (result->buckets.size() <= b)
                result->buckets.resize(b + 1, 0);
            result->buckets[b]++;
        }
    }
    result->ops_failed = failed.load();

    dispatcher.unregister_filesystem(conn);

    // Provenance log contents: records must only name operations that
    // completed after the exclusive section began.
    {
        std::vector<uint8_t> bytes;
        if (bento::prov::prov_read_log_image(config.image, &bytes) == 0) {
            std::vector<bento::prov::ProvRecord> recs;
            if (bento::prov::prov_parse(bytes, &recs, nullptr) == 0) {
                result->prov_records = recs.size();
                std::set<std::string> pre_swap_names;
                for (unsigned t = 0; t < nthreads; t++)
                    for (auto& [ms, name] : name_log[t])
                        if (upgrade_begin_ms >= 0 && ms < upgrade_begin_ms)
                            pre_swap_names.insert(name);
                for (auto& r : recs)
                    if (pre_swap_names.count(r.name))
                        result->prov_pre_swap_records++;
            }
        }
    }

    // Gap analysis: buckets fully inside the run, excluding edges.
    size_t nbuckets = config.duration_ms / config.bucket_ms;
    if (result->buckets.size() < nbuckets)
        result->buckets.resize(nbuckets, 0);
    size_t lo = 1, hi = nbuckets > 1 ? nbuckets - 1 : nbuckets;

    size_t up_begin_bucket = 0, up_end_bucket = 0;
    if (upgrade_begin_ms >= 0) {
        result->upgrade_bucket = (size_t)(upgrade_begin_ms / config.bucket_ms);
        result->exclusive_window_ms = upgrade_end_ms - upgrade_begin_ms;
        up_begin_bucket = (size_t)(upgrade_begin_ms / config.bucket_ms);
        up_end_bucket = (size_t)(upgrade_end_ms / config.bucket_ms) + 1;
        for (auto& per : completions)
            for (double ms : per)
                if (ms >= upgrade_begin_ms && ms < upgrade_end_ms)
                    result->ops_in_exclusive_window++;
        // The exclusive section blocks every worker, so at most the in-flight
        // stragglers complete inside it: a throughput gap at the upgrade.
        if (result->ops_in_exclusive_window <= nthreads)
            result->gaps.push_back({up_begin_bucket, up_end_bucket, true});
    }
    // Sustained zero-throughput runs elsewhere (2+ buckets = 10 ms).
    for (size_t i = lo; i < hi;) {
        if (result->buckets[i] == 0) {
            size_t j = i;
            while (j < hi && result->buckets[j] == 0)
                j++;
            bool overlaps_upgrade = upgrade_begin_ms >= 0 && i < up_end_bucket &&
                                    j > up_begin_bucket;
            if (j - i >= 2 && !overlaps_upgrade)
                result->gaps.push_back({i, j, false});
            i = j;
        } else {
            i++;
        }
    }
    result->single_gap_at_upgrade =
        result->gaps.size() == 1 && result->gaps[0].is_upgrade;
    return 0;
}

}  // namespace bento::harness
