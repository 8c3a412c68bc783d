#include "bento/blockdev.hpp"

#include <array>
#include <atomic>
#include <random>
#include <thread>

#include "bento/harness/crash_sim.hpp"
#include "catch_amalgamated.hpp"
#include "test_util.hpp"

using namespace bento;
using bento::testutil::TempImage;
using bento::testutil::pattern_block;

namespace {

std::shared_ptr<BlockDevice> open_or_die(const std::string& path, uint32_t bs = 4096,
                                         size_t capacity = 1024) {
    std::shared_ptr<BlockDevice> dev;
    REQUIRE(BlockDevice::open(path, bs, &dev, capacity) == 0);
    return dev;
}

size_t count_writes(const std::vector<TraceEvent>& evs) {
    size_t n = 0;
    for (auto& e : evs)
        if (e.kind == TraceEvent::kWrite)
            n++;
    return n;
}

}  // namespace

TEST_CASE("open computes block count from image length") {
    TempImage img(4 * 1024 * 1024);
    auto dev = open_or_die(img.path());
    CHECK(dev->block_count() == 1024);
    CHECK(dev->block_size() == 4096);
}

TEST_CASE("open rejects images that are not a block multiple") {
    TempImage img(4097);
    std::shared_ptr<BlockDevice> dev;
    CHECK(BlockDevice::open(img.path(), 4096, &dev) == kErrBadImage);
}

TEST_CASE("bread bounds check is exclusive of block_count") {
    TempImage img(16 * 4096);
    auto dev = open_or_die(img.path());
    BufferHead bh;
    CHECK(dev->bread(16, &bh) == kErrOutOfRange);
    CHECK(dev->bread(15, &bh) == 0);
}

TEST_CASE("never-written blocks read as zero") {
    TempImage img(16 * 4096);
    auto dev = open_or_die(img.path());
    BufferHead bh;
    REQUIRE(dev->bread(3, &bh) == 0);
    for (uint8_t b : bh.data())
        REQUIRE(b == 0);
}

TEST_CASE("getblk + sync round-trips through the image across reopen") {
    TempImage img(16 * 4096);
    auto fill = pattern_block(4096, 7);
    {
        auto dev = open_or_die(img.path());
        BufferHead bh;
        REQUIRE(dev->getblk(7, &bh) == 0);
        std::copy(fill.begin(), fill.end(), bh.data_mut().begin());
        bh.mark_dirty();
        REQUIRE(bh.sync_dirty_buffer() == 0);
    }
    auto dev = open_or_die(img.path());
    BufferHead bh;
    REQUIRE(dev->bread(7, &bh) == 0);
    CHECK(std::equal(fill.begin(), fill.end(), bh.data().begin()));
}

TEST_CASE("written blocks are served from cache without image reads") {
    TempImage img(16 * 4096);
    auto dev = open_or_die(img.path());
    {
        BufferHead bh;
        REQUIRE(dev->getblk(5, &bh) == 0);
        std::fill(bh.data_mut().begin(), bh.data_mut().end(), 0xAB);
        bh.mark_dirty();
    }
    uint64_t reads_before = dev->image_reads();
    BufferHead bh;
    REQUIRE(dev->bread(5, &bh) == 0);
    CHECK(dev->image_reads() == reads_before);
    CHECK(bh.data()[0] == 0xAB);
    CHECK(bh.data()[4095] == 0xAB);
}

TEST_CASE("second writable lease blocks until the first ends") {
    TempImage img(16 * 4096);
    auto dev = open_or_die(img.path());
    BufferHead first;
    REQUIRE(dev->getblk(3, &first) == 0);

    std::atomic<bool> acquired{false};
    std::thread t([&] {
        BufferHead second;
        REQUIRE(dev->getblk(3, &second) == 0);
        acquired.store(true);
    });
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
    CHECK_FALSE(acquired.load());
    first.release();
    t.join();
    CHECK(acquired.load());
}

TEST_CASE("clean buffers are not written back") {
    TempImage img(16 * 4096);
    auto dev = open_or_die(img.path());
    dev->trace().start(false);
    {
        BufferHead bh;
        REQUIRE(dev->getblk(4, &bh) == 0);
        // no modification, no mark_dirty
    }
    REQUIRE(dev->sync_all() == 0);
    auto evs = dev->trace().events();
    CHECK(count_writes(evs) == 0);
}

TEST_CASE("sync_dirty_buffer records WriteBlock then Flush") {
    TempImage img(16 * 4096);
    auto dev = open_or_die(img.path());
    dev->trace().start(false);
    BufferHead bh;
    REQUIRE(dev->getblk(9, &bh) == 0);
    std::fill(bh.data_mut().begin(), bh.data_mut().end(), 0x5A);
    bh.mark_dirty();
    REQUIRE(bh.sync_dirty_buffer() == 0);
    auto evs = dev->trace().events();
    REQUIRE(evs.size() == 2);
    CHECK(evs[0].kind == TraceEvent::kWrite);
    CHECK(evs[0].blockno == 9);
    CHECK(evs[1].kind == TraceEvent::kFlush);

    // Syncing the now-clean buffer adds nothing.
    REQUIRE(bh.sync_dirty_buffer() == 0);
    CHECK(dev->trace().events().size() == 2);
}

TEST_CASE("sync_all writes dirty blocks in ascending order with one flush") {
    TempImage img(16 * 4096);
    auto dev = open_or_die(img.path());

    SECTION("no dirty blocks: single flush") {
        dev->trace().start(false);
        REQUIRE(dev->sync_all() == 0);
        auto evs = dev->trace().events();
        REQUIRE(evs.size() == 1);
        CHECK(evs[0].kind == TraceEvent::kFlush);
    }

    SECTION("dirty 8,2,5 flush as 2,5,8 then F; second sync flushes only") {
        for (uint64_t b : {8, 2, 5}) {
            BufferHead bh;
            REQUIRE(dev->getblk(b, &bh) == 0);
            bh.data_mut()[0] = (uint8_t)b;
            bh.mark_dirty();
        }
        dev->trace().start(false);
        REQUIRE(dev->sync_all() == 0);
        auto evs = dev->trace().events();
        REQUIRE(evs.size() == 4);
        CHECK(evs[0].blockno == 2);
        CHECK(evs[1].blockno == 5);
        CHECK(evs[2].blockno == 8);
        CHECK(evs[3].kind == TraceEvent::kFlush);

        REQUIRE(dev->sync_all() == 0);
        auto evs2 = dev->trace().events();
        REQUIRE(evs2.size() == 5);
        CHECK(evs2[4].kind == TraceEvent::kFlush);
    }
}

TEST_CASE("release is idempotent and dirty data stays cached until synced") {
    TempImage img(16 * 4096);
    auto dev = open_or_die(img.path());
    dev->trace().start(false);
    BufferHead bh;
    REQUIRE(dev->getblk(6, &bh) == 0);
    std::fill(bh.data_mut().begin(), bh.data_mut().end(), 0xEE);
    bh.mark_dirty();
    bh.release();
    bh.release();  // second release is a no-op
    CHECK(count_writes(dev->trace().events()) == 0);

    BufferHead rb;
    REQUIRE(dev->bread(6, &rb) == 0);
    CHECK(rb.data()[100] == 0xEE);
}

TEST_CASE("read leases end and the entry becomes evictable") {
    TempImage img(64 * 4096);
    auto dev = open_or_die(img.path(), 4096, 2);  // capacity 2
    {
        std::vector<BufferHead> leases(5);
        for (auto& l : leases)
            REQUIRE(dev->bread(10, &l) == 0);
        for (auto& l : leases)
            l.release();
    }
    uint64_t reads_before = dev->image_reads();
    // Touch two other blocks; capacity 2 forces block 10 out.
    for (uint64_t b : {11, 12}) {
        BufferHead bh;
        REQUIRE(dev->bread(b, &bh) == 0);
    }
    BufferHead bh;
    REQUIRE(dev->bread(10, &bh) == 0);
    CHECK(dev->image_reads() > reads_before + 1);  // 11, 12, and 10 again
}

TEST_CASE("eviction flushes dirty victims before dropping them") {
    TempImage img(64 * 4096);
    auto dev = open_or_die(img.path(), 4096, 2);
    dev->trace().start(false);
    {
        BufferHead bh;
        REQUIRE(dev->getblk(1, &bh) == 0);
        bh.data_mut()[0] = 0x11;
        bh.mark_dirty();
    }
    for (uint64_t b : {2, 3}) {
        BufferHead bh;
        REQUIRE(dev->getblk(b, &bh) == 0);
        bh.data_mut()[0] = (uint8_t)b;
        bh.mark_dirty();
    }
    // Block 1 must have been written out before eviction; re-reading it gives
    // back the dirty bytes.
    bool saw_write_1 = false;
    for (auto& ev : dev->trace().events())
        if (ev.kind == TraceEvent::kWrite && ev.blockno == 1)
            saw_write_1 = true;
    CHECK(saw_write_1);
    BufferHead bh;
    REQUIRE(dev->bread(1, &bh) == 0);
    CHECK(bh.data()[0] == 0x11);
}

TEST_CASE("freeze records trace events but suppresses image mutation") {
    TempImage img(16 * 4096);
    auto dev = open_or_die(img.path());
    dev->trace().start(false);
    dev->freeze_image();
    BufferHead bh;
    REQUIRE(dev->getblk(2, &bh) == 0);
    std::fill(bh.data_mut().begin(), bh.data_mut().end(), 0x77);
    bh.mark_dirty();
    REQUIRE(bh.sync_dirty_buffer() == 0);
    CHECK(dev->trace().events().size() == 2);
    bh.release();

    auto fresh = open_or_die(img.path());
    BufferHead check;
    REQUIRE(fresh->bread(2, &check) == 0);
    CHECK(check.data()[0] == 0);  // image untouched
}

TEST_CASE("durability: sync_all makes reopened reads byte-identical") {
    TempImage img(128 * 4096);
    std::mt19937_64 rng(42);
    std::vector<std::vector<uint8_t>> expected(128, std::vector<uint8_t>(4096, 0));
    {
        auto dev = open_or_die(img.path());
        for (int i = 0; i < 200; i++) {
            uint64_t b = rng() % 128;
            uint8_t v = (uint8_t)rng();
            BufferHead bh;
            REQUIRE(dev->getblk(b, &bh) == 0);
            auto out = bh.data_mut();
            for (size_t j = 0; j < out.size(); j++)
                out[j] = (uint8_t)(v + j);
            bh.mark_dirty();
            auto& exp = expected[b];
            for (size_t j = 0; j < exp.size(); j++)
                exp[j] = (uint8_t)(v + j);
        }
        REQUIRE(dev->sync_all() == 0);
    }
    auto dev = open_or_die(img.path());
    for (uint64_t b = 0; b < 128; b++) {
        BufferHead bh;
        REQUIRE(dev->bread(b, &bh) == 0);
        REQUIRE(std::equal(expected[b].begin(), expected[b].end(), bh.data().begin()));
    }
}

TEST_CASE("concurrent lease stress never observes two live writable leases") {
    TempImage img(32 * 4096);
    auto dev = open_or_die(img.path(), 4096, 8);
    constexpr int kThreads = 8;
    constexpr int kIters = 400;
    std::array<std::atomic<int>, 32> writers{};
    std::atomic<bool> violation{false};

    std::vector<std::thread> ts;
    for (int t = 0; t < kThreads; t++) {
        ts.emplace_back([&, t] {
            std::mt19937_64 rng(t * 977 + 1);
            for (int i = 0; i < kIters; i++) {
                uint64_t b = rng() % 32;
                if (rng() & 1) {
                    BufferHead bh;
                    if (dev->getblk(b, &bh) != 0)
                        continue;
                    if (writers[b].fetch_add(1) != 0)
                        violation.store(true);
                    bh.data_mut()[0]++;
                    bh.mark_dirty();
                    std::this_thread::yield();
                    writers[b].fetch_sub(1);
                } else {
                    BufferHead bh;
                    if (dev->bread(b, &bh) != 0)
                        continue;
                    if (writers[b].load() != 0)
                        violation.store(true);
                }
            }
        });
    }
    for (auto& t : ts)
        t.join();
    CHECK_FALSE(violation.load());
}

TEST_CASE("trace replay reproduces the final image (trace completeness)") {
    TempImage img(64 * 4096);
    TempImage base(0, "base");
    TempImage rebuilt(0, "rebuilt");
    std::filesystem::copy_file(img.path(), base.path(),
                               std::filesystem::copy_options::overwrite_existing);

    auto dev = open_or_die(img.path(), 4096, 4);
    dev->trace().start(true);
    std::mt19937_64 rng(99);
    for (int i = 0; i < 120; i++) {
        uint64_t b = rng() % 64;
        BufferHead bh;
        REQUIRE(dev->getblk(b, &bh) == 0);
        bh.data_mut()[i % 4096] = (uint8_t)rng();
        bh.mark_dirty();
    }
    REQUIRE(dev->sync_all() == 0);
    auto evs = dev->trace().events();

    // Apply every traced write to the pristine base; images must match.
    namespace h = bento::harness;
    h::CrashState full;
    full.full_groups = h::flush_groups(evs).size();
    REQUIRE(h::materialize_crash_state(base.path(), rebuilt.path(), evs, full, 4096) == 0);
    CHECK(h::file_digest(rebuilt.path()) == h::file_digest(img.path()));
}
