#include "bento/journal.hpp"

#include <random>
#include <thread>

#include "bento/harness/crash_sim.hpp"
#include "catch_amalgamated.hpp"
#include "test_util.hpp"

using namespace bento;
using bento::testutil::TempImage;
using bento::testutil::pattern_block;

namespace {

constexpr uint32_t kBs = 4096;
constexpr uint32_t kJStart = 2;
constexpr uint32_t kJLen = 64;

std::shared_ptr<BlockDevice> open_dev(const std::string& path) {
    std::shared_ptr<BlockDevice> dev;
    REQUIRE(BlockDevice::open(path, kBs, &dev) == 0);
    return dev;
}

// Journals `blocks` in one transaction: getblk, fill, capture, end.
void run_txn(BlockDevice& dev, Journal& j,
             const std::vector<std::pair<uint64_t, uint8_t>>& blocks) {
    TransactionHandle h;
    REQUIRE(j.begin_op((uint32_t)blocks.size(), &h) == 0);
    for (auto [blockno, seed] : blocks) {
        BufferHead bh;
        REQUIRE(dev.getblk(blockno, &bh) == 0);
        auto fill = pattern_block(kBs, seed);
        std::copy(fill.begin(), fill.end(), bh.data_mut().begin());
        REQUIRE(j.write_block(&h, bh) == 0);
    }
    j.end_op(&h);
}

// Builds one committed record set by hand at `cursor`, returning the next
// free slot. Used to validate recovery against the on-disk format directly.
uint32_t hand_build_txn(BlockDevice& dev, uint32_t cursor, uint32_t seq,
                        const std::vector<std::pair<uint32_t, uint8_t>>& targets,
                        bool write_commit) {
    std::vector<uint8_t> desc(kBs, 0);
    put_u32(desc.data(), kJournalMagic);
    put_u32(desc.data() + 4, seq);
    put_u32(desc.data() + 8, (uint32_t)targets.size());
    for (size_t i = 0; i < targets.size(); i++)
        put_u32(desc.data() + 12 + 4 * i, targets[i].first);
    REQUIRE(dev.write_block_direct(cursor, desc) == 0);

    uint32_t checksum = fnv1a32(desc);
    for (size_t i = 0; i < targets.size(); i++) {
        auto data = pattern_block(kBs, targets[i].second);
        checksum = fnv1a32(data, checksum);
        REQUIRE(dev.write_block_direct(cursor + 1 + (uint32_t)i, data) == 0);
    }
    if (write_commit) {
        std::vector<uint8_t> commit(kBs, 0);
        put_u32(commit.data(), kJournalMagic);
        put_u32(commit.data() + 4, seq);
        put_u32(commit.data() + kBs - 4, checksum);
        REQUIRE(dev.write_block_direct(cursor + 1 + (uint32_t)targets.size(), commit) == 0);
    }
    return cursor + 2 + (uint32_t)targets.size();
}

std::vector<uint8_t> read_raw(BlockDevice& dev, uint64_t blockno) {
    std::vector<uint8_t> buf(kBs);
    REQUIRE(dev.read_block_direct(blockno, buf) == 0);
    return buf;
}

}  // namespace

TEST_CASE("fresh region starts at sequence 1") {
    TempImage img(128 * kBs);
    auto dev = open_dev(img.path());
    std::shared_ptr<Journal> j;
    uint64_t applied = 99;
    REQUIRE(Journal::open(dev, kJStart, kJLen, &j, &applied) == 0);
    CHECK(applied == 0);
    CHECK(j->sequence() == 1);
}

TEST_CASE("region shorter than the minimum is rejected") {
    TempImage img(128 * kBs);
    auto dev = open_dev(img.path());
    std::shared_ptr<Journal> j;
    CHECK(Journal::open(dev, kJStart, 4, &j) == kErrRegionTooSmall);
}

TEST_CASE("recovery applies a hand-built committed record") {
    TempImage img(128 * kBs);
    auto dev = open_dev(img.path());
    hand_build_txn(*dev, kJStart, 1, {{112, 0x3C}}, true);

    std::shared_ptr<Journal> j;
    uint64_t applied = 0;
    REQUIRE(Journal::open(dev, kJStart, kJLen, &j, &applied) == 0);
    CHECK(applied == 1);
    CHECK(j->sequence() == 2);  // persists across recovery
    CHECK(read_raw(*dev, 112) == pattern_block(kBs, 0x3C));
}

TEST_CASE("recovery stops at the first record without a valid commit") {
    TempImage img(128 * kBs);
    auto dev = open_dev(img.path());
    uint32_t cursor = hand_build_txn(*dev, kJStart, 5, {{120, 0xA0}, {121, 0xA1}}, true);
    hand_build_txn(*dev, cursor, 6, {{122, 0xA2}}, /*write_commit=*/false);

    uint64_t applied = 0, next_seq = 0;
    REQUIRE(Journal::recover_region(*dev, kJStart, kJLen, &applied, &next_seq) == 0);
    CHECK(applied == 1);
    CHECK(next_seq == 6);
    CHECK(read_raw(*dev, 120) == pattern_block(kBs, 0xA0));
    CHECK(read_raw(*dev, 121) == pattern_block(kBs, 0xA1));
    CHECK(read_raw(*dev, 122) == std::vector<uint8_t>(kBs, 0));
}

TEST_CASE("recovery is idempotent") {
    TempImage img(128 * kBs);
    auto dev = open_dev(img.path());
    hand_build_txn(*dev, kJStart, 3, {{123, 0x55}, {124, 0x66}}, true);
    uint64_t applied = 0;
    REQUIRE(Journal::recover_region(*dev, kJStart, kJLen, &applied, nullptr) == 0);
    CHECK(applied == 1);
    uint64_t digest1 = bento::harness::file_digest(img.path());
    REQUIRE(Journal::recover_region(*dev, kJStart, kJLen, &applied, nullptr) == 0);
    CHECK(applied == 0);
    CHECK(bento::harness::file_digest(img.path()) == digest1);
}

TEST_CASE("oversized credit requests are rejected up front") {
    TempImage img(128 * kBs);
    auto dev = open_dev(img.path());
    std::shared_ptr<Journal> j;
    REQUIRE(Journal::open(dev, kJStart, kJLen, &j) == 0);
    TransactionHandle h;
    CHECK(j->begin_op(1000000, &h) == kErrCreditsExceedJournal);
    CHECK(j->begin_op(3, &h) == 0);
    j->end_op(&h);
}

TEST_CASE("capturing beyond the reservation is a credit overflow") {
    TempImage img(128 * kBs);
    auto dev = open_dev(img.path());
    std::shared_ptr<Journal> j;
    REQUIRE(Journal::open(dev, kJStart, kJLen, &j) == 0);
    TransactionHandle h;
    REQUIRE(j->begin_op(2, &h) == 0);
    for (uint64_t b = 70; b < 72; b++) {
        BufferHead bh;
        REQUIRE(dev->getblk(b, &bh) == 0);
        bh.data_mut()[0] = 1;
        REQUIRE(j->write_block(&h, bh) == 0);
    }
    BufferHead bh;
    REQUIRE(dev->getblk(72, &bh) == 0);
    CHECK(j->write_block(&h, bh) == kErrCreditOverflow);
    j->end_op(&h);
    CHECK(j->write_block(&h, bh) == kErrHandleClosed);
}

TEST_CASE("capturing one block twice consumes one credit, latest bytes win") {
    TempImage img(128 * kBs);
    auto dev = open_dev(img.path());
    std::shared_ptr<Journal> j;
    REQUIRE(Journal::open(dev, kJStart, kJLen, &j) == 0);
    TransactionHandle h;
    REQUIRE(j->begin_op(2, &h) == 0);
    {
        BufferHead bh;
        REQUIRE(dev->getblk(80, &bh) == 0);
        auto v1 = pattern_block(kBs, 0x01);
        std::copy(v1.begin(), v1.end(), bh.data_mut().begin());
        REQUIRE(j->write_block(&h, bh) == 0);
        auto v2 = pattern_block(kBs, 0x02);
        std::copy(v2.begin(), v2.end(), bh.data_mut().begin());
        REQUIRE(j->write_block(&h, bh) == 0);
    }
    CHECK(h.used() == 1);
    j->end_op(&h);
    j->force_commit();
    CHECK(read_raw(*dev, 80) == pattern_block(kBs, 0x02));
}

TEST_CASE("commit applies captured bytes in place") {
    TempImage img(128 * kBs);
    auto dev = open_dev(img.path());
    std::shared_ptr<Journal> j;
    REQUIRE(Journal::open(dev, kJStart, kJLen, &j) == 0);
    run_txn(*dev, *j, {{100, 0x42}});
    uint64_t seq = j->force_commit();
    CHECK(seq == 1);
    CHECK(read_raw(*dev, 100) == pattern_block(kBs, 0x42));

    // The journal region holds the commit record for that sequence.
    auto desc = read_raw(*dev, kJStart);
    CHECK(get_u32(desc.data()) == kJournalMagic);
    CHECK(get_u32(desc.data() + 4) == 1);
    auto commit = read_raw(*dev, kJStart + 2);
    CHECK(get_u32(commit.data()) == kJournalMagic);
}

TEST_CASE("a transaction with no captures emits no records") {
    TempImage img(128 * kBs);
    auto dev = open_dev(img.path());
    std::shared_ptr<Journal> j;
    REQUIRE(Journal::open(dev, kJStart, kJLen, &j) == 0);
    TransactionHandle h;
    REQUIRE(j->begin_op(4, &h) == 0);
    j->end_op(&h);
    CHECK(j->force_commit() == 0);  // nothing pending, sequence unchanged
    CHECK(j->sequence() == 1);
    CHECK(read_raw(*dev, kJStart) == std::vector<uint8_t>(kBs, 0));
}

TEST_CASE("force_commit with no pending work returns the last sequence") {
    TempImage img(128 * kBs);
    auto dev = open_dev(img.path());
    std::shared_ptr<Journal> j;
    REQUIRE(Journal::open(dev, kJStart, kJLen, &j) == 0);
    CHECK(j->force_commit() == 0);
    run_txn(*dev, *j, {{101, 0x10}});
    CHECK(j->force_commit() == 1);
    CHECK(j->force_commit() == 1);
}

TEST_CASE("40 concurrent operations on a 256-block journal make progress") {
    TempImage img(512 * kBs);
    auto dev = open_dev(img.path());
    std::shared_ptr<Journal> j;
    REQUIRE(Journal::open(dev, 2, 256, &j) == 0);
    std::vector<std::thread> ts;
    std::atomic<int> failures{0};
    for (int t = 0; t < 40; t++) {
        ts.emplace_back([&, t] {
            for (int i = 0; i < 25; i++) {
                TransactionHandle h;
                if (j->begin_op(2, &h) != 0) {
                    failures.fetch_add(1);
                    return;
                }
                BufferHead bh;
                uint64_t blockno = 300 + (t * 25 + i) % 200;
                if (dev->getblk(blockno, &bh) != 0) {
                    failures.fetch_add(1);
                    j->end_op(&h);
                    return;
                }
                bh.data_mut()[0] = (uint8_t)t;
                if (j->write_block(&h, bh) != 0)
                    failures.fetch_add(1);
                bh.release();
                j->end_op(&h);
            }
        });
    }
    for (auto& t : ts)
        t.join();
    CHECK(failures.load() == 0);
    j->force_commit();
}

TEST_CASE("commit ordering: flush separates descriptor+data from commit block") {
    TempImage img(128 * kBs);
    auto dev = open_dev(img.path());
    std::shared_ptr<Journal> j;
    REQUIRE(Journal::open(dev, kJStart, kJLen, &j) == 0);
    dev->trace().start(false);
    run_txn(*dev, *j, {{90, 0x11}, {91, 0x12}});
    j->force_commit();
    auto evs = dev->trace().events();

    // Locate the commit-block write (kJStart + 1 + count).
    size_t commit_idx = SIZE_MAX, desc_idx = SIZE_MAX, first_inplace = SIZE_MAX;
    for (size_t i = 0; i < evs.size(); i++) {
        if (evs[i].kind != TraceEvent::kWrite)
            continue;
        if (evs[i].blockno == kJStart)
            desc_idx = i;
        if (evs[i].blockno == kJStart + 3)
            commit_idx = i;
        if ((evs[i].blockno == 90 || evs[i].blockno == 91) && first_inplace == SIZE_MAX)
            first_inplace = i;
    }
    REQUIRE(desc_idx != SIZE_MAX);
    REQUIRE(commit_idx != SIZE_MAX);
    REQUIRE(first_inplace != SIZE_MAX);
    auto flush_between = [&](size_t a, size_t b) {
        for (size_t i = a; i < b; i++)
            if (evs[i].kind == TraceEvent::kFlush)
                return true;
        return false;
    };
    CHECK(desc_idx < commit_idx);
    CHECK(commit_idx < first_inplace);
    CHECK(flush_between(desc_idx, commit_idx));
    CHECK(flush_between(commit_idx, first_inplace));
}

TEST_CASE("crash-state replay: transactions are atomic at every flush boundary") {
    // Brute-force oracle: run a few transactions with tracing on, rebuild
    // every flush-prefix state, recover it, and require each transaction's
    // targets to be either all old (zero) or all new.
    TempImage img(128 * kBs);
    TempImage base(0, "jbase");
    TempImage state(0, "jstate");
    std::filesystem::copy_file(img.path(), base.path(),
                               std::filesystem::copy_options::overwrite_existing);

    std::vector<std::vector<std::pair<uint64_t, uint8_t>>> txns = {
        {{100, 0x21}, {101, 0x22}, {102, 0x23}},
        {{103, 0x24}, {100, 0x25}},
        {{104, 0x26}, {105, 0x27}, {106, 0x28}},
    };

    std::vector<TraceEvent> evs;
    {
        auto dev = open_dev(img.path());
        std::shared_ptr<Journal> j;
        REQUIRE(Journal::open(dev, kJStart, kJLen, &j) == 0);
        dev->trace().start(true);
        for (auto& txn : txns) {
            run_txn(*dev, *j, txn);
            j->force_commit();
        }
        evs = dev->trace().events();
    }

    namespace h = bento::harness;
    auto states = h::enumerate_crash_states(evs, 2, 1234);
    REQUIRE(!states.empty());
    for (const auto& st : states) {
        REQUIRE(h::materialize_crash_state(base.path(), state.path(), evs, st, kBs) == 0);
        std::shared_ptr<BlockDevice> dev;
        REQUIRE(BlockDevice::open(state.path(), kBs, &dev) == 0);
        REQUIRE(Journal::recover_region(*dev, kJStart, kJLen, nullptr, nullptr) == 0);
        // Commits are strictly ordered, so the recovered state must equal
        // "the first k transactions applied" for some k. Later transactions
        // may overwrite earlier ones' blocks (100 is in txn 0 and 1), so
        // compare whole expected images per prefix.
        std::set<uint64_t> touched;
        for (auto& txn : txns)
            for (auto [blockno, seed] : txn)
                touched.insert(blockno);
        bool matched = false;
        for (size_t k = 0; k <= txns.size() && !matched; k++) {
            std::map<uint64_t, std::vector<uint8_t>> want;
            for (uint64_t b : touched)
                want[b] = std::vector<uint8_t>(kBs, 0);
            for (size_t t = 0; t < k; t++)
                for (auto [blockno, seed] : txns[t])
                    want[blockno] = pattern_block(kBs, seed);
            bool all = true;
            for (uint64_t b : touched)
                if (read_raw(*dev, b) != want[b]) {
                    all = false;
                    break;
                }
            matched = all;
        }
        REQUIRE(matched);
    }
}
