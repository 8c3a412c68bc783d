#include "bento/fs/bentofs.hpp"

#include <random>
#include <thread>

#include "bento/fs/fsck.hpp"
#include "bento/fs/mkfs.hpp"
#include "bento/harness/crash_sim.hpp"
#include "catch_amalgamated.hpp"
#include "fs_fixture.hpp"

using namespace bento;
using namespace bento::fs;
using bento::testutil::FsFixture;
using bento::testutil::TempImage;

namespace {
std::vector<uint8_t> patterned(size_t n, uint32_t seed) {
    std::vector<uint8_t> v(n);
    for (size_t i = 0; i < n; i++)
        v[i] = (uint8_t)(seed * 31 + i * 7);
    return v;
}
}  // namespace

TEST_CASE("mkfs is deterministic and small devices are rejected") {
    TempImage a(0, "mkfsa");
    MkfsGeometry g;
    g.total_blocks = 2048;
    g.journal_len = 64;
    REQUIRE(mkfs(a.path(), g) == 0);
    uint64_t d1 = harness::file_digest(a.path());
    REQUIRE(mkfs(a.path(), g) == 0);
    CHECK(harness::file_digest(a.path()) == d1);

    TempImage tiny(0, "mkfstiny");
    MkfsGeometry small;
    small.total_blocks = 10;
    CHECK(mkfs(tiny.path(), small) == kErrDeviceTooSmall);
}

TEST_CASE("fresh image passes fsck and mounts; zeroed image does not mount") {
    TempImage img(0, "fsck0");
    MkfsGeometry g;
    g.total_blocks = 2048;
    g.journal_len = 64;
    REQUIRE(mkfs(img.path(), g) == 0);
    FsckReport rep;
    REQUIRE(fsck_image(img.path(), &rep) == 0);
    CHECK(rep.clean());

    BentoFs fs;
    REQUIRE(fs.init(img.path(), "") == 0);
    fs.destroy();

    TempImage zero(2048 * 4096, "zeroimg");
    BentoFs fs2;
    CHECK(fs2.init(zero.path(), "") == kErrBadMagic);
}

TEST_CASE("statfs on a fresh file system matches the geometry oracle") {
    FsFixture f(1024);
    Superblock sb;
    MkfsGeometry g;
    g.total_blocks = 1024;
    g.journal_len = 64;
    REQUIRE(compute_superblock(g, &sb) == 0);

    auto s = f.statfs();
    CHECK(s.bsize == 4096u);
    CHECK(s.blocks == sb.total_blocks - sb.data_start);
    CHECK(s.bfree < 1024);  // metadata and the root directory consume blocks
    CHECK(s.bfree == s.blocks - 2);  // root index + root leaf
    CHECK(s.files == sb.inode_count - 1);
    CHECK(s.ffree == s.files - 1);  // only the root inode is allocated
}

TEST_CASE("lookup resolves dot and created names, misses otherwise") {
    FsFixture f;
    uint64_t root_self = 0;
    REQUIRE(f.lookup(1, ".", &root_self) == 0);
    CHECK(root_self == 1);
    CHECK(f.lookup(1, "missing") == ENOENT);

    auto [ino, fh] = f.create(1, "a");
    uint64_t found = 0;
    REQUIRE(f.lookup(1, "a", &found) == 0);
    CHECK(found == ino);
    f.release(ino, fh);

    auto r = f.call(LookupArgs{ino, "x"});
    CHECK(reply_errno(r) == ENOTDIR);
}

TEST_CASE("create collisions, name length limits, and inode exhaustion") {
    FsFixture f(4096, /*inode_count=*/32);
    auto [ino, fh] = f.create(1, "a");
    f.release(ino, fh);
    CHECK(reply_errno(f.call(CreateArgs{1, "a", 0644, 0})) == EEXIST);
    CHECK(reply_errno(f.call(CreateArgs{1, std::string(256, 'x'), 0644, 0})) ==
          ENAMETOOLONG);

    // 32 slots: ino 0 dead, root, reserved log inode, "a" -> 28 more fit.
    for (int i = 0; i < 28; i++) {
        auto r = f.call(CreateArgs{1, "f" + std::to_string(i), 0644, 0});
        REQUIRE(reply_errno(r) == 0);
    }
    CHECK(reply_errno(f.call(CreateArgs{1, "overflow", 0644, 0})) == ENOSPC);
}

TEST_CASE("write and read back a 5 MiB pattern through the double-indirect tree") {
    FsFixture f(8192, 0, 128);
    auto [ino, fh] = f.create(1, "big");
    auto pattern = patterned(5 * 1024 * 1024, 9);
    for (size_t off = 0; off < pattern.size(); off += 64 * 1024) {
        size_t n = std::min<size_t>(64 * 1024, pattern.size() - off);
        REQUIRE(f.write(ino, fh, off,
                        {pattern.begin() + off, pattern.begin() + off + n}) == 0);
    }
    auto attr = std::get<ReplyAttr>(f.call(GetattrArgs{ino})).attr;
    CHECK(attr.size == pattern.size());

    std::vector<uint8_t> got;
    for (size_t off = 0; off < pattern.size(); off += 128 * 1024) {
        auto chunk = f.read(ino, fh, off, 128 * 1024);
        got.insert(got.end(), chunk.begin(), chunk.end());
    }
    REQUIRE(got.size() == pattern.size());
    CHECK(got == pattern);

    SECTION("truncate to zero returns every block") {
        uint64_t bfree_before_write = f.statfs().bfree + 0;  // already allocated
        REQUIRE(f.fsync(ino, fh) == 0);
        uint64_t bfree_after_fsync = f.statfs().bfree;
        CHECK(bfree_after_fsync < bfree_before_write + 1);  // blocks held
        auto r = f.call(SetattrArgs{.ino = ino, .size = 0});
        REQUIRE(reply_errno(r) == 0);
        // 5 MiB of data plus pointer blocks came back.
        CHECK(f.statfs().bfree >= bfree_after_fsync + 1280);
        CHECK(std::get<ReplyAttr>(r).attr.size == 0);
    }
    SECTION("contents survive unmount, fsck, remount") {
        REQUIRE(f.fsync(ino, fh) == 0);
        f.release(ino, fh);
        f.remount_checked();
        uint64_t ino2 = 0;
        REQUIRE(f.lookup(1, "big", &ino2) == 0);
        CHECK(ino2 == ino);
        uint64_t fh2 = f.open(ino2, kOpenRead);
        auto head = f.read(ino2, fh2, 4 * 1024 * 1024, 4096);
        CHECK(std::equal(head.begin(), head.end(), pattern.begin() + 4 * 1024 * 1024));
    }
}

TEST_CASE("reads past EOF and holes behave") {
    FsFixture f;
    auto [ino, fh] = f.create(1, "s");
    REQUIRE(f.write(ino, fh, 1024 * 1024, patterned(16, 1)) == 0);  // sparse
    CHECK(f.read(ino, fh, 0, 4096) == std::vector<uint8_t>(4096, 0));
    auto attr = std::get<ReplyAttr>(f.call(GetattrArgs{ino})).attr;
    CHECK(attr.size == 1024 * 1024 + 16);
    CHECK(f.read(ino, fh, attr.size, 64).empty());
    CHECK(f.read(ino, fh, 4ull << 30, 64).empty());
}

TEST_CASE("writes touching the 4 GiB cap are rejected up front") {
    FsFixture f;
    auto [ino, fh] = f.create(1, "c");
    CHECK(f.write(ino, fh, 4ull << 30, patterned(16, 2)) == EFBIG);
    CHECK(f.write(ino, fh, (4ull << 30) - 8, patterned(16, 2)) == EFBIG);
    CHECK(reply_errno(f.call(SetattrArgs{.ino = ino, .size = (4ull << 30) + 1})) ==
          EFBIG);
}

TEST_CASE("unlink with open handles defers the free") {
    FsFixture f;
    auto [ino, fh] = f.create(1, "d");
    REQUIRE(f.write(ino, fh, 0, patterned(8192, 3)) == 0);
    REQUIRE(f.fsync(ino, fh) == 0);
    uint64_t bfree_held = f.statfs().bfree;

    REQUIRE(reply_errno(f.call(UnlinkArgs{1, "d"})) == 0);
    CHECK(f.lookup(1, "d") == ENOENT);
    // Old bytes stay readable through the open handle.
    auto data = f.read(ino, fh, 0, 8192);
    CHECK(data == patterned(8192, 3));
    CHECK(f.statfs().bfree == bfree_held);  // blocks still held

    REQUIRE(f.release(ino, fh) == 0);
    CHECK(f.statfs().bfree > bfree_held);  // freed at last release
    CHECK(f.release(ino, fh) == EBADF);    // double release
    f.remount_checked();
}

TEST_CASE("unlink errors: missing name, directories, rmdir of files") {
    FsFixture f;
    uint64_t d = f.mkdir(1, "dir");
    auto [ino, fh] = f.create(1, "f");
    f.release(ino, fh);
    CHECK(reply_errno(f.call(UnlinkArgs{1, "nope"})) == ENOENT);
    CHECK(reply_errno(f.call(UnlinkArgs{1, "dir"})) == EISDIR);
    CHECK(reply_errno(f.call(RmdirArgs{1, "f"})) == ENOTDIR);
    auto [i2, f2] = f.create(d, "inner");
    f.release(i2, f2);
    CHECK(reply_errno(f.call(RmdirArgs{1, "dir"})) == ENOTEMPTY);
    REQUIRE(reply_errno(f.call(UnlinkArgs{d, "inner"})) == 0);
    CHECK(reply_errno(f.call(RmdirArgs{1, "dir"})) == 0);
    f.remount_checked();
}

TEST_CASE("directory reuse after rmdir with an open handle picks a fresh inode") {
    FsFixture f;
    uint64_t old_ino = f.mkdir(1, "d");
    auto r = f.call(OpendirArgs{old_ino, 0});
    uint64_t dfh = std::get<ReplyOpen>(r).fh;

    REQUIRE(reply_errno(f.call(RmdirArgs{1, "d"})) == 0);
    uint64_t new_ino = f.mkdir(1, "d");
    CHECK(new_ino != old_ino);

    // The fresh directory is usable while the stale handle still exists.
    auto [ino, fh] = f.create(new_ino, "inside");
    f.release(ino, fh);
    uint64_t found = 0;
    REQUIRE(f.lookup(new_ino, "inside", &found) == 0);
    CHECK(found == ino);
    CHECK(reply_errno(f.call(ReleasedirArgs{old_ino, dfh, 0})) == 0);
    f.remount_checked();
}

TEST_CASE("symlink stores and returns its target") {
    FsFixture f;
    REQUIRE(reply_errno(f.call(SymlinkArgs{1, "l", "target/path"})) == 0);
    uint64_t ino = 0;
    REQUIRE(f.lookup(1, "l", &ino) == 0);
    auto r = f.call(ReadlinkArgs{ino});
    auto& bytes = std::get<ReplyData>(r).bytes;
    CHECK(std::string(bytes.begin(), bytes.end()) == "target/path");
    f.remount_checked();
}

TEST_CASE("hard links share the inode and survive one unlink") {
    FsFixture f;
    auto [ino, fh] = f.create(1, "one");
    REQUIRE(f.write(ino, fh, 0, patterned(64, 4)) == 0);
    f.release(ino, fh);
    REQUIRE(reply_errno(f.call(LinkArgs{ino, 1, "two"})) == 0);
    auto attr = std::get<ReplyAttr>(f.call(GetattrArgs{ino})).attr;
    CHECK(attr.nlink == 2);
    uint64_t d = f.mkdir(1, "dir");
    CHECK(reply_errno(f.call(LinkArgs{d, 1, "dlink"})) == EPERM);

    REQUIRE(reply_errno(f.call(UnlinkArgs{1, "one"})) == 0);
    uint64_t via_two = 0;
    REQUIRE(f.lookup(1, "two", &via_two) == 0);
    CHECK(via_two == ino);
    uint64_t fh2 = f.open(ino, kOpenRead);
    CHECK(f.read(ino, fh2, 0, 64) == patterned(64, 4));
    f.release(ino, fh2);
    f.remount_checked();
}

TEST_CASE("rename moves entries, honors no-replace, rejects cycles") {
    FsFixture f;
    uint64_t d1 = f.mkdir(1, "d1");
    uint64_t d2 = f.mkdir(1, "d2");
    auto [ino, fh] = f.create(d1, "a");
    f.release(ino, fh);

    REQUIRE(reply_errno(f.call(RenameArgs{d1, "a", d2, "b", 0})) == 0);
    CHECK(f.lookup(d1, "a") == ENOENT);
    uint64_t moved = 0;
    REQUIRE(f.lookup(d2, "b", &moved) == 0);
    CHECK(moved == ino);

    auto [other, ofh] = f.create(d2, "c");
    f.release(other, ofh);
    CHECK(reply_errno(f.call(RenameArgs{d2, "b", d2, "c", kRenameNoReplace})) == EEXIST);
    REQUIRE(reply_errno(f.call(RenameArgs{d2, "b", d2, "c", 0})) == 0);  // replaces
    CHECK(f.lookup(d2, "b") == ENOENT);
    uint64_t now_c = 0;
    REQUIRE(f.lookup(d2, "c", &now_c) == 0);
    CHECK(now_c == ino);

    // Directory move updates ".." and link counts; cycles are rejected.
    uint64_t inner = f.mkdir(d1, "inner");
    CHECK(reply_errno(f.call(RenameArgs{d1, "inner", inner, "oops", 0})) == EINVAL);
    uint64_t deeper = f.mkdir(inner, "deeper");
    CHECK(reply_errno(f.call(RenameArgs{d1, "inner", deeper, "oops", 0})) == EINVAL);
    REQUIRE(reply_errno(f.call(RenameArgs{d1, "inner", d2, "inner2", 0})) == 0);
    uint64_t dotdot = 0;
    REQUIRE(f.lookup(inner, "..", &dotdot) == 0);
    CHECK(dotdot == d2);
    auto d1attr = std::get<ReplyAttr>(f.call(GetattrArgs{d1})).attr;
    auto d2attr = std::get<ReplyAttr>(f.call(GetattrArgs{d2})).attr;
    CHECK(d1attr.nlink == 2);
    CHECK(d2attr.nlink == 3);
    f.remount_checked();
}

TEST_CASE("readdir on a fresh directory lists exactly dot and dotdot") {
    FsFixture f;
    uint64_t d = f.mkdir(1, "d");
    auto entries = f.readdir_all(d);
    REQUIRE(entries.size() == 2);
    std::set<std::string> names;
    for (auto& e : entries)
        names.insert(e.name);
    CHECK(names == std::set<std::string>{".", ".."});
}

TEST_CASE("readdir pages through hundreds of entries with resumable offsets") {
    FsFixture f;
    std::set<std::string> want = {".", ".."};
    for (int i = 0; i < 300; i++) {
        std::string name = "entry" + std::to_string(i);
        auto [ino, fh] = f.create(1, name);
        f.release(ino, fh);
        want.insert(name);
    }
    auto entries = f.readdir_all(1);
    std::set<std::string> got;
    for (auto& e : entries)
        got.insert(e.name);
    CHECK(got == want);
    CHECK(entries.size() == want.size());
    f.remount_checked();
}

TEST_CASE("access checks mode bits against the request identity") {
    FsFixture f;
    auto [ino, fh] = f.create(1, "m");  // perm 0644, uid/gid 1000
    f.release(ino, fh);
    CHECK(reply_errno(f.call(AccessArgs{ino, 4})) == 0);      // owner read
    CHECK(reply_errno(f.call(AccessArgs{ino, 2})) == 0);      // owner write
    CHECK(reply_errno(f.call(AccessArgs{ino, 1})) == EACCES); // owner exec
    FsRequest other{RequestContext{7, 7, 9, 1}, AccessArgs{ino, 2}};
    CHECK(reply_errno(f.fs->handle(other)) == EACCES);        // other write
    FsRequest root_req{RequestContext{0, 0, 9, 2}, AccessArgs{ino, 2}};
    CHECK(reply_errno(f.fs->handle(root_req)) == 0);          // root
}

TEST_CASE("setattr updates modes and times; fsync with nothing pending is quiet") {
    FsFixture f;
    auto [ino, fh] = f.create(1, "t");
    auto r = f.call(SetattrArgs{.ino = ino, .mode = 0600, .mtime = Timespec{99, 5}});
    REQUIRE(reply_errno(r) == 0);
    auto attr = std::get<ReplyAttr>(r).attr;
    CHECK(attr.perm == 0600u);
    CHECK(attr.mtime == Timespec{99, 5});

    f.fs->journal()->force_commit();  // drain the setattr transaction
    uint64_t seq_before = f.fs->journal()->sequence();
    REQUIRE(f.fsync(ino, fh) == 0);
    CHECK(f.fs->journal()->sequence() == seq_before);  // no new records
    f.release(ino, fh);
}

TEST_CASE("unsynced writes to deleted files never reach the image") {
    bento::fs::BentoFsOptions opts;
    opts.record_dropped_blocks = true;
    FsFixture f(4096, 0, 64, opts);
    f.fs->device()->trace().start(false);

    for (int i = 0; i < 20; i++) {
        auto [ino, fh] = f.create(1, "victim");
        REQUIRE(f.write(ino, fh, 0, patterned(64 * 1024, (uint32_t)i)) == 0);
        REQUIRE(reply_errno(f.call(UnlinkArgs{1, "victim"})) == 0);
        REQUIRE(f.release(ino, fh) == 0);
    }
    f.fs->journal()->force_commit();

    auto dropped = f.fs->dropped_blocks();
    CHECK(dropped.size() == 20 * 16);  // 64 KiB = 16 blocks per iteration
    std::set<uint64_t> dropped_set(dropped.begin(), dropped.end());
    for (const auto& ev : f.fs->device()->trace().events()) {
        if (ev.kind == TraceEvent::kWrite)
            REQUIRE(!dropped_set.count(ev.blockno));
    }
    f.remount_checked();

    SECTION("with fsync the same data blocks do reach the image") {
        f.fs->device()->trace().start(false);
        auto [ino, fh] = f.create(1, "kept");
        REQUIRE(f.write(ino, fh, 0, patterned(64 * 1024, 7)) == 0);
        REQUIRE(f.fsync(ino, fh) == 0);
        size_t data_writes = 0;
        for (const auto& ev : f.fs->device()->trace().events())
            if (ev.kind == TraceEvent::kWrite &&
                ev.blockno >= f.fs->superblock().data_start)
                data_writes++;
        CHECK(data_writes >= 16);
        f.release(ino, fh);
    }
}

TEST_CASE("fsck pinpoints hand-made corruption") {
    FsFixture f;
    uint64_t d = f.mkdir(1, "d");
    auto [ino, fh] = f.create(d, "x");
    REQUIRE(f.write(ino, fh, 0, patterned(4096, 5)) == 0);
    REQUIRE(f.fsync(ino, fh) == 0);
    f.release(ino, fh);
    const Superblock sb = f.fs->superblock();
    f.fs->destroy();

    FsckReport rep;
    REQUIRE(fsck_image(f.img.path(), &rep) == 0);
    REQUIRE(rep.clean());

    SECTION("flipped block-bitmap bit") {
        FILE* fp = fopen(f.img.path().c_str(), "r+b");
        REQUIRE(fp);
        // Set the bit of the last data block, which nothing references.
        uint64_t bit = sb.total_blocks - 1;
        uint64_t off = (uint64_t)sb.block_bitmap_start * kBlockSize + bit / 8;
        fseek(fp, (long)off, SEEK_SET);
        int c = fgetc(fp);
        fseek(fp, (long)off, SEEK_SET);
        fputc(c | (1 << (bit % 8)), fp);
        fclose(fp);
        REQUIRE(fsck_image(f.img.path(), &rep) == 0);
        REQUIRE_FALSE(rep.clean());
        CHECK(rep.violations[0].find("allocated but unreferenced") != std::string::npos);
    }
    SECTION("corrupted nlink") {
        FILE* fp = fopen(f.img.path().c_str(), "r+b");
        REQUIRE(fp);
        uint64_t off = (uint64_t)sb.inode_block((uint32_t)ino) * kBlockSize +
                       sb.inode_offset((uint32_t)ino) + 4;  // nlink field
        fseek(fp, (long)off, SEEK_SET);
        fputc(7, fp);
        fclose(fp);
        REQUIRE(fsck_image(f.img.path(), &rep) == 0);
        REQUIRE_FALSE(rep.clean());
    }
}

TEST_CASE("concurrent creates and writes across threads stay consistent") {
    FsFixture f(8192, 0, 128);
    constexpr int kThreads = 8;
    std::vector<std::thread> ts;
    std::atomic<int> failures{0};
    for (int t = 0; t < kThreads; t++) {
        ts.emplace_back([&, t] {
            for (int i = 0; i < 40; i++) {
                std::string name = "t" + std::to_string(t) + "_" + std::to_string(i);
                try {
                    auto [ino, fh] = f.create(1, name);
                    if (f.write(ino, fh, 0, patterned(4096, (uint32_t)(t * 100 + i))) != 0)
                        failures++;
                    if (i % 3 == 0 && f.fsync(ino, fh) != 0)
                        failures++;
                    if (f.release(ino, fh) != 0)
                        failures++;
                    if (i % 4 == 0 &&
                        reply_errno(f.call(UnlinkArgs{1, name})) != 0)
                        failures++;
                } catch (const std::exception&) {
                    failures++;
                }
            }
        });
    }
    for (auto& t : ts)
        t.join();
    CHECK(failures.load() == 0);
    f.remount_checked();
    auto entries = f.readdir_all(1);
    CHECK(entries.size() == 2 + kThreads * 30);  // 1/4 of creations unlinked
}

// Reference-model differential: random operation sequences must leave the
// file system observably equal to a trivial in-memory model.
TEST_CASE("random operation sequences match an in-memory reference model") {
    struct Model {
        struct File {
            std::vector<uint8_t> data;
        };
        // name -> file payload, one flat directory plus one subdirectory
        std::map<std::string, File> files[2];
    };

    FsFixture f(8192, 0, 128);
    Model model;
    uint64_t dirs[2] = {1, f.mkdir(1, "sub")};
    std::mt19937_64 rng(2024);
    const std::vector<std::string> names = {"a", "b", "c"};

    for (int step = 0; step < 600; step++) {
        int d = (int)(rng() % 2);
        const std::string& name = names[rng() % names.size()];
        auto& mfiles = model.files[d];
        switch (rng() % 5) {
            case 0: {  // create
                auto r = f.call(CreateArgs{dirs[d], name, 0644, kOpenReadWrite});
                if (mfiles.count(name)) {
                    REQUIRE(reply_errno(r) == EEXIST);
                } else {
                    REQUIRE(reply_errno(r) == 0);
                    const auto& c = std::get<ReplyCreated>(r);
                    f.release(c.entry.ino, c.open.fh);
                    mfiles[name] = {};
                }
                break;
            }
            case 1: {  // unlink
                auto r = f.call(UnlinkArgs{dirs[d], name});
                if (mfiles.count(name)) {
                    REQUIRE(reply_errno(r) == 0);
                    mfiles.erase(name);
                } else {
                    REQUIRE(reply_errno(r) == ENOENT);
                }
                break;
            }
            case 2: {  // write at random offset
                if (!mfiles.count(name))
                    break;
                uint64_t ino = 0;
                REQUIRE(f.lookup(dirs[d], name, &ino) == 0);
                uint64_t fh = f.open(ino, kOpenReadWrite);
                uint64_t off = rng() % 20000;
                auto bytes = patterned(1 + rng() % 6000, (uint32_t)rng());
                REQUIRE(f.write(ino, fh, off, bytes) == 0);
                f.release(ino, fh);
                auto& data = mfiles[name].data;
                if (data.size() < off + bytes.size())
                    data.resize(off + bytes.size(), 0);
                std::copy(bytes.begin(), bytes.end(), data.begin() + off);
                break;
            }
            case 3: {  // truncate
                if (!mfiles.count(name))
                    break;
                uint64_t ino = 0;
                REQUIRE(f.lookup(dirs[d], name, &ino) == 0);
                uint64_t nsz = rng() % 30000;
                REQUIRE(reply_errno(f.call(SetattrArgs{.ino = ino, .size = nsz})) == 0);
                mfiles[name].data.resize(nsz, 0);
                break;
            }
            case 4: {  // rename within or across the two directories
                int d2 = (int)(rng() % 2);
                const std::string& name2 = names[rng() % names.size()];
                auto r = f.call(RenameArgs{dirs[d], name, dirs[d2], name2, 0});
                bool src = mfiles.count(name);
                if (!src) {
                    REQUIRE(reply_errno(r) == ENOENT);
                } else if (d == d2 && name == name2) {
                    REQUIRE(reply_errno(r) == 0);
                } else {
                    REQUIRE(reply_errno(r) == 0);
                    auto payload = std::move(mfiles[name]);
                    mfiles.erase(name);
                    model.files[d2][name2] = std::move(payload);
                }
                break;
            }
        }
    }

    // Final-state equivalence: directory listings and file contents.
    for (int d = 0; d < 2; d++) {
        std::set<std::string> want = {".", ".."};
        if (d == 0)
            want.insert("sub");
        for (auto& [name, _] : model.files[d])
            want.insert(name);
        auto entries = f.readdir_all(dirs[d]);
        std::set<std::string> got;
        for (auto& e : entries)
            got.insert(e.name);
        REQUIRE(got == want);
        for (auto& [name, file] : model.files[d]) {
            uint64_t ino = 0;
            REQUIRE(f.lookup(dirs[d], name, &ino) == 0);
            uint64_t fh = f.open(ino, kOpenRead);
            auto attr = std::get<ReplyAttr>(f.call(GetattrArgs{ino})).attr;
            REQUIRE(attr.size == file.data.size());
            std::vector<uint8_t> got_data;
            for (uint64_t off = 0; off < file.data.size(); off += 8192) {
                auto chunk = f.read(ino, fh, off, 8192);
                got_data.insert(got_data.end(), chunk.begin(), chunk.end());
            }
            REQUIRE(got_data == file.data);
            f.release(ino, fh);
        }
    }
    f.remount_checked();
}

TEST_CASE("metadata mutations recover atomically from every crash state") {
    TempImage base(0, "crashbase");
    TempImage state(0, "crashstate");
    FsFixture f(1024, 0, 32);
    // Quiesce the background committer, then trace a two-op workload.
    f.fs->journal()->force_commit();
    std::filesystem::copy_file(f.img.path(), base.path(),
                               std::filesystem::copy_options::overwrite_existing);
    f.fs->device()->trace().start(true);
    auto [ino, fh] = f.create(1, "a");
    REQUIRE(f.write(ino, fh, 0, patterned(4096, 1)) == 0);
    REQUIRE(f.fsync(ino, fh) == 0);
    f.release(ino, fh);
    REQUIRE(f.mkdir(1, "d") != 0);
    f.fs->journal()->force_commit();
    auto evs = f.fs->device()->trace().events();
    f.fs->device()->trace().stop();

    auto states = harness::enumerate_crash_states(evs, 3, 77);
    REQUIRE(!states.empty());
    for (const auto& st : states) {
        REQUIRE(harness::materialize_crash_state(base.path(), state.path(), evs, st,
                                                 4096) == 0);
        // Recovery runs at mount; fsck the recovered image afterwards.
        {
            bento::fs::BentoFsOptions opts;
            opts.clock = bento::testutil::ticking_clock();
            BentoFs check(opts);
            REQUIRE(check.init(state.path(), "") == 0);
            check.destroy();
        }
        FsckReport rep;
        REQUIRE(fsck_image(state.path(), &rep) == 0);
        if (!rep.clean()) {
            for (auto& v : rep.violations)
                UNSCOPED_INFO(v);
        }
        REQUIRE(rep.clean());
    }
}
