#ifndef BENTO_TESTS_FS_FIXTURE_HPP
#define BENTO_TESTS_FS_FIXTURE_HPP

#include <memory>
#include <string>

#include "bento/fs/bentofs.hpp"
#include "bento/fs/fsck.hpp"
#include "bento/fs/mkfs.hpp"
#include "bento/provenance.hpp"
#include "test_util.hpp"

namespace bento::testutil {

inline Clock ticking_clock() {
    auto counter = std::make_shared<std::atomic<uint64_t>>(0);
    return [counter] { return Timespec{counter->fetch_add(1) + 1, 0}; };
}

// One formatted image plus a directly-driven file-system instance.
struct FsFixture {
    TempImage img{0, "fs"};
    std::unique_ptr<bento::fs::BentoFs> fs;
    std::atomic<uint64_t> serial{0};
    uint32_t pid = 42;

    explicit FsFixture(uint64_t total_blocks = 4096, uint32_t inode_count = 0,
                       uint32_t journal_len = 64, bento::fs::BentoFsOptions opts = {},
                       bool provenance = false) {
        bento::fs::MkfsGeometry g;
        g.total_blocks = total_blocks;
        g.inode_count = inode_count;
        g.journal_len = journal_len;
        int err = bento::fs::mkfs(img.path(), g);
        if (err != 0)
            throw std::runtime_error("mkfs failed: " + std::to_string(err));
        if (!opts.clock)
            opts.clock = ticking_clock();
        if (provenance)
            fs = std::make_unique<bento::prov::BentoProvFs>(std::move(opts));
        else
            fs = std::make_unique<bento::fs::BentoFs>(std::move(opts));
        err = fs->init(img.path(), "");
        if (err != 0)
            throw std::runtime_error("init failed: " + std::to_string(err));
    }

    RequestContext ctx() {
        return RequestContext{1000, 1000, pid, serial.fetch_add(1) + 1};
    }
    FsReply call(FsArgs args) { return fs->handle(FsRequest{ctx(), std::move(args)}); }

    // Convenience wrappers; REQUIRE-free so tests can assert error paths.
    uint64_t must_ino(const FsReply& r) {
        if (const auto* e = std::get_if<ReplyEntry>(&r))
            return e->ino;
        if (const auto* c = std::get_if<ReplyCreated>(&r))
            return c->entry.ino;
        throw std::runtime_error("reply carries no entry: " + reply_to_line(r));
    }
    uint64_t mkdir(uint64_t parent, const std::string& name) {
        return must_ino(call(MkdirArgs{parent, name, 0755}));
    }
    std::pair<uint64_t, uint64_t> create(uint64_t parent, const std::string& name,
                                         uint32_t flags = kOpenReadWrite) {
        auto r = call(CreateArgs{parent, name, 0644, flags});
        const auto* c = std::get_if<ReplyCreated>(&r);
        if (!c)
            throw std::runtime_error("create failed: " + reply_to_line(r));
        return {c->entry.ino, c->open.fh};
    }
    uint64_t open(uint64_t ino, uint32_t flags) {
        auto r = call(OpenArgs{ino, flags});
        const auto* o = std::get_if<ReplyOpen>(&r);
        if (!o)
            throw std::runtime_error("open failed: " + reply_to_line(r));
        return o->fh;
    }
    int write(uint64_t ino, uint64_t fh, uint64_t offset, std::vector<uint8_t> data) {
        auto r = call(WriteArgs{ino, fh, offset, std::move(data), 0});
        return reply_errno(r);
    }
    std::vector<uint8_t> read(uint64_t ino, uint64_t fh, uint64_t off, uint32_t size) {
        auto r = call(ReadArgs{ino, fh, off, size});
        const auto* d = std::get_if<ReplyData>(&r);
        if (!d)
            throw std::runtime_error("read failed: " + reply_to_line(r));
        return d->bytes;
    }
    int lookup(uint64_t parent, const std::string& name, uint64_t* ino = nullptr) {
        auto r = call(LookupArgs{parent, name});
        if (const auto* e = std::get_if<ReplyEntry>(&r)) {
            if (ino)
                *ino = e->ino;
            return 0;
        }
        return reply_errno(r);
    }
    ReplyStatfs statfs() { return std::get<ReplyStatfs>(call(StatfsArgs{1})); }
    int release(uint64_t ino, uint64_t fh) {
        return reply_errno(call(ReleaseArgs{ino, fh, 0, 0, false}));
    }
    int fsync(uint64_t ino, uint64_t fh) {
        return reply_errno(call(FsyncArgs{ino, fh, false}));
    }
    std::vector<DirEntryRec> readdir_all(uint64_t ino) {
        auto r = call(OpendirArgs{ino, 0});
        uint64_t fh = std::get<ReplyOpen>(r).fh;
        std::vector<DirEntryRec> all;
        uint64_t off = 0;
        for (;;) {
            auto dr = call(ReaddirArgs{ino, fh, off});
            auto& entries = std::get<ReplyDirEntries>(dr).entries;
            if (entries.empty())
                break;
            off = entries.back().next_offset;
            all.insert(all.end(), entries.begin(), entries.end());
        }
        call(ReleasedirArgs{ino, fh, 0});
        return all;
    }

    // Unmount, fsck, remount. Throws on fsck violations so tests fail loudly.
    void remount_checked() {
        bento::fs::BentoFsOptions opts;
        opts.clock = ticking_clock();
        fs->destroy();
        bento::fs::FsckReport rep;
        if (fsck_image(img.path(), &rep) != 0 || !rep.clean()) {
            std::string msg = "fsck failed:";
            for (auto& v : rep.violations)
                msg += "\n  " + v;
            throw std::runtime_error(msg);
        }
        int err = fs->init(img.path(), "");
        if (err != 0)
            throw std::runtime_error("remount failed");
    }
};

}  // namespace bento::testutil

#endif
