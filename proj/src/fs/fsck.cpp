#include "bento/fs/fsck.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cstdarg>
#include <cstdio>
#include <deque>
#include <map>
#include <set>

#include "bento/fs/layout.hpp"

namespace bento::fs {

namespace {

class RawImage {
public:
    explicit RawImage(const std::string& path) { fd_ = ::open(path.c_str(), O_RDONLY); }
    ~RawImage() {
        if (fd_ >= 0)
            ::close(fd_);
    }
    bool ok() const { return fd_ >= 0; }
    uint64_t size() const { return (uint64_t)lseek(fd_, 0, SEEK_END); }
    bool block(uint32_t blockno, std::vector<uint8_t>* out) const {
        out->resize(kBlockSize);
        return pread(fd_, out->data(), kBlockSize, (off_t)blockno * kBlockSize) ==
               (ssize_t)kBlockSize;
    }

private:
    int fd_ = -1;
};

struct Checker {
    const RawImage& img;
    Superblock sb;
    FsckReport* report;
    std::vector<uint8_t> ibmp, bbmp;
    // blockno -> number of mapping references (inode data + pointer blocks)
    std::map<uint32_t, uint32_t> refs;
    // ino -> directory entries pointing at it (names, "." and ".." included)
    std::map<uint32_t, uint32_t> name_refs;
    std::set<uint32_t> reachable;

    void fail(const char* fmt, ...) {
        char buf[256];
        va_list ap;
        va_start(ap, fmt);
        vsnprintf(buf, sizeof(buf), fmt, ap);
        va_end(ap);
        if (report->violations.size() < 1000)
            report->violations.push_back(buf);
    }

    bool bit(const std::vector<uint8_t>& bm, uint64_t i) const {
        return bm[i / 8] & (1u << (i % 8));
    }

    bool load_bitmaps() {
        ibmp.clear();
        bbmp.clear();
        std::vector<uint8_t> blk;
        for (uint32_t b = 0; b < sb.inode_bitmap_blocks; b++) {
            if (!img.block(sb.inode_bitmap_start + b, &blk))
                return false;
            ibmp.insert(ibmp.end(), blk.begin(), blk.end());
        }
        for (uint32_t b = 0; b < sb.block_bitmap_blocks; b++) {
            if (!img.block(sb.block_bitmap_start + b, &blk))
                return false;
            bbmp.insert(bbmp.end(), blk.begin(), blk.end());
        }
        return true;
    }

    DiskInode inode(uint32_t ino) {
        std::vector<uint8_t> blk;
        if (!img.block(sb.inode_block(ino), &blk))
            return DiskInode{};
        return DiskInode::decode({blk.data() + sb.inode_offset(ino), kInodeSize});
    }

    void ref_block(uint32_t ino, uint32_t b, const char* what) {
        if (b < sb.data_start || b >= sb.total_blocks) {
            fail("ino %u: %s points at block %u outside the data region", ino, what, b);
            return;
        }
        refs[b]++;
    }

    // Walks one inode's mapping; checks bounds and that pointers past the
    // size limit are zero. Returns mapped data blocks in file-block order
    // for the directory pass.
    void walk_inode(uint32_t ino, const DiskInode& d, std::vector<uint32_t>* fblocks) {
        const uint64_t limit = (d.size + kBlockSize - 1) / kBlockSize;
        auto data_slot = [&](uint64_t fbi, uint32_t b) {
            if (b == 0) {
                if (fblocks && fbi < limit)
                    fblocks->push_back(0);
                return;
            }
            if (fbi >= limit) {
                fail("ino %u: pointer beyond size at file block %llu", ino,
                     (unsigned long long)fbi);
                return;
            }
            ref_block(ino, b, "data");
            if (fblocks)
                fblocks->push_back(b);
        };
        for (uint32_t i = 0; i < kNumDirect; i++)
            data_slot(i, d.direct[i]);
        std::vector<uint8_t> blk;
        if (d.indirect) {
            if (limit <= kNumDirect)
                fail("ino %u: indirect block beyond size", ino);
            ref_block(ino, d.indirect, "indirect");
            if (img.block(d.indirect, &blk))
                for (uint32_t i = 0; i < kPtrsPerBlock; i++)
                    data_slot(kNumDirect + i, get_u32(blk.data() + 4 * i));
        }
        if (d.dindirect) {
            const uint64_t base = kNumDirect + kPtrsPerBlock;
            if (limit <= base)
                fail("ino %u: double-indirect block beyond size", ino);
            ref_block(ino, d.dindirect, "dindirect");
            std::vector<uint8_t> l1;
            if (img.block(d.dindirect, &l1)) {
                for (uint32_t i = 0; i < kPtrsPerBlock; i++) {
                    uint32_t l2 = get_u32(l1.data() + 4 * i);
                    if (!l2)
                        continue;
                    ref_block(ino, l2, "l2 pointer");
                    if (img.block(l2, &blk))
                        for (uint32_t j = 0; j < kPtrsPerBlock; j++)
                            data_slot(base + (uint64_t)i * kPtrsPerBlock + j,
                                      get_u32(blk.data() + 4 * j));
                }
            }
        }
    }

    // Validates one directory's pages and accumulates name references.
    void check_dir(uint32_t ino, const DiskInode& d, std::deque<uint32_t>* queue) {
        std::vector<uint32_t> fblocks;
        walk_inode(ino, d, &fblocks);
        if (d.size % kBlockSize != 0 || fblocks.size() != d.size / kBlockSize) {
            fail("dir %u: size %llu inconsistent with mapped blocks", ino,
                 (unsigned long long)d.size);
            return;
        }
        for (size_t i = 0; i < fblocks.size(); i++)
            if (fblocks[i] == 0) {
                fail("dir %u: sparse hole at file block %zu", ino, i);
                return;
            }
        std::vector<uint8_t> blk;
        if (!img.block(fblocks[0], &blk))
            return;
        DirIndexView idx;
        if (!dir_parse_index(blk, &idx)) {
            fail("dir %u: bad index block", ino);
            return;
        }
        std::set<uint32_t> used_leaves;
        std::set<std::string> names;
        bool saw_self = false, saw_parent = false;
        for (size_t s = 0; s < idx.slots.size(); s++) {
            uint32_t fbi = idx.slots[s];
            if (fbi == 0 || fbi >= fblocks.size()) {
                fail("dir %u: slot %zu points at file block %u out of range", ino, s,
                     fbi);
                continue;
            }
            if (!img.block(fblocks[fbi], &blk))
                continue;
            uint16_t ld = dir_leaf_local_depth(blk);
            if (ld > idx.global_depth) {
                fail("dir %u: leaf %u local depth %u exceeds global %u", ino, fbi, ld,
                     idx.global_depth);
                continue;
            }
            if (s >= (1u << ld))
                continue;  // alias slot
            used_leaves.insert(fbi);
            for (const auto& e : dir_parse_leaf(blk)) {
                if (!names.insert(e.name).second)
                    fail("dir %u: duplicate name '%s'", ino, e.name.c_str());
                if (e.ino == 0 || e.ino >= sb.inode_count) {
                    fail("dir %u: entry '%s' has invalid ino %u", ino, e.name.c_str(),
                         e.ino);
                    continue;
                }
                if (!bit(ibmp, e.ino))
                    fail("dir %u: entry '%s' references unallocated ino %u", ino,
                         e.name.c_str(), e.ino);
                // Hash placement: the entry's bucket must select this leaf.
                uint32_t want = idx.slots[dir_bucket(dir_hash(e.name), idx.global_depth)];
                if (want != fbi)
                    fail("dir %u: entry '%s' stored in leaf %u, hash selects %u", ino,
                         e.name.c_str(), fbi, want);
                name_refs[e.ino]++;
                if (e.name == ".") {
                    saw_self = true;
                    if (e.ino != ino)
                        fail("dir %u: '.' points at %u", ino, e.ino);
                } else if (e.name == "..") {
                    saw_parent = true;
                } else {
                    DiskInode child = inode(e.ino);
                    if (child.kind == kKindDir) {
                        if (!reachable.insert(e.ino).second)
                            fail("dir %u: directory %u has a second parent", ino, e.ino);
                        else
                            queue->push_back(e.ino);
                    } else {
                        reachable.insert(e.ino);
                    }
                }
            }
        }
        if (!saw_self || !saw_parent)
            fail("dir %u: missing '.' or '..'", ino);
        for (size_t fbi = 1; fbi < fblocks.size(); fbi++)
            if (!used_leaves.count((uint32_t)fbi))
                fail("dir %u: leaf file block %zu not referenced by any slot", ino, fbi);
    }

    void run() {
        if (!load_bitmaps()) {
            fail("short read loading bitmaps");
            return;
        }
        // Inode scan.
        for (uint32_t ino = 1; ino < sb.inode_count; ino++) {
            DiskInode d = inode(ino);
            bool allocated = bit(ibmp, ino);
            if (!allocated && d.kind != kKindFree) {
                fail("ino %u: in-use inode without bitmap bit", ino);
                continue;
            }
            if (allocated && d.kind == kKindFree) {
                fail("ino %u: bitmap bit set for free inode", ino);
                continue;
            }
            if (d.kind == kKindFree) {
                bool zeroed = d.nlink == 0 && d.indirect == 0 && d.dindirect == 0;
                for (uint32_t i = 0; i < kNumDirect; i++)
                    zeroed = zeroed && d.direct[i] == 0;
                if (!zeroed)
                    fail("ino %u: free inode with stale links or pointers", ino);
                continue;
            }
            if (d.size > kMaxFileSize)
                fail("ino %u: size %llu exceeds the 4 GiB cap", ino,
                     (unsigned long long)d.size);
            if (d.kind != kKindDir)
                walk_inode(ino, d, nullptr);
        }
        // Directory walk from the root.
        DiskInode root = inode(kRootIno);
        if (root.kind != kKindDir || !bit(ibmp, kRootIno)) {
            fail("root inode is not an allocated directory");
            return;
        }
        reachable.insert(kRootIno);
        std::deque<uint32_t> queue = {kRootIno};
        while (!queue.empty()) {
            uint32_t ino = queue.front();
            queue.pop_front();
            check_dir(ino, inode(ino), &queue);
        }
        // Bitmap agreement.
        for (uint32_t b = 0; b < sb.total_blocks; b++) {
            bool allocated = bit(bbmp, b);
            uint32_t n = refs.count(b) ? refs[b] : 0;
            if (b < sb.data_start) {
                if (!allocated)
                    fail("metadata block %u not marked allocated", b);
                if (n)
                    fail("metadata block %u referenced by an inode", b);
                continue;
            }
            if (n > 1)
                fail("block %u referenced %u times", b, n);
            if (allocated && n == 0)
                fail("block %u allocated but unreferenced", b);
            if (!allocated && n > 0)
                fail("block %u referenced but not allocated", b);
        }
        // Link counts and reachability.
        for (uint32_t ino = 1; ino < sb.inode_count; ino++) {
            if (!bit(ibmp, ino))
                continue;
            DiskInode d = inode(ino);
            if (d.kind == kKindFree)
                continue;
            uint32_t n = name_refs.count(ino) ? name_refs[ino] : 0;
            if (ino == kProvIno && n == 0)
                continue;  // reserved log inode lives outside the namespace
            if (d.nlink != n)
                fail("ino %u: nlink %u but %u referencing entries", ino, d.nlink, n);
            if (!reachable.count(ino))
                fail("ino %u: allocated but unreachable from the root", ino);
        }
    }
};

}  // namespace

int fsck_image(const std::string& image_path, FsckReport* report) {
    report->violations.clear();
    RawImage img(image_path);
    if (!img.ok())
        return errno ? errno : EIO;
    std::vector<uint8_t> blk;
    if (!img.block(kSuperblockBlock, &blk)) {
        report->violations.push_back("cannot read superblock");
        return 0;
    }
    Checker c{img, Superblock{}, report, {}, {}, {}, {}, {}};
    if (!Superblock::decode(blk, &c.sb)) {
        report->violations.push_back("bad superblock magic or geometry");
        return 0;
    }
    if ((uint64_t)c.sb.total_blocks * kBlockSize != img.size()) {
        report->violations.push_back("superblock size disagrees with image size");
        return 0;
    }
    c.run();
    return 0;
}

}  // namespace bento::fs
