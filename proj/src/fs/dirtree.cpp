#include <cassert>
#include <cstring>

#include "bento/fs/bentofs.hpp"

// Extendible-hash directories. File block 0 of every directory is the bucket
// index; the remaining blocks are entry leaves. A leaf with local depth l
// serves every slot sharing its low l bits, so each lookup touches exactly
// one index block and one leaf.

namespace bento::fs {

int BentoFs::dir_read_block(InodeState& dir, uint32_t fbi, BufferHead* bh) {
    uint32_t blockno = 0;
    int err = bmap(dir, fbi, MapMode::kRead, nullptr, &blockno);
    if (err)
        return err;
    if (blockno == 0)
        return EIO;  // directories are never sparse
    return dev_->bread(blockno, bh);
}

int BentoFs::dir_lookup(InodeState& dir, std::string_view name, uint32_t* ino_out) {
    BufferHead idxbh;
    int err = dir_read_block(dir, 0, &idxbh);
    if (err)
        return err;
    DirIndexView idx;
    if (!dir_parse_index(idxbh.data(), &idx))
        return EIO;
    idxbh.release();
    uint32_t bucket = dir_bucket(dir_hash(name), idx.global_depth);
    BufferHead leafbh;
    if ((err = dir_read_block(dir, idx.slots[bucket], &leafbh)) != 0)
        return err;
    for (const auto& e : dir_parse_leaf(leafbh.data())) {
        if (e.name == name) {
            *ino_out = e.ino;
            return 0;
        }
    }
    return ENOENT;
}

int BentoFs::dir_split_leaf(TransactionHandle* h, InodeState& dir, DirIndexView& idx,
                            uint32_t bucket) {
    uint32_t old_fbi = idx.slots[bucket];
    BufferHead leafbh;
    int err = dir_read_block(dir, old_fbi, &leafbh);
    if (err)
        return err;
    uint16_t ld = dir_leaf_local_depth(leafbh.data());
    auto entries = dir_parse_leaf(leafbh.data());
    leafbh.release();

    if (ld == idx.global_depth) {
        if (idx.global_depth == kDirMaxGlobalDepth)
            return ENOSPC;
        size_t half = idx.slots.size();
        idx.slots.resize(half * 2);
        for (size_t s = 0; s < half; s++)
            idx.slots[half + s] = idx.slots[s];
        idx.global_depth++;
    }

    // Grow the directory by one leaf; on allocation failure the doubled
    // index above was never written, so nothing changed on disk.
    uint32_t new_fbi = (uint32_t)(dir.disk.size / kBlockSize);
    uint32_t new_blockno = 0;
    if ((err = bmap(dir, new_fbi, MapMode::kEager, h, &new_blockno)) != 0)
        return err;
    dir.disk.size += kBlockSize;

    std::vector<DirEntryOnDisk> stay, move;
    for (auto& e : entries) {
        if ((dir_hash(e.name) >> ld) & 1)
            move.push_back(std::move(e));
        else
            stay.push_back(std::move(e));
    }
    uint32_t old_blockno = 0;
    if ((err = bmap(dir, old_fbi, MapMode::kRead, nullptr, &old_blockno)) != 0)
        return err;
    BufferHead oldbh;
    if ((err = dev_->getblk(old_blockno, &oldbh)) != 0)
        return err;
    dir_build_leaf((uint16_t)(ld + 1), stay, oldbh.data_mut());
    if ((err = jwrite(h, oldbh)) != 0)
        return err;
    oldbh.release();
    BufferHead newbh;
    if ((err = dev_->getblk(new_blockno, &newbh)) != 0)
        return err;
    dir_build_leaf((uint16_t)(ld + 1), move, newbh.data_mut());
    if ((err = jwrite(h, newbh)) != 0)
        return err;
    newbh.release();

    for (size_t s = 0; s < idx.slots.size(); s++)
        if (idx.slots[s] == old_fbi && ((s >> ld) & 1))
            idx.slots[s] = new_fbi;
    uint32_t idx_blockno = 0;
    if ((err = bmap(dir, 0, MapMode::kRead, nullptr, &idx_blockno)) != 0)
        return err;
    BufferHead idxbh;
    if ((err = dev_->getblk(idx_blockno, &idxbh)) != 0)
        return err;
    dir_build_index(idx, idxbh.data_mut());
    return jwrite(h, idxbh);
}

int BentoFs::dir_insert(TransactionHandle* h, InodeState& dir, const std::string& name,
                        uint32_t ino) {
    std::vector<uint8_t> scratch(kBlockSize);
    for (int iter = 0; iter < 16; iter++) {
        BufferHead idxbh;
        int err = dir_read_block(dir, 0, &idxbh);
        if (err)
            return err;
        DirIndexView idx;
        if (!dir_parse_index(idxbh.data(), &idx))
            return EIO;
        idxbh.release();
        uint32_t bucket = dir_bucket(dir_hash(name), idx.global_depth);
        uint32_t leaf_fbi = idx.slots[bucket];
        BufferHead leafbh;
        if ((err = dir_read_block(dir, leaf_fbi, &leafbh)) != 0)
            return err;
        uint16_t ld = dir_leaf_local_depth(leafbh.data());
        auto entries = dir_parse_leaf(leafbh.data());
        leafbh.release();
        for (const auto& e : entries)
            if (e.name == name)
                return EEXIST;
        entries.push_back({ino, name});
        if (dir_build_leaf(ld, entries, scratch)) {
            uint32_t blockno = 0;
            if ((err = bmap(dir, leaf_fbi, MapMode::kRead, nullptr, &blockno)) != 0)
                return err;
            BufferHead wb;
            if ((err = dev_->getblk(blockno, &wb)) != 0)
                return err;
            std::memcpy(wb.data_mut().data(), scratch.data(), kBlockSize);
            return jwrite(h, wb);
        }
        if ((err = dir_split_leaf(h, dir, idx, bucket)) != 0)
            return err;
    }
    return ENOSPC;  // hash pathologically skewed
}

// Rewrites one leaf with `mutate` applied to its entry list.
static int rewrite_entries(std::vector<DirEntryOnDisk>& entries, std::string_view name,
                           uint32_t new_ino, bool remove) {
    for (auto it = entries.begin(); it != entries.end(); ++it) {
        if (it->name == name) {
            if (remove)
                entries.erase(it);
            else
                it->ino = new_ino;
            return 0;
        }
    }
    return ENOENT;
}

int BentoFs::dir_remove(TransactionHandle* h, InodeState& dir, std::string_view name) {
    BufferHead idxbh;
    int err = dir_read_block(dir, 0, &idxbh);
    if (err)
        return err;
    DirIndexView idx;
    if (!dir_parse_index(idxbh.data(), &idx))
        return EIO;
    idxbh.release();
    uint32_t leaf_fbi = idx.slots[dir_bucket(dir_hash(name), idx.global_depth)];
    BufferHead leafbh;
    if ((err = dir_read_block(dir, leaf_fbi, &leafbh)) != 0)
        return err;
    uint16_t ld = dir_leaf_local_depth(leafbh.data());
    auto entries = dir_parse_leaf(leafbh.data());
    leafbh.release();
    if ((err = rewrite_entries(entries, name, 0, true)) != 0)
        return err;
    uint32_t blockno = 0;
    if ((err = bmap(dir, leaf_fbi, MapMode::kRead, nullptr, &blockno)) != 0)
        return err;
    BufferHead wb;
    if ((err = dev_->getblk(blockno, &wb)) != 0)
        return err;
    dir_build_leaf(ld, entries, wb.data_mut());
    return jwrite(h, wb);
}

int BentoFs::dir_set_entry_ino(TransactionHandle* h, InodeState& dir,
                               std::string_view name, uint32_t ino) {
    BufferHead idxbh;
    int err = dir_read_block(dir, 0, &idxbh);
    if (err)
        return err;
    DirIndexView idx;
    if (!dir_parse_index(idxbh.data(), &idx))
        return EIO;
    idxbh.release();
    uint32_t leaf_fbi = idx.slots[dir_bucket(dir_hash(name), idx.global_depth)];
    BufferHead leafbh;
    if ((err = dir_read_block(dir, leaf_fbi, &leafbh)) != 0)
        return err;
    uint16_t ld = dir_leaf_local_depth(leafbh.data());
    auto entries = dir_parse_leaf(leafbh.data());
    leafbh.release();
    if ((err = rewrite_entries(entries, name, ino, false)) != 0)
        return err;
    uint32_t blockno = 0;
    if ((err = bmap(dir, leaf_fbi, MapMode::kRead, nullptr, &blockno)) != 0)
        return err;
    BufferHead wb;
    if ((err = dev_->getblk(blockno, &wb)) != 0)
        return err;
    dir_build_leaf(ld, entries, wb.data_mut());
    return jwrite(h, wb);
}

int BentoFs::dir_count_entries(InodeState& dir, uint64_t* out) {
    BufferHead idxbh;
    int err = dir_read_block(dir, 0, &idxbh);
    if (err)
        return err;
    DirIndexView idx;
    if (!dir_parse_index(idxbh.data(), &idx))
        return EIO;
    idxbh.release();
    uint64_t count = 0;
    for (size_t s = 0; s < idx.slots.size(); s++) {
        BufferHead leafbh;
        if ((err = dir_read_block(dir, idx.slots[s], &leafbh)) != 0)
            return err;
        uint16_t ld = dir_leaf_local_depth(leafbh.data());
        if (s >= (1u << ld))
            continue;  // non-canonical alias of a shallower leaf
        count += dir_parse_leaf(leafbh.data()).size();
    }
    *out = count;
    return 0;
}

int BentoFs::dir_list(InodeState& dir, uint64_t offset, size_t max_entries,
                      std::vector<DirEntryRec>* out) {
    BufferHead idxbh;
    int err = dir_read_block(dir, 0, &idxbh);
    if (err)
        return err;
    DirIndexView idx;
    if (!dir_parse_index(idxbh.data(), &idx))
        return EIO;
    idxbh.release();
    uint32_t start_slot = (uint32_t)(offset >> 20);
    uint32_t start_idx = (uint32_t)(offset & 0xFFFFF);
    for (size_t s = start_slot; s < idx.slots.size(); s++) {
        BufferHead leafbh;
        if ((err = dir_read_block(dir, idx.slots[s], &leafbh)) != 0)
            return err;
        uint16_t ld = dir_leaf_local_depth(leafbh.data());
        if (s >= (1u << ld))
            continue;
        auto entries = dir_parse_leaf(leafbh.data());
        leafbh.release();
        for (size_t i = (s == start_slot ? start_idx : 0); i < entries.size(); i++) {
            DiskInode child;
            if ((err = read_raw_inode(entries[i].ino, &child)) != 0)
                return err;
            DirEntryRec rec;
            rec.ino = entries[i].ino;
            rec.kind = child.kind == kKindDir
                           ? FileKind::Directory
                           : (child.kind == kKindSymlink ? FileKind::Symlink
                                                         : FileKind::RegularFile);
            rec.name = entries[i].name;
            rec.next_offset = ((uint64_t)s << 20) | (i + 1);
            out->push_back(std::move(rec));
            if (out->size() >= max_entries)
                return 0;
        }
    }
    return 0;
}

int BentoFs::dir_init_fresh(TransactionHandle* h, InodeState& dir, uint32_t self,
                            uint32_t parent) {
    uint32_t b0 = 0, b1 = 0;
    int err = bmap(dir, 0, MapMode::kEager, h, &b0);
    if (!err)
        err = bmap(dir, 1, MapMode::kEager, h, &b1);
    if (err)
        return err;
    BufferHead bh;
    if ((err = dev_->getblk(b0, &bh)) != 0)
        return err;
    DirIndexView idx;
    idx.global_depth = 0;
    idx.slots = {1};
    dir_build_index(idx, bh.data_mut());
    if ((err = jwrite(h, bh)) != 0)
        return err;
    bh.release();
    if ((err = dev_->getblk(b1, &bh)) != 0)
        return err;
    std::vector<DirEntryOnDisk> entries = {{self, "."}, {parent, ".."}};
    dir_build_leaf(0, entries, bh.data_mut());
    if ((err = jwrite(h, bh)) != 0)
        return err;
    dir.disk.size = 2 * kBlockSize;
    return 0;
}

// Raw ".." chase for rename's ancestry walk; reads through the cache without
// taking inode locks (rename_mu_ keeps the topology stable).
int BentoFs::lookup_parent_of(uint32_t dir_ino, uint32_t* parent_out) {
    auto raw_map = [&](const DiskInode& d, uint32_t fbi, uint32_t* blockno) -> int {
        *blockno = 0;
        if (fbi < kNumDirect) {
            *blockno = d.direct[fbi];
            return 0;
        }
        uint32_t rest = fbi - kNumDirect;
        if (rest < kPtrsPerBlock && d.indirect) {
            BufferHead bh;
            int err = dev_->bread(d.indirect, &bh);
            if (err)
                return err;
            *blockno = get_u32(bh.data().data() + 4 * rest);
            return 0;
        }
        return EIO;  // directories never reach the double-indirect range
    };
    for (int retry = 0; retry < 3; retry++) {
        DiskInode d;
        int err = read_raw_inode(dir_ino, &d);
        if (err)
            return err;
        if (d.kind != kKindDir || d.direct[0] == 0)
            return EIO;
        BufferHead idxbh;
        if ((err = dev_->bread(d.direct[0], &idxbh)) != 0)
            return err;
        DirIndexView idx;
        if (!dir_parse_index(idxbh.data(), &idx))
            return EIO;
        idxbh.release();
        uint32_t leaf_fbi = idx.slots[dir_bucket(dir_hash(".."), idx.global_depth)];
        uint32_t blockno = 0;
        if ((err = raw_map(d, leaf_fbi, &blockno)) != 0 || blockno == 0)
            continue;
        BufferHead leafbh;
        if ((err = dev_->bread(blockno, &leafbh)) != 0)
            return err;
        for (const auto& e : dir_parse_leaf(leafbh.data())) {
            if (e.name == "..") {
                *parent_out = e.ino;
                return 0;
            }
        }
    }
    return EIO;
}

}  // namespace bento::fs
