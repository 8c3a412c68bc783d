#include "bento/fs/bentofs.hpp"

#include <algorithm>
#include <cassert>
#include <cstring>

namespace bento::fs {

namespace {

inline bool bit_get(const std::vector<uint8_t>& bm, uint64_t bit) {
    return bm[bit / 8] & (1u << (bit % 8));
}
inline void bit_set(std::vector<uint8_t>& bm, uint64_t bit) {
    bm[bit / 8] |= (uint8_t)(1u << (bit % 8));
}
inline void bit_clear(std::vector<uint8_t>& bm, uint64_t bit) {
    bm[bit / 8] &= (uint8_t)~(1u << (bit % 8));
}

FileKind kind_to_api(uint32_t kind) {
    switch (kind) {
        case kKindDir: return FileKind::Directory;
        case kKindSymlink: return FileKind::Symlink;
        default: return FileKind::RegularFile;
    }
}

}  // namespace

BentoFs::BentoFs(BentoFsOptions opts) : opts_(std::move(opts)) {
    if (!opts_.clock)
        opts_.clock = system_clock();
}

BentoFs::~BentoFs() {
    if (mounted())
        destroy();
}

int BentoFs::init(const std::string& devname, const std::string&) {
    if (mounted())
        return EBUSY;
    int err = BlockDevice::open(devname, kBlockSize, &dev_, opts_.cache_capacity);
    if (err)
        return err;
    BufferHead bh;
    if ((err = dev_->bread(kSuperblockBlock, &bh)) != 0) {
        dev_.reset();
        return err;
    }
    bool sb_ok = Superblock::decode(bh.data(), &sb_) &&
                 sb_.total_blocks == dev_->block_count();
    bh.release();  // the lease must end before the device can be dropped
    if (!sb_ok) {
        dev_.reset();
        return kErrBadMagic;
    }

    if (opts_.journal_enabled) {
        err = Journal::open(dev_, sb_.journal_start, sb_.journal_len, &journal_);
        if (err) {
            dev_.reset();
            return err;
        }
    }
    if ((err = build_mirrors()) != 0 || (err = reclaim_orphans({})) != 0 ||
        (err = prov_enable(true)) != 0) {
        journal_.reset();
        dev_.reset();
        return err;
    }
    return 0;
}

void BentoFs::destroy() {
    if (!mounted())
        return;
    materialize_all();
    if (journal_)
        journal_->force_commit();
    dev_->sync_all();
    journal_.reset();
    dev_.reset();
    icache_.clear();
    handles_.clear();
}

int BentoFs::build_mirrors() {
    block_mirror_.assign((size_t)sb_.block_bitmap_blocks * kBlockSize, 0);
    inode_mirror_.assign((size_t)sb_.inode_bitmap_blocks * kBlockSize, 0);
    for (uint32_t b = 0; b < sb_.block_bitmap_blocks; b++) {
        BufferHead bh;
        int err = dev_->bread(sb_.block_bitmap_start + b, &bh);
        if (err)
            return err;
        std::memcpy(block_mirror_.data() + (size_t)b * kBlockSize, bh.data().data(),
                    kBlockSize);
    }
    for (uint32_t b = 0; b < sb_.inode_bitmap_blocks; b++) {
        BufferHead bh;
        int err = dev_->bread(sb_.inode_bitmap_start + b, &bh);
        if (err)
            return err;
        std::memcpy(inode_mirror_.data() + (size_t)b * kBlockSize, bh.data().data(),
                    kBlockSize);
    }
    free_data_blocks_ = 0;
    for (uint32_t b = sb_.data_start; b < sb_.total_blocks; b++)
        if (!bit_get(block_mirror_, b))
            free_data_blocks_++;
    free_inodes_ = 0;
    for (uint32_t i = 1; i < sb_.inode_count; i++)
        if (!bit_get(inode_mirror_, i))
            free_inodes_++;
    block_cursor_ = sb_.data_start;
    inode_cursor_ = 1;
    // Budgets: a directory mutation may split leaves a few times; frees touch
    // every block-bitmap block in the worst case.
    credits_dir_mut_ = 28 + prov_extra_credits();
    credits_free_ = 8 + sb_.block_bitmap_blocks + prov_extra_credits();
    credits_rename_ = 40 + sb_.block_bitmap_blocks + prov_extra_credits();
    return 0;
}

// Frees on-disk inodes that lost their last link while open when a crash hit
// before their deferred free. `keep` lists inodes adopted from an upgrade
// capsule whose handles are still open.
int BentoFs::reclaim_orphans(const std::set<uint32_t>& keep) {
    std::vector<uint32_t> orphans;
    for (uint32_t ino = 1; ino < sb_.inode_count; ino++) {
        if (ino == kRootIno || ino == kProvIno || !bit_get(inode_mirror_, ino))
            continue;
        if (keep.count(ino))
            continue;
        DiskInode d;
        int err = read_raw_inode(ino, &d);
        if (err)
            return err;
        if (d.kind != kKindFree && d.nlink == 0)
            orphans.push_back(ino);
    }
    for (uint32_t ino : orphans) {
        TransactionHandle h;
        int err = begin(credits_free_, &h);
        if (err)
            return err;
        auto st = iget(ino);
        auto lk = lock_inode(*st);
        err = free_all_blocks(&h, *st);
        if (!err)
            err = free_inode(&h, *st);
        if (!err)
            err = journal_inode(&h, *st);
        lk.unlock();
        end(&h);
        if (err)
            return err;
    }
    return 0;
}

// Allocation

uint32_t BentoFs::bitmap_blocks_for(const std::set<uint32_t>& blocks) const {
    std::set<uint32_t> bms;
    for (uint32_t b : blocks)
        bms.insert(b / kBitsPerBlock);
    return (uint32_t)bms.size();
}

int BentoFs::alloc_block_reserved(uint32_t* out) {
    std::lock_guard lk(alloc_mu_);
    if (free_data_blocks_ == 0)
        return ENOSPC;
    uint32_t b = block_cursor_;
    for (uint32_t scanned = 0; scanned < sb_.total_blocks; scanned++, b++) {
        if (b >= sb_.total_blocks)
            b = sb_.data_start;
        if (!bit_get(block_mirror_, b)) {
            bit_set(block_mirror_, b);
            free_data_blocks_--;
            block_cursor_ = b + 1;
            *out = b;
            return 0;
        }
    }
    return ENOSPC;
}

int BentoFs::alloc_block_eager(TransactionHandle* h, uint32_t* out) {
    int err = alloc_block_reserved(out);
    if (err)
        return err;
    BufferHead bh;
    uint32_t bmblock = sb_.block_bitmap_start + *out / kBitsPerBlock;
    if ((err = dev_->getblk(bmblock, &bh)) != 0)
        return err;
    uint32_t bit = *out % kBitsPerBlock;
    bh.data_mut()[bit / 8] |= (uint8_t)(1u << (bit % 8));
    return jwrite(h, bh);
}

int BentoFs::free_block_eager(TransactionHandle* h, uint32_t blockno) {
    BufferHead bh;
    uint32_t bmblock = sb_.block_bitmap_start + blockno / kBitsPerBlock;
    int err = dev_->getblk(bmblock, &bh);
    if (err)
        return err;
    uint32_t bit = blockno % kBitsPerBlock;
    bh.data_mut()[bit / 8] &= (uint8_t)~(1u << (bit % 8));
    if ((err = jwrite(h, bh)) != 0)
        return err;
    std::lock_guard lk(alloc_mu_);
    assert(bit_get(block_mirror_, blockno));
    bit_clear(block_mirror_, blockno);
    free_data_blocks_++;
    return 0;
}

int BentoFs::set_reserved_bits_eager(TransactionHandle* h,
                                     const std::set<uint32_t>& blocks) {
    // Group by bitmap block so each is captured once.
    std::map<uint32_t, std::vector<uint32_t>> by_bm;
    for (uint32_t b : blocks)
        by_bm[sb_.block_bitmap_start + b / kBitsPerBlock].push_back(b);
    for (auto& [bmblock, bs] : by_bm) {
        BufferHead bh;
        int err = dev_->getblk(bmblock, &bh);
        if (err)
            return err;
        for (uint32_t b : bs) {
            uint32_t bit = b % kBitsPerBlock;
            bh.data_mut()[bit / 8] |= (uint8_t)(1u << (bit % 8));
        }
        if ((err = jwrite(h, bh)) != 0)
            return err;
    }
    return 0;
}

int BentoFs::alloc_inode(TransactionHandle* h, uint32_t kind, uint32_t* out) {
    (void)kind;
    uint32_t ino = 0;
    {
        std::lock_guard lk(alloc_mu_);
        uint32_t i = inode_cursor_;
        for (uint32_t scanned = 0; scanned < sb_.inode_count; scanned++, i++) {
            if (i >= sb_.inode_count)
                i = 1;
            if (i == kProvIno)
                continue;  // reserved for the provenance log
            if (!bit_get(inode_mirror_, i)) {
                bit_set(inode_mirror_, i);
                free_inodes_--;
                inode_cursor_ = i + 1;
                ino = i;
                break;
            }
        }
        if (ino == 0)
            return ENOSPC;
    }
    BufferHead bh;
    uint32_t bmblock = sb_.inode_bitmap_start + ino / kBitsPerBlock;
    int err = dev_->getblk(bmblock, &bh);
    if (err)
        return err;
    uint32_t bit = ino % kBitsPerBlock;
    bh.data_mut()[bit / 8] |= (uint8_t)(1u << (bit % 8));
    if ((err = jwrite(h, bh)) != 0)
        return err;
    *out = ino;
    return 0;
}

int BentoFs::free_inode(TransactionHandle* h, InodeState& st) {
    BufferHead bh;
    uint32_t bmblock = sb_.inode_bitmap_start + st.ino / kBitsPerBlock;
    int err = dev_->getblk(bmblock, &bh);
    if (err)
        return err;
    uint32_t bit = st.ino % kBitsPerBlock;
    bh.data_mut()[bit / 8] &= (uint8_t)~(1u << (bit % 8));
    if ((err = jwrite(h, bh)) != 0)
        return err;
    st.disk = DiskInode{};
    st.unlinked = false;
    {
        std::lock_guard lk(alloc_mu_);
        bit_clear(inode_mirror_, st.ino);
        free_inodes_++;
    }
    return 0;
}

// Inode cache

std::shared_ptr<BentoFs::InodeState> BentoFs::iget(uint32_t ino) {
    std::lock_guard lk(icache_mu_);
    auto& slot = icache_[ino];
    if (!slot) {
        slot = std::make_shared<InodeState>();
        slot->ino = ino;
    }
    return slot;
}

int BentoFs::read_raw_inode(uint32_t ino, DiskInode* out) {
    BufferHead bh;
    int err = dev_->bread(sb_.inode_block(ino), &bh);
    if (err)
        return err;
    *out = DiskInode::decode(bh.data().subspan(sb_.inode_offset(ino)));
    return 0;
}

std::unique_lock<std::mutex> BentoFs::lock_inode(InodeState& st) {
    std::unique_lock lk(st.mu);
    if (!st.loaded) {
        if (read_raw_inode(st.ino, &st.disk) == 0) {
            st.loaded = true;
            // Count allocated blocks (data + pointer blocks) once.
            uint64_t count = 0;
            auto count_tree = [&](uint32_t blockno, int depth, auto&& self) -> void {
                if (blockno == 0)
                    return;
                count++;
                if (depth == 0)
                    return;
                BufferHead bh;
                if (dev_->bread(blockno, &bh) != 0)
                    return;
                std::vector<uint8_t> copy(bh.data().begin(), bh.data().end());
                bh.release();
                for (uint32_t i = 0; i < kPtrsPerBlock; i++)
                    self(get_u32(copy.data() + 4 * i), depth - 1, self);
            };
            for (uint32_t i = 0; i < kNumDirect; i++)
                count_tree(st.disk.direct[i], 0, count_tree);
            count_tree(st.disk.indirect, 1, count_tree);
            count_tree(st.disk.dindirect, 2, count_tree);
            st.alloc_block_count = count;
        }
    }
    return lk;
}

FileAttr BentoFs::attr_of(const InodeState& st) const {
    const DiskInode& d = st.view();
    FileAttr a;
    a.ino = st.ino;
    a.size = d.size;
    a.blocks = st.alloc_block_count * (kBlockSize / 512);
    a.kind = kind_to_api(d.kind);
    a.perm = d.perm;
    a.nlink = d.nlink;
    a.uid = d.uid;
    a.gid = d.gid;
    a.atime = d.atime;
    a.mtime = d.mtime;
    a.ctime = d.ctime;
    return a;
}

// Journal plumbing

int BentoFs::begin(uint32_t credits, TransactionHandle* h) {
    if (!opts_.journal_enabled)
        return 0;
    return journal_->begin_op(credits, h);
}

int BentoFs::jwrite(TransactionHandle* h, BufferHead& bh) {
    if (!opts_.journal_enabled) {
        bh.mark_dirty();
        return 0;
    }
    return journal_->write_block(h, bh);
}

void BentoFs::end(TransactionHandle* h) {
    if (!opts_.journal_enabled) {
        dev_->sync_all();
        return;
    }
    journal_->end_op(h);
}

int BentoFs::journal_inode(TransactionHandle* h, InodeState& st) {
    BufferHead bh;
    int err = dev_->getblk(sb_.inode_block(st.ino), &bh);
    if (err)
        return err;
    st.disk.encode(bh.data_mut().subspan(sb_.inode_offset(st.ino)));
    return jwrite(h, bh);
}

// Block mapping

// Resolves (and optionally allocates) the device block backing file block
// fbi. Allocation is two-phase: probe which levels of the pointer chain are
// missing, reserve all of them, then wire slots. A failed reservation frees
// what was taken before anything was wired, so ENOSPC cannot leave half-built
// structures behind.
int BentoFs::bmap(InodeState& st, uint32_t fbi, MapMode mode, TransactionHandle* h,
                  uint32_t* blockno) {
    *blockno = 0;
    if ((uint64_t)fbi >= kMaxFileBlocks)
        return EFBIG;
    const bool alloc = mode != MapMode::kRead;
    assert(mode != MapMode::kEager || !st.pending);
    assert(mode != MapMode::kDeferred || st.pending);
    // Reads see the merged view when writeback is pending.
    DiskInode& d = st.pending ? st.pending->shadow : st.disk;

    auto read_slot = [&](uint32_t ptr_block, uint32_t slot, uint32_t* out) -> int {
        BufferHead bh;
        int err = dev_->bread(ptr_block, &bh);
        if (err)
            return err;
        *out = get_u32(bh.data().data() + 4 * slot);
        return 0;
    };

    // Probe the chain: levels[i] = {existing blockno or 0}.
    // chain description: for direct, one level (the data block); for
    // indirect, {ptr, data}; for dindirect, {l1, l2, data}.
    struct Level {
        uint32_t existing = 0;  // 0 = missing
        bool is_meta = false;
        // where to wire a fresh block: either an inode field or a slot of the
        // previous level's block
        uint32_t* field = nullptr;
        uint32_t slot = 0;
    };
    Level levels[3];
    int nlevels = 0;
    uint32_t rest = 0;
    if (fbi < kNumDirect) {
        levels[0] = {d.direct[fbi], false, &d.direct[fbi], 0};
        nlevels = 1;
    } else if ((rest = fbi - kNumDirect) < kPtrsPerBlock) {
        levels[0] = {d.indirect, true, &d.indirect, 0};
        levels[1] = {0, false, nullptr, rest};
        nlevels = 2;
    } else {
        rest -= kPtrsPerBlock;
        levels[0] = {d.dindirect, true, &d.dindirect, 0};
        levels[1] = {0, true, nullptr, rest / kPtrsPerBlock};
        levels[2] = {0, false, nullptr, rest % kPtrsPerBlock};
        nlevels = 3;
    }
    for (int i = 1; i < nlevels; i++) {
        if (levels[i - 1].existing == 0)
            break;
        int err = read_slot(levels[i - 1].existing, levels[i].slot, &levels[i].existing);
        if (err)
            return err;
    }
    if (levels[nlevels - 1].existing) {
        *blockno = levels[nlevels - 1].existing;
        return 0;
    }
    if (!alloc)
        return 0;

    // Reserve every missing level, all or nothing.
    int first_missing = 0;
    while (levels[first_missing].existing)
        first_missing++;
    uint32_t fresh[3] = {};
    for (int i = first_missing; i < nlevels; i++) {
        int err = (mode == MapMode::kEager) ? alloc_block_eager(h, &fresh[i])
                                            : alloc_block_reserved(&fresh[i]);
        if (err) {
            for (int k = first_missing; k < i; k++) {
                if (mode == MapMode::kEager)
                    free_block_eager(h, fresh[k]);
                else {
                    std::lock_guard lk(alloc_mu_);
                    bit_clear(block_mirror_, fresh[k]);
                    free_data_blocks_++;
                }
            }
            return err;
        }
    }

    // Wire: zero-fill each fresh block, then point its parent at it.
    for (int i = first_missing; i < nlevels; i++) {
        BufferHead bh;
        int err = dev_->getblk(fresh[i], &bh);
        if (err)
            return err;
        std::memset(bh.data_mut().data(), 0, kBlockSize);
        if (mode == MapMode::kEager) {
            if ((err = jwrite(h, bh)) != 0)
                return err;
        } else {
            st.pending->reserved.insert(fresh[i]);
            auto& set = levels[i].is_meta ? st.pending->meta_blocks
                                          : st.pending->data_blocks;
            if (set.insert(fresh[i]).second)
                dev_->pin(fresh[i]);
        }
        st.alloc_block_count++;
        bh.release();
        if (levels[i].field) {
            *levels[i].field = fresh[i];
        } else {
            uint32_t parent = levels[i - 1].existing ? levels[i - 1].existing
                                                     : fresh[i - 1];
            BufferHead pb;
            if ((err = dev_->getblk(parent, &pb)) != 0)
                return err;
            put_u32(pb.data_mut().data() + 4 * levels[i].slot, fresh[i]);
            if (mode == MapMode::kEager) {
                if ((err = jwrite(h, pb)) != 0)
                    return err;
            } else {
                if (st.pending->meta_blocks.insert(parent).second)
                    dev_->pin(parent);
            }
        }
    }
    *blockno = fresh[nlevels - 1];
    return 0;
}

int BentoFs::write_file_block(TransactionHandle* h, InodeState& st, uint32_t fbi,
                              std::span<const uint8_t> bytes, uint32_t offset_in_block) {
    assert(offset_in_block + bytes.size() <= kBlockSize);
    MapMode mode = h ? MapMode::kEager : MapMode::kDeferred;
    uint32_t blockno = 0;
    int err = bmap(st, fbi, mode, h, &blockno);
    if (err)
        return err;
    BufferHead bh;
    if ((err = dev_->getblk(blockno, &bh)) != 0)
        return err;
    std::memcpy(bh.data_mut().data() + offset_in_block, bytes.data(), bytes.size());
    if (mode == MapMode::kEager)
        return jwrite(h, bh);
    if (st.pending->data_blocks.insert(blockno).second)
        dev_->pin(blockno);
    return 0;
}

// Writeback materialization: fold one inode's deferred data, bitmap bits and
// inode update into journal transactions. Everything fits one transaction in
// the common case; oversized sets flush data-only chunks first (those blocks
// are unreferenced free space if we crash before the final transaction).
int BentoFs::materialize(const std::shared_ptr<InodeState>& st) {
    const uint32_t max_txn = opts_.journal_enabled
                                 ? journal_->max_transaction_blocks()
                                 : UINT32_MAX;
    for (;;) {
        uint32_t credits;
        {
            std::unique_lock lk(st->mu);
            if (!st->pending)
                return 0;
            uint64_t need = st->pending->data_blocks.size() +
                            st->pending->meta_blocks.size() +
                            bitmap_blocks_for(st->pending->reserved) + 1;
            credits = (uint32_t)std::min<uint64_t>(need, max_txn);
        }
        TransactionHandle h;
        int err = begin(credits, &h);
        if (err)
            return err;
        std::unique_lock lk(st->mu);
        if (!st->pending) {
            lk.unlock();
            end(&h);
            return 0;
        }
        Pending& p = *st->pending;
        uint64_t need = p.data_blocks.size() + p.meta_blocks.size() +
                        bitmap_blocks_for(p.reserved) + 1;
        if (need > credits) {
            // Flush a data-only chunk and retry for the rest.
            uint32_t budget = credits;
            std::vector<uint32_t> chunk;
            for (uint32_t b : p.data_blocks) {
                if (chunk.size() >= budget)
                    break;
                chunk.push_back(b);
            }
            for (uint32_t b : chunk) {
                BufferHead bh;
                if ((err = dev_->getblk(b, &bh)) != 0)
                    break;
                if ((err = jwrite(&h, bh)) != 0)
                    break;
                p.data_blocks.erase(b);
                dev_->unpin(b);
            }
            lk.unlock();
            end(&h);
            if (err)
                return err;
            continue;
        }
        for (uint32_t b : p.data_blocks) {
            BufferHead bh;
            if ((err = dev_->getblk(b, &bh)) != 0)
                break;
            if ((err = jwrite(&h, bh)) != 0)
                break;
        }
        if (!err)
            for (uint32_t b : p.meta_blocks) {
                BufferHead bh;
                if ((err = dev_->getblk(b, &bh)) != 0)
                    break;
                if ((err = jwrite(&h, bh)) != 0)
                    break;
            }
        if (!err)
            err = set_reserved_bits_eager(&h, p.reserved);
        if (!err) {
            st->disk = p.shadow;
            err = journal_inode(&h, *st);
        }
        if (!err) {
            for (uint32_t b : p.data_blocks)
                dev_->unpin(b);
            for (uint32_t b : p.meta_blocks)
                dev_->unpin(b);
            st->pending.reset();
        }
        lk.unlock();
        end(&h);
        return err;
    }
}

int BentoFs::materialize_all() {
    std::vector<std::shared_ptr<InodeState>> dirty;
    {
        std::lock_guard lk(icache_mu_);
        for (auto& [ino, st] : icache_)
            if (st->pending)
                dirty.push_back(st);
    }
    for (auto& st : dirty) {
        int err = materialize(st);
        if (err)
            return err;
    }
    return 0;
}

void BentoFs::discard_pending(InodeState& st) {
    if (!st.pending)
        return;
    Pending& p = *st.pending;
    if (opts_.record_dropped_blocks) {
        std::lock_guard lk(drops_mu_);
        for (uint32_t b : p.data_blocks)
            dropped_.push_back(b);
    }
    for (uint32_t b : p.data_blocks)
        dev_->unpin(b);
    for (uint32_t b : p.meta_blocks)
        dev_->unpin(b);
    {
        std::lock_guard lk(alloc_mu_);
        for (uint32_t b : p.reserved) {
            assert(bit_get(block_mirror_, b));
            bit_clear(block_mirror_, b);
            free_data_blocks_++;
        }
    }
    st.alloc_block_count -= p.reserved.size();
    st.pending.reset();
}

std::vector<uint64_t> BentoFs::dropped_blocks() const {
    std::lock_guard lk(drops_mu_);
    return dropped_;
}

// Frees every committed block of the inode. Blocks reserved by pending
// writeback are skipped: they have no committed bitmap bits and are returned
// by discard_pending.
int BentoFs::free_all_blocks(TransactionHandle* h, InodeState& st) {
    auto reserved = [&](uint32_t b) {
        return st.pending && st.pending->reserved.count(b);
    };
    auto free_one = [&](uint32_t b) -> int {
        if (b == 0 || reserved(b))
            return 0;
        st.alloc_block_count--;
        return free_block_eager(h, b);
    };
    std::function<int(uint32_t, int)> free_tree = [&](uint32_t b, int depth) -> int {
        if (b == 0 || reserved(b))
            return 0;
        if (depth > 0) {
            BufferHead bh;
            int err = dev_->bread(b, &bh);
            if (err)
                return err;
            std::vector<uint8_t> copy(bh.data().begin(), bh.data().end());
            bh.release();
            for (uint32_t i = 0; i < kPtrsPerBlock; i++) {
                int e2 = free_tree(get_u32(copy.data() + 4 * i), depth - 1);
                if (e2)
                    return e2;
            }
        }
        return free_one(b);
    };
    for (uint32_t i = 0; i < kNumDirect; i++) {
        int err = free_one(st.disk.direct[i]);
        if (err)
            return err;
        st.disk.direct[i] = 0;
    }
    int err = free_tree(st.disk.indirect, 1);
    if (err)
        return err;
    st.disk.indirect = 0;
    err = free_tree(st.disk.dindirect, 2);
    if (err)
        return err;
    st.disk.dindirect = 0;
    st.disk.size = 0;
    return 0;
}

// Truncation to new_size: frees mapped blocks past the boundary and zeroes
// the vacated pointer slots. The caller materialized any pending writeback.
int BentoFs::truncate_blocks(TransactionHandle* h, InodeState& st, uint64_t new_size) {
    assert(!st.pending);
    const uint64_t keep = (new_size + kBlockSize - 1) / kBlockSize;
    auto free_one = [&](uint32_t b) -> int {
        if (b == 0)
            return 0;
        st.alloc_block_count--;
        return free_block_eager(h, b);
    };
    for (uint64_t i = keep; i < kNumDirect; i++) {
        int err = free_one(st.disk.direct[i]);
        if (err)
            return err;
        st.disk.direct[i] = 0;
    }
    // Single indirect covers file blocks [12, 12+1024).
    if (st.disk.indirect) {
        if (keep <= kNumDirect) {
            BufferHead bh;
            int err = dev_->bread(st.disk.indirect, &bh);
            if (err)
                return err;
            std::vector<uint8_t> copy(bh.data().begin(), bh.data().end());
            bh.release();
            for (uint32_t i = 0; i < kPtrsPerBlock; i++) {
                int e2 = free_one(get_u32(copy.data() + 4 * i));
                if (e2)
                    return e2;
            }
            if ((err = free_one(st.disk.indirect)) != 0)
                return err;
            st.disk.indirect = 0;
        } else if (keep < kNumDirect + kPtrsPerBlock) {
            BufferHead bh;
            int err = dev_->getblk(st.disk.indirect, &bh);
            if (err)
                return err;
            bool changed = false;
            for (uint64_t i = keep - kNumDirect; i < kPtrsPerBlock; i++) {
                uint32_t b = get_u32(bh.data().data() + 4 * i);
                if (!b)
                    continue;
                if ((err = free_one(b)) != 0)
                    return err;
                put_u32(bh.data_mut().data() + 4 * i, 0);
                changed = true;
            }
            if (changed && (err = jwrite(h, bh)) != 0)
                return err;
        }
    }
    // Double indirect covers [12+1024, ...).
    if (st.disk.dindirect) {
        const uint64_t base = kNumDirect + kPtrsPerBlock;
        if (keep <= base) {
            BufferHead l1;
            int err = dev_->bread(st.disk.dindirect, &l1);
            if (err)
                return err;
            std::vector<uint8_t> l1copy(l1.data().begin(), l1.data().end());
            l1.release();
            for (uint32_t i = 0; i < kPtrsPerBlock; i++) {
                uint32_t l2 = get_u32(l1copy.data() + 4 * i);
                if (!l2)
                    continue;
                BufferHead bh;
                if ((err = dev_->bread(l2, &bh)) != 0)
                    return err;
                std::vector<uint8_t> copy(bh.data().begin(), bh.data().end());
                bh.release();
                for (uint32_t j = 0; j < kPtrsPerBlock; j++) {
                    int e2 = free_one(get_u32(copy.data() + 4 * j));
                    if (e2)
                        return e2;
                }
                if ((err = free_one(l2)) != 0)
                    return err;
            }
            if ((err = free_one(st.disk.dindirect)) != 0)
                return err;
            st.disk.dindirect = 0;
        } else {
            BufferHead l1;
            int err = dev_->getblk(st.disk.dindirect, &l1);
            if (err)
                return err;
            bool l1changed = false;
            for (uint32_t i = 0; i < kPtrsPerBlock; i++) {
                uint32_t l2 = get_u32(l1.data().data() + 4 * i);
                if (!l2)
                    continue;
                const uint64_t l2_base = base + (uint64_t)i * kPtrsPerBlock;
                if (l2_base >= keep) {
                    BufferHead bh;
                    if ((err = dev_->bread(l2, &bh)) != 0)
                        return err;
                    std::vector<uint8_t> copy(bh.data().begin(), bh.data().end());
                    bh.release();
                    for (uint32_t j = 0; j < kPtrsPerBlock; j++) {
                        int e2 = free_one(get_u32(copy.data() + 4 * j));
                        if (e2)
                            return e2;
                    }
                    if ((err = free_one(l2)) != 0)
                        return err;
                    put_u32(l1.data_mut().data() + 4 * i, 0);
                    l1changed = true;
                } else if (l2_base + kPtrsPerBlock > keep) {
                    BufferHead bh;
                    if ((err = dev_->getblk(l2, &bh)) != 0)
                        return err;
                    bool changed = false;
                    for (uint64_t j = keep - l2_base; j < kPtrsPerBlock; j++) {
                        uint32_t b = get_u32(bh.data().data() + 4 * j);
                        if (!b)
                            continue;
                        if ((err = free_one(b)) != 0)
                            return err;
                        put_u32(bh.data_mut().data() + 4 * j, 0);
                        changed = true;
                    }
                    if (changed && (err = jwrite(h, bh)) != 0)
                        return err;
                }
            }
            if (l1changed && (err = jwrite(h, l1)) != 0)
                return err;
        }
    }
    st.disk.size = new_size;
    return 0;
}

int BentoFs::access_check(const RequestContext& ctx, const DiskInode& d,
                          uint32_t mask) const {
    if (mask == 0 || ctx.uid == 0)
        return 0;
    uint32_t shift = ctx.uid == d.uid ? 6 : (ctx.gid == d.gid ? 3 : 0);
    uint32_t bits = (d.perm >> shift) & 7;
    return (mask & ~bits) != 0 ? EACCES : 0;
}

// Provenance log plumbing

bool BentoFs::prov_log_inode_exists() {
    std::lock_guard lk(alloc_mu_);
    return bit_get(inode_mirror_, kProvIno);
}

int BentoFs::prov_create_log_inode() {
    TransactionHandle h;
    int err = begin(4, &h);
    if (err)
        return err;
    auto st = iget(kProvIno);
    {
        std::lock_guard slk(st->mu);
        {
            std::lock_guard lk(alloc_mu_);
            assert(!bit_get(inode_mirror_, kProvIno));
            bit_set(inode_mirror_, kProvIno);
            free_inodes_--;
        }
        BufferHead bh;
        uint32_t bmblock = sb_.inode_bitmap_start + kProvIno / kBitsPerBlock;
        if ((err = dev_->getblk(bmblock, &bh)) == 0) {
            bh.data_mut()[(kProvIno % kBitsPerBlock) / 8] |=
                (uint8_t)(1u << (kProvIno % 8));
            err = jwrite(&h, bh);
        }
        if (!err) {
            st->loaded = true;
            st->disk = DiskInode{};
            st->disk.kind = kKindFile;
            st->disk.nlink = 0;  // lives outside the namespace
            st->disk.perm = 0600;
            st->disk.atime = st->disk.mtime = st->disk.ctime = now();
            st->alloc_block_count = 0;
            err = journal_inode(&h, *st);
        }
    }
    end(&h);
    return err;
}

int BentoFs::prov_append_log(TransactionHandle* h, std::span<const uint8_t> record) {
    auto st = iget(kProvIno);
    auto lk = lock_inode(*st);
    assert(st->disk.kind == kKindFile && !st->pending);
    uint64_t offset = st->disk.size;
    if (offset + record.size() > kMaxFileSize)
        return ENOSPC;
    size_t done = 0;
    while (done < record.size()) {
        uint64_t pos = offset + done;
        uint32_t fbi = (uint32_t)(pos / kBlockSize);
        uint32_t off = (uint32_t)(pos % kBlockSize);
        size_t chunk = std::min(record.size() - done, (size_t)(kBlockSize - off));
        int err = write_file_block(h, *st, fbi, record.subspan(done, chunk), off);
        if (err)
            return err;
        done += chunk;
    }
    st->disk.size = offset + record.size();
    st->disk.mtime = st->disk.ctime = now();
    return journal_inode(h, *st);
}

int BentoFs::prov_read_log(std::vector<uint8_t>* out) {
    auto st = iget(kProvIno);
    auto lk = lock_inode(*st);
    if (st->disk.kind != kKindFile)
        return ENOENT;
    out->assign(st->disk.size, 0);
    uint64_t done = 0;
    while (done < st->disk.size) {
        uint32_t fbi = (uint32_t)(done / kBlockSize);
        uint64_t chunk = std::min<uint64_t>(st->disk.size - done, kBlockSize);
        uint32_t blockno = 0;
        int err = bmap(*st, fbi, MapMode::kRead, nullptr, &blockno);
        if (err)
            return err;
        if (blockno) {
            BufferHead bh;
            if ((err = dev_->bread(blockno, &bh)) != 0)
                return err;
            std::memcpy(out->data() + done, bh.data().data(), chunk);
        }
        done += chunk;
    }
    return 0;
}

// Live upgrade

std::optional<TransferCapsule> BentoFs::update_prepare() {
    if (!mounted())
        return std::nullopt;
    // Quiesced by the caller; committing pending writeback here means the
    // capsule carries no in-memory file data.
    materialize_all();
    if (journal_)
        journal_->force_commit();

    TransferCapsule c;
    c.prov = prov_capsule_state();
    c.format_version = c.prov ? kCapsuleVersionProv : kCapsuleVersionBase;
    c.device = std::move(dev_);
    c.journal = std::move(journal_);
    {
        std::lock_guard lk(alloc_mu_);
        c.block_cursor = block_cursor_;
        c.inode_cursor = inode_cursor_;
    }
    {
        std::lock_guard lk(handles_mu_);
        c.next_fh = next_fh_;
        for (auto& [fh, oh] : handles_)
            c.handles.push_back(OpenHandleRec{fh, oh.ino, oh.flags, oh.is_dir});
        handles_.clear();
    }
    {
        std::lock_guard lk(icache_mu_);
        for (auto& [ino, st] : icache_) {
            assert(!st->pending);
            if (st->unlinked)
                c.deferred_free.push_back(DeferredFreeRec{ino, st->handles});
        }
        icache_.clear();
    }
    return c;
}

int BentoFs::update_transfer(TransferCapsule&& capsule) {
    if (capsule.format_version > accepted_capsule_version())
        return kErrVersionMismatch;
    if (mounted())
        return EBUSY;
    // Validate before taking ownership so a refused capsule stays usable.
    BufferHead bh;
    int err = capsule.device->bread(kSuperblockBlock, &bh);
    if (err)
        return err;
    Superblock sb;
    if (!Superblock::decode(bh.data(), &sb))
        return kErrBadMagic;
    bh.release();
    if (!opts_.journal_enabled && capsule.journal)
        return kErrTransferRefused;

    sb_ = sb;
    dev_ = std::move(capsule.device);
    journal_ = std::move(capsule.journal);
    if ((err = build_mirrors()) != 0)
        return err;
    {
        std::lock_guard lk(alloc_mu_);
        block_cursor_ = capsule.block_cursor ? capsule.block_cursor : sb_.data_start;
        inode_cursor_ = capsule.inode_cursor ? capsule.inode_cursor : 1;
    }
    std::set<uint32_t> keep;
    {
        std::lock_guard lk(handles_mu_);
        next_fh_ = capsule.next_fh;
        for (const auto& rec : capsule.handles)
            handles_[rec.fh] = OpenHandle{rec.ino, rec.flags, rec.is_dir};
    }
    for (const auto& rec : capsule.handles) {
        auto st = iget(rec.ino);
        auto lk = lock_inode(*st);
        st->handles++;
    }
    for (const auto& rec : capsule.deferred_free) {
        keep.insert(rec.ino);
        auto st = iget(rec.ino);
        auto lk = lock_inode(*st);
        st->unlinked = true;
    }
    if ((err = reclaim_orphans(keep)) != 0)
        return err;
    return prov_adopt(capsule.prov);
}

}  // namespace bento::fs
