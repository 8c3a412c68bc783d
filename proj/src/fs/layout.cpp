#include "bento/fs/layout.hpp"

#include <cassert>
#include <cstring>

namespace bento::fs {

void Superblock::encode(std::span<uint8_t> block) const {
    assert(block.size() >= kBlockSize);
    std::memset(block.data(), 0, kBlockSize);
    uint8_t* p = block.data();
    const uint32_t fields[] = {
        magic, version, total_blocks, block_size, inode_count, journal_start,
        journal_len, inode_bitmap_start, inode_bitmap_blocks, block_bitmap_start,
        block_bitmap_blocks, inode_table_start, inode_table_blocks, data_start,
        root_ino,
    };
    for (size_t i = 0; i < std::size(fields); i++)
        put_u32(p + 4 * i, fields[i]);
}

bool Superblock::decode(std::span<const uint8_t> block, Superblock* out) {
    if (block.size() < kBlockSize)
        return false;
    const uint8_t* p = block.data();
    Superblock sb;
    uint32_t* fields[] = {
        &sb.magic, &sb.version, &sb.total_blocks, &sb.block_size, &sb.inode_count,
        &sb.journal_start, &sb.journal_len, &sb.inode_bitmap_start,
        &sb.inode_bitmap_blocks, &sb.block_bitmap_start, &sb.block_bitmap_blocks,
        &sb.inode_table_start, &sb.inode_table_blocks, &sb.data_start, &sb.root_ino,
    };
    for (size_t i = 0; i < std::size(fields); i++)
        *fields[i] = get_u32(p + 4 * i);
    if (sb.magic != kFsMagic || sb.version != kFsVersion ||
        sb.block_size != kBlockSize)
        return false;
    // Regions must be ordered, disjoint, and inside the device.
    if (sb.journal_start < 2 || sb.inode_bitmap_start < sb.journal_start + sb.journal_len ||
        sb.block_bitmap_start < sb.inode_bitmap_start + sb.inode_bitmap_blocks ||
        sb.inode_table_start < sb.block_bitmap_start + sb.block_bitmap_blocks ||
        sb.data_start < sb.inode_table_start + sb.inode_table_blocks ||
        sb.data_start >= sb.total_blocks)
        return false;
    *out = sb;
    return true;
}

void DiskInode::encode(std::span<uint8_t> dst) const {
    assert(dst.size() >= kInodeSize);
    uint8_t* p = dst.data();
    std::memset(p, 0, kInodeSize);
    put_u32(p + 0, kind);
    put_u32(p + 4, nlink);
    put_u64(p + 8, size);
    put_u32(p + 16, perm);
    put_u32(p + 20, uid);
    put_u32(p + 24, gid);
    put_u64(p + 28, atime.sec);
    put_u32(p + 36, atime.nsec);
    put_u64(p + 40, mtime.sec);
    put_u32(p + 48, mtime.nsec);
    put_u64(p + 52, ctime.sec);
    put_u32(p + 60, ctime.nsec);
    for (uint32_t i = 0; i < kNumDirect; i++)
        put_u32(p + 64 + 4 * i, direct[i]);
    put_u32(p + 112, indirect);
    put_u32(p + 116, dindirect);
}

DiskInode DiskInode::decode(std::span<const uint8_t> src) {
    assert(src.size() >= kInodeSize);
    const uint8_t* p = src.data();
    DiskInode d;
    d.kind = get_u32(p + 0);
    d.nlink = get_u32(p + 4);
    d.size = get_u64(p + 8);
    d.perm = get_u32(p + 16);
    d.uid = get_u32(p + 20);
    d.gid = get_u32(p + 24);
    d.atime = {get_u64(p + 28), get_u32(p + 36)};
    d.mtime = {get_u64(p + 40), get_u32(p + 48)};
    d.ctime = {get_u64(p + 52), get_u32(p + 60)};
    for (uint32_t i = 0; i < kNumDirect; i++)
        d.direct[i] = get_u32(p + 64 + 4 * i);
    d.indirect = get_u32(p + 112);
    d.dindirect = get_u32(p + 116);
    return d;
}

int compute_superblock(const MkfsGeometry& g, Superblock* out) {
    if (g.total_blocks > 0xFFFFFFFFull)
        return kErrDeviceTooSmall;  // 32-bit block pointers
    Superblock sb;
    sb.total_blocks = (uint32_t)g.total_blocks;
    sb.journal_len = g.journal_len;
    sb.inode_count = g.inode_count;
    if (sb.inode_count == 0) {
        uint64_t autoc = g.total_blocks / 4;
        if (autoc < 64)
            autoc = 64;
        if (autoc > 65536)
            autoc = 65536;
        sb.inode_count = (uint32_t)autoc;
    }
    // Round the table up to whole blocks.
    sb.inode_table_blocks = (sb.inode_count + kInodesPerBlock - 1) / kInodesPerBlock;
    sb.inode_count = sb.inode_table_blocks * kInodesPerBlock;
    sb.inode_bitmap_blocks = (sb.inode_count + kBitsPerBlock - 1) / kBitsPerBlock;

    sb.journal_start = 2;
    sb.inode_bitmap_start = sb.journal_start + sb.journal_len;
    // The block bitmap covers the whole device.
    sb.block_bitmap_blocks =
        (uint32_t)((g.total_blocks + kBitsPerBlock - 1) / kBitsPerBlock);
    sb.block_bitmap_start = sb.inode_bitmap_start + sb.inode_bitmap_blocks;
    sb.inode_table_start = sb.block_bitmap_start + sb.block_bitmap_blocks;
    sb.data_start = sb.inode_table_start + sb.inode_table_blocks;

    // Root directory needs two data blocks and at least one block stays free.
    if (g.journal_len < 8 || (uint64_t)sb.data_start + 3 > g.total_blocks)
        return kErrDeviceTooSmall;
    *out = sb;
    return 0;
}

std::vector<DirEntryOnDisk> dir_parse_leaf(std::span<const uint8_t> block) {
    std::vector<DirEntryOnDisk> out;
    uint32_t used = get_u32(block.data() + 4);
    if (used > kBlockSize - kDirLeafHeader)
        return out;
    uint32_t pos = kDirLeafHeader;
    const uint32_t end = kDirLeafHeader + used;
    while (pos + 5 <= end) {
        uint32_t ino = get_u32(block.data() + pos);
        uint8_t name_len = block[pos + 4];
        if (ino == 0 || name_len == 0 || pos + 5 + name_len > end)
            break;
        DirEntryOnDisk e;
        e.ino = ino;
        e.name.assign((const char*)block.data() + pos + 5, name_len);
        out.push_back(std::move(e));
        pos += dir_entry_bytes(name_len);
    }
    return out;
}

uint16_t dir_leaf_local_depth(std::span<const uint8_t> block) {
    return get_u16(block.data());
}

bool dir_build_leaf(uint16_t local_depth, const std::vector<DirEntryOnDisk>& entries,
                    std::span<uint8_t> block) {
    assert(block.size() >= kBlockSize);
    uint32_t used = 0;
    for (const auto& e : entries)
        used += dir_entry_bytes(e.name.size());
    if (used > kBlockSize - kDirLeafHeader)
        return false;
    std::memset(block.data(), 0, kBlockSize);
    put_u16(block.data(), local_depth);
    put_u32(block.data() + 4, used);
    uint32_t pos = kDirLeafHeader;
    for (const auto& e : entries) {
        put_u32(block.data() + pos, e.ino);
        block[pos + 4] = (uint8_t)e.name.size();
        std::memcpy(block.data() + pos + 5, e.name.data(), e.name.size());
        pos += dir_entry_bytes(e.name.size());
    }
    return true;
}

bool dir_parse_index(std::span<const uint8_t> block, DirIndexView* out) {
    if (get_u32(block.data()) != kDirIndexMagic)
        return false;
    uint16_t depth = get_u16(block.data() + 4);
    if (depth > kDirMaxGlobalDepth)
        return false;
    out->global_depth = depth;
    out->slots.resize(1u << depth);
    for (size_t i = 0; i < out->slots.size(); i++)
        out->slots[i] = get_u32(block.data() + 8 + 4 * i);
    return true;
}

void dir_build_index(const DirIndexView& view, std::span<uint8_t> block) {
    assert(block.size() >= kBlockSize);
    assert(view.slots.size() == (size_t{1} << view.global_depth));
    std::memset(block.data(), 0, kBlockSize);
    put_u32(block.data(), kDirIndexMagic);
    put_u16(block.data() + 4, view.global_depth);
    for (size_t i = 0; i < view.slots.size(); i++)
        put_u32(block.data() + 8 + 4 * i, view.slots[i]);
}

}  // namespace bento::fs
