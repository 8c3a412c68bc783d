#ifndef BENTO_FS_LAYOUT_HPP
#define BENTO_FS_LAYOUT_HPP

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "bento/common.hpp"

// On-disk format. All integers little-endian.
//
//   block 0              reserved
//   block 1              superblock
//   [journal_start, +journal_len)
//   [inode_bitmap_start, +inode_bitmap_blocks)   bit per ino, bit 0 preset
//   [block_bitmap_start, +block_bitmap_blocks)   bit per device block
//   [inode_table_start, +inode_table_blocks)     128-byte inodes, slot = ino
//   [data_start, total_blocks)
//
// The block bitmap covers the whole device; metadata blocks are premarked
// allocated by mkfs, so "bit set" always means "in use".

namespace bento::fs {

inline constexpr uint32_t kFsMagic = 0x42454E54;  // "BENT" when read LE
inline constexpr uint32_t kFsVersion = 1;
inline constexpr uint32_t kBlockSize = 4096;
inline constexpr uint32_t kSuperblockBlock = 1;
inline constexpr uint32_t kInodeSize = 128;
inline constexpr uint32_t kInodesPerBlock = kBlockSize / kInodeSize;
inline constexpr uint32_t kBitsPerBlock = kBlockSize * 8;
inline constexpr uint32_t kRootIno = 1;
inline constexpr uint32_t kProvIno = 2;  // reserved, allocated lazily
inline constexpr uint32_t kMaxNameLen = 255;
inline constexpr uint32_t kNumDirect = 12;
inline constexpr uint32_t kPtrsPerBlock = kBlockSize / 4;
// One double-indirect tree maps 1024*1024 blocks = 4 GiB; that is the file
// size cap even though direct+indirect slots could map slightly past it.
inline constexpr uint64_t kMaxFileSize = 4ull << 30;
inline constexpr uint64_t kMaxFileBlocks =
    kNumDirect + kPtrsPerBlock + (uint64_t)kPtrsPerBlock * kPtrsPerBlock;

inline constexpr uint32_t kKindFree = 0;
inline constexpr uint32_t kKindFile = 1;
inline constexpr uint32_t kKindDir = 2;
inline constexpr uint32_t kKindSymlink = 3;

struct Superblock {
    uint32_t magic = kFsMagic;
    uint32_t version = kFsVersion;
    uint32_t total_blocks = 0;
    uint32_t block_size = kBlockSize;
    uint32_t inode_count = 0;  // table slots; usable inos are 1..inode_count-1
    uint32_t journal_start = 0;
    uint32_t journal_len = 0;
    uint32_t inode_bitmap_start = 0;
    uint32_t inode_bitmap_blocks = 0;
    uint32_t block_bitmap_start = 0;
    uint32_t block_bitmap_blocks = 0;
    uint32_t inode_table_start = 0;
    uint32_t inode_table_blocks = 0;
    uint32_t data_start = 0;
    uint32_t root_ino = kRootIno;

    void encode(std::span<uint8_t> block) const;
    static bool decode(std::span<const uint8_t> block, Superblock* out);

    uint64_t data_blocks() const { return total_blocks - data_start; }
    uint32_t inode_block(uint32_t ino) const {
        return inode_table_start + ino / kInodesPerBlock;
    }
    uint32_t inode_offset(uint32_t ino) const {
        return (ino % kInodesPerBlock) * kInodeSize;
    }
};

struct DiskInode {
    uint32_t kind = kKindFree;
    uint32_t nlink = 0;
    uint64_t size = 0;
    uint32_t perm = 0;
    uint32_t uid = 0;
    uint32_t gid = 0;
    Timespec atime, mtime, ctime;
    uint32_t direct[kNumDirect] = {};
    uint32_t indirect = 0;
    uint32_t dindirect = 0;

    void encode(std::span<uint8_t> dst) const;  // dst.size() >= kInodeSize
    static DiskInode decode(std::span<const uint8_t> src);

    friend bool operator==(const DiskInode&, const DiskInode&) = default;
};

// Geometry. inode_count 0 picks total_blocks/4 clamped to [64, 65536].
struct MkfsGeometry {
    uint64_t total_blocks = 0;
    uint32_t inode_count = 0;
    uint32_t journal_len = 256;
};

int compute_superblock(const MkfsGeometry& g, Superblock* out);

// Directory pages. Each directory stores an extendible-hash index in its own
// data blocks: file block 0 is the bucket directory, the other blocks are
// entry leaves. hash = fnv1a32(name); bucket = low global_depth bits.
//
// index root block:  u32 magic, u16 global_depth, u16 reserved,
//                    u32 leaf_file_block[1 << global_depth]
// leaf block:        u16 local_depth, u16 reserved, u32 used_bytes,
//                    packed entry records
// entry record:      u32 ino, u8 name_len, name bytes, zero padding to a
//                    4-byte boundary
inline constexpr uint32_t kDirIndexMagic = 0x42454E49;  // "BENI"
inline constexpr uint32_t kDirMaxGlobalDepth = 9;       // 512 slots fit one block
inline constexpr uint32_t kDirLeafHeader = 8;

struct DirEntryOnDisk {
    uint32_t ino = 0;
    std::string name;
};

inline uint32_t dir_hash(std::string_view name) {
    return fnv1a32({(const uint8_t*)name.data(), name.size()});
}
inline uint32_t dir_bucket(uint32_t hash, uint32_t depth) {
    return depth == 0 ? 0 : (hash & ((1u << depth) - 1));
}
inline uint32_t dir_entry_bytes(size_t name_len) {
    return (uint32_t)((5 + name_len + 3) & ~size_t{3});
}

std::vector<DirEntryOnDisk> dir_parse_leaf(std::span<const uint8_t> block);
uint16_t dir_leaf_local_depth(std::span<const uint8_t> block);
// Serializes header + packed records; fails (returns false) if they overflow
// one block.
bool dir_build_leaf(uint16_t local_depth, const std::vector<DirEntryOnDisk>& entries,
                    std::span<uint8_t> block);

struct DirIndexView {
    uint16_t global_depth = 0;
    std::vector<uint32_t> slots;  // leaf file-block indices, size 1<<depth
};
bool dir_parse_index(std::span<const uint8_t> block, DirIndexView* out);
void dir_build_index(const DirIndexView& view, std::span<uint8_t> block);

}  // namespace bento::fs

#endif  // BENTO_FS_LAYOUT_HPP
