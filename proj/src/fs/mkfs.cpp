#include "bento/fs/mkfs.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cstring>
#include <vector>

namespace bento::fs {

namespace {

int write_block(int fd, uint32_t blockno, std::span<const uint8_t> bytes) {
    ssize_t n = pwrite(fd, bytes.data(), bytes.size(), (off_t)blockno * kBlockSize);
    return n == (ssize_t)bytes.size() ? 0 : EIO;
}

void set_bit(std::vector<uint8_t>& bitmap, uint32_t bit) {
    bitmap[bit / 8] |= (uint8_t)(1u << (bit % 8));
}

}  // namespace

int mkfs(const std::string& image_path, const MkfsGeometry& geometry) {
    Superblock sb;
    int err = compute_superblock(geometry, &sb);
    if (err)
        return err;

    int fd = ::open(image_path.c_str(), O_CREAT | O_RDWR, 0644);
    if (fd < 0)
        return errno ? errno : EIO;
    // Truncating to zero first leaves every unwritten block zeroed, which
    // keeps the format deterministic when reformatting an old image.
    if (ftruncate(fd, 0) != 0 ||
        ftruncate(fd, (off_t)sb.total_blocks * kBlockSize) != 0) {
        err = errno ? errno : EIO;
        ::close(fd);
        return err;
    }

    std::vector<uint8_t> block(kBlockSize, 0);
    sb.encode(block);
    err = write_block(fd, kSuperblockBlock, block);

    // Inode bitmap: slot 0 is dead (ino 0 is the nil value), root is live.
    if (!err) {
        std::vector<uint8_t> ibmp(sb.inode_bitmap_blocks * (size_t)kBlockSize, 0);
        set_bit(ibmp, 0);
        set_bit(ibmp, kRootIno);
        for (uint32_t b = 0; b < sb.inode_bitmap_blocks && !err; b++)
            err = write_block(fd, sb.inode_bitmap_start + b,
                              {ibmp.data() + b * (size_t)kBlockSize, kBlockSize});
    }

    // Block bitmap: everything below data_start is metadata, plus the two
    // root-directory blocks.
    const uint32_t root_index_block = sb.data_start;
    const uint32_t root_leaf_block = sb.data_start + 1;
    if (!err) {
        std::vector<uint8_t> bbmp(sb.block_bitmap_blocks * (size_t)kBlockSize, 0);
        for (uint32_t b = 0; b < sb.data_start; b++)
            set_bit(bbmp, b);
        set_bit(bbmp, root_index_block);
        set_bit(bbmp, root_leaf_block);
        for (uint32_t b = 0; b < sb.block_bitmap_blocks && !err; b++)
            err = write_block(fd, sb.block_bitmap_start + b,
                              {bbmp.data() + b * (size_t)kBlockSize, kBlockSize});
    }

    // Root inode.
    if (!err) {
        std::memset(block.data(), 0, kBlockSize);
        DiskInode root;
        root.kind = kKindDir;
        root.nlink = 2;  // "." plus the parent link (itself)
        root.size = 2 * kBlockSize;
        root.perm = 0755;
        root.direct[0] = root_index_block;
        root.direct[1] = root_leaf_block;
        root.encode({block.data() + sb.inode_offset(kRootIno), kInodeSize});
        err = write_block(fd, sb.inode_block(kRootIno), block);
    }

    // Root directory pages: one-slot index plus a leaf holding "." and "..".
    if (!err) {
        DirIndexView idx;
        idx.global_depth = 0;
        idx.slots = {1};  // file block 1 = the leaf
        dir_build_index(idx, block);
        err = write_block(fd, root_index_block, block);
    }
    if (!err) {
        std::vector<DirEntryOnDisk> entries = {{kRootIno, "."}, {kRootIno, ".."}};
        dir_build_leaf(0, entries, block);
        err = write_block(fd, root_leaf_block, block);
    }

    if (!err && fdatasync(fd) != 0)
        err = EIO;
    ::close(fd);
    return err;
}

}  // namespace bento::fs
