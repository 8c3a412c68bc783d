#ifndef BENTO_FS_MKFS_HPP
#define BENTO_FS_MKFS_HPP

#include <string>

#include "bento/fs/layout.hpp"

namespace bento::fs {

// Formats image_path in place (creating or resizing the file), writing the
// superblock, preset bitmaps, an empty inode table, a zeroed journal region,
// and the root directory. Deterministic: formatting the same geometry twice
// produces identical images.
int mkfs(const std::string& image_path, const MkfsGeometry& geometry);

}  // namespace bento::fs

#endif  // BENTO_FS_MKFS_HPP
