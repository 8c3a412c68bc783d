#ifndef BENTO_FS_FSCK_HPP
#define BENTO_FS_FSCK_HPP

#include <string>
#include <vector>

namespace bento::fs {

struct FsckReport {
    std::vector<std::string> violations;
    bool clean() const { return violations.empty(); }
};

// Structural consistency check of an unmounted image: bitmap/reference
// agreement, reachability from the root, link counts, hash placement of
// directory entries, and size/mapping consistency. Reads the image directly;
// shares nothing with the mounted read/write path.
int fsck_image(const std::string& image_path, FsckReport* report);

}  // namespace bento::fs

#endif  // BENTO_FS_FSCK_HPP
