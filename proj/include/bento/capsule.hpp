#ifndef BENTO_CAPSULE_HPP
#define BENTO_CAPSULE_HPP

#include <cstdint>
#include <memory>
#include <optional>
#include <vector>

namespace bento {

class BlockDevice;
class Journal;

// Versioned state package handed from an old file-system instance to its
// upgrade replacement while the connection gate is held exclusively. The
// handoff is an in-memory ownership transfer: once produced, the old
// instance retains no access path to anything inside.
//
// Versions: 0 = base file system; 1 = adds provenance state. An instance
// accepts any capsule whose version is <= the newest it understands.
inline constexpr uint32_t kCapsuleVersionBase = 0;
inline constexpr uint32_t kCapsuleVersionProv = 1;

struct OpenHandleRec {
    uint64_t fh = 0;
    uint32_t ino = 0;
    uint32_t flags = 0;  // open(2) access mode
    bool is_dir = false;
};

struct DeferredFreeRec {
    uint32_t ino = 0;
    uint32_t handle_count = 0;  // open handles keeping the unlinked inode alive
};

struct ProvCapsuleState {
    uint32_t log_ino = 0;
    uint64_t next_seq = 1;
};

struct TransferCapsule {
    uint32_t format_version = kCapsuleVersionBase;
    std::shared_ptr<BlockDevice> device;
    std::shared_ptr<Journal> journal;
    uint32_t block_cursor = 0;
    uint32_t inode_cursor = 0;
    uint64_t next_fh = 1;
    std::vector<OpenHandleRec> handles;
    std::vector<DeferredFreeRec> deferred_free;
    std::optional<ProvCapsuleState> prov;  // absent in version 0
};

}  // namespace bento

#endif  // BENTO_CAPSULE_HPP
