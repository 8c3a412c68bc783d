#ifndef BENTO_COMMON_HPP
#define BENTO_COMMON_HPP

#include <cerrno>
#include <cstdint>
#include <cstring>
#include <functional>
#include <span>
#include <string>

namespace bento {

// All on-disk integers are little-endian. These helpers assume a
// little-endian host (asserted in blockdev.cpp at device open).
inline void put_u16(uint8_t* p, uint16_t v) { std::memcpy(p, &v, 2); }
inline void put_u32(uint8_t* p, uint32_t v) { std::memcpy(p, &v, 4); }
inline void put_u64(uint8_t* p, uint64_t v) { std::memcpy(p, &v, 8); }
inline uint16_t get_u16(const uint8_t* p) { uint16_t v; std::memcpy(&v, p, 2); return v; }
inline uint32_t get_u32(const uint8_t* p) { uint32_t v; std::memcpy(&v, p, 4); return v; }
inline uint64_t get_u64(const uint8_t* p) { uint64_t v; std::memcpy(&v, p, 8); return v; }

inline uint32_t fnv1a32(std::span<const uint8_t> data, uint32_t seed = 0x811c9dc5u) {
    uint32_t h = seed;
    for (uint8_t b : data) {
        h ^= b;
        h *= 0x01000193u;
    }
    return h;
}

inline uint64_t fnv1a64(std::span<const uint8_t> data, uint64_t seed = 0xcbf29ce484222325ull) {
    uint64_t h = seed;
    for (uint8_t b : data) {
        h ^= b;
        h *= 0x100000001b3ull;
    }
    return h;
}

struct Timespec {
    uint64_t sec = 0;
    uint32_t nsec = 0;

    friend bool operator==(const Timespec&, const Timespec&) = default;
};

// Host-injected clock; tests substitute a deterministic one.
using Clock = std::function<Timespec()>;

Clock system_clock();

// Errors are positive POSIX errno values (0 = success). Artifact-specific
// conditions get named aliases so call sites and tests stay readable.
inline constexpr int kErrNameInUse = EEXIST;          // register: name already active
inline constexpr int kErrNoSuchFs = ENOENT;           // register/unregister: unknown name
inline constexpr int kErrBadImage = EINVAL;           // image size not a block multiple
inline constexpr int kErrOutOfRange = EINVAL;         // blockno >= block_count
inline constexpr int kErrRegionTooSmall = EINVAL;     // journal region < 8 blocks
inline constexpr int kErrCreditsExceedJournal = EINVAL;
inline constexpr int kErrCreditOverflow = ENOSPC;     // handle captured > credits blocks
inline constexpr int kErrHandleClosed = EBADF;
inline constexpr int kErrBadMagic = EINVAL;           // superblock magic mismatch
inline constexpr int kErrDeviceTooSmall = ENOSPC;     // mkfs geometry does not fit
inline constexpr int kErrVersionMismatch = EPROTO;    // capsule format not accepted
inline constexpr int kErrTransferRefused = ECANCELED; // new instance rejected state

std::string errno_name(int err);

}  // namespace bento

#endif  // BENTO_COMMON_HPP
