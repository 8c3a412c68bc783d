#ifndef BENTO_BLOCKDEV_HPP
#define BENTO_BLOCKDEV_HPP

#include <condition_variable>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <vector>

#include "bento/common.hpp"
#include "bento/write_trace.hpp"

namespace bento {

class BlockDevice;

// Leased view of one cached block. A lease is either read-only (bread) or
// writable (getblk); at most one writable lease or any number of read-only
// leases exist per block at a time. The lease ends when release() is called
// or the handle goes out of scope, whichever comes first; release is
// idempotent.
class BufferHead {
public:
    BufferHead() = default;
    ~BufferHead();
    BufferHead(BufferHead&& other) noexcept;
    BufferHead& operator=(BufferHead&& other) noexcept;
    BufferHead(const BufferHead&) = delete;
    BufferHead& operator=(const BufferHead&) = delete;

    bool valid() const { return dev_ != nullptr; }
    bool writable() const { return writable_; }
    uint64_t blockno() const { return blockno_; }

    std::span<const uint8_t> data() const;
    std::span<uint8_t> data_mut();        // requires a writable lease

    void mark_dirty();                    // schedule writeback to the image
    int sync_dirty_buffer();              // write this block + flush, if dirty
    void release();

private:
    friend class BlockDevice;
    BufferHead(BlockDevice* dev, uint64_t blockno, uint8_t* bytes, bool writable)
        : dev_(dev), blockno_(blockno), bytes_(bytes), writable_(writable) {}

    BlockDevice* dev_ = nullptr;
    uint64_t blockno_ = 0;
    uint8_t* bytes_ = nullptr;
    bool writable_ = false;
};

// Block device over a disk-image file with a buffer cache. The image is a
// raw little-endian block array with no header. All operations are safe to
// call from any thread.
//
// Beyond the lease API, the journal and file system use three extensions:
//   write_block_direct/flush_image  traced image writes that bypass the cache
//                                   (journal records and checkpoint writes)
//   pin/unpin                       keep an entry cached while its bytes are
//                                   newer than the image (journal captures,
//                                   deferred writeback data)
//   freeze_image                    crash injection: trace events are still
//                                   recorded but the image is left untouched
class BlockDevice {
public:
    static constexpr size_t kDefaultCacheCapacity = 1024;

    static int open(const std::string& image_path, uint32_t block_size,
                    std::shared_ptr<BlockDevice>* out,
                    size_t cache_capacity = kDefaultCacheCapacity);
    ~BlockDevice();

    BlockDevice(const BlockDevice&) = delete;
    BlockDevice& operator=(const BlockDevice&) = delete;

    uint32_t block_size() const { return block_size_; }
    uint64_t block_count() const { return block_count_; }
    const std::string& image_path() const { return path_; }

    int bread(uint64_t blockno, BufferHead* out);
    int getblk(uint64_t blockno, BufferHead* out);
    int sync_all();

    void pin(uint64_t blockno);
    void unpin(uint64_t blockno);
    // Drop a clean, unleased, unpinned entry so the next access re-reads the
    // image. No-op if absent or busy.
    void invalidate(uint64_t blockno);

    int write_block_direct(uint64_t blockno, std::span<const uint8_t> bytes);
    // Raw image read that bypasses the cache (recovery and fsck scans).
    int read_block_direct(uint64_t blockno, std::span<uint8_t> out);
    int flush_image();

    void freeze_image() { frozen_.store(true); }
    bool frozen() const { return frozen_.load(); }

    WriteTrace& trace() { return trace_; }
    uint64_t image_reads() const { return image_reads_.load(); }

private:
    struct CacheEntry {
        std::vector<uint8_t> bytes;
        bool valid = false;       // bytes loaded from image (or fully written)
        bool loading = false;
        bool dirty = false;       // cache newer than image; device writes back
        bool writer = false;
        int readers = 0;
        int pins = 0;
        uint64_t last_release = 0;

        bool busy() const { return loading || writer || readers > 0 || pins > 0; }
    };

    BlockDevice(std::string path, int fd, uint32_t block_size, uint64_t block_count,
                size_t capacity);

    // Called with mu_ held; returns with mu_ held. Entry references stay
    // valid across the image read because `loading` blocks eviction.
    int load_entry(std::unique_lock<std::mutex>& lk, uint64_t blockno, CacheEntry& e);
    void evict_excess(std::unique_lock<std::mutex>& lk);
    void release_lease(uint64_t blockno, bool writable);
    int write_image(uint64_t blockno, std::span<const uint8_t> bytes);

    friend class BufferHead;

    std::string path_;
    int fd_ = -1;
    uint32_t block_size_ = 0;
    uint64_t block_count_ = 0;
    size_t capacity_ = 0;

    std::mutex mu_;
    std::condition_variable cv_;
    std::map<uint64_t, CacheEntry> entries_;
    uint64_t release_stamp_ = 0;

    WriteTrace trace_;
    std::atomic<bool> frozen_{false};
    std::atomic<uint64_t> image_reads_{0};
};

}  // namespace bento

#endif  // BENTO_BLOCKDEV_HPP
