#include "bento/blockdev.hpp"

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <bit>
#include <cassert>

namespace bento {

static_assert(std::endian::native == std::endian::little,
              "on-disk format helpers assume a little-endian host");

// BufferHead

BufferHead::~BufferHead() { release(); }

BufferHead::BufferHead(BufferHead&& other) noexcept
    : dev_(other.dev_), blockno_(other.blockno_), bytes_(other.bytes_),
      writable_(other.writable_) {
    other.dev_ = nullptr;
}

BufferHead& BufferHead::operator=(BufferHead&& other) noexcept {
    if (this != &other) {
        release();
        dev_ = other.dev_;
        blockno_ = other.blockno_;
        bytes_ = other.bytes_;
        writable_ = other.writable_;
        other.dev_ = nullptr;
    }
    return *this;
}

std::span<const uint8_t> BufferHead::data() const {
    assert(dev_);
    return {bytes_, dev_->block_size()};
}

std::span<uint8_t> BufferHead::data_mut() {
    assert(dev_ && writable_);
    return {bytes_, dev_->block_size()};
}

void BufferHead::mark_dirty() {
    assert(dev_ && writable_);
    std::lock_guard lk(dev_->mu_);
    dev_->entries_[blockno_].dirty = true;
}

int BufferHead::sync_dirty_buffer() {
    assert(dev_ && writable_);
    BlockDevice* dev = dev_;
    std::vector<uint8_t> copy;
    {
        std::lock_guard lk(dev->mu_);
        BlockDevice::CacheEntry& e = dev->entries_[blockno_];
        if (!e.dirty)
            return 0;
        e.dirty = false;
        copy = e.bytes;
    }
    int err = dev->write_image(blockno_, copy);
    if (err)
        return err;
    return dev->flush_image();
}

void BufferHead::release() {
    if (!dev_)
        return;
    dev_->release_lease(blockno_, writable_);
    dev_ = nullptr;
}

// BlockDevice

int BlockDevice::open(const std::string& image_path, uint32_t block_size,
                      std::shared_ptr<BlockDevice>* out, size_t cache_capacity) {
    if (block_size == 0 || (block_size & (block_size - 1)) != 0)
        return kErrBadImage;
    int fd = ::open(image_path.c_str(), O_RDWR);
    if (fd < 0)
        return errno ? errno : EIO;
    struct stat st{};
    if (fstat(fd, &st) != 0) {
        int err = errno;
        ::close(fd);
        return err;
    }
    if (st.st_size == 0 || st.st_size % block_size != 0) {
        ::close(fd);
        return kErrBadImage;
    }
    out->reset(new BlockDevice(image_path, fd, block_size,
                               (uint64_t)st.st_size / block_size, cache_capacity));
    return 0;
}

BlockDevice::BlockDevice(std::string path, int fd, uint32_t block_size,
                         uint64_t block_count, size_t capacity)
    : path_(std::move(path)), fd_(fd), block_size_(block_size),
      block_count_(block_count), capacity_(capacity) {}

BlockDevice::~BlockDevice() {
    if (fd_ >= 0)
        ::close(fd_);
}

int BlockDevice::load_entry(std::unique_lock<std::mutex>& lk, uint64_t blockno,
                            CacheEntry& e) {
    e.loading = true;
    lk.unlock();
    std::vector<uint8_t> buf(block_size_);
    ssize_t n = pread(fd_, buf.data(), block_size_, (off_t)(blockno * block_size_));
    image_reads_.fetch_add(1);
    lk.lock();
    e.loading = false;
    if (n != (ssize_t)block_size_) {
        cv_.notify_all();
        return EIO;
    }
    e.bytes = std::move(buf);
    e.valid = true;
    cv_.notify_all();
    return 0;
}

int BlockDevice::bread(uint64_t blockno, BufferHead* out) {
    if (blockno >= block_count_)
        return kErrOutOfRange;
    std::unique_lock lk(mu_);
    for (;;) {
        CacheEntry& e = entries_[blockno];
        if (!e.valid) {
            if (e.loading) {
                cv_.wait(lk);
                continue;
            }
            int err = load_entry(lk, blockno, e);
            if (err) {
                if (!e.busy())
                    entries_.erase(blockno);
                return err;
            }
            continue;  // revalidate lease state after the load
        }
        if (e.writer) {
            cv_.wait(lk);
            continue;
        }
        e.readers++;
        *out = BufferHead(this, blockno, e.bytes.data(), false);
        break;
    }
    evict_excess(lk);
    return 0;
}

int BlockDevice::getblk(uint64_t blockno, BufferHead* out) {
    if (blockno >= block_count_)
        return kErrOutOfRange;
    std::unique_lock lk(mu_);
    for (;;) {
        CacheEntry& e = entries_[blockno];
        if (!e.valid) {
            if (e.loading) {
                cv_.wait(lk);
                continue;
            }
            // Read the image first so partial overwrites are read-modify-write
            // safe.
            int err = load_entry(lk, blockno, e);
            if (err) {
                if (!e.busy())
                    entries_.erase(blockno);
                return err;
            }
            continue;
        }
        if (e.writer || e.readers > 0) {
            cv_.wait(lk);
            continue;
        }
        e.writer = true;
        *out = BufferHead(this, blockno, e.bytes.data(), true);
        break;
    }
    evict_excess(lk);
    return 0;
}

void BlockDevice::release_lease(uint64_t blockno, bool writable) {
    std::unique_lock lk(mu_);
    auto it = entries_.find(blockno);
    assert(it != entries_.end());
    CacheEntry& e = it->second;
    if (writable) {
        assert(e.writer);
        e.writer = false;
    } else {
        assert(e.readers > 0);
        e.readers--;
    }
    e.last_release = ++release_stamp_;
    cv_.notify_all();
    evict_excess(lk);
}

void BlockDevice::evict_excess(std::unique_lock<std::mutex>& lk) {
    // Least-recently-released first. Busy (leased, loading, pinned) entries
    // stay; the cache overflows softly when everything is held.
    while (entries_.size() > capacity_) {
        std::map<uint64_t, CacheEntry>::iterator victim = entries_.end();
        for (auto it = entries_.begin(); it != entries_.end(); ++it) {
            if (it->second.busy())
                continue;
            if (victim == entries_.end() ||
                it->second.last_release < victim->second.last_release)
                victim = it;
        }
        if (victim == entries_.end())
            return;
        if (victim->second.dirty) {
            uint64_t blockno = victim->first;
            std::vector<uint8_t> copy = victim->second.bytes;
            victim->second.dirty = false;
            victim->second.loading = true;  // hold the entry across the write
            lk.unlock();
            write_image(blockno, copy);
            lk.lock();
            victim = entries_.find(blockno);
            if (victim == entries_.end())
                continue;
            victim->second.loading = false;
            cv_.notify_all();
            if (victim->second.busy() || victim->second.dirty)
                continue;
        }
        entries_.erase(victim);
    }
}

int BlockDevice::write_image(uint64_t blockno, std::span<const uint8_t> bytes) {
    trace_.record_write(blockno, bytes);
    if (frozen_.load())
        return 0;
    ssize_t n = pwrite(fd_, bytes.data(), bytes.size(), (off_t)(blockno * block_size_));
    return n == (ssize_t)bytes.size() ? 0 : EIO;
}

int BlockDevice::sync_all() {
    std::vector<std::pair<uint64_t, std::vector<uint8_t>>> dirty;
    {
        std::lock_guard lk(mu_);
        // Entries are cleaned at snapshot time; a concurrent writer re-dirties.
        for (auto& [blockno, e] : entries_) {
            if (!e.dirty)
                continue;
            e.dirty = false;
            dirty.emplace_back(blockno, e.bytes);
        }
    }
    for (auto& [blockno, bytes] : dirty) {
        int err = write_image(blockno, bytes);
        if (err)
            return err;
    }
    return flush_image();
}

int BlockDevice::write_block_direct(uint64_t blockno, std::span<const uint8_t> bytes) {
    if (blockno >= block_count_ || bytes.size() != block_size_)
        return kErrOutOfRange;
    return write_image(blockno, bytes);
}

int BlockDevice::read_block_direct(uint64_t blockno, std::span<uint8_t> out) {
    if (blockno >= block_count_ || out.size() != block_size_)
        return kErrOutOfRange;
    ssize_t n = pread(fd_, out.data(), out.size(), (off_t)(blockno * block_size_));
    image_reads_.fetch_add(1);
    return n == (ssize_t)out.size() ? 0 : EIO;
}

int BlockDevice::flush_image() {
    trace_.record_flush();
    if (frozen_.load())
        return 0;
    return fdatasync(fd_) == 0 ? 0 : EIO;
}

void BlockDevice::pin(uint64_t blockno) {
    std::lock_guard lk(mu_);
    auto it = entries_.find(blockno);
    assert(it != entries_.end() && it->second.valid);
    it->second.pins++;
}

void BlockDevice::unpin(uint64_t blockno) {
    std::unique_lock lk(mu_);
    auto it = entries_.find(blockno);
    assert(it != entries_.end() && it->second.pins > 0);
    it->second.pins--;
    evict_excess(lk);
}

void BlockDevice::invalidate(uint64_t blockno) {
    std::lock_guard lk(mu_);
    auto it = entries_.find(blockno);
    if (it == entries_.end() || it->second.busy() || it->second.dirty)
        return;
    entries_.erase(it);
}

}  // namespace bento
