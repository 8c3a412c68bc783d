#ifndef BENTO_JOURNAL_HPP
#define BENTO_JOURNAL_HPP

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <thread>
#include <vector>

#include "bento/blockdev.hpp"
#include "bento/common.hpp"

namespace bento {

// Write-ahead data journal. Concurrent operations join one compound
// transaction; a background committer writes the compound to the journal
// region (descriptor + full block copies + commit block), applies the blocks
// in place, and reclaims the region. Each record set is laid out from the
// region start and terminated by a zeroed tail-guard block, so recovery
// stops at the first slot that does not parse as a committed record.
//
// On-disk record format (all fields little-endian u32):
//   descriptor block:  magic, sequence, count, target blocknos[count]
//   data blocks:       full copies of the captured blocks, in target order
//   commit block:      magic, sequence, ..., checksum in the last 4 bytes
// checksum = 32-bit FNV-1a over the descriptor block then each data block.
inline constexpr uint32_t kJournalMagic = 0x42454E4A;  // "BENJ" when read LE

class Journal;

class TransactionHandle {
public:
    TransactionHandle() = default;
    bool open() const { return open_; }
    uint32_t credits() const { return credits_; }
    uint32_t used() const { return used_; }

private:
    friend class Journal;
    uint64_t txn_id_ = 0;
    uint32_t credits_ = 0;
    uint32_t used_ = 0;
    bool open_ = false;
    std::set<uint64_t> blocks_;  // blocks this handle has captured
};

class Journal {
public:
    static constexpr uint32_t kMinLength = 8;
    static constexpr auto kCommitDelay = std::chrono::milliseconds(10);

    // Runs recovery on the region before the journal accepts transactions,
    // then zero-initializes the region. `applied` reports recovered
    // transactions.
    static int open(std::shared_ptr<BlockDevice> dev, uint32_t start, uint32_t length,
                    std::shared_ptr<Journal>* out, uint64_t* applied = nullptr);

    // Standalone recovery pass for crash-state images: applies every
    // committed-but-unapplied record, flushes, and clears the region.
    // Idempotent.
    static int recover_region(BlockDevice& dev, uint32_t start, uint32_t length,
                              uint64_t* applied, uint64_t* next_sequence);

    ~Journal();
    Journal(const Journal&) = delete;
    Journal& operator=(const Journal&) = delete;

    int begin_op(uint32_t credits, TransactionHandle* h);
    int write_block(TransactionHandle* h, const BufferHead& bh);
    void end_op(TransactionHandle* h);

    // Blocks until every transaction that was commit-eligible at call time is
    // durable; returns the last committed sequence number.
    uint64_t force_commit();

    uint64_t sequence() const;  // next commit sequence number
    uint32_t start() const { return start_; }
    uint32_t length() const { return length_; }
    // Largest number of distinct blocks one transaction can capture.
    uint32_t max_transaction_blocks() const;

private:
    struct Txn {
        uint64_t id = 0;
        std::map<uint64_t, std::vector<uint8_t>> captures;  // blockno -> bytes
        uint32_t reserved = 0;
        uint32_t open_handles = 0;
        bool close_requested = false;
        bool has_deadline = false;
        std::chrono::steady_clock::time_point deadline;
    };

    Journal(std::shared_ptr<BlockDevice> dev, uint32_t start, uint32_t length,
            uint64_t next_sequence);

    void committer_main();
    // Writes one compound durably and checkpoints it. Called off-thread with
    // exclusive ownership of the transaction.
    int commit_txn(Txn& txn, uint64_t seq);
    Txn* find_txn(uint64_t id);
    bool should_close_running() const;

    std::shared_ptr<BlockDevice> dev_;
    uint32_t start_ = 0;
    uint32_t length_ = 0;

    mutable std::mutex mu_;
    std::condition_variable cv_work_;    // committer wakeups
    std::condition_variable cv_space_;   // begin_op waiting for a fresh compound
    std::condition_variable cv_commit_;  // force_commit waiters
    std::unique_ptr<Txn> running_;
    std::unique_ptr<Txn> closing_;
    uint64_t next_txn_id_ = 1;
    uint64_t last_completed_txn_ = 0;
    uint64_t sequence_ = 1;
    int error_ = 0;
    bool shutdown_ = false;
    std::thread committer_;
};

}  // namespace bento

#endif  // BENTO_JOURNAL_HPP
