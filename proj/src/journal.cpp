#include "bento/journal.hpp"

#include <cstdio>
#include <cstdlib>

#include <cassert>

namespace bento {

namespace {

struct DescView {
    uint32_t magic = 0;
    uint32_t sequence = 0;
    uint32_t count = 0;
};

DescView parse_desc(std::span<const uint8_t> block) {
    DescView d;
    d.magic = get_u32(block.data());
    d.sequence = get_u32(block.data() + 4);
    d.count = get_u32(block.data() + 8);
    return d;
}

}  // namespace

int Journal::open(std::shared_ptr<BlockDevice> dev, uint32_t start, uint32_t length,
                  std::shared_ptr<Journal>* out, uint64_t* applied) {
    if (length < kMinLength)
        return kErrRegionTooSmall;
    if ((uint64_t)start + length > dev->block_count())
        return kErrOutOfRange;
    uint64_t next_seq = 1;
    uint64_t applied_count = 0;
    int err = recover_region(*dev, start, length, &applied_count, &next_seq);
    if (err)
        return err;
    if (applied)
        *applied = applied_count;
    out->reset(new Journal(std::move(dev), start, length, next_seq));
    return 0;
}

int Journal::recover_region(BlockDevice& dev, uint32_t start, uint32_t length,
                            uint64_t* applied, uint64_t* next_sequence) {
    const uint32_t bs = dev.block_size();
    std::vector<uint8_t> desc_block(bs), data_block(bs), commit_block(bs);
    uint64_t applied_count = 0;
    uint64_t last_seq = 0;
    uint32_t cursor = start;

    while (cursor + 2 < start + length) {
        int err = dev.read_block_direct(cursor, desc_block);
        if (err)
            return err;
        DescView d = parse_desc(desc_block);
        if (d.magic != kJournalMagic || d.count == 0)
            break;
        if (applied_count > 0 && d.sequence != last_seq + 1)
            break;
        // Commit block must fit inside the region.
        if ((uint64_t)cursor + 1 + d.count + 1 > (uint64_t)start + length)
            break;

        uint32_t checksum = fnv1a32(desc_block);
        std::vector<std::pair<uint32_t, std::vector<uint8_t>>> targets;
        targets.reserve(d.count);
        bool ok = true;
        for (uint32_t i = 0; i < d.count; i++) {
            uint32_t target = get_u32(desc_block.data() + 12 + 4 * i);
            err = dev.read_block_direct(cursor + 1 + i, data_block);
            if (err)
                return err;
            checksum = fnv1a32(data_block, checksum);
            if (target >= dev.block_count()) {
                ok = false;
                break;
            }
            targets.emplace_back(target, data_block);
        }
        if (!ok)
            break;
        err = dev.read_block_direct(cursor + 1 + d.count, commit_block);
        if (err)
            return err;
        if (get_u32(commit_block.data()) != kJournalMagic ||
            get_u32(commit_block.data() + 4) != d.sequence ||
            get_u32(commit_block.data() + bs - 4) != checksum)
            break;

        for (auto& [target, bytes] : targets) {
            err = dev.write_block_direct(target, bytes);
            if (err)
                return err;
        }
        applied_count++;
        last_seq = d.sequence;
        cursor += 2 + d.count;
    }

    if (applied_count > 0) {
        int err = dev.flush_image();
        if (err)
            return err;
    }

    // Leave the region clean so stale records cannot confuse a later scan.
    std::vector<uint8_t> zero(bs, 0);
    bool dirtied = false;
    for (uint32_t b = start; b < start + length; b++) {
        int err = dev.read_block_direct(b, data_block);
        if (err)
            return err;
        if (data_block == zero)
            continue;
        err = dev.write_block_direct(b, zero);
        if (err)
            return err;
        dirtied = true;
    }
    if (dirtied) {
        int err = dev.flush_image();
        if (err)
            return err;
    }

    if (applied)
        *applied = applied_count;
    if (next_sequence)
        *next_sequence = applied_count > 0 ? last_seq + 1 : 1;
    return 0;
}

Journal::Journal(std::shared_ptr<BlockDevice> dev, uint32_t start, uint32_t length,
                 uint64_t next_sequence)
    : dev_(std::move(dev)), start_(start), length_(length), sequence_(next_sequence) {
    running_ = std::make_unique<Txn>();
    running_->id = next_txn_id_++;
    committer_ = std::thread([this] { committer_main(); });
}

Journal::~Journal() {
    force_commit();
    {
        std::lock_guard lk(mu_);
        shutdown_ = true;
    }
    cv_work_.notify_all();
    committer_.join();
}

uint32_t Journal::max_transaction_blocks() const {
    // descriptor + commit + tail guard; one descriptor block caps the target
    // list as well.
    uint32_t cap = length_ - 3;
    uint32_t per_desc = (dev_->block_size() - 12) / 4;
    return cap < per_desc ? cap : per_desc;
}

uint64_t Journal::sequence() const {
    std::lock_guard lk(mu_);
    return sequence_;
}

Journal::Txn* Journal::find_txn(uint64_t id) {
    if (running_ && running_->id == id)
        return running_.get();
    if (closing_ && closing_->id == id)
        return closing_.get();
    return nullptr;
}

int Journal::begin_op(uint32_t credits, TransactionHandle* h) {
    if (credits < 1)
        return EINVAL;
    if (credits > max_transaction_blocks())
        return kErrCreditsExceedJournal;
    std::unique_lock lk(mu_);
    for (;;) {
        if (error_)
            return error_;
        // New handles wait out a draining/committing compound: a handle in
        // the older compound could otherwise capture a shared block (bitmap,
        // inode table) carrying this handle's not-yet-committed bytes, and
        // the older commit would expose them after a crash.
        if (!closing_) {
            if (running_->reserved + credits <= max_transaction_blocks())
                break;
            running_->close_requested = true;
            cv_work_.notify_all();
        }
        cv_space_.wait(lk);
    }
    running_->open_handles++;
    running_->reserved += credits;
    h->txn_id_ = running_->id;
    h->credits_ = credits;
    h->used_ = 0;
    h->open_ = true;
    h->blocks_.clear();
    return 0;
}

int Journal::write_block(TransactionHandle* h, const BufferHead& bh) {
    std::unique_lock lk(mu_);
    if (!h->open_)
        return kErrHandleClosed;
    Txn* t = find_txn(h->txn_id_);
    assert(t && "open handle must reference a live transaction");
    bool new_for_handle = !h->blocks_.count(bh.blockno());
    if (new_for_handle && h->used_ == h->credits_)
        return kErrCreditOverflow;

    bool new_for_txn = !t->captures.count(bh.blockno());
    auto& slot = t->captures[bh.blockno()];
    auto bytes = bh.data();
    slot.assign(bytes.begin(), bytes.end());
    if (new_for_txn) {
        // Keep the cache entry resident until checkpoint: its bytes are newer
        // than the image from here on.
        dev_->pin(bh.blockno());
        if (!t->has_deadline) {
            t->has_deadline = true;
            t->deadline = std::chrono::steady_clock::now() + kCommitDelay;
            cv_work_.notify_all();
        }
    }
    if (new_for_handle) {
        h->blocks_.insert(bh.blockno());
        h->used_++;
    }
    return 0;
}

void Journal::end_op(TransactionHandle* h) {
    std::lock_guard lk(mu_);
    if (!h->open_)
        return;
    h->open_ = false;
    Txn* t = find_txn(h->txn_id_);
    assert(t);
    t->open_handles--;
    t->reserved -= h->credits_ - h->used_;
    if (t->open_handles == 0)
        cv_work_.notify_all();
}

uint64_t Journal::force_commit() {
    std::unique_lock lk(mu_);
    if (!closing_ && running_->captures.empty() && running_->open_handles == 0)
        return sequence_ - 1;
    uint64_t target = running_->id;
    running_->close_requested = true;
    cv_work_.notify_all();
    cv_commit_.wait(lk, [&] { return last_completed_txn_ >= target || error_; });
    return sequence_ - 1;
}

bool Journal::should_close_running() const {
    if (running_->close_requested)
        return true;
    // Trigger on blocks actually captured; reservations are pessimistic.
    if (running_->captures.size() >= length_ / 4)
        return true;
    if (running_->has_deadline &&
        std::chrono::steady_clock::now() >= running_->deadline)
        return true;
    return false;
}

void Journal::committer_main() {
    std::unique_lock lk(mu_);
    for (;;) {
        if (closing_ && closing_->open_handles == 0) {
            std::unique_ptr<Txn> txn = std::move(closing_);
            if (txn->captures.empty()) {
                last_completed_txn_ = txn->id;
                cv_commit_.notify_all();
                cv_space_.notify_all();
                continue;
            }
            uint64_t seq = sequence_;
            lk.unlock();
            int err = commit_txn(*txn, seq);
            for (auto& [blockno, bytes] : txn->captures)
                dev_->unpin(blockno);
            lk.lock();
            if (err) {
                if (getenv("BENTO_JOURNAL_DEBUG"))
                    fprintf(stderr, "commit_txn failed: err=%d seq=%llu captures=%zu\n",
                            err, (unsigned long long)seq, txn->captures.size());
                error_ = err;
            }
            else
                sequence_ = seq + 1;
            last_completed_txn_ = txn->id;
            cv_commit_.notify_all();
            cv_space_.notify_all();
            continue;
        }
        if (!closing_ && (should_close_running() &&
                          (!running_->captures.empty() || running_->open_handles > 0 ||
                           running_->close_requested))) {
            closing_ = std::move(running_);
            running_ = std::make_unique<Txn>();
            running_->id = next_txn_id_++;
            cv_space_.notify_all();
            continue;
        }
        if (shutdown_ && !closing_ && running_->captures.empty() &&
            running_->open_handles == 0)
            return;
        if (running_->has_deadline && !closing_)
            cv_work_.wait_until(lk, running_->deadline);
        else
            cv_work_.wait_for(lk, std::chrono::milliseconds(50));
    }
}

int Journal::commit_txn(Txn& txn, uint64_t seq) {
    const uint32_t bs = dev_->block_size();
    const uint32_t count = (uint32_t)txn.captures.size();
    assert(count <= max_transaction_blocks());

    std::vector<uint8_t> desc(bs, 0);
    put_u32(desc.data(), kJournalMagic);
    put_u32(desc.data() + 4, (uint32_t)seq);
    put_u32(desc.data() + 8, count);
    uint32_t i = 0;
    for (auto& [blockno, bytes] : txn.captures)
        put_u32(desc.data() + 12 + 4 * i++, (uint32_t)blockno);

    uint32_t checksum = fnv1a32(desc);
    int err = dev_->write_block_direct(start_, desc);
    if (err)
        return err;
    i = 0;
    for (auto& [blockno, bytes] : txn.captures) {
        checksum = fnv1a32(bytes, checksum);
        err = dev_->write_block_direct(start_ + 1 + i++, bytes);
        if (err)
            return err;
    }
    // Tail guard: the slot after the commit block stays zeroed so recovery
    // stops there even if an earlier, longer record set left bytes behind.
    if (start_ + 1 + count + 1 < start_ + length_) {
        std::vector<uint8_t> zero(bs, 0);
        err = dev_->write_block_direct(start_ + 1 + count + 1, zero);
        if (err)
            return err;
    }
    err = dev_->flush_image();
    if (err)
        return err;

    std::vector<uint8_t> commit(bs, 0);
    put_u32(commit.data(), kJournalMagic);
    put_u32(commit.data() + 4, (uint32_t)seq);
    put_u32(commit.data() + bs - 4, checksum);
    err = dev_->write_block_direct(start_ + 1 + count, commit);
    if (err)
        return err;
    err = dev_->flush_image();
    if (err)
        return err;

    // Checkpoint: apply in place, ascending blockno, then make it durable so
    // the region can be reused by the next compound.
    for (auto& [blockno, bytes] : txn.captures) {
        err = dev_->write_block_direct(blockno, bytes);
        if (err)
            return err;
    }
    return dev_->flush_image();
}

}  // namespace bento
