#ifndef BENTO_FS_BENTOFS_HPP
#define BENTO_FS_BENTOFS_HPP

#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "bento/blockdev.hpp"
#include "bento/fs/layout.hpp"
#include "bento/fsapi.hpp"
#include "bento/journal.hpp"

namespace bento::fs {

struct BentoFsOptions {
    Clock clock;  // defaults to the system clock
    size_t cache_capacity = BlockDevice::kDefaultCacheCapacity;
    // Test hook: with the journal off, mutations write through the cache and
    // sync at operation end with no atomicity. The crash tester uses this to
    // prove it can detect the bugs journaling prevents.
    bool journal_enabled = true;
    // Deferred file data is materialized into the journal once an inode
    // accumulates this many dirty blocks (or at fsync/unmount/upgrade).
    uint32_t writeback_limit_blocks = 4096;
    bool record_dropped_blocks = false;
};

// The file system. Metadata operations journal eagerly inside one
// transaction per call. File data takes the writeback path: blocks live in
// the buffer cache (pinned) and the data + inode update + bitmap bits join
// one transaction only when flushed, so unsynced writes to a deleted file
// are dropped at release without ever touching the journal or the image.
class BentoFs : public FileSystem {
public:
    explicit BentoFs(BentoFsOptions opts = {});
    ~BentoFs() override;

    int init(const std::string& devname, const std::string& fc_info) override;
    void destroy() override;
    FsReply handle(const FsRequest& req) override;
    std::optional<TransferCapsule> update_prepare() override;
    int update_transfer(TransferCapsule&& capsule) override;

    std::shared_ptr<BlockDevice> device() const { return dev_; }
    std::shared_ptr<Journal> journal() const { return journal_; }
    const Superblock& superblock() const { return sb_; }
    bool mounted() const { return dev_ != nullptr; }
    // Data blocks discarded unwritten at release (record_dropped_blocks).
    std::vector<uint64_t> dropped_blocks() const;

protected:
    struct Pending {
        DiskInode shadow;                 // merged metadata view
        std::set<uint32_t> data_blocks;   // cache-resident dirty file data
        std::set<uint32_t> meta_blocks;   // cache-resident dirty pointer blocks
        std::set<uint32_t> reserved;      // blocknos reserved in the mirror only
    };
    struct InodeState {
        uint32_t ino = 0;
        std::mutex mu;
        bool loaded = false;
        DiskInode disk;                   // committed view
        uint64_t alloc_block_count = 0;   // data + pointer blocks
        std::unique_ptr<Pending> pending;
        uint32_t handles = 0;
        uint64_t lookups = 0;
        bool unlinked = false;            // nlink 0 with handles still open

        const DiskInode& view() const { return pending ? pending->shadow : disk; }
        DiskInode& view_mut() { return pending ? pending->shadow : disk; }
    };
    struct OpenHandle {
        uint32_t ino = 0;
        uint32_t flags = 0;
        bool is_dir = false;
    };
    enum class MapMode { kRead, kEager, kDeferred };

    // Provenance hook points; the base file system logs nothing. Hooks that
    // must be crash-atomic with their operation run inside its transaction.
    virtual uint32_t prov_extra_credits() const { return 0; }
    virtual int prov_log_create(TransactionHandle*, const RequestContext&,
                                uint32_t /*parent*/, uint32_t /*ino*/,
                                const std::string& /*name*/, uint32_t /*flags*/,
                                uint32_t /*kind*/) {
        return 0;
    }
    virtual int prov_log_rename(TransactionHandle*, const RequestContext&,
                                uint32_t /*parent*/, uint32_t /*newparent*/,
                                uint32_t /*ino*/, const std::string& /*name*/,
                                const std::string& /*newname*/) {
        return 0;
    }
    virtual int prov_log_unlink(TransactionHandle*, const RequestContext&,
                                uint32_t /*parent*/, uint32_t /*ino*/,
                                const std::string& /*name*/, bool /*deleted*/) {
        return 0;
    }
    // Open/close tracking has no disk effect of its own; implementations run
    // their own transaction.
    virtual void prov_log_open(const RequestContext&, uint32_t /*ino*/,
                               uint64_t /*fh*/, uint32_t /*flags*/) {}
    virtual void prov_log_close(const RequestContext&, uint32_t /*ino*/,
                                uint64_t /*fh*/) {}
    virtual uint32_t accepted_capsule_version() const { return kCapsuleVersionBase; }
    virtual int prov_enable(bool fresh_mount) { (void)fresh_mount; return 0; }
    virtual std::optional<ProvCapsuleState> prov_capsule_state() { return std::nullopt; }
    virtual int prov_adopt(const std::optional<ProvCapsuleState>&) { return 0; }

    // Provenance log plumbing: the reserved log inode is invisible to the
    // namespace and written only through these helpers (always eager).
    bool prov_log_inode_exists();
    int prov_create_log_inode();
    int prov_append_log(TransactionHandle* h, std::span<const uint8_t> record);
    int prov_read_log(std::vector<uint8_t>* out);

    // Journal plumbing shared with the provenance subclass.
    int begin(uint32_t credits, TransactionHandle* h);
    int jwrite(TransactionHandle* h, BufferHead& bh);
    void end(TransactionHandle* h);
    int journal_inode(TransactionHandle* h, InodeState& st);
    int write_file_block(TransactionHandle* h, InodeState& st, uint32_t fbi,
                         std::span<const uint8_t> bytes, uint32_t offset_in_block);
    int bmap(InodeState& st, uint32_t fbi, MapMode mode, TransactionHandle* h,
             uint32_t* blockno);
    std::shared_ptr<InodeState> iget(uint32_t ino);
    std::unique_lock<std::mutex> lock_inode(InodeState& st);
    Timespec now() const { return opts_.clock(); }
    uint32_t bitmap_blocks_for(const std::set<uint32_t>& blocks) const;
    int alloc_block_eager(TransactionHandle* h, uint32_t* out);
    int alloc_block_reserved(uint32_t* out);
    int free_block_eager(TransactionHandle* h, uint32_t blockno);
    int set_reserved_bits_eager(TransactionHandle* h, const std::set<uint32_t>& blocks);
    int materialize(const std::shared_ptr<InodeState>& st);
    int materialize_all();
    Superblock sb_;
    std::shared_ptr<BlockDevice> dev_;
    std::shared_ptr<Journal> journal_;

private:
    // Handlers. ctx is the request context of the triggering request.
    FsReply op_lookup(const RequestContext&, const LookupArgs&);
    FsReply op_forget(const ForgetArgs&);
    FsReply op_getattr(const GetattrArgs&);
    FsReply op_setattr(const RequestContext&, const SetattrArgs&);
    FsReply op_readlink(const ReadlinkArgs&);
    FsReply op_mknod(const RequestContext&, const MknodArgs&);
    FsReply op_mkdir(const RequestContext&, const MkdirArgs&);
    FsReply op_unlink(const RequestContext&, const UnlinkArgs&);
    FsReply op_rmdir(const RequestContext&, const RmdirArgs&);
    FsReply op_symlink(const RequestContext&, const SymlinkArgs&);
    FsReply op_rename(const RequestContext&, const RenameArgs&);
    FsReply op_link(const RequestContext&, const LinkArgs&);
    FsReply op_open(const RequestContext&, const OpenArgs&);
    FsReply op_read(const ReadArgs&);
    FsReply op_write(const RequestContext&, const WriteArgs&);
    FsReply op_release(const RequestContext&, const ReleaseArgs&);
    FsReply op_fsync(const FsyncArgs&);
    FsReply op_opendir(const RequestContext&, const OpendirArgs&);
    FsReply op_readdir(const ReaddirArgs&);
    FsReply op_releasedir(const RequestContext&, const ReleasedirArgs&);
    FsReply op_statfs();
    FsReply op_access(const RequestContext&, const AccessArgs&);
    FsReply op_create(const RequestContext&, const CreateArgs&, bool with_handle);

    // Directory machinery (dirtree.cpp). Caller holds the directory lock and,
    // for mutations, an open transaction.
    int dir_lookup(InodeState& dir, std::string_view name, uint32_t* ino_out);
    int dir_insert(TransactionHandle* h, InodeState& dir, const std::string& name,
                   uint32_t ino);
    int dir_remove(TransactionHandle* h, InodeState& dir, std::string_view name);
    int dir_set_entry_ino(TransactionHandle* h, InodeState& dir, std::string_view name,
                          uint32_t ino);
    int dir_count_entries(InodeState& dir, uint64_t* out);
    int dir_list(InodeState& dir, uint64_t offset, size_t max_entries,
                 std::vector<DirEntryRec>* out);
    int dir_init_fresh(TransactionHandle* h, InodeState& dir, uint32_t self,
                       uint32_t parent);
    int dir_read_block(InodeState& dir, uint32_t fbi, BufferHead* bh);
    int dir_split_leaf(TransactionHandle* h, InodeState& dir, DirIndexView& idx,
                       uint32_t bucket);

    // Inode allocation and teardown.
    int alloc_inode(TransactionHandle* h, uint32_t kind, uint32_t* out);
    int free_inode(TransactionHandle* h, InodeState& st);
    int free_all_blocks(TransactionHandle* h, InodeState& st);
    int truncate_blocks(TransactionHandle* h, InodeState& st, uint64_t new_size);
    int free_ptr_tree(TransactionHandle* h, InodeState& st, uint32_t blockno, int depth,
                      uint64_t base_fbi, uint64_t keep_fbi, bool* still_used);
    void discard_pending(InodeState& st);
    int maybe_free_now(const RequestContext& ctx, const std::shared_ptr<InodeState>& st);

    int lookup_parent_of(uint32_t dir_ino, uint32_t* parent_out);
    int read_raw_inode(uint32_t ino, DiskInode* out);
    FileAttr attr_of(const InodeState& st) const;
    int access_check(const RequestContext& ctx, const DiskInode& d, uint32_t mask) const;
    int build_mirrors();
    int reclaim_orphans(const std::set<uint32_t>& keep);
    int adopt(TransferCapsule&& capsule);

    BentoFsOptions opts_;

    std::mutex icache_mu_;
    std::map<uint32_t, std::shared_ptr<InodeState>> icache_;

    std::mutex handles_mu_;
    std::map<uint64_t, OpenHandle> handles_;
    uint64_t next_fh_ = 1;

    std::mutex alloc_mu_;
    std::vector<uint8_t> block_mirror_;  // committed + reserved bits
    std::vector<uint8_t> inode_mirror_;
    uint32_t block_cursor_ = 0;
    uint32_t inode_cursor_ = 0;
    uint64_t free_data_blocks_ = 0;
    uint64_t free_inodes_ = 0;

    std::mutex rename_mu_;  // serializes renames; keeps ancestry walks stable

    mutable std::mutex drops_mu_;
    std::vector<uint64_t> dropped_;

    // Static per-operation credit budgets, sized at mount from the geometry.
    uint32_t credits_dir_mut_ = 0;   // create/mkdir/symlink/link and dir growth
    uint32_t credits_free_ = 0;      // unlink/rmdir/release/truncate block frees
    uint32_t credits_rename_ = 0;
};

}  // namespace bento::fs

#endif  // BENTO_FS_BENTOFS_HPP
