#include <algorithm>
#include <cassert>
#include <cstring>

#include "bento/fs/bentofs.hpp"

namespace bento::fs {

namespace {

bool name_ok(std::string_view name, int* err) {
    if (name.empty() || name.find('/') != std::string_view::npos || name == "." ||
        name == "..") {
        *err = EINVAL;
        return false;
    }
    if (name.size() > kMaxNameLen) {
        *err = ENAMETOOLONG;
        return false;
    }
    *err = 0;
    return true;
}

uint32_t open_mode(uint32_t flags) { return flags & kOpenAccessMask; }

// Metadata fields live in both views while writeback is pending; keep the
// shadow's copy in step with committed mutations (sizes and pointers stay
// the shadow's own).
template <typename State>
void mirror_meta(State& st) {
    if (!st.pending)
        return;
    auto& sh = st.pending->shadow;
    sh.nlink = st.disk.nlink;
    sh.perm = st.disk.perm;
    sh.uid = st.disk.uid;
    sh.gid = st.disk.gid;
    sh.ctime = st.disk.ctime;
}
bool mode_readable(uint32_t flags) {
    return open_mode(flags) == kOpenRead || open_mode(flags) == kOpenReadWrite;
}
bool mode_writable(uint32_t flags) {
    return open_mode(flags) == kOpenWrite || open_mode(flags) == kOpenReadWrite;
}

}  // namespace

FsReply BentoFs::handle(const FsRequest& req) {
    if (!mounted())
        return reply_err(ESHUTDOWN);
    const RequestContext& ctx = req.ctx;
    switch (req.opcode()) {
        case Opcode::kLookup: return op_lookup(ctx, std::get<LookupArgs>(req.args));
        case Opcode::kForget: return op_forget(std::get<ForgetArgs>(req.args));
        case Opcode::kGetattr: return op_getattr(std::get<GetattrArgs>(req.args));
        case Opcode::kSetattr: return op_setattr(ctx, std::get<SetattrArgs>(req.args));
        case Opcode::kReadlink: return op_readlink(std::get<ReadlinkArgs>(req.args));
        case Opcode::kMknod: return op_mknod(ctx, std::get<MknodArgs>(req.args));
        case Opcode::kMkdir: return op_mkdir(ctx, std::get<MkdirArgs>(req.args));
        case Opcode::kUnlink: return op_unlink(ctx, std::get<UnlinkArgs>(req.args));
        case Opcode::kRmdir: return op_rmdir(ctx, std::get<RmdirArgs>(req.args));
        case Opcode::kSymlink: return op_symlink(ctx, std::get<SymlinkArgs>(req.args));
        case Opcode::kRename: return op_rename(ctx, std::get<RenameArgs>(req.args));
        case Opcode::kLink: return op_link(ctx, std::get<LinkArgs>(req.args));
        case Opcode::kOpen: return op_open(ctx, std::get<OpenArgs>(req.args));
        case Opcode::kRead: return op_read(std::get<ReadArgs>(req.args));
        case Opcode::kWrite: return op_write(ctx, std::get<WriteArgs>(req.args));
        case Opcode::kFlush: return ReplyOk{};
        case Opcode::kRelease: return op_release(ctx, std::get<ReleaseArgs>(req.args));
        case Opcode::kFsync: return op_fsync(std::get<FsyncArgs>(req.args));
        case Opcode::kOpendir: return op_opendir(ctx, std::get<OpendirArgs>(req.args));
        case Opcode::kReaddir: return op_readdir(std::get<ReaddirArgs>(req.args));
        case Opcode::kReleasedir:
            return op_releasedir(ctx, std::get<ReleasedirArgs>(req.args));
        case Opcode::kFsyncdir: {
            const auto& a = std::get<FsyncdirArgs>(req.args);
            return op_fsync(FsyncArgs{a.ino, a.fh, a.datasync});
        }
        case Opcode::kStatfs: return op_statfs();
        case Opcode::kAccess: return op_access(ctx, std::get<AccessArgs>(req.args));
        case Opcode::kCreate:
            return op_create(ctx, std::get<CreateArgs>(req.args), true);
        default:
            return reply_err(ENOSYS);  // xattr family, locks, bmap
    }
}

FsReply BentoFs::op_lookup(const RequestContext&, const LookupArgs& a) {
    if (a.name.empty() || a.name.size() > kMaxNameLen)
        return reply_err(a.name.empty() ? EINVAL : ENAMETOOLONG);
    auto parent = iget((uint32_t)a.parent);
    uint32_t child_ino = 0;
    {
        auto lk = lock_inode(*parent);
        if (parent->disk.kind != kKindDir)
            return reply_err(ENOTDIR);
        int err = dir_lookup(*parent, a.name, &child_ino);
        if (err)
            return reply_err(err);
    }
    auto child = iget(child_ino);
    auto lk = lock_inode(*child);
    if (child->disk.kind == kKindFree)
        return reply_err(ENOENT);  // raced with a remove
    child->lookups++;
    return ReplyEntry{child_ino, attr_of(*child), 0};
}

FsReply BentoFs::op_forget(const ForgetArgs& a) {
    std::lock_guard lk(icache_mu_);
    auto it = icache_.find((uint32_t)a.ino);
    if (it != icache_.end()) {
        auto& st = *it->second;
        std::lock_guard slk(st.mu);
        st.lookups -= std::min<uint64_t>(st.lookups, a.nlookup);
        if (st.lookups == 0 && st.handles == 0 && !st.pending && !st.unlinked)
            icache_.erase(it);
    }
    return ReplyOk{};
}

FsReply BentoFs::op_getattr(const GetattrArgs& a) {
    if (a.ino == kProvIno)
        return reply_err(EPERM);
    auto st = iget((uint32_t)a.ino);
    auto lk = lock_inode(*st);
    if (st->disk.kind == kKindFree && !st->pending)
        return reply_err(ENOENT);
    return ReplyAttr{attr_of(*st), 1};
}

FsReply BentoFs::op_setattr(const RequestContext&, const SetattrArgs& a) {
    if (a.ino == kProvIno)
        return reply_err(EPERM);
    auto st = iget((uint32_t)a.ino);
    if (a.size) {
        if (*a.size > kMaxFileSize)
            return reply_err(EFBIG);
        for (int attempt = 0; attempt < 64; attempt++) {
            int err = materialize(st);
            if (err)
                return reply_err(err);
            TransactionHandle h;
            if ((err = begin(credits_free_, &h)) != 0)
                return reply_err(err);
            auto lk = lock_inode(*st);
            if (st->pending) {  // a concurrent write slipped in; flush again
                lk.unlock();
                end(&h);
                continue;
            }
            if (st->disk.kind != kKindFile) {
                lk.unlock();
                end(&h);
                return reply_err(st->disk.kind == kKindDir ? EISDIR : EINVAL);
            }
            if (*a.size < st->disk.size)
                err = truncate_blocks(&h, *st, *a.size);
            else
                st->disk.size = *a.size;  // extension exposes holes
            if (!err) {
                if (a.mode)
                    st->disk.perm = *a.mode & 07777;
                if (a.uid)
                    st->disk.uid = *a.uid;
                if (a.gid)
                    st->disk.gid = *a.gid;
                if (a.atime)
                    st->disk.atime = *a.atime;
                if (a.mtime)
                    st->disk.mtime = *a.mtime;
                st->disk.ctime = now();
                err = journal_inode(&h, *st);
            }
            FsReply reply = err ? reply_err(err) : FsReply(ReplyAttr{attr_of(*st), 1});
            lk.unlock();
            end(&h);
            return reply;
        }
        return reply_err(EBUSY);
    }

    TransactionHandle h;
    int err = begin(2 + prov_extra_credits(), &h);
    if (err)
        return reply_err(err);
    auto lk = lock_inode(*st);
    if (st->disk.kind == kKindFree && !st->pending) {
        lk.unlock();
        end(&h);
        return reply_err(ENOENT);
    }
    auto apply = [&](DiskInode& d) {
        if (a.mode)
            d.perm = *a.mode & 07777;
        if (a.uid)
            d.uid = *a.uid;
        if (a.gid)
            d.gid = *a.gid;
        if (a.atime)
            d.atime = *a.atime;
        if (a.mtime)
            d.mtime = *a.mtime;
        d.ctime = now();
    };
    apply(st->disk);
    if (st->pending)
        apply(st->pending->shadow);
    err = journal_inode(&h, *st);
    FsReply reply = err ? reply_err(err) : FsReply(ReplyAttr{attr_of(*st), 1});
    lk.unlock();
    end(&h);
    return reply;
}

FsReply BentoFs::op_readlink(const ReadlinkArgs& a) {
    auto st = iget((uint32_t)a.ino);
    auto lk = lock_inode(*st);
    if (st->disk.kind != kKindSymlink)
        return reply_err(EINVAL);
    uint32_t blockno = 0;
    int err = bmap(*st, 0, MapMode::kRead, nullptr, &blockno);
    if (err)
        return reply_err(err);
    std::vector<uint8_t> target(st->disk.size, 0);
    if (blockno != 0 && !target.empty()) {
        BufferHead bh;
        if ((err = dev_->bread(blockno, &bh)) != 0)
            return reply_err(err);
        std::memcpy(target.data(), bh.data().data(), target.size());
    }
    return ReplyData{std::move(target)};
}

// create / mknod / mkdir / symlink share this skeleton: reserve the inode
// and any blocks, wire the child, insert the directory entry, and compensate
// inside the same transaction if a later step fails.
FsReply BentoFs::op_create(const RequestContext& ctx, const CreateArgs& a,
                           bool with_handle) {
    int err;
    if (!name_ok(a.name, &err))
        return reply_err(err);
    TransactionHandle h;
    if ((err = begin(credits_dir_mut_, &h)) != 0)
        return reply_err(err);
    auto parent = iget((uint32_t)a.parent);
    FsReply reply = ReplyOk{};
    uint64_t fh = 0;
    {
        auto lk = lock_inode(*parent);
        uint32_t existing = 0;
        uint32_t child_ino = 0;
        if (parent->disk.kind != kKindDir)
            reply = reply_err(ENOTDIR);
        else if (dir_lookup(*parent, a.name, &existing) == 0)
            reply = reply_err(EEXIST);
        else if ((err = alloc_inode(&h, kKindFile, &child_ino)) != 0)
            reply = reply_err(err);
        else {
            auto child = iget(child_ino);
            std::lock_guard clk(child->mu);
            child->loaded = true;
            child->disk = DiskInode{};
            child->disk.kind = kKindFile;
            child->disk.nlink = 1;
            child->disk.perm = a.mode & 07777;
            child->disk.uid = ctx.uid;
            child->disk.gid = ctx.gid;
            child->disk.atime = child->disk.mtime = child->disk.ctime = now();
            child->alloc_block_count = 0;
            child->unlinked = false;
            if ((err = journal_inode(&h, *child)) == 0 &&
                (err = dir_insert(&h, *parent, a.name, child_ino)) == 0) {
                parent->disk.mtime = parent->disk.ctime = now();
                err = journal_inode(&h, *parent);
            } else {
                child->disk = DiskInode{};
                free_inode(&h, *child);
                journal_inode(&h, *child);
            }
            if (err) {
                reply = reply_err(err);
            } else {
                if (with_handle) {
                    std::lock_guard hlk(handles_mu_);
                    fh = next_fh_++;
                    handles_[fh] = OpenHandle{child_ino, a.flags, false};
                    child->handles++;
                }
                child->lookups++;
                prov_log_create(&h, ctx, (uint32_t)a.parent, child_ino, a.name,
                                a.flags, kKindFile);
                ReplyEntry entry{child_ino, attr_of(*child), 0};
                reply = with_handle
                            ? FsReply(ReplyCreated{entry, ReplyOpen{fh, 0}})
                            : FsReply(entry);
            }
        }
    }
    end(&h);
    if (with_handle && reply_errno(reply) == 0)
        prov_log_open(ctx, (uint32_t)std::get<ReplyCreated>(reply).entry.ino, fh,
                      a.flags);
    return reply;
}

FsReply BentoFs::op_mknod(const RequestContext& ctx, const MknodArgs& a) {
    if ((a.mode & 0170000) != 0 && (a.mode & 0170000) != 0100000)
        return reply_err(EPERM);  // only regular files
    return op_create(ctx, CreateArgs{a.parent, a.name, a.mode, 0}, false);
}

FsReply BentoFs::op_mkdir(const RequestContext& ctx, const MkdirArgs& a) {
    int err;
    if (!name_ok(a.name, &err))
        return reply_err(err);
    TransactionHandle h;
    if ((err = begin(credits_dir_mut_, &h)) != 0)
        return reply_err(err);
    auto parent = iget((uint32_t)a.parent);
    FsReply reply = ReplyOk{};
    {
        auto lk = lock_inode(*parent);
        uint32_t existing = 0;
        uint32_t child_ino = 0;
        if (parent->disk.kind != kKindDir)
            reply = reply_err(ENOTDIR);
        else if (dir_lookup(*parent, a.name, &existing) == 0)
            reply = reply_err(EEXIST);
        else if ((err = alloc_inode(&h, kKindDir, &child_ino)) != 0)
            reply = reply_err(err);
        else {
            auto child = iget(child_ino);
            std::lock_guard clk(child->mu);
            child->loaded = true;
            child->disk = DiskInode{};
            child->disk.kind = kKindDir;
            child->disk.nlink = 2;  // "." and the parent entry
            child->disk.perm = a.mode & 07777;
            child->disk.uid = ctx.uid;
            child->disk.gid = ctx.gid;
            child->disk.atime = child->disk.mtime = child->disk.ctime = now();
            child->alloc_block_count = 0;
            child->unlinked = false;
            if ((err = dir_init_fresh(&h, *child, child_ino, (uint32_t)a.parent)) == 0 &&
                (err = journal_inode(&h, *child)) == 0 &&
                (err = dir_insert(&h, *parent, a.name, child_ino)) == 0) {
                parent->disk.nlink++;  // child's ".."
                parent->disk.mtime = parent->disk.ctime = now();
                err = journal_inode(&h, *parent);
            } else {
                free_all_blocks(&h, *child);
                child->disk = DiskInode{};
                free_inode(&h, *child);
                journal_inode(&h, *child);
            }
            if (err) {
                reply = reply_err(err);
            } else {
                child->lookups++;
                prov_log_create(&h, ctx, (uint32_t)a.parent, child_ino, a.name, 0,
                                kKindDir);
                reply = ReplyEntry{child_ino, attr_of(*child), 0};
            }
        }
    }
    end(&h);
    return reply;
}

FsReply BentoFs::op_symlink(const RequestContext& ctx, const SymlinkArgs& a) {
    int err;
    if (!name_ok(a.name, &err))
        return reply_err(err);
    if (a.link.empty() || a.link.size() > kBlockSize)
        return reply_err(a.link.empty() ? EINVAL : ENAMETOOLONG);
    TransactionHandle h;
    if ((err = begin(credits_dir_mut_, &h)) != 0)
        return reply_err(err);
    auto parent = iget((uint32_t)a.parent);
    FsReply reply = ReplyOk{};
    {
        auto lk = lock_inode(*parent);
        uint32_t existing = 0;
        uint32_t child_ino = 0;
        if (parent->disk.kind != kKindDir)
            reply = reply_err(ENOTDIR);
        else if (dir_lookup(*parent, a.name, &existing) == 0)
            reply = reply_err(EEXIST);
        else if ((err = alloc_inode(&h, kKindSymlink, &child_ino)) != 0)
            reply = reply_err(err);
        else {
            auto child = iget(child_ino);
            std::lock_guard clk(child->mu);
            child->loaded = true;
            child->disk = DiskInode{};
            child->disk.kind = kKindSymlink;
            child->disk.nlink = 1;
            child->disk.perm = 0777;
            child->disk.uid = ctx.uid;
            child->disk.gid = ctx.gid;
            child->disk.atime = child->disk.mtime = child->disk.ctime = now();
            child->disk.size = a.link.size();
            child->alloc_block_count = 0;
            child->unlinked = false;
            if ((err = write_file_block(&h, *child, 0,
                                        {(const uint8_t*)a.link.data(), a.link.size()},
                                        0)) == 0 &&
                (err = journal_inode(&h, *child)) == 0 &&
                (err = dir_insert(&h, *parent, a.name, child_ino)) == 0) {
                parent->disk.mtime = parent->disk.ctime = now();
                err = journal_inode(&h, *parent);
            } else {
                free_all_blocks(&h, *child);
                child->disk = DiskInode{};
                free_inode(&h, *child);
                journal_inode(&h, *child);
            }
            if (err) {
                reply = reply_err(err);
            } else {
                child->lookups++;
                prov_log_create(&h, ctx, (uint32_t)a.parent, child_ino, a.name, 0,
                                kKindSymlink);
                reply = ReplyEntry{child_ino, attr_of(*child), 0};
            }
        }
    }
    end(&h);
    return reply;
}

// unlink and rmdir. Both remove the entry, drop a link, and free the inode
// in the same transaction unless open handles defer the free.
FsReply BentoFs::op_unlink(const RequestContext& ctx, const UnlinkArgs& a) {
    int err;
    if (!name_ok(a.name, &err))
        return reply_err(err);
    TransactionHandle h;
    if ((err = begin(credits_free_, &h)) != 0)
        return reply_err(err);
    auto parent = iget((uint32_t)a.parent);
    FsReply reply = reply_err(EBUSY);
    for (int attempt = 0; attempt < 16; attempt++) {
        auto plk = lock_inode(*parent);
        if (parent->disk.kind != kKindDir) {
            reply = reply_err(ENOTDIR);
            break;
        }
        uint32_t child_ino = 0;
        if ((err = dir_lookup(*parent, a.name, &child_ino)) != 0) {
            reply = reply_err(err);
            break;
        }
        auto child = iget(child_ino);
        std::unique_lock<std::mutex> clk;
        if (child_ino > parent->ino) {
            clk = lock_inode(*child);
        } else {
            // Lock order is ascending ino; re-validate after re-locking.
            plk.unlock();
            clk = lock_inode(*child);
            plk = lock_inode(*parent);
            uint32_t again = 0;
            if (dir_lookup(*parent, a.name, &again) != 0 || again != child_ino)
                continue;
        }
        if (child->disk.kind == kKindDir) {
            reply = reply_err(EISDIR);
            break;
        }
        if ((err = dir_remove(&h, *parent, a.name)) != 0) {
            reply = reply_err(err);
            break;
        }
        parent->disk.mtime = parent->disk.ctime = now();
        if ((err = journal_inode(&h, *parent)) != 0) {
            reply = reply_err(err);
            break;
        }
        child->disk.nlink--;
        child->disk.ctime = now();
        mirror_meta(*child);
        bool deleted = child->disk.nlink == 0;
        if (deleted && child->handles == 0) {
            discard_pending(*child);
            if ((err = free_all_blocks(&h, *child)) == 0)
                err = free_inode(&h, *child);
        } else if (deleted) {
            child->unlinked = true;
        }
        if (!err)
            err = journal_inode(&h, *child);
        if (!err)
            err = prov_log_unlink(&h, ctx, (uint32_t)a.parent, child_ino, a.name,
                                  deleted);
        reply = err ? reply_err(err) : FsReply(ReplyOk{});
        break;
    }
    end(&h);
    return reply;
}

FsReply BentoFs::op_rmdir(const RequestContext& ctx, const RmdirArgs& a) {
    int err;
    if (!name_ok(a.name, &err))
        return reply_err(err);
    TransactionHandle h;
    if ((err = begin(credits_free_, &h)) != 0)
        return reply_err(err);
    auto parent = iget((uint32_t)a.parent);
    FsReply reply = reply_err(EBUSY);
    for (int attempt = 0; attempt < 16; attempt++) {
        auto plk = lock_inode(*parent);
        if (parent->disk.kind != kKindDir) {
            reply = reply_err(ENOTDIR);
            break;
        }
        uint32_t child_ino = 0;
        if ((err = dir_lookup(*parent, a.name, &child_ino)) != 0) {
            reply = reply_err(err);
            break;
        }
        auto child = iget(child_ino);
        std::unique_lock<std::mutex> clk;
        if (child_ino > parent->ino) {
            clk = lock_inode(*child);
        } else {
            plk.unlock();
            clk = lock_inode(*child);
            plk = lock_inode(*parent);
            uint32_t again = 0;
            if (dir_lookup(*parent, a.name, &again) != 0 || again != child_ino)
                continue;
        }
        if (child->disk.kind != kKindDir) {
            reply = reply_err(ENOTDIR);
            break;
        }
        uint64_t entries = 0;
        if ((err = dir_count_entries(*child, &entries)) != 0) {
            reply = reply_err(err);
            break;
        }
        if (entries > 2) {
            reply = reply_err(ENOTEMPTY);
            break;
        }
        if ((err = dir_remove(&h, *parent, a.name)) != 0) {
            reply = reply_err(err);
            break;
        }
        parent->disk.nlink--;  // child's ".." is gone
        parent->disk.mtime = parent->disk.ctime = now();
        if ((err = journal_inode(&h, *parent)) != 0) {
            reply = reply_err(err);
            break;
        }
        child->disk.nlink = 0;
        child->disk.ctime = now();
        if (child->handles == 0) {
            if ((err = free_all_blocks(&h, *child)) == 0)
                err = free_inode(&h, *child);
        } else {
            child->unlinked = true;
        }
        if (!err)
            err = journal_inode(&h, *child);
        if (!err)
            err = prov_log_unlink(&h, ctx, (uint32_t)a.parent, child_ino, a.name, true);
        reply = err ? reply_err(err) : FsReply(ReplyOk{});
        break;
    }
    end(&h);
    return reply;
}

FsReply BentoFs::op_link(const RequestContext&, const LinkArgs& a) {
    int err;
    if (!name_ok(a.newname, &err))
        return reply_err(err);
    if (a.ino == kProvIno)
        return reply_err(EPERM);
    TransactionHandle h;
    if ((err = begin(credits_dir_mut_, &h)) != 0)
        return reply_err(err);
    auto parent = iget((uint32_t)a.newparent);
    auto target = iget((uint32_t)a.ino);
    FsReply reply;
    {
        // Both inos are known up front; lock in ascending order.
        std::unique_lock<std::mutex> first, second;
        if (parent->ino == target->ino) {
            first = lock_inode(*parent);
        } else if (parent->ino < target->ino) {
            first = lock_inode(*parent);
            second = lock_inode(*target);
        } else {
            first = lock_inode(*target);
            second = lock_inode(*parent);
        }
        uint32_t existing = 0;
        if (parent->disk.kind != kKindDir)
            reply = reply_err(ENOTDIR);
        else if (target->disk.kind == kKindDir)
            reply = reply_err(EPERM);
        else if (target->disk.kind == kKindFree)
            reply = reply_err(ENOENT);
        else if (dir_lookup(*parent, a.newname, &existing) == 0)
            reply = reply_err(EEXIST);
        else if ((err = dir_insert(&h, *parent, a.newname, (uint32_t)a.ino)) != 0)
            reply = reply_err(err);
        else {
            target->disk.nlink++;
            target->disk.ctime = now();
            mirror_meta(*target);
            parent->disk.mtime = parent->disk.ctime = now();
            err = journal_inode(&h, *target);
            if (!err)
                err = journal_inode(&h, *parent);
            if (!err) {
                target->lookups++;
                reply = ReplyEntry{(uint32_t)a.ino, attr_of(*target), 0};
            } else {
                reply = reply_err(err);
            }
        }
    }
    end(&h);
    return reply;
}

FsReply BentoFs::op_open(const RequestContext& ctx, const OpenArgs& a) {
    if (a.ino == kProvIno)
        return reply_err(EPERM);
    auto st = iget((uint32_t)a.ino);
    uint64_t fh = 0;
    {
        auto lk = lock_inode(*st);
        if (st->disk.kind == kKindFree)
            return reply_err(ENOENT);
        if (st->disk.kind == kKindDir)
            return reply_err(EISDIR);
        if (st->disk.kind == kKindSymlink)
            return reply_err(ELOOP);
        std::lock_guard hlk(handles_mu_);
        fh = next_fh_++;
        handles_[fh] = OpenHandle{(uint32_t)a.ino, a.flags, false};
        st->handles++;
    }
    prov_log_open(ctx, (uint32_t)a.ino, fh, a.flags);
    return ReplyOpen{fh, 0};
}

FsReply BentoFs::op_opendir(const RequestContext&, const OpendirArgs& a) {
    auto st = iget((uint32_t)a.ino);
    auto lk = lock_inode(*st);
    if (st->disk.kind == kKindFree)
        return reply_err(ENOENT);
    if (st->disk.kind != kKindDir)
        return reply_err(ENOTDIR);
    std::lock_guard hlk(handles_mu_);
    uint64_t fh = next_fh_++;
    handles_[fh] = OpenHandle{(uint32_t)a.ino, a.flags, true};
    st->handles++;
    return ReplyOpen{fh, 0};
}

FsReply BentoFs::op_read(const ReadArgs& a) {
    OpenHandle handle;
    {
        std::lock_guard hlk(handles_mu_);
        auto it = handles_.find(a.fh);
        if (it == handles_.end() || it->second.ino != a.ino)
            return reply_err(EBADF);
        if (it->second.is_dir)
            return reply_err(EISDIR);
        if (!mode_readable(it->second.flags))
            return reply_err(EBADF);
        handle = it->second;
    }
    auto st = iget((uint32_t)a.ino);
    auto lk = lock_inode(*st);
    const DiskInode& view = st->view();
    if (a.offset >= view.size || a.size == 0)
        return ReplyData{};
    uint64_t n = std::min<uint64_t>(a.size, view.size - a.offset);
    std::vector<uint8_t> out(n, 0);
    uint64_t done = 0;
    while (done < n) {
        uint64_t pos = a.offset + done;
        uint32_t fbi = (uint32_t)(pos / kBlockSize);
        uint32_t off = (uint32_t)(pos % kBlockSize);
        uint64_t chunk = std::min<uint64_t>(n - done, kBlockSize - off);
        uint32_t blockno = 0;
        int err = bmap(*st, fbi, MapMode::kRead, nullptr, &blockno);
        if (err)
            return reply_err(err);
        if (blockno != 0) {
            BufferHead bh;
            if ((err = dev_->bread(blockno, &bh)) != 0)
                return reply_err(err);
            std::memcpy(out.data() + done, bh.data().data() + off, chunk);
        }  // holes read as zeros
        done += chunk;
    }
    return ReplyData{std::move(out)};
}

FsReply BentoFs::op_write(const RequestContext&, const WriteArgs& a) {
    {
        std::lock_guard hlk(handles_mu_);
        auto it = handles_.find(a.fh);
        if (it == handles_.end() || it->second.ino != a.ino || it->second.is_dir ||
            !mode_writable(it->second.flags))
            return reply_err(EBADF);
    }
    if (a.offset + a.data.size() > kMaxFileSize)
        return reply_err(EFBIG);
    if (a.data.empty())
        return ReplyWritten{0};

    auto st = iget((uint32_t)a.ino);
    size_t pending_blocks = 0;
    uint64_t written = 0;
    int err = 0;
    {
        auto lk = lock_inode(*st);
        if (st->view().kind != kKindFile)
            return reply_err(EINVAL);
        if (!st->pending) {
            st->pending = std::make_unique<Pending>();
            st->pending->shadow = st->disk;
        }
        while (written < a.data.size()) {
            uint64_t pos = a.offset + written;
            uint32_t fbi = (uint32_t)(pos / kBlockSize);
            uint32_t off = (uint32_t)(pos % kBlockSize);
            uint64_t chunk = std::min<uint64_t>(a.data.size() - written, kBlockSize - off);
            err = write_file_block(nullptr, *st, fbi,
                                   {a.data.data() + written, (size_t)chunk}, off);
            if (err)
                break;
            written += chunk;
        }
        if (written > 0) {
            auto& shadow = st->pending->shadow;
            shadow.size = std::max<uint64_t>(shadow.size, a.offset + written);
            shadow.mtime = shadow.ctime = now();
            err = 0;
        }
        pending_blocks = st->pending->data_blocks.size();
    }
    if (err)
        return reply_err(err);
    if (pending_blocks >= opts_.writeback_limit_blocks) {
        int merr = materialize(st);
        if (merr)
            return reply_err(merr);
    }
    return ReplyWritten{written};
}

FsReply BentoFs::op_release(const RequestContext& ctx, const ReleaseArgs& a) {
    {
        std::lock_guard hlk(handles_mu_);
        auto it = handles_.find(a.fh);
        if (it == handles_.end() || it->second.ino != a.ino || it->second.is_dir)
            return reply_err(EBADF);
        handles_.erase(it);
    }
    prov_log_close(ctx, (uint32_t)a.ino, a.fh);
    auto st = iget((uint32_t)a.ino);
    int err = maybe_free_now(ctx, st);
    return err ? reply_err(err) : FsReply(ReplyOk{});
}

FsReply BentoFs::op_releasedir(const RequestContext& ctx, const ReleasedirArgs& a) {
    {
        std::lock_guard hlk(handles_mu_);
        auto it = handles_.find(a.fh);
        if (it == handles_.end() || it->second.ino != a.ino || !it->second.is_dir)
            return reply_err(EBADF);
        handles_.erase(it);
    }
    auto st = iget((uint32_t)a.ino);
    int err = maybe_free_now(ctx, st);
    return err ? reply_err(err) : FsReply(ReplyOk{});
}

// Drops one handle reference. When the last handle of an unlinked inode goes
// away, uncommitted writeback data is discarded unwritten and the inode and
// its committed blocks are freed in one transaction.
int BentoFs::maybe_free_now(const RequestContext&, const std::shared_ptr<InodeState>& st) {
    {
        auto lk = lock_inode(*st);
        assert(st->handles > 0);
        st->handles--;
        if (!(st->unlinked && st->handles == 0 && st->disk.nlink == 0 &&
              st->disk.kind != kKindFree))
            return 0;
    }
    TransactionHandle h;
    int err = begin(credits_free_, &h);
    if (err)
        return err;
    {
        auto lk = lock_inode(*st);
        // No new handles can appear: the inode has no directory entry.
        if (st->unlinked && st->handles == 0 && st->disk.nlink == 0 &&
            st->disk.kind != kKindFree) {
            discard_pending(*st);
            if ((err = free_all_blocks(&h, *st)) == 0)
                err = free_inode(&h, *st);
            if (!err)
                err = journal_inode(&h, *st);
        }
    }
    end(&h);
    return err;
}

FsReply BentoFs::op_fsync(const FsyncArgs& a) {
    {
        std::lock_guard hlk(handles_mu_);
        auto it = handles_.find(a.fh);
        if (it == handles_.end() || it->second.ino != a.ino)
            return reply_err(EBADF);
    }
    auto st = iget((uint32_t)a.ino);
    int err = materialize(st);
    if (err)
        return reply_err(err);
    if (journal_)
        journal_->force_commit();
    err = dev_->sync_all();
    return err ? reply_err(err) : FsReply(ReplyOk{});
}

FsReply BentoFs::op_readdir(const ReaddirArgs& a) {
    {
        std::lock_guard hlk(handles_mu_);
        auto it = handles_.find(a.fh);
        if (it == handles_.end() || it->second.ino != a.ino || !it->second.is_dir)
            return reply_err(EBADF);
    }
    auto st = iget((uint32_t)a.ino);
    auto lk = lock_inode(*st);
    if (st->disk.kind != kKindDir)
        return reply_err(ENOTDIR);
    ReplyDirEntries reply;
    int err = dir_list(*st, a.offset, 128, &reply.entries);
    if (err)
        return reply_err(err);
    return reply;
}

FsReply BentoFs::op_statfs() {
    std::lock_guard lk(alloc_mu_);
    ReplyStatfs s;
    s.blocks = sb_.data_blocks();
    s.bfree = free_data_blocks_;
    s.files = sb_.inode_count - 1;
    s.ffree = free_inodes_;
    s.bsize = kBlockSize;
    s.namelen = kMaxNameLen;
    return s;
}

FsReply BentoFs::op_access(const RequestContext& ctx, const AccessArgs& a) {
    auto st = iget((uint32_t)a.ino);
    auto lk = lock_inode(*st);
    if (st->disk.kind == kKindFree && !st->pending)
        return reply_err(ENOENT);
    int err = access_check(ctx, st->view(), a.mask);
    return err ? reply_err(err) : FsReply(ReplyOk{});
}

// rename: one transaction covering entry moves, ".." rewiring, link-count
// fixups, and any replaced-target teardown. Renames serialize on rename_mu_,
// which also keeps lock-free ancestry walks stable.
FsReply BentoFs::op_rename(const RequestContext& ctx, const RenameArgs& a) {
    int err;
    if (!name_ok(a.name, &err) || !name_ok(a.newname, &err))
        return reply_err(err);
    TransactionHandle h;
    if ((err = begin(credits_rename_, &h)) != 0)
        return reply_err(err);
    std::lock_guard rlk(rename_mu_);
    auto parent = iget((uint32_t)a.parent);
    auto newparent = iget((uint32_t)a.newparent);
    FsReply reply = reply_err(EBUSY);

    for (int attempt = 0; attempt < 16; attempt++) {
        // Phase 1: discover the child inos under the parent locks.
        uint32_t src_ino = 0, tgt_ino = 0;
        {
            std::unique_lock<std::mutex> l1, l2;
            if (parent->ino == newparent->ino) {
                l1 = lock_inode(*parent);
            } else if (parent->ino < newparent->ino) {
                l1 = lock_inode(*parent);
                l2 = lock_inode(*newparent);
            } else {
                l1 = lock_inode(*newparent);
                l2 = lock_inode(*parent);
            }
            if (parent->disk.kind != kKindDir || newparent->disk.kind != kKindDir) {
                reply = reply_err(ENOTDIR);
                break;
            }
            if ((err = dir_lookup(*parent, a.name, &src_ino)) != 0) {
                reply = reply_err(err);
                break;
            }
            if (dir_lookup(*newparent, a.newname, &tgt_ino) != 0)
                tgt_ino = 0;
        }
        if (tgt_ino && (a.flags & kRenameNoReplace)) {
            reply = reply_err(EEXIST);
            break;
        }
        if (src_ino == tgt_ino) {
            reply = ReplyOk{};  // same underlying file: no-op
            break;
        }
        if (src_ino == newparent->ino) {
            reply = reply_err(EINVAL);  // moving a directory into itself
            break;
        }

        // Phase 2: take every lock in ascending ino order, then re-validate
        // the lookups (phase 1 dropped the locks).
        std::vector<uint32_t> inos = {parent->ino, newparent->ino, src_ino};
        if (tgt_ino)
            inos.push_back(tgt_ino);
        std::sort(inos.begin(), inos.end());
        inos.erase(std::unique(inos.begin(), inos.end()), inos.end());
        std::vector<std::shared_ptr<InodeState>> states;
        std::vector<std::unique_lock<std::mutex>> locks;
        for (uint32_t ino : inos) {
            states.push_back(iget(ino));
            locks.push_back(lock_inode(*states.back()));
        }
        uint32_t again_src = 0, again_tgt = 0;
        if (dir_lookup(*parent, a.name, &again_src) != 0 || again_src != src_ino)
            continue;
        if (dir_lookup(*newparent, a.newname, &again_tgt) != 0)
            again_tgt = 0;
        if (again_tgt != tgt_ino)
            continue;

        auto src = iget(src_ino);
        auto tgt = tgt_ino ? iget(tgt_ino) : nullptr;
        const bool src_is_dir = src->disk.kind == kKindDir;
        const bool cross_dir = parent->ino != newparent->ino;

        // A directory cannot move under its own descendant.
        if (src_is_dir && cross_dir) {
            uint32_t cur = newparent->ino;
            bool cycle = false;
            while (cur != kRootIno) {
                if (cur == src_ino) {
                    cycle = true;
                    break;
                }
                if ((err = lookup_parent_of(cur, &cur)) != 0)
                    break;
            }
            if (err) {
                reply = reply_err(err);
                break;
            }
            if (cycle) {
                reply = reply_err(EINVAL);
                break;
            }
        }
        if (tgt) {
            const bool tgt_is_dir = tgt->disk.kind == kKindDir;
            if (src_is_dir && !tgt_is_dir) {
                reply = reply_err(ENOTDIR);
                break;
            }
            if (!src_is_dir && tgt_is_dir) {
                reply = reply_err(EISDIR);
                break;
            }
            if (tgt_is_dir) {
                uint64_t n = 0;
                if ((err = dir_count_entries(*tgt, &n)) != 0) {
                    reply = reply_err(err);
                    break;
                }
                if (n > 2) {
                    reply = reply_err(ENOTEMPTY);
                    break;
                }
            }
        }

        // Phase 3: mutate. Insert (or redirect) first so an allocation
        // failure aborts before anything is removed.
        if (tgt)
            err = dir_set_entry_ino(&h, *newparent, a.newname, src_ino);
        else
            err = dir_insert(&h, *newparent, a.newname, src_ino);
        if (err) {
            reply = reply_err(err);
            break;
        }
        if ((err = dir_remove(&h, *parent, a.name)) != 0) {
            reply = reply_err(err);
            break;
        }
        if (src_is_dir && cross_dir) {
            if ((err = dir_set_entry_ino(&h, *src, "..", newparent->ino)) != 0) {
                reply = reply_err(err);
                break;
            }
            parent->disk.nlink--;
            newparent->disk.nlink++;
        }
        if (tgt) {
            if (tgt->disk.kind == kKindDir) {
                tgt->disk.nlink = 0;
                newparent->disk.nlink--;  // its ".." no longer counts
            } else {
                tgt->disk.nlink--;
            }
            tgt->disk.ctime = now();
            mirror_meta(*tgt);
            bool deleted = tgt->disk.nlink == 0;
            if (deleted && tgt->handles == 0) {
                discard_pending(*tgt);
                if ((err = free_all_blocks(&h, *tgt)) == 0)
                    err = free_inode(&h, *tgt);
            } else if (deleted) {
                tgt->unlinked = true;
            }
            if (!err)
                err = journal_inode(&h, *tgt);
            if (err) {
                reply = reply_err(err);
                break;
            }
        }
        src->disk.ctime = now();
        mirror_meta(*src);
        parent->disk.mtime = parent->disk.ctime = now();
        newparent->disk.mtime = newparent->disk.ctime = now();
        err = journal_inode(&h, *src);
        if (!err)
            err = journal_inode(&h, *parent);
        if (!err && cross_dir)
            err = journal_inode(&h, *newparent);
        if (!err)
            err = prov_log_rename(&h, ctx, (uint32_t)a.parent, (uint32_t)a.newparent,
                                  src_ino, a.name, a.newname);
        reply = err ? reply_err(err) : FsReply(ReplyOk{});
        break;
    }
    end(&h);
    return reply;
}

}  // namespace bento::fs
