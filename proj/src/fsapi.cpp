#include "bento/fsapi.hpp"

#include <cassert>
#include <cstdio>

namespace bento {

const char* opcode_name(Opcode op) {
    switch (op) {
        case Opcode::kLookup: return "lookup";
        case Opcode::kForget: return "forget";
        case Opcode::kGetattr: return "getattr";
        case Opcode::kSetattr: return "setattr";
        case Opcode::kReadlink: return "readlink";
        case Opcode::kMknod: return "mknod";
        case Opcode::kMkdir: return "mkdir";
        case Opcode::kUnlink: return "unlink";
        case Opcode::kRmdir: return "rmdir";
        case Opcode::kSymlink: return "symlink";
        case Opcode::kRename: return "rename";
        case Opcode::kLink: return "link";
        case Opcode::kOpen: return "open";
        case Opcode::kRead: return "read";
        case Opcode::kWrite: return "write";
        case Opcode::kFlush: return "flush";
        case Opcode::kRelease: return "release";
        case Opcode::kFsync: return "fsync";
        case Opcode::kOpendir: return "opendir";
        case Opcode::kReaddir: return "readdir";
        case Opcode::kReleasedir: return "releasedir";
        case Opcode::kFsyncdir: return "fsyncdir";
        case Opcode::kStatfs: return "statfs";
        case Opcode::kAccess: return "access";
        case Opcode::kCreate: return "create";
        case Opcode::kGetxattr: return "getxattr";
        case Opcode::kSetxattr: return "setxattr";
        case Opcode::kListxattr: return "listxattr";
        case Opcode::kRemovexattr: return "removexattr";
        case Opcode::kGetlk: return "getlk";
        case Opcode::kSetlk: return "setlk";
        case Opcode::kBmap: return "bmap";
    }
    return "?";
}

static const char* kind_name(FileKind k) {
    switch (k) {
        case FileKind::RegularFile: return "file";
        case FileKind::Directory: return "dir";
        case FileKind::Symlink: return "symlink";
    }
    return "?";
}

static std::string attr_to_line(const FileAttr& a) {
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "ino=%llu size=%llu blocks=%llu kind=%s perm=%o nlink=%u uid=%u "
                  "gid=%u mtime=%llu.%09u",
                  (unsigned long long)a.ino, (unsigned long long)a.size,
                  (unsigned long long)a.blocks, kind_name(a.kind), a.perm, a.nlink,
                  a.uid, a.gid, (unsigned long long)a.mtime.sec, a.mtime.nsec);
    return buf;
}

std::string reply_to_line(const FsReply& r) {
    char buf[160];
    switch (r.index()) {
        case 0: {
            const auto& e = std::get<ReplyEntry>(r);
            return "Entry{" + attr_to_line(e.attr) +
                   " gen=" + std::to_string(e.generation) + "}";
        }
        case 1:
            return "Attr{" + attr_to_line(std::get<ReplyAttr>(r).attr) + "}";
        case 2: {
            const auto& d = std::get<ReplyData>(r).bytes;
            uint64_t digest = fnv1a64(d);
            std::snprintf(buf, sizeof(buf), "Data{len=%zu fnv=%016llx}", d.size(),
                          (unsigned long long)digest);
            return buf;
        }
        case 3:
            return "Written{" + std::to_string(std::get<ReplyWritten>(r).count) + "}";
        case 4: {
            const auto& o = std::get<ReplyOpen>(r);
            std::snprintf(buf, sizeof(buf), "Open{fh=%llu flags=%u}",
                          (unsigned long long)o.fh, o.open_flags);
            return buf;
        }
        case 5: {
            const auto& c = std::get<ReplyCreated>(r);
            std::snprintf(buf, sizeof(buf), " fh=%llu}", (unsigned long long)c.open.fh);
            return "Created{" + attr_to_line(c.entry.attr) + buf;
        }
        case 6: {
            const auto& d = std::get<ReplyDirEntries>(r);
            std::string out = "DirEntries{";
            for (const auto& e : d.entries) {
                out += e.name + ":" + std::to_string(e.ino) + ":" + kind_name(e.kind) + " ";
            }
            out += "}";
            return out;
        }
        case 7: {
            const auto& s = std::get<ReplyStatfs>(r);
            std::snprintf(buf, sizeof(buf),
                          "Statfs{blocks=%llu bfree=%llu files=%llu ffree=%llu bsize=%u "
                          "namelen=%u}",
                          (unsigned long long)s.blocks, (unsigned long long)s.bfree,
                          (unsigned long long)s.files, (unsigned long long)s.ffree,
                          s.bsize, s.namelen);
            return buf;
        }
        case 8:
            return "Ok";
        case 9:
            return "Err{" + errno_name(std::get<ReplyErr>(r).err) + "}";
    }
    return "?";
}

// QuiesceGate

void QuiesceGate::lock_shared() {
    std::unique_lock lk(mu_);
    if (writer_active_ || waiting_writers_ > 0) {
        readers_blocked_++;
        cv_readers_.wait(lk, [&] { return !writer_active_ && waiting_writers_ == 0; });
    }
    active_readers_++;
}

void QuiesceGate::unlock_shared() {
    std::lock_guard lk(mu_);
    assert(active_readers_ > 0);
    active_readers_--;
    if (active_readers_ == 0)
        cv_writer_.notify_one();
}

void QuiesceGate::lock() {
    std::unique_lock lk(mu_);
    waiting_writers_++;
    cv_writer_.wait(lk, [&] { return !writer_active_ && active_readers_ == 0; });
    waiting_writers_--;
    writer_active_ = true;
    assert(active_readers_ == 0);
}

void QuiesceGate::unlock() {
    std::lock_guard lk(mu_);
    assert(writer_active_);
    writer_active_ = false;
    if (waiting_writers_ > 0)
        cv_writer_.notify_one();
    else
        cv_readers_.notify_all();
}

int QuiesceGate::in_flight() const {
    std::lock_guard lk(mu_);
    return active_readers_;
}

uint64_t QuiesceGate::readers_blocked() const {
    std::lock_guard lk(mu_);
    return readers_blocked_;
}

// Dispatcher

RegisterResult Dispatcher::register_filesystem(FsRegistration reg) {
    if (reg.fs_name.empty())
        return RegisterResult{EINVAL, nullptr, std::nullopt};
    std::unique_lock lk(mu_);
    auto it = active_.find(reg.fs_name);
    if (reg.is_upgrade) {
        if (it == active_.end())
            return RegisterResult{kErrNoSuchFs, nullptr, std::nullopt};
        UpgradeTicket ticket;
        ticket.conn = it->second;
        ticket.replacement = std::move(reg.instance);
        ticket.target_generation = it->second->generation() + 1;
        ticket.devname = std::move(reg.devname);
        ticket.fc_info = std::move(reg.fc_info);
        return RegisterResult{0, nullptr, std::move(ticket)};
    }
    if (it != active_.end())
        return RegisterResult{kErrNameInUse, nullptr, std::nullopt};

    auto conn = std::shared_ptr<Connection>(new Connection(reg.fs_name));
    conn->instance_ = std::move(reg.instance);
    lk.unlock();
    int err = conn->instance_->init(reg.devname, reg.fc_info);
    if (err)
        return RegisterResult{err, nullptr, std::nullopt};
    lk.lock();
    if (active_.count(reg.fs_name)) {
        // Lost the race to another registration of the same name.
        lk.unlock();
        conn->instance_->destroy();
        return RegisterResult{kErrNameInUse, nullptr, std::nullopt};
    }
    active_[reg.fs_name] = conn;
    return RegisterResult{0, conn, std::nullopt};
}

FsReply Dispatcher::dispatch(Connection& conn, FsRequest req) {
    QuiesceGate& gate = UpgradeAccess::gate(conn);
    gate.lock_shared();
    FsReply reply = conn.destroyed() ? reply_err(ESHUTDOWN)
                                     : conn.instance_->handle(req);
    gate.unlock_shared();
    return reply;
}

int Dispatcher::unregister_filesystem(Connection& conn) {
    {
        std::lock_guard lk(mu_);
        auto it = active_.find(conn.fs_name());
        if (it == active_.end() || it->second.get() != &conn)
            return kErrNoSuchFs;
        active_.erase(it);
    }
    QuiesceGate& gate = UpgradeAccess::gate(conn);
    gate.lock();
    assert(gate.in_flight() == 0 || !"exclusive acquisition with dispatches in flight");
    conn.instance_->destroy();
    conn.destroyed_.store(true);
    gate.unlock();
    return 0;
}

std::shared_ptr<Connection> Dispatcher::find(const std::string& name) {
    std::lock_guard lk(mu_);
    auto it = active_.find(name);
    return it == active_.end() ? nullptr : it->second;
}

}  // namespace bento
