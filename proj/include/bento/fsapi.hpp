#ifndef BENTO_FSAPI_HPP
#define BENTO_FSAPI_HPP

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "bento/capsule.hpp"
#include "bento/common.hpp"

namespace bento {

// File operations API: the message-passing envelope between the dispatcher
// and a file-system instance. Only opaque inode numbers, handles, and byte
// buffers cross this boundary; the dispatcher never touches instance state.

enum class FileKind : uint8_t { RegularFile, Directory, Symlink };

struct FileAttr {
    uint64_t ino = 0;
    uint64_t size = 0;
    uint64_t blocks = 0;  // 512-byte sectors of allocated storage
    FileKind kind = FileKind::RegularFile;
    uint32_t perm = 0;
    uint32_t nlink = 0;
    uint32_t uid = 0;
    uint32_t gid = 0;
    Timespec atime, mtime, ctime;

    friend bool operator==(const FileAttr&, const FileAttr&) = default;
};

struct RequestContext {
    uint32_t uid = 0;
    uint32_t gid = 0;
    uint32_t pid = 0;
    uint64_t unique = 0;  // strictly increasing per connection
};

// Open access modes mirror open(2): O_RDONLY/O_WRONLY/O_RDWR in the low bits.
inline constexpr uint32_t kOpenRead = 0;
inline constexpr uint32_t kOpenWrite = 1;
inline constexpr uint32_t kOpenReadWrite = 2;
inline constexpr uint32_t kOpenAccessMask = 3;

struct LookupArgs { uint64_t parent; std::string name; };
struct ForgetArgs { uint64_t ino; uint64_t nlookup; };
struct GetattrArgs { uint64_t ino; };
struct SetattrArgs {
    uint64_t ino = 0;
    std::optional<uint32_t> mode, uid, gid;
    std::optional<uint64_t> size;
    std::optional<Timespec> atime, mtime;
    std::optional<uint64_t> fh;
};
struct ReadlinkArgs { uint64_t ino; };
struct MknodArgs { uint64_t parent; std::string name; uint32_t mode; uint32_t rdev; };
struct MkdirArgs { uint64_t parent; std::string name; uint32_t mode; };
struct UnlinkArgs { uint64_t parent; std::string name; };
struct RmdirArgs { uint64_t parent; std::string name; };
struct SymlinkArgs { uint64_t parent; std::string name; std::string link; };
struct RenameArgs {
    uint64_t parent; std::string name;
    uint64_t newparent; std::string newname;
    uint32_t flags;  // kRenameNoReplace
};
struct LinkArgs { uint64_t ino; uint64_t newparent; std::string newname; };
struct OpenArgs { uint64_t ino; uint32_t flags; };
struct ReadArgs { uint64_t ino; uint64_t fh; uint64_t offset; uint32_t size; };
struct WriteArgs {
    uint64_t ino; uint64_t fh; uint64_t offset;
    std::vector<uint8_t> data;
    uint32_t flags;
};
struct FlushArgs { uint64_t ino; uint64_t fh; uint64_t lock_owner; };
struct ReleaseArgs { uint64_t ino; uint64_t fh; uint32_t flags; uint64_t lock_owner; bool flush; };
struct FsyncArgs { uint64_t ino; uint64_t fh; bool datasync; };
struct OpendirArgs { uint64_t ino; uint32_t flags; };
struct ReaddirArgs { uint64_t ino; uint64_t fh; uint64_t offset; };
struct ReleasedirArgs { uint64_t ino; uint64_t fh; uint32_t flags; };
struct FsyncdirArgs { uint64_t ino; uint64_t fh; bool datasync; };
struct StatfsArgs { uint64_t ino; };
struct AccessArgs { uint64_t ino; uint32_t mask; };
struct CreateArgs { uint64_t parent; std::string name; uint32_t mode; uint32_t flags; };
// Accepted but unimplemented families; instances answer ENOSYS.
struct GetxattrArgs { uint64_t ino; std::string name; uint32_t size; };
struct SetxattrArgs { uint64_t ino; std::string name; std::vector<uint8_t> value; uint32_t flags; };
struct ListxattrArgs { uint64_t ino; uint32_t size; };
struct RemovexattrArgs { uint64_t ino; std::string name; };
struct GetlkArgs { uint64_t ino; uint64_t fh; uint64_t lock_owner; };
struct SetlkArgs { uint64_t ino; uint64_t fh; uint64_t lock_owner; bool sleep; };
struct BmapArgs { uint64_t ino; uint32_t blocksize; uint64_t idx; };

inline constexpr uint32_t kRenameNoReplace = 1;

using FsArgs = std::variant<
    LookupArgs, ForgetArgs, GetattrArgs, SetattrArgs, ReadlinkArgs, MknodArgs,
    MkdirArgs, UnlinkArgs, RmdirArgs, SymlinkArgs, RenameArgs, LinkArgs,
    OpenArgs, ReadArgs, WriteArgs, FlushArgs, ReleaseArgs, FsyncArgs,
    OpendirArgs, ReaddirArgs, ReleasedirArgs, FsyncdirArgs, StatfsArgs,
    AccessArgs, CreateArgs, GetxattrArgs, SetxattrArgs, ListxattrArgs,
    RemovexattrArgs, GetlkArgs, SetlkArgs, BmapArgs>;

// Mirrors the FsArgs alternative order; the opcode is derived from the args,
// so a request with mismatched args cannot be constructed.
enum class Opcode : size_t {
    kLookup, kForget, kGetattr, kSetattr, kReadlink, kMknod, kMkdir, kUnlink,
    kRmdir, kSymlink, kRename, kLink, kOpen, kRead, kWrite, kFlush, kRelease,
    kFsync, kOpendir, kReaddir, kReleasedir, kFsyncdir, kStatfs, kAccess,
    kCreate, kGetxattr, kSetxattr, kListxattr, kRemovexattr, kGetlk, kSetlk,
    kBmap,
};

struct FsRequest {
    RequestContext ctx;
    FsArgs args;

    Opcode opcode() const { return static_cast<Opcode>(args.index()); }
};

const char* opcode_name(Opcode op);

// Replies

struct ReplyEntry {
    uint64_t ino = 0;
    FileAttr attr;
    uint64_t generation = 0;
    friend bool operator==(const ReplyEntry&, const ReplyEntry&) = default;
};
struct ReplyAttr {
    FileAttr attr;
    uint32_t ttl_sec = 1;
    friend bool operator==(const ReplyAttr&, const ReplyAttr&) = default;
};
struct ReplyData {
    std::vector<uint8_t> bytes;
    friend bool operator==(const ReplyData&, const ReplyData&) = default;
};
struct ReplyWritten {
    uint64_t count = 0;
    friend bool operator==(const ReplyWritten&, const ReplyWritten&) = default;
};
struct ReplyOpen {
    uint64_t fh = 0;
    uint32_t open_flags = 0;
    friend bool operator==(const ReplyOpen&, const ReplyOpen&) = default;
};
// create returns the new entry and its open handle in one reply.
struct ReplyCreated {
    ReplyEntry entry;
    ReplyOpen open;
    friend bool operator==(const ReplyCreated&, const ReplyCreated&) = default;
};
struct DirEntryRec {
    uint64_t ino = 0;
    FileKind kind = FileKind::RegularFile;
    std::string name;
    uint64_t next_offset = 0;  // resume offset after this entry
    friend bool operator==(const DirEntryRec&, const DirEntryRec&) = default;
};
struct ReplyDirEntries {
    std::vector<DirEntryRec> entries;
    friend bool operator==(const ReplyDirEntries&, const ReplyDirEntries&) = default;
};
struct ReplyStatfs {
    uint64_t blocks = 0, bfree = 0, files = 0, ffree = 0;
    uint32_t bsize = 0, namelen = 0;
    friend bool operator==(const ReplyStatfs&, const ReplyStatfs&) = default;
};
struct ReplyOk {
    friend bool operator==(const ReplyOk&, const ReplyOk&) = default;
};
struct ReplyErr {
    int err = EIO;  // positive POSIX errno
    friend bool operator==(const ReplyErr&, const ReplyErr&) = default;
};

using FsReply = std::variant<ReplyEntry, ReplyAttr, ReplyData, ReplyWritten,
                             ReplyOpen, ReplyCreated, ReplyDirEntries,
                             ReplyStatfs, ReplyOk, ReplyErr>;

inline FsReply reply_err(int err) { return ReplyErr{err}; }
inline int reply_errno(const FsReply& r) {
    const auto* e = std::get_if<ReplyErr>(&r);
    return e ? e->err : 0;
}
// One-line textual form, used by the harness output and reply-stream
// comparisons.
std::string reply_to_line(const FsReply& r);

// File-system instance interface. handle() must tolerate concurrent calls
// for distinct requests; per-object serialization is the instance's job.
class FileSystem {
public:
    virtual ~FileSystem() = default;

    virtual int init(const std::string& devname, const std::string& fc_info) = 0;
    virtual void destroy() = 0;
    virtual FsReply handle(const FsRequest& req) = 0;

    // Live upgrade. update_prepare is called only once the connection is
    // quiesced; nullopt means the replacement starts from a fresh mount.
    // update_transfer moves from the capsule only after accepting it, so a
    // failed transfer leaves the capsule intact for rollback.
    virtual std::optional<TransferCapsule> update_prepare() { return std::nullopt; }
    virtual int update_transfer(TransferCapsule&& capsule) {
        (void)capsule;
        return kErrTransferRefused;
    }
};

// Fair reader-writer gate guarding a connection. Writer-preferring: once an
// exclusive acquisition is queued, new shared acquisitions wait, so an
// upgrade cannot be starved by a stream of operations.
class QuiesceGate {
public:
    void lock_shared();
    void unlock_shared();
    void lock();
    void unlock();

    int in_flight() const;          // active shared holders
    uint64_t readers_blocked() const;  // shared acquisitions that had to wait

private:
    mutable std::mutex mu_;
    std::condition_variable cv_readers_;
    std::condition_variable cv_writer_;
    int active_readers_ = 0;
    int waiting_writers_ = 0;
    bool writer_active_ = false;
    uint64_t readers_blocked_ = 0;
};

class Dispatcher;

class Connection {
public:
    const std::string& fs_name() const { return name_; }
    uint64_t generation() const { return generation_.load(); }
    bool destroyed() const { return destroyed_.load(); }

    RequestContext make_context(uint32_t uid, uint32_t gid, uint32_t pid) {
        return RequestContext{uid, gid, pid, next_unique_.fetch_add(1) + 1};
    }

    int in_flight() const { return gate_.in_flight(); }
    uint64_t readers_blocked() const { return gate_.readers_blocked(); }

private:
    friend class Dispatcher;
    friend struct UpgradeAccess;
    explicit Connection(std::string name) : name_(std::move(name)) {}

    std::string name_;
    std::unique_ptr<FileSystem> instance_;
    QuiesceGate gate_;
    std::atomic<uint64_t> generation_{0};
    std::atomic<uint64_t> next_unique_{0};
    std::atomic<bool> destroyed_{false};
};

// Consumed by the upgrade orchestrator; produced when a registration names an
// already-active file system and marks itself an upgrade.
struct UpgradeTicket {
    std::shared_ptr<Connection> conn;
    std::unique_ptr<FileSystem> replacement;
    uint64_t target_generation = 0;
    std::string devname;
    std::string fc_info;
};

struct FsRegistration {
    std::string fs_name;
    std::unique_ptr<FileSystem> instance;
    bool is_upgrade = false;
    std::string devname;
    std::string fc_info;
};

struct RegisterResult {
    int err = 0;
    std::shared_ptr<Connection> conn;            // fresh registration
    std::optional<UpgradeTicket> ticket;         // upgrade registration
};

// Registry plus dispatch entry point. Dispatch holds the connection gate in
// shared mode for the full duration of the instance call; unregister and
// upgrade hold it exclusively.
class Dispatcher {
public:
    RegisterResult register_filesystem(FsRegistration reg);
    FsReply dispatch(Connection& conn, FsRequest req);
    int unregister_filesystem(Connection& conn);

    std::shared_ptr<Connection> find(const std::string& name);

private:
    friend struct UpgradeAccess;
    std::mutex mu_;
    std::map<std::string, std::shared_ptr<Connection>> active_;
};

// Internal handle used by the upgrade orchestrator to run the swap protocol
// against a connection's private state.
struct UpgradeAccess {
    static QuiesceGate& gate(Connection& c) { return c.gate_; }
    static std::unique_ptr<FileSystem>& instance(Connection& c) { return c.instance_; }
    static void bump_generation(Connection& c) { c.generation_.fetch_add(1); }
};

}  // namespace bento

#endif  // BENTO_FSAPI_HPP
