#ifndef BENTO_PROVENANCE_HPP
#define BENTO_PROVENANCE_HPP

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "bento/fs/bentofs.hpp"

namespace bento::prov {

// File lifecycle and access records, appended to the reserved log inode.
// Record wire format (little-endian, length-prefixed):
//   u32 len        bytes after this field
//   u64 seq        record serial
//   u8  kind       ProvKind
//   u32 pid, ino, parent, newparent, flags
//   u8  rw_mode    0 none, 1 read, 2 write, 3 read-write
//   u8  deleted    unlink removed the last link
//   u64 fh         pairs Open with Close
//   u16 name_len, u16 newname_len, then the two name strings
enum class ProvKind : uint8_t {
    kCreate = 1,
    kRename = 2,
    kSymlink = 3,
    kUnlink = 4,
    kOpen = 5,
    kClose = 6,
};

const char* prov_kind_name(ProvKind k);

struct ProvRecord {
    uint64_t seq = 0;
    ProvKind kind = ProvKind::kCreate;
    uint32_t pid = 0;
    uint32_t ino = 0;
    uint32_t parent = 0;
    uint32_t newparent = 0;
    uint32_t flags = 0;
    uint8_t rw_mode = 0;
    bool deleted = false;
    uint64_t fh = 0;
    std::string name;
    std::string newname;

    friend bool operator==(const ProvRecord&, const ProvRecord&) = default;
};

inline constexpr int kErrCorruptRecord = EILSEQ;

std::vector<uint8_t> prov_encode(const ProvRecord& rec);
// Parses a log byte stream. A truncated tail record is dropped and counted
// in *truncated; garbage inside the stream is kErrCorruptRecord.
int prov_parse(std::span<const uint8_t> bytes, std::vector<ProvRecord>* out,
               uint32_t* truncated);

// "SEQ KIND PID INO [PARENT NAME] [MODE] [DELETED]"
std::string prov_record_line(const ProvRecord& rec);

struct DependencyEdge {
    uint32_t reader_ino = 0;
    uint32_t writer_ino = 0;
    uint32_t pid = 0;
    uint64_t seq_begin = 0;  // overlap interval in record serials
    uint64_t seq_end = 0;

    friend bool operator==(const DependencyEdge&, const DependencyEdge&) = default;
};

struct DependencyGraph {
    std::vector<DependencyEdge> edges;
    uint32_t unmatched_closes = 0;
};

// Per-pid sweep: a writable open overlapping a readable open of another file
// in the same process makes the writable file depend on the readable one.
DependencyGraph prov_infer(const std::vector<ProvRecord>& records);

// Reads the reserved log inode straight from an unmounted image.
int prov_read_log_image(const std::string& image_path, std::vector<uint8_t>* out);

std::string prov_edge_line(const DependencyEdge& e);

// The provenance-tracking variant. Create/rename/symlink/unlink records join
// the triggering operation's transaction; open/close records run their own.
// Read and write handlers are untouched.
class BentoProvFs : public bento::fs::BentoFs {
public:
    explicit BentoProvFs(bento::fs::BentoFsOptions opts = {}) : BentoFs(std::move(opts)) {}

    uint64_t next_seq() const { return next_seq_.load(); }

protected:
    uint32_t prov_extra_credits() const override { return 8; }
    uint32_t accepted_capsule_version() const override { return kCapsuleVersionProv; }
    int prov_enable(bool fresh_mount) override;
    std::optional<ProvCapsuleState> prov_capsule_state() override;
    int prov_adopt(const std::optional<ProvCapsuleState>& state) override;

    int prov_log_create(TransactionHandle* h, const RequestContext& ctx, uint32_t parent,
                        uint32_t ino, const std::string& name, uint32_t flags,
                        uint32_t kind) override;
    int prov_log_rename(TransactionHandle* h, const RequestContext& ctx, uint32_t parent,
                        uint32_t newparent, uint32_t ino, const std::string& name,
                        const std::string& newname) override;
    int prov_log_unlink(TransactionHandle* h, const RequestContext& ctx, uint32_t parent,
                        uint32_t ino, const std::string& name, bool deleted) override;
    void prov_log_open(const RequestContext& ctx, uint32_t ino, uint64_t fh,
                       uint32_t flags) override;
    void prov_log_close(const RequestContext& ctx, uint32_t ino, uint64_t fh) override;

private:
    int append(TransactionHandle* h, ProvRecord rec);
    void append_own_txn(ProvRecord rec);

    std::mutex log_mu_;  // orders seq assignment with append order
    std::atomic<uint64_t> next_seq_{1};
};

}  // namespace bento::prov

#endif  // BENTO_PROVENANCE_HPP
