#include "bento/provenance.hpp"

#include <algorithm>
#include <cstdio>
#include <tuple>

namespace bento::prov {

namespace {
constexpr size_t kFixedLen = 8 + 1 + 4 * 5 + 1 + 1 + 8 + 2 + 2;  // after the len field
}

const char* prov_kind_name(ProvKind k) {
    switch (k) {
        case ProvKind::kCreate: return "CREATE";
        case ProvKind::kRename: return "RENAME";
        case ProvKind::kSymlink: return "SYMLINK";
        case ProvKind::kUnlink: return "UNLINK";
        case ProvKind::kOpen: return "OPEN";
        case ProvKind::kClose: return "CLOSE";
    }
    return "?";
}

std::vector<uint8_t> prov_encode(const ProvRecord& rec) {
    std::vector<uint8_t> out(4 + kFixedLen + rec.name.size() + rec.newname.size());
    uint8_t* p = out.data();
    put_u32(p, (uint32_t)(out.size() - 4));
    put_u64(p + 4, rec.seq);
    p[12] = (uint8_t)rec.kind;
    put_u32(p + 13, rec.pid);
    put_u32(p + 17, rec.ino);
    put_u32(p + 21, rec.parent);
    put_u32(p + 25, rec.newparent);
    put_u32(p + 29, rec.flags);
    p[33] = rec.rw_mode;
    p[34] = rec.deleted ? 1 : 0;
    put_u64(p + 35, rec.fh);
    put_u16(p + 43, (uint16_t)rec.name.size());
    put_u16(p + 45, (uint16_t)rec.newname.size());
    std::memcpy(p + 47, rec.name.data(), rec.name.size());
    std::memcpy(p + 47 + rec.name.size(), rec.newname.data(), rec.newname.size());
    return out;
}

int prov_parse(std::span<const uint8_t> bytes, std::vector<ProvRecord>* out,
               uint32_t* truncated) {
    out->clear();
    if (truncated)
        *truncated = 0;
    size_t pos = 0;
    while (pos < bytes.size()) {
        if (pos + 4 > bytes.size()) {
            if (truncated)
                (*truncated)++;
            break;
        }
        uint32_t len = get_u32(bytes.data() + pos);
        if (len < kFixedLen || len > kFixedLen + 2 * 65535)
            return kErrCorruptRecord;
        if (pos + 4 + len > bytes.size()) {
            if (truncated)
                (*truncated)++;
            break;
        }
        const uint8_t* p = bytes.data() + pos;
        ProvRecord rec;
        rec.seq = get_u64(p + 4);
        uint8_t kind = p[12];
        if (kind < 1 || kind > 6)
            return kErrCorruptRecord;
        rec.kind = (ProvKind)kind;
        rec.pid = get_u32(p + 13);
        rec.ino = get_u32(p + 17);
        rec.parent = get_u32(p + 21);
        rec.newparent = get_u32(p + 25);
        rec.flags = get_u32(p + 29);
        rec.rw_mode = p[33];
        rec.deleted = p[34] != 0;
        rec.fh = get_u64(p + 35);
        uint16_t name_len = get_u16(p + 43);
        uint16_t newname_len = get_u16(p + 45);
        if (kFixedLen + name_len + newname_len != len)
            return kErrCorruptRecord;
        rec.name.assign((const char*)p + 47, name_len);
        rec.newname.assign((const char*)p + 47 + name_len, newname_len);
        out->push_back(std::move(rec));
        pos += 4 + len;
    }
    return 0;
}

std::string prov_record_line(const ProvRecord& rec) {
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%llu %s %u %u", (unsigned long long)rec.seq,
                  prov_kind_name(rec.kind), rec.pid, rec.ino);
    std::string line = buf;
    switch (rec.kind) {
        case ProvKind::kCreate:
        case ProvKind::kSymlink:
            line += " " + std::to_string(rec.parent) + " " + rec.name;
            break;
        case ProvKind::kRename:
            line += " " + std::to_string(rec.parent) + " " + rec.name + " -> " +
                    std::to_string(rec.newparent) + " " + rec.newname;
            break;
        case ProvKind::kUnlink:
            line += " " + std::to_string(rec.parent) + " " + rec.name +
                    (rec.deleted ? " DELETED" : " KEPT");
            break;
        case ProvKind::kOpen: {
            const char* mode = rec.rw_mode == 1 ? "R" : (rec.rw_mode == 2 ? "W" : "RW");
            line += std::string(" ") + mode;
            break;
        }
        case ProvKind::kClose:
            break;
    }
    return line;
}

std::string prov_edge_line(const DependencyEdge& e) {
    char buf[96];
    std::snprintf(buf, sizeof(buf), "%u -> %u (pid %u)", e.reader_ino, e.writer_ino,
                  e.pid);
    return buf;
}

DependencyGraph prov_infer(const std::vector<ProvRecord>& records) {
    DependencyGraph g;
    struct Interval {
        uint32_t ino;
        uint8_t rw_mode;
        uint64_t open_seq;
        uint64_t close_seq;  // UINT64_MAX while open
        uint64_t fh;
    };
    std::map<uint32_t, std::vector<Interval>> by_pid;
    for (const auto& rec : records) {
        if (rec.kind == ProvKind::kOpen) {
            by_pid[rec.pid].push_back({rec.ino, rec.rw_mode, rec.seq, UINT64_MAX, rec.fh});
        } else if (rec.kind == ProvKind::kClose) {
            auto& v = by_pid[rec.pid];
            auto it = std::find_if(v.begin(), v.end(), [&](const Interval& iv) {
                return iv.fh == rec.fh && iv.ino == rec.ino &&
                       iv.close_seq == UINT64_MAX;
            });
            if (it == v.end())
                g.unmatched_closes++;
            else
                it->close_seq = rec.seq;
        }
    }
    std::set<std::tuple<uint32_t, uint32_t, uint32_t>> seen;
    for (auto& [pid, intervals] : by_pid) {
        for (const auto& r : intervals) {
            if (r.rw_mode != 1 && r.rw_mode != 3)
                continue;  // not readable
            for (const auto& w : intervals) {
                if (&r == &w || r.ino == w.ino)
                    continue;
                if (w.rw_mode != 2 && w.rw_mode != 3)
                    continue;  // not writable
                if (r.open_seq >= w.close_seq || w.open_seq >= r.close_seq)
                    continue;  // no overlap
                if (!seen.insert({r.ino, w.ino, pid}).second)
                    continue;
                DependencyEdge e;
                e.reader_ino = r.ino;
                e.writer_ino = w.ino;
                e.pid = pid;
                e.seq_begin = std::max(r.open_seq, w.open_seq);
                e.seq_end = std::min(r.close_seq, w.close_seq);
                g.edges.push_back(e);
            }
        }
    }
    return g;
}

int prov_read_log_image(const std::string& image_path, std::vector<uint8_t>* out) {
    namespace fs = bento::fs;
    std::shared_ptr<BlockDevice> dev;
    int err = BlockDevice::open(image_path, fs::kBlockSize, &dev, 64);
    if (err)
        return err;
    std::vector<uint8_t> blk(fs::kBlockSize);
    if ((err = dev->read_block_direct(fs::kSuperblockBlock, blk)) != 0)
        return err;
    fs::Superblock sb;
    if (!fs::Superblock::decode(blk, &sb))
        return kErrBadMagic;
    if ((err = dev->read_block_direct(sb.inode_block(fs::kProvIno), blk)) != 0)
        return err;
    fs::DiskInode log =
        fs::DiskInode::decode({blk.data() + sb.inode_offset(fs::kProvIno),
                               fs::kInodeSize});
    if (log.kind != fs::kKindFile)
        return ENOENT;  // image was never mounted with provenance
    out->assign(log.size, 0);
    std::vector<uint8_t> ptrs(fs::kBlockSize);
    for (uint64_t off = 0; off < log.size; off += fs::kBlockSize) {
        uint32_t fbi = (uint32_t)(off / fs::kBlockSize);
        uint32_t blockno = 0;
        if (fbi < fs::kNumDirect) {
            blockno = log.direct[fbi];
        } else if (log.indirect) {
            if ((err = dev->read_block_direct(log.indirect, ptrs)) != 0)
                return err;
            blockno = get_u32(ptrs.data() + 4 * (fbi - fs::kNumDirect));
        }
        if (blockno == 0)
            return kErrCorruptRecord;
        if ((err = dev->read_block_direct(blockno, blk)) != 0)
            return err;
        uint64_t chunk = std::min<uint64_t>(log.size - off, fs::kBlockSize);
        std::memcpy(out->data() + off, blk.data(), chunk);
    }
    return 0;
}

// BentoProvFs

int BentoProvFs::prov_enable(bool) {
    if (!prov_log_inode_exists()) {
        int err = prov_create_log_inode();
        if (err)
            return err;
        next_seq_.store(1);
        return 0;
    }
    // Resume the serial after the last persisted record.
    std::vector<uint8_t> bytes;
    int err = prov_read_log(&bytes);
    if (err)
        return err;
    std::vector<ProvRecord> records;
    uint32_t truncated = 0;
    if (prov_parse(bytes, &records, &truncated) != 0)
        return kErrCorruptRecord;
    next_seq_.store(records.empty() ? 1 : records.back().seq + 1);
    return 0;
}

std::optional<ProvCapsuleState> BentoProvFs::prov_capsule_state() {
    return ProvCapsuleState{bento::fs::kProvIno, next_seq_.load()};
}

int BentoProvFs::prov_adopt(const std::optional<ProvCapsuleState>& state) {
    if (state) {
        next_seq_.store(state->next_seq);
        if (!prov_log_inode_exists())
            return prov_create_log_inode();
        return 0;
    }
    // Capsule from a version without provenance: default the state.
    return prov_enable(false);
}

int BentoProvFs::append(TransactionHandle* h, ProvRecord rec) {
    std::lock_guard lk(log_mu_);
    rec.seq = next_seq_.fetch_add(1);
    auto bytes = prov_encode(rec);
    return prov_append_log(h, bytes);
}

void BentoProvFs::append_own_txn(ProvRecord rec) {
    TransactionHandle h;
    if (begin(prov_extra_credits(), &h) != 0)
        return;
    append(&h, std::move(rec));
    end(&h);
}

int BentoProvFs::prov_log_create(TransactionHandle* h, const RequestContext& ctx,
                                 uint32_t parent, uint32_t ino, const std::string& name,
                                 uint32_t flags, uint32_t kind) {
    ProvRecord rec;
    rec.kind = kind == bento::fs::kKindSymlink ? ProvKind::kSymlink : ProvKind::kCreate;
    rec.pid = ctx.pid;
    rec.ino = ino;
    rec.parent = parent;
    rec.flags = flags;
    rec.name = name;
    return append(h, std::move(rec));
}

int BentoProvFs::prov_log_rename(TransactionHandle* h, const RequestContext& ctx,
                                 uint32_t parent, uint32_t newparent, uint32_t ino,
                                 const std::string& name, const std::string& newname) {
    ProvRecord rec;
    rec.kind = ProvKind::kRename;
    rec.pid = ctx.pid;
    rec.ino = ino;
    rec.parent = parent;
    rec.newparent = newparent;
    rec.name = name;
    rec.newname = newname;
    return append(h, std::move(rec));
}

int BentoProvFs::prov_log_unlink(TransactionHandle* h, const RequestContext& ctx,
                                 uint32_t parent, uint32_t ino, const std::string& name,
                                 bool deleted) {
    ProvRecord rec;
    rec.kind = ProvKind::kUnlink;
    rec.pid = ctx.pid;
    rec.ino = ino;
    rec.parent = parent;
    rec.deleted = deleted;
    rec.name = name;
    return append(h, std::move(rec));
}

void BentoProvFs::prov_log_open(const RequestContext& ctx, uint32_t ino, uint64_t fh,
                                uint32_t flags) {
    ProvRecord rec;
    rec.kind = ProvKind::kOpen;
    rec.pid = ctx.pid;
    rec.ino = ino;
    rec.fh = fh;
    rec.flags = flags;
    uint32_t mode = flags & kOpenAccessMask;
    rec.rw_mode = mode == kOpenRead ? 1 : (mode == kOpenWrite ? 2 : 3);
    append_own_txn(std::move(rec));
}

void BentoProvFs::prov_log_close(const RequestContext& ctx, uint32_t ino, uint64_t fh) {
    ProvRecord rec;
    rec.kind = ProvKind::kClose;
    rec.pid = ctx.pid;
    rec.ino = ino;
    rec.fh = fh;
    append_own_txn(std::move(rec));
}

}  // namespace bento::prov
