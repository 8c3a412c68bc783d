#include "bento/harness/crashtest.hpp"

#include <unistd.h>

#include <atomic>
#include <cassert>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <thread>

#include "bento/fs/bentofs.hpp"
#include "bento/fs/fsck.hpp"
#include "bento/fs/mkfs.hpp"
#include "bento/harness/crash_sim.hpp"

namespace bento::harness {

namespace {

using bento::fs::BentoFs;
using bento::fs::BentoFsOptions;

// Semantic model of the tiny namespace the workloads touch.
struct Node {
    enum Type { kFile, kDir, kSymlink } type = kFile;
    std::shared_ptr<std::vector<uint8_t>> content;  // shared across hard links
    std::string target;                             // symlinks
};
using Model = std::map<std::string, Node>;  // absolute path -> node

// Models are value types; clone shared file contents except across hard
// links created inside the same model.
Model deep_copy(const Model& m) {
    Model out;
    std::map<const std::vector<uint8_t>*, std::shared_ptr<std::vector<uint8_t>>> seen;
    for (const auto& [path, node] : m) {
        Node copy = node;
        if (node.content) {
            auto it = seen.find(node.content.get());
            if (it == seen.end())
                it = seen.emplace(node.content.get(),
                                  std::make_shared<std::vector<uint8_t>>(*node.content))
                         .first;
            copy.content = it->second;
        }
        out[path] = std::move(copy);
    }
    return out;
}

Node file_node(std::vector<uint8_t> content = {}) {
    Node n;
    n.type = Node::kFile;
    n.content = std::make_shared<std::vector<uint8_t>>(std::move(content));
    return n;
}

// Path-based driver over a mounted instance.
struct Driver {
    FileSystem& fs;
    uint64_t serial = 0;

    FsReply call(FsArgs args) {
        return fs.handle(FsRequest{RequestContext{0, 0, 7, ++serial}, std::move(args)});
    }
    int resolve(const std::string& path, uint64_t* ino) {
        uint64_t cur = 1;
        size_t i = 1;
        while (i <= path.size()) {
            size_t end = path.find('/', i);
            if (end == std::string::npos)
                end = path.size();
            if (end > i) {
                auto r = call(LookupArgs{cur, path.substr(i, end - i)});
                if (int err = reply_errno(r))
                    return err;
                cur = std::get<ReplyEntry>(r).ino;
            }
            i = end + 1;
        }
        *ino = cur;
        return 0;
    }
    int split(const std::string& path, uint64_t* parent, std::string* name) {
        size_t slash = path.rfind('/');
        *name = path.substr(slash + 1);
        return resolve(path.substr(0, slash ? slash : 1), parent);
    }
    int create_file(const std::string& path, const std::vector<uint8_t>& content) {
        uint64_t parent;
        std::string name;
        if (int err = split(path, &parent, &name))
            return err;
        auto r = call(CreateArgs{parent, name, 0644, kOpenReadWrite});
        if (int err = reply_errno(r))
            return err;
        auto c = std::get<ReplyCreated>(r);
        int err = 0;
        if (!content.empty())
            err = reply_errno(call(WriteArgs{c.entry.ino, c.open.fh, 0, content, 0}));
        int rel = reply_errno(call(ReleaseArgs{c.entry.ino, c.open.fh, 0, 0, false}));
        return err ? err : rel;
    }
    int write_file(const std::string& path, const std::vector<uint8_t>& content) {
        uint64_t ino;
        if (int err = resolve(path, &ino))
            return err;
        auto r = call(OpenArgs{ino, kOpenWrite});
        if (int err = reply_errno(r))
            return err;
        uint64_t fh = std::get<ReplyOpen>(r).fh;
        int err = reply_errno(call(WriteArgs{ino, fh, 0, content, 0}));
        int rel = reply_errno(call(ReleaseArgs{ino, fh, 0, 0, false}));
        return err ? err : rel;
    }
    int simple(const std::string& op, const std::string& path,
               const std::string& path2 = "") {
        uint64_t parent;
        std::string name;
        if (int err = split(path, &parent, &name))
            return err;
        if (op == "mkdir")
            return reply_errno(call(MkdirArgs{parent, name, 0755}));
        if (op == "unlink")
            return reply_errno(call(UnlinkArgs{parent, name}));
        if (op == "rmdir")
            return reply_errno(call(RmdirArgs{parent, name}));
        if (op == "symlink")
            return reply_errno(call(SymlinkArgs{parent, name, path2}));
        if (op == "rename") {
            uint64_t p2;
            std::string n2;
            if (int err = split(path2, &p2, &n2))
                return err;
            return reply_errno(call(RenameArgs{parent, name, p2, n2, 0}));
        }
        if (op == "link") {
            uint64_t target;
            if (int err = resolve(path2, &target))
                return err;
            return reply_errno(call(LinkArgs{target, parent, name}));
        }
        if (op == "truncate") {
            uint64_t ino;
            if (int err = resolve(path, &ino))
                return err;
            SetattrArgs sa;
            sa.ino = ino;
            sa.size = 0;
            return reply_errno(call(sa));
        }
        return ENOSYS;
    }
    // fsync the file itself or, for namespace operations, the parent dir.
    int sync_path(const std::string& path, bool dir_sync) {
        uint64_t ino;
        std::string ignored;
        int err = dir_sync ? split(path, &ino, &ignored) : resolve(path, &ino);
        if (err)
            return err;
        if (dir_sync || ino == 1) {
            auto r = call(OpendirArgs{ino, 0});
            if ((err = reply_errno(r)))
                return err;
            uint64_t fh = std::get<ReplyOpen>(r).fh;
            err = reply_errno(call(FsyncdirArgs{ino, fh, false}));
            call(ReleasedirArgs{ino, fh, 0});
            return err;
        }
        auto r = call(OpenArgs{ino, kOpenRead});
        if ((err = reply_errno(r)))
            return err;
        uint64_t fh = std::get<ReplyOpen>(r).fh;
        err = reply_errno(call(FsyncArgs{ino, fh, false}));
        call(ReleaseArgs{ino, fh, 0, 0, false});
        return err;
    }
};

// One instantiated operation: how to run it, how it changes the model, and
// which path to sync for its durability toggle.
struct OpInstance {
    std::string kind;
    std::string desc;
    std::vector<std::string> need_files;  // setup: files with initial content
    std::vector<std::string> need_dirs;   // setup: directories
    std::function<int(Driver&)> run;
    std::function<void(Model&)> apply;
    std::string sync_target;
    bool sync_is_dir = false;
};

std::vector<uint8_t> initial_content() { return std::vector<uint8_t>(4096, 0x11); }

std::vector<OpInstance> build_instances(const std::vector<std::string>& opset) {
    auto enabled = [&](const std::string& kind) {
        return opset.empty() ||
               std::find(opset.begin(), opset.end(), kind) != opset.end();
    };
    const std::vector<std::string> files = {"/a", "/b", "/d1/a", "/d1/b"};
    std::vector<OpInstance> out;

    if (enabled("create")) {
        for (const auto& p : files) {
            OpInstance op;
            op.kind = "create";
            op.desc = "create " + p;
            op.run = [p](Driver& d) { return d.create_file(p, {}); };
            op.apply = [p](Model& m) { m[p] = file_node(); };
            op.sync_target = p;
            op.sync_is_dir = true;
            out.push_back(std::move(op));
        }
    }
    if (enabled("mkdir")) {
        for (const auto& p : {std::string("/d"), std::string("/d1/d")}) {
            OpInstance op;
            op.kind = "mkdir";
            op.desc = "mkdir " + p;
            op.run = [p](Driver& d) { return d.simple("mkdir", p); };
            op.apply = [p](Model& m) { m[p] = Node{Node::kDir, nullptr, ""}; };
            op.sync_target = p;
            op.sync_is_dir = true;
            out.push_back(std::move(op));
        }
    }
    if (enabled("write")) {
        for (const auto& p : {std::string("/a"), std::string("/d1/a")}) {
            for (uint8_t pat : {0xAA, 0xBB}) {
                OpInstance op;
                op.kind = "write";
                op.desc = "write " + p + " pat" + std::to_string(pat);
                op.need_files = {p};
                std::vector<uint8_t> data(6000, pat);
                op.run = [p, data](Driver& d) { return d.write_file(p, data); };
                op.apply = [p, data](Model& m) {
                    auto it = m.find(p);
                    if (it != m.end() && it->second.type == Node::kFile)
                        *it->second.content = data;
                };
                op.sync_target = p;
                out.push_back(std::move(op));
            }
        }
    }
    if (enabled("unlink")) {
        for (const auto& p : files) {
            OpInstance op;
            op.kind = "unlink";
            op.desc = "unlink " + p;
            op.need_files = {p};
            op.run = [p](Driver& d) { return d.simple("unlink", p); };
            op.apply = [p](Model& m) { m.erase(p); };
            op.sync_target = p;
            op.sync_is_dir = true;
            out.push_back(std::move(op));
        }
    }
    if (enabled("rmdir")) {
        for (const auto& p : {std::string("/d"), std::string("/d1/d")}) {
            OpInstance op;
            op.kind = "rmdir";
            op.desc = "rmdir " + p;
            op.need_dirs = {p};
            op.run = [p](Driver& d) { return d.simple("rmdir", p); };
            op.apply = [p](Model& m) { m.erase(p); };
            op.sync_target = p;
            op.sync_is_dir = true;
            out.push_back(std::move(op));
        }
    }
    if (enabled("rename")) {
        const std::vector<std::pair<std::string, std::string>> pairs = {
            {"/a", "/b"}, {"/a", "/d1/b"}, {"/d1/a", "/b"}};
        for (const auto& pair : pairs) {
            const std::string src = pair.first, dst = pair.second;
            OpInstance op;
            op.kind = "rename";
            op.desc = "rename " + src + " -> " + dst;
            op.need_files = {src};
            op.run = [src, dst](Driver& d) { return d.simple("rename", src, dst); };
            op.apply = [src, dst](Model& m) {
                auto it = m.find(src);
                if (it == m.end())
                    return;
                auto jt = m.find(dst);
                // Renaming one hard link onto another of the same file is a
                // no-op.
                if (jt != m.end() && it->second.content &&
                    it->second.content == jt->second.content)
                    return;
                Node moved = it->second;
                m.erase(it);
                m[dst] = std::move(moved);
            };
            op.sync_target = dst;
            op.sync_is_dir = true;
            out.push_back(std::move(op));
        }
        OpInstance dirmove;
        dirmove.kind = "rename";
        dirmove.desc = "rename dir /d -> /d1/dd";
        dirmove.need_dirs = {"/d"};
        dirmove.run = [](Driver& d) { return d.simple("rename", "/d", "/d1/dd"); };
        dirmove.apply = [](Model& m) {
            if (m.count("/d")) {
                m["/d1/dd"] = m["/d"];
                m.erase("/d");
            }
        };
        dirmove.sync_target = "/d1/dd";
        dirmove.sync_is_dir = true;
        out.push_back(std::move(dirmove));
    }
    if (enabled("link")) {
        const std::vector<std::pair<std::string, std::string>> pairs = {
            {"/b", "/a"}, {"/d1/b", "/a"}};  // new name <- existing
        for (const auto& pair : pairs) {
            const std::string newp = pair.first, target = pair.second;
            OpInstance op;
            op.kind = "link";
            op.desc = "link " + newp + " <- " + target;
            op.need_files = {target};
            op.run = [newp, target](Driver& d) { return d.simple("link", newp, target); };
            op.apply = [newp, target](Model& m) {
                auto it = m.find(target);
                if (it != m.end() && it->second.type == Node::kFile && !m.count(newp))
                    m[newp] = it->second;  // shares content
            };
            op.sync_target = newp;
            op.sync_is_dir = true;
            out.push_back(std::move(op));
        }
    }
    if (enabled("symlink")) {
        OpInstance op;
        op.kind = "symlink";
        op.desc = "symlink /s -> a";
        op.run = [](Driver& d) { return d.simple("symlink", "/s", "a"); };
        op.apply = [](Model& m) { m["/s"] = Node{Node::kSymlink, nullptr, "a"}; };
        op.sync_target = "/s";
        op.sync_is_dir = true;
        out.push_back(std::move(op));
    }
    if (enabled("truncate")) {
        OpInstance op;
        op.kind = "truncate";
        op.desc = "truncate /a 0";
        op.need_files = {"/a"};
        op.run = [](Driver& d) { return d.simple("truncate", "/a"); };
        op.apply = [](Model& m) {
            auto it = m.find("/a");
            if (it != m.end() && it->second.type == Node::kFile)
                it->second.content->clear();
        };
        op.sync_target = "/a";
        out.push_back(std::move(op));
    }
    return out;
}

// Probed state of one path on a recovered image.
struct Probe {
    enum What { kMissing, kFile, kDir, kSymlink } what = kMissing;
    std::vector<uint8_t> content;
    std::string target;

    friend bool operator==(const Probe&, const Probe&) = default;
};

Probe probe_path(Driver& d, const std::string& path) {
    Probe p;
    uint64_t ino;
    if (d.resolve(path, &ino) != 0)
        return p;
    auto attr_reply = d.call(GetattrArgs{ino});
    if (reply_errno(attr_reply))
        return p;
    const FileAttr& attr = std::get<ReplyAttr>(attr_reply).attr;
    if (attr.kind == FileKind::Directory) {
        p.what = Probe::kDir;
        return p;
    }
    if (attr.kind == FileKind::Symlink) {
        p.what = Probe::kSymlink;
        auto r = d.call(ReadlinkArgs{ino});
        if (!reply_errno(r)) {
            auto& b = std::get<ReplyData>(r).bytes;
            p.target.assign(b.begin(), b.end());
        }
        return p;
    }
    p.what = Probe::kFile;
    auto r = d.call(OpenArgs{ino, kOpenRead});
    if (reply_errno(r))
        return p;
    uint64_t fh = std::get<ReplyOpen>(r).fh;
    uint64_t off = 0;
    for (;;) {
        auto dr = d.call(ReadArgs{ino, fh, off, 65536});
        if (reply_errno(dr))
            break;
        auto& bytes = std::get<ReplyData>(dr).bytes;
        if (bytes.empty())
            break;
        p.content.insert(p.content.end(), bytes.begin(), bytes.end());
        off += bytes.size();
    }
    d.call(ReleaseArgs{ino, fh, 0, 0, false});
    return p;
}

Probe model_probe(const Model& m, const std::string& path) {
    Probe p;
    auto it = m.find(path);
    if (it == m.end())
        return p;
    switch (it->second.type) {
        case Node::kDir: p.what = Probe::kDir; break;
        case Node::kSymlink:
            p.what = Probe::kSymlink;
            p.target = it->second.target;
            break;
        case Node::kFile:
            p.what = Probe::kFile;
            p.content = *it->second.content;
            break;
    }
    return p;
}

struct Case {
    const OpInstance* op1;
    const OpInstance* op2;
    bool sync1;
    bool sync2;
    uint64_t index;
};

struct Worker {
    const CrashTestConfig& cfg;
    std::string dir;           // scratch directory for this worker
    std::string template_img;  // freshly formatted image (shared, read-only)
    CrashTestResult local;
    std::vector<std::string> universe;  // paths probed on every recovered state

    std::string work_img() const { return dir + "/work.img"; }
    std::string state_img() const { return dir + "/state.img"; }

    BentoFsOptions fs_opts(bool journal) const {
        BentoFsOptions o;
        o.clock = [] { return Timespec{1, 0}; };  // deterministic images
        o.journal_enabled = journal;
        return o;
    }

    void fail(const Case& c, const std::string& why, const CrashState& st,
              const std::vector<TraceEvent>& evs) {
        local.failures++;
        if (local.notes.size() < 16) {
            char buf[256];
            std::snprintf(buf, sizeof(buf),
                          "case %llu [%s%s + %s%s]: %s (state: %zu groups, %zu tail)",
                          (unsigned long long)c.index, c.op1->desc.c_str(),
                          c.sync1 ? " +sync" : "", c.op2->desc.c_str(),
                          c.sync2 ? " +sync" : "", why.c_str(), st.full_groups,
                          st.tail_writes.size());
            local.notes.push_back(buf);
        }
        if (!cfg.artifact_dir.empty()) {
            std::error_code ec;
            std::filesystem::create_directories(cfg.artifact_dir, ec);
            std::string path = cfg.artifact_dir + "/case_" + std::to_string(c.index) +
                               "_" + std::to_string(local.failures) + ".txt";
            FILE* f = fopen(path.c_str(), "w");
            if (f) {
                fprintf(f, "# crash-test failure artifact\n");
                fprintf(f, "op1: %s sync=%d\nop2: %s sync=%d\nwhy: %s\n",
                        c.op1->desc.c_str(), c.sync1, c.op2->desc.c_str(), c.sync2,
                        why.c_str());
                fprintf(f, "state: full_groups=%zu tail=[", st.full_groups);
                for (size_t i : st.tail_writes)
                    fprintf(f, "%zu ", i);
                fprintf(f, "]\ntrace:\n");
                for (const auto& ev : evs) {
                    if (ev.kind == TraceEvent::kWrite)
                        fprintf(f, "W %llu %016llx\n", (unsigned long long)ev.blockno,
                                (unsigned long long)ev.digest);
                    else
                        fprintf(f, "F\n");
                }
                fclose(f);
            }
        }
    }

    int run_case(const Case& c) {
        namespace stdfs = std::filesystem;
        std::error_code ec;
        stdfs::copy_file(template_img, work_img(),
                         stdfs::copy_options::overwrite_existing, ec);
        if (ec)
            return EIO;

        // Setup: /d1 plus every file/dir the two ops require.
        Model base_model;
        base_model["/d1"] = Node{Node::kDir, nullptr, ""};
        {
            BentoFs fs(fs_opts(!cfg.disable_journal));
            if (fs.init(work_img(), "") != 0)
                return EIO;
            Driver d{fs};
            if (d.simple("mkdir", "/d1") != 0)
                return EIO;
            std::set<std::string> made;
            for (const OpInstance* op : {c.op1, c.op2}) {
                for (const auto& p : op->need_dirs)
                    if (made.insert(p).second) {
                        if (d.simple("mkdir", p) != 0)
                            return EIO;
                        base_model[p] = Node{Node::kDir, nullptr, ""};
                    }
                for (const auto& p : op->need_files)
                    if (made.insert(p).second) {
                        if (d.create_file(p, initial_content()) != 0)
                            return EIO;
                        base_model[p] = file_node(initial_content());
                    }
            }
            fs.destroy();
        }

        // Traced run with image mutation suppressed; the image file itself is
        // the pre-crash base state.
        std::vector<TraceEvent> evs;
        size_t mf1 = 0, mf2 = 0;  // durability floors (flush counts)
        int rc1, rc2;
        {
            BentoFs fs(fs_opts(!cfg.disable_journal));
            if (fs.init(work_img(), "") != 0)
                return EIO;
            auto dev = fs.device();
            dev->trace().start(true);
            dev->freeze_image();
            Driver d{fs};
            rc1 = c.op1->run(d);
            if (c.sync1 && rc1 == 0)
                d.sync_path(c.op1->sync_target, c.op1->sync_is_dir);
            mf1 = dev->trace().flush_count();
            rc2 = c.op2->run(d);
            if (c.sync2 && rc2 == 0)
                d.sync_path(c.op2->sync_target, c.op2->sync_is_dir);
            mf2 = dev->trace().flush_count();
            fs.destroy();
            evs = dev->trace().events();
        }

        // Legal states. Metadata operations commit in order, so they form
        // prefixes. An unsynced data write is deferred writeback: it may
        // materialize after a later operation's commit, so "op2 without op1"
        // is also legal when op1 is a write.
        Model s1 = deep_copy(base_model);
        if (rc1 == 0)
            c.op1->apply(s1);
        Model s2 = deep_copy(s1);
        if (rc2 == 0)
            c.op2->apply(s2);
        const bool op1_is_data = c.op1->kind == "write" && !c.sync1;
        Model s2only = deep_copy(base_model);
        if (op1_is_data && rc2 == 0)
            c.op2->apply(s2only);

        auto states = enumerate_crash_states(evs, cfg.stress_samples,
                                             cfg.seed ^ (c.index * 0x9E3779B97F4A7C15ull));
        for (const auto& st : states) {
            local.crash_states++;
            if (materialize_crash_state(work_img(), state_img(), evs, st, 4096) != 0)
                return EIO;
            // Recovery runs at mount; the probe reads the recovered state.
            std::vector<Probe> got(universe.size());
            bool mount_ok = false;
            {
                BentoFs fs(fs_opts(true));
                if (fs.init(state_img(), "") == 0) {
                    mount_ok = true;
                    Driver d{fs};
                    for (size_t i = 0; i < universe.size(); i++)
                        got[i] = probe_path(d, universe[i]);
                    fs.destroy();
                }
            }
            if (!mount_ok) {
                local.fsck_violations++;
                fail(c, "image unmountable after recovery", st, evs);
                continue;
            }
            bento::fs::FsckReport rep;
            if (fsck_image(state_img(), &rep) != 0 || !rep.clean()) {
                local.fsck_violations++;
                fail(c, rep.violations.empty() ? "fsck error"
                                               : "fsck: " + rep.violations[0],
                     st, evs);
                continue;
            }
            // Match the probe against each legal prefix state. Operations
            // can undo each other, so the candidates may coincide; durability
            // only requires membership in the still-legal set.
            auto matches = [&](const Model& m) {
                for (size_t i = 0; i < universe.size(); i++)
                    if (!(got[i] == model_probe(m, universe[i])))
                        return false;
                return true;
            };
            bool m0 = matches(base_model), m1 = matches(s1), m2 = matches(s2);
            bool m2only = op1_is_data && matches(s2only);
            if (!m0 && !m1 && !m2 && !m2only) {
                local.semantic_violations++;
                fail(c, "recovered state matches no legal state", st, evs);
                continue;
            }
            // Synced operations must be present once the crash point is at or
            // past their sync's flush barrier.
            if (c.sync1 && rc1 == 0 && st.full_groups >= mf1 && !(m1 || m2)) {
                local.durability_violations++;
                fail(c, "synced op1 missing after its barrier", st, evs);
                continue;
            }
            if (c.sync2 && rc2 == 0 && st.full_groups >= mf2 && !(m2 || m2only)) {
                local.durability_violations++;
                fail(c, "synced op2 missing after its barrier", st, evs);
                continue;
            }
        }
        local.cases++;
        return 0;
    }
};

}  // namespace

std::vector<std::string> crash_test_all_ops() {
    return {"create", "mkdir", "write", "unlink", "rmdir",
            "rename", "link",  "symlink", "truncate"};
}

int run_crash_test(const CrashTestConfig& config, CrashTestResult* result) {
    *result = CrashTestResult{};
    auto instances = build_instances(config.opset);
    if (instances.empty() || config.budget == 0)
        return 0;

    std::vector<Case> cases;
    uint64_t index = 0;
    for (const auto& a : instances)
        for (const auto& b : instances)
            for (int syncs = 0; syncs < 4; syncs++) {
                if (index >= config.budget) {
                    syncs = 4;
                    break;
                }
                cases.push_back(Case{&a, &b, (syncs & 1) != 0, (syncs & 2) != 0, index});
                index++;
            }

    namespace stdfs = std::filesystem;
    std::string workdir = config.workdir;
    if (workdir.empty())
        workdir = stdfs::exists("/dev/shm") ? "/dev/shm/bento_crash" : "/tmp/bento_crash";
    workdir += "." + std::to_string(getpid());
    std::error_code ec;
    stdfs::create_directories(workdir, ec);

    // One formatted template shared by every case.
    std::string template_img = workdir + "/template.img";
    bento::fs::MkfsGeometry g;
    g.total_blocks = 256;
    g.inode_count = 64;
    g.journal_len = 64;
    int err = bento::fs::mkfs(template_img, g);
    if (err)
        return err;

    std::vector<std::string> universe = {"/a",    "/b",    "/d1/a", "/d1/b", "/d1",
                                         "/d",    "/d1/d", "/d1/dd", "/s"};

    unsigned nthreads = config.threads ? config.threads
                                       : std::max(1u, std::thread::hardware_concurrency());
    nthreads = std::min<unsigned>(nthreads, 16);
    std::atomic<size_t> next{0};
    std::atomic<int> first_err{0};
    std::mutex merge_mu;
    std::vector<std::thread> threads;
    for (unsigned t = 0; t < nthreads; t++) {
        threads.emplace_back([&, t] {
            Worker w{config, workdir + "/w" + std::to_string(t), template_img,
                     CrashTestResult{}, universe};
            std::error_code wec;
            stdfs::create_directories(w.dir, wec);
            for (;;) {
                size_t i = next.fetch_add(1);
                if (i >= cases.size())
                    break;
                int cerr = w.run_case(cases[i]);
                if (cerr) {
                    int expected = 0;
                    first_err.compare_exchange_strong(expected, cerr);
                    break;
                }
                if (config.verbose && i % 200 == 0)
                    fprintf(stderr, "crashtest: %zu/%zu cases\n", i, cases.size());
            }
            std::lock_guard lk(merge_mu);
            result->cases += w.local.cases;
            result->crash_states += w.local.crash_states;
            result->failures += w.local.failures;
            result->fsck_violations += w.local.fsck_violations;
            result->semantic_violations += w.local.semantic_violations;
            result->durability_violations += w.local.durability_violations;
            for (auto& n : w.local.notes)
                if (result->notes.size() < 32)
                    result->notes.push_back(std::move(n));
        });
    }
    for (auto& t : threads)
        t.join();
    stdfs::remove_all(workdir, ec);
    return first_err.load();
}

}  // namespace bento::harness
