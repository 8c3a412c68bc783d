#include "bento/harness/script.hpp"

#include <algorithm>
#include <map>
#include <set>
#include <sstream>
#include <thread>

namespace bento::harness {

namespace {

// op name -> {min args, max args, defines handle at arg 0, uses handle at arg 0}
struct OpSig {
    size_t min_args;
    size_t max_args;
    bool defines_handle;
    bool uses_handle;
};

const std::map<std::string, OpSig>& op_table() {
    static const std::map<std::string, OpSig> table = {
        {"mkdir", {1, 2, false, false}},    {"create", {2, 3, true, false}},
        {"mknod", {1, 2, false, false}},    {"open", {3, 3, true, false}},
        {"opendir", {2, 2, true, false}},   {"close", {1, 1, false, true}},
        {"write", {3, 3, false, true}},     {"read", {3, 3, false, true}},
        {"fsync", {1, 1, false, true}},     {"unlink", {1, 1, false, false}},
        {"rmdir", {1, 1, false, false}},    {"rename", {2, 3, false, false}},
        {"link", {2, 2, false, false}},     {"symlink", {2, 2, false, false}},
        {"readlink", {1, 1, false, false}}, {"stat", {1, 1, false, false}},
        {"statfs", {0, 0, false, false}},   {"readdir", {1, 1, false, false}},
        {"access", {2, 2, false, false}},   {"truncate", {2, 2, false, false}},
    };
    return table;
}

std::vector<std::string> tokenize(const std::string& line) {
    std::vector<std::string> out;
    size_t i = 0;
    while (i < line.size()) {
        while (i < line.size() && isspace((unsigned char)line[i]))
            i++;
        if (i >= line.size() || line[i] == '#')
            break;
        if (line[i] == '"') {
            size_t end = line.find('"', i + 1);
            if (end == std::string::npos)
                end = line.size();
            out.push_back(line.substr(i, end - i + 1));
            i = end + 1;
        } else {
            size_t end = i;
            while (end < line.size() && !isspace((unsigned char)line[end]))
                end++;
            out.push_back(line.substr(i, end - i));
            i = end;
        }
    }
    return out;
}

}  // namespace

int parse_data_arg(const std::string& arg, std::vector<uint8_t>* out) {
    out->clear();
    if (arg.size() >= 2 && arg.front() == '"' && arg.back() == '"') {
        out->assign(arg.begin() + 1, arg.end() - 1);
        return 0;
    }
    if (arg.rfind("p:", 0) == 0) {
        size_t sep = arg.find(':', 2);
        if (sep == std::string::npos)
            return EINVAL;
        uint8_t byte = (uint8_t)strtoul(arg.substr(2, sep - 2).c_str(), nullptr, 16);
        uint64_t n = strtoull(arg.c_str() + sep + 1, nullptr, 10);
        if (n > (64u << 20))
            return EINVAL;
        out->assign(n, byte);
        return 0;
    }
    if (arg.rfind("z:", 0) == 0) {
        uint64_t n = strtoull(arg.c_str() + 2, nullptr, 10);
        if (n > (64u << 20))
            return EINVAL;
        out->assign(n, 0);
        return 0;
    }
    return EINVAL;
}

int parse_script(const std::string& text, std::vector<ScriptStep>* steps,
                 std::string* error) {
    steps->clear();
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    // handles defined so far, per thread
    std::map<int, std::set<std::string>> defined;
    while (std::getline(in, line)) {
        lineno++;
        auto toks = tokenize(line);
        if (toks.empty())
            continue;
        ScriptStep step;
        step.lineno = lineno;
        size_t i = 0;
        if (toks[i].size() >= 2 && toks[i][0] == 'T' &&
            isdigit((unsigned char)toks[i][1])) {
            step.thread = atoi(toks[i].c_str() + 1);
            i++;
        }
        if (i >= toks.size() || toks[i].empty() ||
            !isdigit((unsigned char)toks[i][0])) {
            *error = "line " + std::to_string(lineno) + ": expected PID";
            return EINVAL;
        }
        step.pid = (uint32_t)strtoul(toks[i++].c_str(), nullptr, 10);
        if (i >= toks.size()) {
            *error = "line " + std::to_string(lineno) + ": expected OP";
            return EINVAL;
        }
        step.op = toks[i++];
        step.args.assign(toks.begin() + i, toks.end());

        auto it = op_table().find(step.op);
        if (it == op_table().end()) {
            *error = "line " + std::to_string(lineno) + ": unknown op '" + step.op + "'";
            return EINVAL;
        }
        const OpSig& sig = it->second;
        if (step.args.size() < sig.min_args || step.args.size() > sig.max_args) {
            *error = "line " + std::to_string(lineno) + ": bad arity for '" + step.op + "'";
            return EINVAL;
        }
        if (sig.uses_handle && !defined[step.thread].count(step.args[0])) {
            *error = "line " + std::to_string(lineno) + ": handle '" + step.args[0] +
                     "' not defined on thread " + std::to_string(step.thread);
            return EINVAL;
        }
        if (sig.defines_handle)
            defined[step.thread].insert(step.args[0]);
        if (step.op == "close")
            defined[step.thread].erase(step.args[0]);
        steps->push_back(std::move(step));
    }
    return 0;
}

namespace {

struct HandleVar {
    uint64_t ino = 0;
    uint64_t fh = 0;
    bool is_dir = false;
};

// Per-thread interpreter state.
struct Interp {
    Dispatcher& dispatcher;
    Connection& conn;
    std::map<std::string, HandleVar> handles;

    FsReply call(uint32_t pid, FsArgs args) {
        return dispatcher.dispatch(conn,
                                   FsRequest{conn.make_context(1000, 1000, pid),
                                             std::move(args)});
    }

    // Walks an absolute path; returns 0 and the final ino, or an errno.
    int resolve(uint32_t pid, const std::string& path, uint64_t* ino) {
        if (path.empty() || path[0] != '/')
            return EINVAL;
        uint64_t cur = 1;
        size_t i = 1;
        while (i < path.size()) {
            size_t end = path.find('/', i);
            if (end == std::string::npos)
                end = path.size();
            std::string comp = path.substr(i, end - i);
            if (!comp.empty()) {
                auto r = call(pid, LookupArgs{cur, comp});
                if (int err = reply_errno(r))
                    return err;
                cur = std::get<ReplyEntry>(r).ino;
            }
            i = end + 1;
        }
        *ino = cur;
        return 0;
    }
    // Splits into (parent ino, leaf name).
    int resolve_parent(uint32_t pid, const std::string& path, uint64_t* parent,
                       std::string* name) {
        size_t slash = path.rfind('/');
        if (path.empty() || path[0] != '/' || slash == std::string::npos ||
            slash + 1 >= path.size())
            return EINVAL;
        *name = path.substr(slash + 1);
        return resolve(pid, path.substr(0, slash + 1), parent);
    }

    FsReply exec(const ScriptStep& s) {
        const uint32_t pid = s.pid;
        auto patherr = [](int err) { return reply_err(err); };
        if (s.op == "mkdir") {
            uint64_t parent;
            std::string name;
            if (int err = resolve_parent(pid, s.args[0], &parent, &name))
                return patherr(err);
            uint32_t mode = s.args.size() > 1 ? (uint32_t)strtoul(s.args[1].c_str(), nullptr, 8) : 0755;
            return call(pid, MkdirArgs{parent, name, mode});
        }
        if (s.op == "create" || s.op == "mknod") {
            bool with_handle = s.op == "create";
            const std::string& path = s.args[with_handle ? 1 : 0];
            uint64_t parent;
            std::string name;
            if (int err = resolve_parent(pid, path, &parent, &name))
                return patherr(err);
            uint32_t mode = s.args.size() > (with_handle ? 2u : 1u)
                                ? (uint32_t)strtoul(s.args.back().c_str(), nullptr, 8)
                                : 0644;
            if (!with_handle)
                return call(pid, MknodArgs{parent, name, mode, 0});
            auto r = call(pid, CreateArgs{parent, name, mode, kOpenReadWrite});
            if (const auto* c = std::get_if<ReplyCreated>(&r))
                handles[s.args[0]] = HandleVar{c->entry.ino, c->open.fh, false};
            return r;
        }
        if (s.op == "open" || s.op == "opendir") {
            uint64_t ino;
            if (int err = resolve(pid, s.args[1], &ino))
                return patherr(err);
            if (s.op == "opendir") {
                auto r = call(pid, OpendirArgs{ino, 0});
                if (const auto* o = std::get_if<ReplyOpen>(&r))
                    handles[s.args[0]] = HandleVar{ino, o->fh, true};
                return r;
            }
            uint32_t flags = s.args[2] == "r" ? kOpenRead
                             : s.args[2] == "w" ? kOpenWrite
                                                : kOpenReadWrite;
            auto r = call(pid, OpenArgs{ino, flags});
            if (const auto* o = std::get_if<ReplyOpen>(&r))
                handles[s.args[0]] = HandleVar{ino, o->fh, false};
            return r;
        }
        if (s.op == "close" || s.op == "fsync" || s.op == "write" || s.op == "read") {
            auto it = handles.find(s.args[0]);
            if (it == handles.end())
                return reply_err(EBADF);
            HandleVar h = it->second;
            if (s.op == "close") {
                handles.erase(it);
                if (h.is_dir)
                    return call(pid, ReleasedirArgs{h.ino, h.fh, 0});
                return call(pid, ReleaseArgs{h.ino, h.fh, 0, 0, false});
            }
            if (s.op == "fsync") {
                if (h.is_dir)
                    return call(pid, FsyncdirArgs{h.ino, h.fh, false});
                return call(pid, FsyncArgs{h.ino, h.fh, false});
            }
            if (s.op == "write") {
                std::vector<uint8_t> data;
                if (parse_data_arg(s.args[2], &data) != 0)
                    return reply_err(EINVAL);
                uint64_t off = strtoull(s.args[1].c_str(), nullptr, 10);
                return call(pid, WriteArgs{h.ino, h.fh, off, std::move(data), 0});
            }
            uint64_t off = strtoull(s.args[1].c_str(), nullptr, 10);
            uint32_t size = (uint32_t)strtoul(s.args[2].c_str(), nullptr, 10);
            return call(pid, ReadArgs{h.ino, h.fh, off, size});
        }
        if (s.op == "unlink" || s.op == "rmdir") {
            uint64_t parent;
            std::string name;
            if (int err = resolve_parent(pid, s.args[0], &parent, &name))
                return patherr(err);
            if (s.op == "unlink")
                return call(pid, UnlinkArgs{parent, name});
            return call(pid, RmdirArgs{parent, name});
        }
        if (s.op == "rename") {
            uint64_t p1, p2;
            std::string n1, n2;
            if (int err = resolve_parent(pid, s.args[0], &p1, &n1))
                return patherr(err);
            if (int err = resolve_parent(pid, s.args[1], &p2, &n2))
                return patherr(err);
            uint32_t flags =
                s.args.size() > 2 && s.args[2] == "noreplace" ? kRenameNoReplace : 0;
            return call(pid, RenameArgs{p1, n1, p2, n2, flags});
        }
        if (s.op == "link") {
            uint64_t target;
            if (int err = resolve(pid, s.args[0], &target))
                return patherr(err);
            uint64_t parent;
            std::string name;
            if (int err = resolve_parent(pid, s.args[1], &parent, &name))
                return patherr(err);
            return call(pid, LinkArgs{target, parent, name});
        }
        if (s.op == "symlink") {
            uint64_t parent;
            std::string name;
            if (int err = resolve_parent(pid, s.args[0], &parent, &name))
                return patherr(err);
            return call(pid, SymlinkArgs{parent, name, s.args[1]});
        }
        if (s.op == "readlink") {
            uint64_t ino;
            if (int err = resolve(pid, s.args[0], &ino))
                return patherr(err);
            return call(pid, ReadlinkArgs{ino});
        }
        if (s.op == "stat") {
            uint64_t ino;
            if (int err = resolve(pid, s.args[0], &ino))
                return patherr(err);
            return call(pid, GetattrArgs{ino});
        }
        if (s.op == "statfs")
            return call(pid, StatfsArgs{1});
        if (s.op == "readdir") {
            uint64_t ino;
            if (int err = resolve(pid, s.args[0], &ino))
                return patherr(err);
            auto r = call(pid, OpendirArgs{ino, 0});
            if (reply_errno(r))
                return r;
            uint64_t fh = std::get<ReplyOpen>(r).fh;
            ReplyDirEntries all;
            uint64_t off = 0;
            for (;;) {
                auto dr = call(pid, ReaddirArgs{ino, fh, off});
                if (reply_errno(dr)) {
                    call(pid, ReleasedirArgs{ino, fh, 0});
                    return dr;
                }
                auto& got = std::get<ReplyDirEntries>(dr).entries;
                if (got.empty())
                    break;
                off = got.back().next_offset;
                all.entries.insert(all.entries.end(), got.begin(), got.end());
            }
            call(pid, ReleasedirArgs{ino, fh, 0});
            std::sort(all.entries.begin(), all.entries.end(),
                      [](const DirEntryRec& a, const DirEntryRec& b) {
                          return a.name < b.name;
                      });
            return FsReply(all);
        }
        if (s.op == "access") {
            uint64_t ino;
            if (int err = resolve(pid, s.args[0], &ino))
                return patherr(err);
            return call(pid, AccessArgs{ino, (uint32_t)strtoul(s.args[1].c_str(), nullptr, 10)});
        }
        if (s.op == "truncate") {
            uint64_t ino;
            if (int err = resolve(pid, s.args[0], &ino))
                return patherr(err);
            SetattrArgs sa;
            sa.ino = ino;
            sa.size = strtoull(s.args[1].c_str(), nullptr, 10);
            return call(pid, sa);
        }
        return reply_err(ENOSYS);
    }
};

}  // namespace

ScriptResult run_script(Dispatcher& dispatcher, Connection& conn,
                        const std::vector<ScriptStep>& steps, ScriptOptions opts) {
    ScriptResult result;
    std::map<int, std::vector<const ScriptStep*>> by_thread;
    for (const auto& s : steps)
        by_thread[s.thread].push_back(&s);

    std::mutex mu;
    std::atomic<bool> aborted{false};
    std::map<int, std::string> transcripts;
    std::vector<std::thread> threads;
    for (auto& [tid, list] : by_thread) {
        threads.emplace_back([&, tid = tid, list = list] {
            Interp interp{dispatcher, conn, {}};
            std::string transcript;
            for (const ScriptStep* s : list) {
                if (aborted.load())
                    break;
                FsReply reply = interp.exec(*s);
                int err = reply_errno(reply);
                {
                    std::lock_guard lk(mu);
                    result.ops++;
                    if (err)
                        result.errors++;
                    if (err && opts.strict && !aborted.exchange(true))
                        result.err = err;
                }
                transcript += "T" + std::to_string(tid) + " " + s->op + " -> " +
                              reply_to_line(reply) + "\n";
                if (err && opts.strict)
                    break;
            }
            std::lock_guard lk(mu);
            transcripts[tid] = std::move(transcript);
        });
    }
    for (auto& t : threads)
        t.join();
    for (auto& [tid, text] : transcripts)
        result.transcript += text;
    return result;
}

}  // namespace bento::harness
