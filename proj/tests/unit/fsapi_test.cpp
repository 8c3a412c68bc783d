#include "bento/fsapi.hpp"

#include <atomic>
#include <set>
#include <thread>

#include "bento/upgrade.hpp"
#include "catch_amalgamated.hpp"

using namespace bento;

namespace {

// Minimal in-memory instance: a flat name -> bytes namespace under the root
// directory, enough to exercise the dispatch boundary. Two internal layouts
// (map vs sorted vector) back the same observable behavior.
class ToyFs : public FileSystem {
public:
    explicit ToyFs(bool vector_layout = false, int read_delay_ms = 0,
                   uint64_t generation_marker = 0)
        : vector_layout_(vector_layout), read_delay_ms_(read_delay_ms),
          marker_(generation_marker) {}

    int init(const std::string&, const std::string&) override {
        initialized_ = true;
        return 0;
    }
    void destroy() override { destroyed_ = true; }

    FsReply handle(const FsRequest& req) override {
        ops_handled_.fetch_add(1);
        switch (req.opcode()) {
            case Opcode::kLookup: {
                const auto& a = std::get<LookupArgs>(req.args);
                if (a.parent != 1)
                    return reply_err(ENOENT);
                auto* bytes = find(a.name);
                if (!bytes)
                    return reply_err(ENOENT);
                return ReplyEntry{hash_ino(a.name), attr_for(a.name, *bytes), 0};
            }
            case Opcode::kCreate: {
                const auto& a = std::get<CreateArgs>(req.args);
                if (find(a.name))
                    return reply_err(EEXIST);
                put(a.name, {});
                return ReplyCreated{{hash_ino(a.name), attr_for(a.name, {}), 0},
                                    {next_fh_++, 0}};
            }
            case Opcode::kRead: {
                if (read_delay_ms_ > 0)
                    std::this_thread::sleep_for(std::chrono::milliseconds(read_delay_ms_));
                return ReplyData{{(uint8_t)marker_}};
            }
            case Opcode::kStatfs:
                return ReplyStatfs{100, 50, 10, 9, 4096, 255};
            case Opcode::kForget:
            case Opcode::kFlush:
                return ReplyOk{};
            default:
                return reply_err(ENOSYS);
        }
    }

    std::optional<TransferCapsule> update_prepare() override {
        TransferCapsule c;
        c.format_version = kCapsuleVersionBase;
        c.next_fh = next_fh_;
        return c;
    }
    int update_transfer(TransferCapsule&& c) override {
        if (c.format_version > kCapsuleVersionBase)
            return kErrVersionMismatch;
        next_fh_ = c.next_fh;
        return 0;
    }

    std::atomic<uint64_t> ops_handled_{0};
    bool initialized_ = false;
    bool destroyed_ = false;

private:
    static uint64_t hash_ino(const std::string& name) {
        return 2 + fnv1a32({(const uint8_t*)name.data(), name.size()}) % 1000;
    }
    FileAttr attr_for(const std::string& name, const std::vector<uint8_t>& bytes) {
        FileAttr a;
        a.ino = hash_ino(name);
        a.size = bytes.size();
        a.kind = FileKind::RegularFile;
        a.perm = 0644;
        a.nlink = 1;
        return a;
    }
    const std::vector<uint8_t>* find(const std::string& name) {
        if (vector_layout_) {
            for (auto& [n, b] : vec_)
                if (n == name)
                    return &b;
            return nullptr;
        }
        auto it = map_.find(name);
        return it == map_.end() ? nullptr : &it->second;
    }
    void put(const std::string& name, std::vector<uint8_t> bytes) {
        if (vector_layout_)
            vec_.emplace_back(name, std::move(bytes));
        else
            map_[name] = std::move(bytes);
    }

    bool vector_layout_;
    int read_delay_ms_;
    uint64_t marker_;
    std::map<std::string, std::vector<uint8_t>> map_;
    std::vector<std::pair<std::string, std::vector<uint8_t>>> vec_;
    uint64_t next_fh_ = 1;
};

FsRequest make_req(Connection& conn, FsArgs args) {
    return FsRequest{conn.make_context(1000, 1000, 42), std::move(args)};
}

}  // namespace

TEST_CASE("registration: uniqueness, upgrade tickets, missing names") {
    Dispatcher d;
    auto r1 = d.register_filesystem({"bentofs", std::make_unique<ToyFs>(), false, "", ""});
    REQUIRE(r1.err == 0);
    REQUIRE(r1.conn != nullptr);
    CHECK(r1.conn->generation() == 0);

    auto r2 = d.register_filesystem({"bentofs", std::make_unique<ToyFs>(), false, "", ""});
    CHECK(r2.err == kErrNameInUse);

    auto r3 = d.register_filesystem({"bentofs", std::make_unique<ToyFs>(), true, "", ""});
    REQUIRE(r3.err == 0);
    REQUIRE(r3.ticket.has_value());
    CHECK(r3.ticket->target_generation == 1);

    auto r4 = d.register_filesystem({"missing", std::make_unique<ToyFs>(), true, "", ""});
    CHECK(r4.err == kErrNoSuchFs);
}

TEST_CASE("dispatch routes to the instance and reports unimplemented opcodes") {
    Dispatcher d;
    auto r = d.register_filesystem({"toy", std::make_unique<ToyFs>(), false, "", ""});
    REQUIRE(r.err == 0);
    Connection& conn = *r.conn;

    auto miss = d.dispatch(conn, make_req(conn, LookupArgs{1, "missing"}));
    CHECK(reply_errno(miss) == ENOENT);

    auto created = d.dispatch(conn, make_req(conn, CreateArgs{1, "a", 0644, 0}));
    REQUIRE(std::holds_alternative<ReplyCreated>(created));

    auto hit = d.dispatch(conn, make_req(conn, LookupArgs{1, "a"}));
    REQUIRE(std::holds_alternative<ReplyEntry>(hit));
    CHECK(std::get<ReplyEntry>(hit).ino == std::get<ReplyCreated>(created).entry.ino);

    auto nosys = d.dispatch(conn, make_req(conn, SetxattrArgs{1, "k", {}, 0}));
    CHECK(reply_errno(nosys) == ENOSYS);
}

TEST_CASE("unregister destroys the instance and later dispatches see ESHUTDOWN") {
    Dispatcher d;
    auto r = d.register_filesystem({"toy", std::make_unique<ToyFs>(), false, "", ""});
    REQUIRE(r.err == 0);
    REQUIRE(d.unregister_filesystem(*r.conn) == 0);
    auto reply = d.dispatch(*r.conn, make_req(*r.conn, GetattrArgs{1}));
    CHECK(reply_errno(reply) == ESHUTDOWN);
    CHECK(d.unregister_filesystem(*r.conn) == kErrNoSuchFs);
}

TEST_CASE("unregister waits for in-flight reads to complete") {
    Dispatcher d;
    auto r = d.register_filesystem(
        {"toy", std::make_unique<ToyFs>(false, 60), false, "", ""});
    REQUIRE(r.err == 0);
    Connection& conn = *r.conn;

    std::atomic<int> completed{0};
    std::vector<std::thread> readers;
    for (int i = 0; i < 3; i++) {
        readers.emplace_back([&] {
            auto reply = d.dispatch(conn, make_req(conn, ReadArgs{1, 1, 0, 16}));
            if (std::holds_alternative<ReplyData>(reply))
                completed.fetch_add(1);
        });
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(10));
    REQUIRE(d.unregister_filesystem(conn) == 0);
    // Exclusive acquisition implies the three reads already finished.
    CHECK(completed.load() == 3);
    for (auto& t : readers)
        t.join();
}

TEST_CASE("request serials are distinct and increasing across threads") {
    Dispatcher d;
    auto r = d.register_filesystem({"toy", std::make_unique<ToyFs>(), false, "", ""});
    REQUIRE(r.err == 0);
    std::vector<std::thread> ts;
    std::mutex mu;
    std::set<uint64_t> seen;
    for (int t = 0; t < 8; t++) {
        ts.emplace_back([&] {
            for (int i = 0; i < 500; i++) {
                auto ctx = r.conn->make_context(0, 0, 1);
                std::lock_guard lk(mu);
                REQUIRE(seen.insert(ctx.unique).second);
            }
        });
    }
    for (auto& t : ts)
        t.join();
    CHECK(seen.size() == 4000);
}

TEST_CASE("boundary opacity: different internal layouts, identical reply streams") {
    auto run_stream = [](bool vector_layout) {
        Dispatcher d;
        auto r = d.register_filesystem(
            {"toy", std::make_unique<ToyFs>(vector_layout), false, "", ""});
        REQUIRE(r.err == 0);
        Connection& conn = *r.conn;
        std::string stream;
        std::vector<FsArgs> script = {
            CreateArgs{1, "x", 0644, 0}, CreateArgs{1, "y", 0644, 0},
            LookupArgs{1, "x"},          LookupArgs{1, "z"},
            StatfsArgs{1},               CreateArgs{1, "x", 0644, 0},
            LookupArgs{1, "y"},
        };
        for (auto& args : script)
            stream += reply_to_line(d.dispatch(conn, make_req(conn, args))) + "\n";
        return stream;
    };
    CHECK(run_stream(false) == run_stream(true));
}

TEST_CASE("blocked-not-dropped: dispatches overlapping an upgrade all complete") {
    Dispatcher d;
    auto r = d.register_filesystem(
        {"toy", std::make_unique<ToyFs>(false, 0, /*marker=*/0), false, "", ""});
    REQUIRE(r.err == 0);
    Connection& conn = *r.conn;

    std::atomic<bool> stop{false};
    std::atomic<uint64_t> ok{0}, failed{0};
    std::vector<std::thread> workers;
    for (int t = 0; t < 4; t++) {
        workers.emplace_back([&] {
            while (!stop.load()) {
                auto reply = d.dispatch(conn, make_req(conn, ReadArgs{1, 1, 0, 1}));
                if (reply_errno(reply) == 0)
                    ok.fetch_add(1);
                else
                    failed.fetch_add(1);
            }
        });
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(20));

    auto up = d.register_filesystem(
        {"toy", std::make_unique<ToyFs>(false, 0, /*marker=*/1), true, "", ""});
    REQUIRE(up.err == 0);
    auto report = perform_upgrade(std::move(*up.ticket));
    CHECK(report.success);
    CHECK(report.new_generation == 1);
    CHECK(conn.generation() == 1);

    // Post-swap replies come from the new instance.
    auto reply = d.dispatch(conn, make_req(conn, ReadArgs{1, 1, 0, 1}));
    REQUIRE(std::holds_alternative<ReplyData>(reply));
    CHECK(std::get<ReplyData>(reply).bytes[0] == 1);

    std::this_thread::sleep_for(std::chrono::milliseconds(20));
    stop.store(true);
    for (auto& t : workers)
        t.join();
    CHECK(failed.load() == 0);
    CHECK(ok.load() > 0);
}

TEST_CASE("upgrade rollback: a refused capsule leaves the old instance serving") {
    class Refuser : public ToyFs {
    public:
        int update_transfer(TransferCapsule&&) override { return kErrTransferRefused; }
        int init(const std::string&, const std::string&) override {
            return EIO;  // fresh-mount path must not be taken silently either
        }
    };

    Dispatcher d;
    auto r = d.register_filesystem({"toy", std::make_unique<ToyFs>(), false, "", ""});
    REQUIRE(r.err == 0);
    auto up = d.register_filesystem({"toy", std::make_unique<Refuser>(), true, "", ""});
    REQUIRE(up.err == 0);
    auto report = perform_upgrade(std::move(*up.ticket));
    CHECK_FALSE(report.success);
    CHECK(report.err == kErrTransferRefused);
    CHECK(r.conn->generation() == 0);

    auto reply = d.dispatch(*r.conn, make_req(*r.conn, StatfsArgs{1}));
    CHECK(std::holds_alternative<ReplyStatfs>(reply));
}
