#include "bento/harness/crash_sim.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cassert>
#include <filesystem>

namespace bento::harness {

std::vector<FlushGroup> flush_groups(const std::vector<TraceEvent>& events) {
    std::vector<FlushGroup> groups;
    size_t begin = 0;
    for (size_t i = 0; i < events.size(); i++) {
        if (events[i].kind == TraceEvent::kFlush) {
            groups.push_back({begin, i});
            begin = i + 1;
        }
    }
    if (begin < events.size())
        groups.push_back({begin, events.size()});
    return groups;
}

std::vector<CrashState> enumerate_crash_states(const std::vector<TraceEvent>& events,
                                               unsigned samples_per_group,
                                               uint64_t seed) {
    auto groups = flush_groups(events);
    std::vector<CrashState> states;
    size_t n_flushes = 0;
    for (const auto& ev : events)
        if (ev.kind == TraceEvent::kFlush)
            n_flushes++;
    // One state per Flush: everything up to and including that barrier.
    for (size_t k = 1; k <= n_flushes; k++)
        states.push_back(CrashState{k, {}});

    if (samples_per_group > 0) {
        std::mt19937_64 rng(seed);
        for (size_t g = 0; g < groups.size(); g++) {
            std::vector<size_t> writes;
            for (size_t i = groups[g].begin; i < groups[g].end; i++)
                if (events[i].kind == TraceEvent::kWrite)
                    writes.push_back(i);
            if (writes.empty())
                continue;
            for (unsigned s = 0; s < samples_per_group; s++) {
                CrashState st;
                st.full_groups = g;
                for (size_t w : writes)
                    if (rng() & 1)
                        st.tail_writes.push_back(w);
                states.push_back(std::move(st));
            }
        }
    }
    return states;
}

int materialize_crash_state(const std::string& base_path, const std::string& out_path,
                            const std::vector<TraceEvent>& events,
                            const CrashState& state, uint32_t block_size) {
    std::error_code ec;
    std::filesystem::copy_file(base_path, out_path,
                               std::filesystem::copy_options::overwrite_existing, ec);
    if (ec)
        return EIO;
    int fd = ::open(out_path.c_str(), O_WRONLY);
    if (fd < 0)
        return errno;

    auto apply = [&](const TraceEvent& ev) -> int {
        assert(ev.kind == TraceEvent::kWrite && !ev.data.empty());
        ssize_t n = pwrite(fd, ev.data.data(), ev.data.size(),
                           (off_t)(ev.blockno * block_size));
        return n == (ssize_t)ev.data.size() ? 0 : EIO;
    };

    auto groups = flush_groups(events);
    int err = 0;
    for (size_t g = 0; g < state.full_groups && g < groups.size() && !err; g++) {
        for (size_t i = groups[g].begin; i < groups[g].end && !err; i++)
            if (events[i].kind == TraceEvent::kWrite)
                err = apply(events[i]);
    }
    for (size_t i : state.tail_writes) {
        if (err)
            break;
        err = apply(events[i]);
    }
    ::close(fd);
    return err;
}

uint64_t file_digest(const std::string& path) {
    int fd = ::open(path.c_str(), O_RDONLY);
    if (fd < 0)
        return 0;
    uint64_t h = 0xcbf29ce484222325ull;
    std::vector<uint8_t> buf(1 << 16);
    for (;;) {
        ssize_t n = read(fd, buf.data(), buf.size());
        if (n <= 0)
            break;
        h = fnv1a64({buf.data(), (size_t)n}, h);
    }
    ::close(fd);
    return h;
}

}  // namespace bento::harness
