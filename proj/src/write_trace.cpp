#include "bento/write_trace.hpp"

#include <cstdio>

namespace bento {

void WriteTrace::start(bool capture_data) {
    std::lock_guard lk(mu_);
    recording_ = true;
    capture_data_ = capture_data;
    events_.clear();
}

void WriteTrace::stop() {
    std::lock_guard lk(mu_);
    recording_ = false;
}

bool WriteTrace::recording() const {
    std::lock_guard lk(mu_);
    return recording_;
}

void WriteTrace::record_write(uint64_t blockno, std::span<const uint8_t> bytes) {
    std::lock_guard lk(mu_);
    if (!recording_)
        return;
    TraceEvent ev;
    ev.kind = TraceEvent::kWrite;
    ev.blockno = blockno;
    ev.digest = fnv1a64(bytes);
    if (capture_data_)
        ev.data.assign(bytes.begin(), bytes.end());
    events_.push_back(std::move(ev));
}

void WriteTrace::record_flush() {
    std::lock_guard lk(mu_);
    if (!recording_)
        return;
    TraceEvent ev;
    ev.kind = TraceEvent::kFlush;
    events_.push_back(std::move(ev));
}

std::vector<TraceEvent> WriteTrace::events() const {
    std::lock_guard lk(mu_);
    return events_;
}

size_t WriteTrace::flush_count() const {
    std::lock_guard lk(mu_);
    size_t n = 0;
    for (const auto& ev : events_)
        if (ev.kind == TraceEvent::kFlush)
            n++;
    return n;
}

std::string WriteTrace::to_text() const {
    std::lock_guard lk(mu_);
    std::string out;
    char line[64];
    for (const auto& ev : events_) {
        if (ev.kind == TraceEvent::kWrite) {
            std::snprintf(line, sizeof(line), "W %llu %016llx\n",
                          (unsigned long long)ev.blockno, (unsigned long long)ev.digest);
            out += line;
        } else {
            out += "F\n";
        }
    }
    return out;
}

}  // namespace bento
