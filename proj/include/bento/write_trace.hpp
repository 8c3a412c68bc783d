#ifndef BENTO_WRITE_TRACE_HPP
#define BENTO_WRITE_TRACE_HPP

#include <cstdint>
#include <mutex>
#include <string>
#include <vector>

#include "bento/common.hpp"

namespace bento {

// Ordered record of every image write and durability flush a device issues.
// The crash tester rebuilds device states from prefixes of this sequence, so
// events are appended in exactly the order the cache touches the image.
struct TraceEvent {
    enum Kind : uint8_t { kWrite, kFlush };
    Kind kind = kFlush;
    uint64_t blockno = 0;
    uint64_t digest = 0;           // fnv1a64 of the written bytes
    std::vector<uint8_t> data;     // populated only when capture_data is on
};

class WriteTrace {
public:
    void start(bool capture_data);
    void stop();
    bool recording() const;

    void record_write(uint64_t blockno, std::span<const uint8_t> bytes);
    void record_flush();

    std::vector<TraceEvent> events() const;
    size_t flush_count() const;

    // Line format: "W <blockno> <hex-digest>" / "F".
    std::string to_text() const;

private:
    mutable std::mutex mu_;
    bool recording_ = false;
    bool capture_data_ = false;
    std::vector<TraceEvent> events_;
};

}  // namespace bento

#endif  // BENTO_WRITE_TRACE_HPP
