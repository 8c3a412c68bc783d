#ifndef BENTO_TESTS_TEST_UTIL_HPP
#define BENTO_TESTS_TEST_UTIL_HPP

#include <fcntl.h>
#include <unistd.h>

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace bento::testutil {

// Temp image file, removed when the fixture goes out of scope.
class TempImage {
public:
    explicit TempImage(uint64_t size_bytes, const std::string& tag = "img") {
        static std::atomic<uint64_t> counter{0};
        path_ = (std::filesystem::temp_directory_path() /
                 ("bento_" + tag + "_" + std::to_string(getpid()) + "_" +
                  std::to_string(counter.fetch_add(1)) + ".img"))
                    .string();
        int fd = ::open(path_.c_str(), O_CREAT | O_RDWR | O_TRUNC, 0644);
        if (fd >= 0) {
            if (size_bytes > 0 && ftruncate(fd, (off_t)size_bytes) != 0) {
                // leave an empty file; device open will fail loudly
            }
            ::close(fd);
        }
    }
    ~TempImage() {
        std::error_code ec;
        std::filesystem::remove(path_, ec);
    }
    TempImage(const TempImage&) = delete;
    TempImage& operator=(const TempImage&) = delete;

    const std::string& path() const { return path_; }

private:
    std::string path_;
};

inline std::vector<uint8_t> pattern_block(uint32_t block_size, uint8_t seed) {
    std::vector<uint8_t> v(block_size);
    for (uint32_t i = 0; i < block_size; i++)
        v[i] = (uint8_t)(seed + i * 131);
    return v;
}

}  // namespace bento::testutil

#endif
