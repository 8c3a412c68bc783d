#include "bento/common.hpp"

#include <ctime>

namespace bento {

Clock system_clock() {
    return [] {
        timespec ts{};
        clock_gettime(CLOCK_REALTIME, &ts);
        return Timespec{(uint64_t)ts.tv_sec, (uint32_t)ts.tv_nsec};
    };
}

std::string errno_name(int err) {
    switch (err) {
        case 0: return "OK";
        case EPERM: return "EPERM";
        case ENOENT: return "ENOENT";
        case EIO: return "EIO";
        case EBADF: return "EBADF";
        case EACCES: return "EACCES";
        case EEXIST: return "EEXIST";
        case ENOTDIR: return "ENOTDIR";
        case EISDIR: return "EISDIR";
        case EINVAL: return "EINVAL";
        case EFBIG: return "EFBIG";
        case ENOSPC: return "ENOSPC";
        case ENAMETOOLONG: return "ENAMETOOLONG";
        case ENOTEMPTY: return "ENOTEMPTY";
        case ENOSYS: return "ENOSYS";
        case ESHUTDOWN: return "ESHUTDOWN";
        case EPROTO: return "EPROTO";
        case ECANCELED: return "ECANCELED";
        default: return "E" + std::to_string(err);
    }
}

}  // namespace bento
