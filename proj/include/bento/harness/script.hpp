#ifndef BENTO_HARNESS_SCRIPT_HPP
#define BENTO_HARNESS_SCRIPT_HPP

#include <string>
#include <vector>

#include "bento/fsapi.hpp"

namespace bento::harness {

// Line-based workload scripts: one step per line,
//   [Tn] PID OP ARGS...
// The leading thread annotation is optional (thread 0). '#' starts a
// comment. Steps of one thread run in order; threads run concurrently.
//
// Ops: mkdir PATH [MODE] | create H PATH [MODE] | mknod PATH [MODE]
//      open H PATH r|w|rw | opendir H PATH | close H
//      write H OFFSET DATA | read H OFFSET SIZE | fsync H
//      unlink PATH | rmdir PATH | rename OLD NEW [noreplace]
//      link OLD NEW | symlink PATH TARGET | readlink PATH
//      stat PATH | statfs | readdir PATH | access PATH MASK
//      truncate PATH SIZE
// DATA is "quoted text", p:HH:N (byte HH repeated N times), or z:N (zeros).
// Handle names (H) are script-local variables, valid within their thread.
struct ScriptStep {
    int thread = 0;
    uint32_t pid = 0;
    std::string op;
    std::vector<std::string> args;
    int lineno = 0;
};

// Parses and statically validates (unknown ops, arity, handles referenced
// before definition). Returns EINVAL with a message on error.
int parse_script(const std::string& text, std::vector<ScriptStep>* steps,
                 std::string* error);

struct ScriptOptions {
    bool strict = false;  // abort on the first Err reply
};

struct ScriptResult {
    int err = 0;               // first errno in strict mode
    uint64_t ops = 0;
    uint64_t errors = 0;
    std::string transcript;    // one line per step: "Tn OP -> reply"
};

ScriptResult run_script(Dispatcher& dispatcher, Connection& conn,
                        const std::vector<ScriptStep>& steps, ScriptOptions opts);

// Parses DATA syntax; exposed for tests.
int parse_data_arg(const std::string& arg, std::vector<uint8_t>* out);

}  // namespace bento::harness

#endif  // BENTO_HARNESS_SCRIPT_HPP
