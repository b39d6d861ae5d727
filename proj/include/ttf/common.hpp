#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>

namespace ttf {

// Bad user input: unreadable files, malformed CSV, schema mismatches.
// The CLI maps this to exit code 2.
class DataError : public std::runtime_error {
public:
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Broken internal invariant. CLI exit code 3.
class InternalError : public std::logic_error {
public:
    explicit InternalError(const std::string& msg) : std::logic_error(msg) {}
};

#define TTF_CHECK(cond, msg)                       \
    do {                                           \
        if (!(cond)) throw ::ttf::InternalError(msg); \
    } while (0)

// Worker cap for the few parallel regions. Resolution order:
// TTF_THREADS env var, else hardware concurrency, clamped to [1, 16].
int thread_count();

// Runs fn(chunk_index) for chunk_index in [0, n_chunks) on up to
// thread_count() workers. Chunk decomposition is fixed by the caller, so
// results that reduce per-chunk state in chunk order do not depend on the
// worker count.
void parallel_chunks(int n_chunks, const std::function<void(int)>& fn);

}  // namespace ttf
