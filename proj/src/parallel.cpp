#include "quadprior/parallel.hpp"

#include <atomic>
#include <charconv>
#include <cstdlib>
#include <cstring>

namespace quadprior {
namespace {

std::atomic<std::size_t> g_override{0};

std::size_t from_environment() {
    const char* raw = std::getenv("QUADPRIOR_THREADS");
    if (raw == nullptr) return 0;
    std::size_t value = 0;
    const char* end = raw + std::strlen(raw);
    auto [ptr, ec] = std::from_chars(raw, end, value);
    if (ec != std::errc{} || ptr != end) return 0;
    return value;
}

}  // namespace

std::size_t thread_count() {
    if (auto n = g_override.load(); n > 0) return n;
    if (auto n = from_environment(); n > 0) return n;
    return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

void set_thread_count(std::size_t n) { g_override.store(n); }

}  // namespace quadprior
