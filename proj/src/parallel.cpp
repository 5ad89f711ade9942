#include "lora/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <thread>
#include <vector>

namespace lora {

namespace {

int initial_threads() {
    if (const char* env = std::getenv("LORA_COMPOSE_THREADS")) {
        const int n = std::atoi(env);
        if (n > 0) return n;
    }
    return 1;
}

std::atomic<int>& threads_setting() {
    static std::atomic<int> value{initial_threads()};
    return value;
}

}  // namespace

int thread_count() { return threads_setting().load(); }

void set_thread_count(int threads) { threads_setting().store(std::max(1, threads)); }

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
    const auto workers = std::min<std::size_t>(static_cast<std::size_t>(thread_count()), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::exception_ptr> errors(n);
    std::atomic<std::size_t> next{0};
    {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&] {
                for (std::size_t i = next++; i < n; i = next++) {
                    try {
                        fn(i);
                    } catch (...) {
                        errors[i] = std::current_exception();
                    }
                }
            });
        }
    }
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

}  // namespace lora
