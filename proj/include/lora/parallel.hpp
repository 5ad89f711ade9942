#pragma once

#include <cstddef>
#include <functional>

namespace lora {

/// Worker count used by layer- and sequence-level loops. Defaults to the
/// LORA_COMPOSE_THREADS environment variable, else 1.
int thread_count();
void set_thread_count(int threads);

/// Runs fn(i) for i in [0, n). Work items must write disjoint outputs; if any
/// item throws, the exception from the lowest index is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace lora
