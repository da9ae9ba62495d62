#pragma once

#include <cstddef>
#include <functional>

namespace filora {

/// Threads used for read-only evaluation fan-out. Honors FILORA_THREADS,
/// otherwise hardware concurrency capped at 8. Always at least 1.
std::size_t eval_thread_count();

/// Runs fn(i) for i in [0, n). Work is split statically; every index writes
/// only its own slot in caller-owned storage, so results are identical for
/// any thread count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace filora
