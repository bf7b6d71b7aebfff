#pragma once

#include <functional>

namespace nback {

// Runs fn(i) for i in [0, count) on up to `workers` threads. Each index must write only its
// own output slot; callers reduce the slots in index order. The first exception is rethrown.
void parallel_for(int count, int workers, const std::function<void(int)>& fn);

int default_workers();

}  // namespace nback
