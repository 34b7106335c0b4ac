// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <thread>
#include <vector>

namespace splatfill {

// Process-wide worker count, pinned by the CLI --threads flag.
int worker_count();
void set_worker_count(int n);

// Static block partition of [0, n). Each index is handled exactly once and
// writes only to its own slots, so results do not depend on the worker count.
void parallel_for(size_t n, const std::function<void(size_t)>& fn);

} // namespace splatfill
