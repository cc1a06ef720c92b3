// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>

namespace cnxt {

/// Caps worker threads used by the kernels. 0 restores the runtime default.
void set_num_threads(std::size_t threads);
std::size_t num_threads();

/// Runs body(i) for i in [0, count). Each index is visited exactly once;
/// callers keep writes disjoint so results do not depend on the thread count.
void parallel_for(std::size_t count, const std::function<void(std::size_t)>& body);

}  // namespace cnxt
