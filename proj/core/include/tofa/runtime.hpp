// SPDX-License-Identifier: Apache-2.0
#pragma once

namespace tofa {

/// Keeps freed tensor buffers in the heap instead of returning them to the
/// kernel between iterations. Safe to call more than once; no-op off glibc.
void configure_allocator();

/// Worker cap from TOFA_NUM_THREADS, else the hardware concurrency (>= 1).
int num_threads();

}  // namespace tofa
