#pragma once

// Process-level tuning for the training workload.

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace safs {

// Keeps large freed blocks in the heap instead of returning them to the
// kernel; the per-step tensors are the same sizes every iteration.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 256 << 20);
#endif
}

}  // namespace safs
