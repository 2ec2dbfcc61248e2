#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace fdiag {

// Training allocates and frees multi-megabyte activation buffers every step.
// With glibc defaults those come from fresh mmap pages and the page faults
// cost more than the arithmetic, so keep freed memory in the heap instead.
inline void tune_allocator() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace fdiag
