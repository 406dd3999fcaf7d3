#include "cdg/alloc.hpp"

#include <cstdlib>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace cdg {

void configure_allocator() {
#if defined(__GLIBC__)
  // Fixed thresholds switch off glibc's dynamic adjustment, so the mmap cutoff
  // has to be raised explicitly; 32 MiB is the largest value it accepts.
  mallopt(M_MMAP_THRESHOLD, 32 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
}

}  // namespace cdg
