#pragma once

namespace cdg {

// Keeps large tensor buffers on the heap instead of fresh mmap pages. Sampling
// allocates and frees megabyte-sized temporaries every step; with the default
// glibc thresholds each one is page-faulted in again. No-op off glibc.
void configure_allocator();

}  // namespace cdg
