#pragma once

namespace vfm {

/// Raises the glibc mmap and trim thresholds so large tensor buffers are
/// recycled on the heap. No-op on other C libraries. Call once from main.
void tune_allocator();

}  // namespace vfm
