#pragma once

namespace bmip {

/// Keeps freed activation buffers in the heap instead of returning them to
/// the OS between steps. Graph tensors are a few hundred KB each, right above
/// glibc's default mmap threshold, so every op otherwise pays page faults.
/// No-op on non-glibc platforms. Call once at program start.
void tune_allocator();

}  // namespace bmip
