#pragma once

namespace desire {

/// Keeps large tape buffers on the heap instead of fresh mmap'd pages. The
/// training loops allocate and free the same sizes every step, and page
/// faulting them in dominated small-model profiles. No-op outside glibc.
void tune_allocator();

}  // namespace desire
