#pragma once

namespace avex {

/// Keeps freed blocks in the heap instead of returning them to the kernel.
/// No-op outside glibc.
void tune_allocator();

}  // namespace avex
