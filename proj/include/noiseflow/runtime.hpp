#pragma once

namespace nf {

/// Keeps freed layer buffers in the heap (glibc) so repeated forward/backward
/// passes reuse pages instead of mapping fresh ones. Call once at startup.
void tune_allocator();

}  // namespace nf
